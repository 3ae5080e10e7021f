"""Finite-difference gradient verification.

``finite_diff_grad`` is the independent oracle: central differences on a
scalar function of a flat parameter vector.  ``check_gradients`` compares it
coordinate-by-coordinate against the tape's reverse sweep.  Keep the instances
small (a handful of nodes, short windows): the oracle costs two function
evaluations per coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import NumericsError


@dataclass
class GradReport:
    """Per-parameter comparison of analytic vs numeric gradients."""

    max_abs_err: dict[str, float]
    max_rel_err: dict[str, float]
    passed: bool
    tolerance: float
    deadband: float
    worst: list[tuple[str, int, float, float, float]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def summary(self) -> str:
        lines = [f"gradient check: {'PASS' if self.passed else 'FAIL'} (rel tol {self.tolerance:g})"]
        for name in sorted(self.max_rel_err):
            lines.append(
                f"  {name}: max_abs={self.max_abs_err[name]:.3e} max_rel={self.max_rel_err[name]:.3e}"
            )
        if not self.passed:
            lines.append("  worst coordinates (name, flat index, analytic, numeric, rel err):")
            for name, i, a, n, r in self.worst[:10]:
                lines.append(f"    {name}[{i}]: {a:.6e} vs {n:.6e} rel {r:.3e}")
        return "\n".join(lines)


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences (f(x+eps*e_i) - f(x-eps*e_i)) / (2*eps) per coordinate.

    f must be deterministic: any randomness inside must be fixed by the caller.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    flat = theta.reshape(-1).copy()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(flat.reshape(theta.shape)))
        flat[i] = orig - eps
        fm = float(f(flat.reshape(theta.shape)))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"non-finite probe value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(theta.shape)


def check_gradients(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    eps: float = 1e-5,
    deadband: float = 1e-8,
) -> GradReport:
    """Compare analytic gradients against the finite-difference oracle.

    ``loss_fn(params)`` returns (loss value, analytic gradient dict); it is
    called once for the analytic side, then probed with perturbed copies for
    the numeric side (the gradient part of the return is ignored for probes).
    A coordinate participates in pass/fail only when |analytic| + |numeric|
    exceeds the deadband.
    """
    names = list(params)
    _, analytic = loss_fn(params)

    def value_at(p: dict[str, np.ndarray]) -> float:
        v, _ = loss_fn(p)
        return float(v)

    max_abs: dict[str, float] = {}
    max_rel: dict[str, float] = {}
    worst: list[tuple[str, int, float, float, float]] = []
    passed = True
    for name in names:
        base = params[name]

        def f_one(theta, name=name):
            probe = dict(params)
            probe[name] = theta
            return value_at(probe)

        numeric = finite_diff_grad(f_one, base, eps)
        a = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        n = numeric.reshape(-1)
        abs_err = np.abs(a - n)
        denom = np.abs(a) + np.abs(n)
        active = denom > deadband
        rel = np.zeros_like(abs_err)
        rel[active] = abs_err[active] / denom[active]
        max_abs[name] = float(abs_err.max()) if abs_err.size else 0.0
        max_rel[name] = float(rel.max()) if rel.size else 0.0
        if max_rel[name] > tolerance:
            passed = False
            order = np.argsort(rel)[::-1][:5]
            for i in order:
                worst.append((name, int(i), float(a[i]), float(n[i]), float(rel[i])))
    worst.sort(key=lambda w: -w[4])
    return GradReport(max_abs, max_rel, passed, tolerance, deadband, worst)
