"""Synthetic non-stationary multi-site stream generator.

Per-site signal: a seasonal sinusoid plus a shared AR(1) "weather" factor
plus scheduled drift perturbations plus Gaussian noise:

    y_i(t) = base + amp * sin(2*pi*t/period + (1-c)*phase_i)
             + c * weather_scale * l_t + drift(t) + noise * eps_{i,t}

where c is the cross-site coupling strength (c=1 makes sites identical up to
noise) and l_t is the latent factor with persistence rho = 0.95.  Drift
events shift the signal mean: "abrupt" adds the full magnitude from `start`
on; "gradual" ramps linearly over `duration` steps and then holds.

Features per site: the power signal itself, the observed weather factor
(noisy when noise > 0), seasonal sin/cos encodings, and optional extra pure
noise channels.  All randomness comes from the portable counter RNG, so a
spec + seed pins the stream bit-exactly on every platform.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import DataError, Dataset
from .rng import PortableRng

WEATHER_RHO = 0.95


@dataclass
class DriftEvent:
    start: int
    type: str                 # "abrupt" | "gradual"
    magnitude: float
    duration: int = 0         # gradual ramp length; 0 means length // 10

    def validate(self, length: int) -> None:
        if not (0 <= self.start < length):
            raise DataError(f"drift start {self.start} outside [0, {length})")
        if self.type not in ("abrupt", "gradual"):
            raise DataError(f"unknown drift type {self.type!r}")


@dataclass
class SynthSpec:
    sites: int
    length: int
    period: float = 48.0
    base: float = 0.5
    amplitude: float = 0.25
    drift: list[DriftEvent] = field(default_factory=list)
    noise: float = 0.05
    coupling: float = 0.5
    seed: int = 0
    weather_scale: float = 0.2
    extra_features: int = 0
    freq_seconds: float = 3600.0

    def validate(self) -> None:
        if self.sites < 1 or self.length < 2:
            raise DataError("need at least 1 site and 2 steps")
        if self.period <= 1:
            raise DataError("period must exceed one step")
        if not (0.0 <= self.coupling <= 1.0):
            raise DataError("coupling must be in [0, 1]")
        if self.noise < 0 or self.extra_features < 0:
            raise DataError("noise and extra_features must be nonnegative")
        for ev in self.drift:
            ev.validate(self.length)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["drift"] = [DriftEvent(**ev) for ev in d.get("drift", [])]
        spec = cls(**d)
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def drift_offsets(spec: SynthSpec) -> np.ndarray:
    """(length,) additive mean shift from the drift schedule."""
    t = np.arange(spec.length, dtype=np.float64)
    out = np.zeros(spec.length)
    for ev in spec.drift:
        if ev.type == "abrupt":
            out += ev.magnitude * (t >= ev.start)
        else:
            duration = ev.duration if ev.duration > 0 else max(1, spec.length // 10)
            ramp = np.clip((t - ev.start) / duration, 0.0, 1.0)
            out += ev.magnitude * ramp
    return out


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, list[dict]]:
    """Deterministic stream + the ground-truth drift schedule."""
    spec.validate()
    n, length = spec.sites, spec.length
    site_rng = PortableRng(spec.seed, stream=0)
    latent_rng = PortableRng(spec.seed, stream=1)
    noise_rng = PortableRng(spec.seed, stream=2)
    obs_rng = PortableRng(spec.seed, stream=3)

    phases = (1.0 - spec.coupling) * 2.0 * np.pi * site_rng.uniform(n)
    t = np.arange(length, dtype=np.float64)
    angle = 2.0 * np.pi * t / spec.period

    # shared AR(1) weather factor, unit marginal variance
    xi = latent_rng.normal(length)
    latent = np.empty(length)
    latent[0] = xi[0]
    scale = np.sqrt(1.0 - WEATHER_RHO ** 2)
    for i in range(1, length):
        latent[i] = WEATHER_RHO * latent[i - 1] + scale * xi[i]

    seasonal = spec.amplitude * np.sin(angle[:, None] + phases[None, :])
    shift = drift_offsets(spec)
    eps = noise_rng.normal(length * n).reshape(length, n)
    targets = (
        spec.base
        + seasonal
        + spec.coupling * spec.weather_scale * latent[:, None]
        + shift[:, None]
        + spec.noise * eps
    )

    obs_noise = 0.5 * spec.noise * obs_rng.normal(length)
    weather_obs = latent + obs_noise
    cols = [
        targets[:, :, None],
        np.tile(weather_obs[:, None, None], (1, n, 1)),
        np.tile(np.sin(angle)[:, None, None], (1, n, 1)),
        np.tile(np.cos(angle)[:, None, None], (1, n, 1)),
    ]
    names = ["power", "weather", "season_sin", "season_cos"]
    kinds = ["numeric", "numeric", "numeric", "numeric"]
    for j in range(spec.extra_features):
        extra_rng = PortableRng(spec.seed, stream=4 + j)
        cols.append(extra_rng.normal(length * n).reshape(length, n, 1))
        names.append(f"extra{j}")
        kinds.append("numeric")

    dataset = Dataset(
        timestamps=t * spec.freq_seconds,
        features=np.concatenate(cols, axis=-1),
        targets=targets,
        feature_names=names,
        feature_kinds=kinds,
        site_names=[f"site{i}" for i in range(n)],
        segments=[(0, length)],
        freq=spec.freq_seconds,
    )
    events = [asdict(ev) for ev in spec.drift]
    return dataset, events
