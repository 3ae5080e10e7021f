"""Continual source-free adaptation for spatio-temporal graph forecasting.

A model is pretrained on labeled multi-source site data, then deployed on an
unlabeled target stream where it keeps adapting online: an EMA teacher supplies
confidence-masked pseudo-labels and consistency targets, a graph penalty keeps
connected sites coherent, and a drift-gated reservoir replay buffer guards
against forgetting.  Everything runs on a small float64 tape-based autodiff
engine (no framework dependency), so gradients are verifiable against finite
differences end to end.
"""

import os as _os

# BLAS threading: at the matrix sizes this package works with (tens of nodes,
# hidden dims <= a few hundred) multi-threaded GEMM is slower than
# single-threaded and makes timings noisy.  Pin to one thread unless the user
# already chose.  Must happen before numpy loads its BLAS.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from . import numerics  # noqa: E402,F401
