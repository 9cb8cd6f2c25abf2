"""Lightweight three-scale infrared small-target detector.

A numpy implementation of a YOLO-style detector specialized for small, dim
targets: a reverse-mode autodiff core, parameter-free spatial attention,
Wasserstein-based box similarity for tiny-box regression, slim convolution
blocks, and matching training / evaluation / synthesis tools.

The ISTD_THREADS environment variable caps BLAS parallelism (default 1 for
bit-stable runs). It must be set before numpy's first import to take effect,
so this module applies it before anything numeric loads.
"""

import os as _os


def _apply_thread_env() -> None:
    raw = _os.environ.get("ISTD_THREADS", "1")
    try:
        n = max(1, int(raw))
    except ValueError:
        n = 1
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
    ):
        _os.environ.setdefault(var, str(n))


_apply_thread_env()

from istdyolo.tensor import Tensor, no_grad  # noqa: E402

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
