"""FP64 reference GeMM."""
from __future__ import annotations

import numpy as np

__all__ = ["gemm_fp64"]


def gemm_fp64(a, b) -> np.ndarray:
    """Plain FP64 product summed strictly left to right over the inner index.

    ``numpy.matmul`` is avoided on purpose: BLAS reorders and blocks the
    reduction, which would make the reference depend on the platform.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("gemm_fp64 expects 2-D matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out
