"""Orthonormal 2-D type-II DCT and its inverse (type-III).

Both directions are plain matrix products over the last two axes, so the
same functions work on numpy arrays and, differentiably, on Tensors.
"""

from functools import lru_cache

import numpy as np

from .tensor import Tensor, matmul


@lru_cache(maxsize=None)
def _dct_matrix64(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0, :] = np.sqrt(1.0 / n)
    return c


def dct_matrix(n: int, dtype=np.float32) -> np.ndarray:
    """Row k holds the k-th orthonormal DCT-II basis vector of length n."""
    if n < 1:
        raise ValueError("DCT length must be >= 1")
    return _dct_matrix64(n).astype(dtype)


def _check(x):
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ValueError(f"dct2: need at least a 2-D array, got shape {x.shape}")


def dct2(x):
    """Orthonormal DCT-II over the last two axes."""
    _check(x)
    h, w = x.shape[-2:]
    if isinstance(x, Tensor):
        dt = x.data.dtype
        ch = Tensor(dct_matrix(h, dt))
        cwt = Tensor(dct_matrix(w, dt).T)
        return matmul(matmul(ch, x), cwt)
    x = np.asarray(x)
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return dct_matrix(h, dt) @ x @ dct_matrix(w, dt).T


def idct2(x):
    """Inverse of :func:`dct2` (orthonormal DCT-III)."""
    _check(x)
    h, w = x.shape[-2:]
    if isinstance(x, Tensor):
        dt = x.data.dtype
        cht = Tensor(dct_matrix(h, dt).T)
        cw = Tensor(dct_matrix(w, dt))
        return matmul(matmul(cht, x), cw)
    x = np.asarray(x)
    dt = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return dct_matrix(h, dt).T @ x @ dct_matrix(w, dt)
