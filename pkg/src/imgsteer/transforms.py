"""Differentiable image transforms: orthonormal 2-D DCT and bilinear resize.

Both are separable linear maps, so each is a pair of small dense matrices
applied per channel through :func:`imgsteer.tensor.separable`.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, separable


@lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; its transpose is the DCT-III inverse."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def _check_image(op: str, x: Tensor) -> None:
    if x.ndim < 3 or x.shape[-1] != 3:
        raise ShapeError(f"{op}: expected (..., H, W, 3) image, got shape {x.shape}")


def dct2d(image) -> Tensor:
    x = as_tensor(image)
    _check_image("dct2d", x)
    H, W = x.shape[-3], x.shape[-2]
    return separable(x, dct_matrix(H), dct_matrix(W))


def idct2d(spectrum) -> Tensor:
    x = as_tensor(spectrum)
    _check_image("idct2d", x)
    H, W = x.shape[-3], x.shape[-2]
    return separable(x, dct_matrix(H).T, dct_matrix(W).T)


@lru_cache(maxsize=64)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D interpolation weights with half-pixel centres and edge clamping.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) * n_in / n_out - 0.5``.
    """
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"bilinear_resize: sizes must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


def bilinear_resize(image, target: tuple[int, int]) -> Tensor:
    x = as_tensor(image)
    if x.ndim < 3:
        raise ShapeError(f"bilinear_resize: expected (..., H, W, C), got {x.shape}")
    h_out, w_out = target
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"bilinear_resize: target {target} has a zero dimension")
    H, W = x.shape[-3], x.shape[-2]
    if (H, W) == (h_out, w_out):
        return separable(x, np.eye(H), np.eye(W))
    return separable(x, bilinear_matrix(H, h_out), bilinear_matrix(W, w_out))
