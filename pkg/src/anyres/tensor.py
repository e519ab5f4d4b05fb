"""Dense ``(height, width, channels)`` grids and the few kernels built on them.

Every grid in the package (images, token maps, features, similarity maps) is a
float64 numpy array laid out row-major, channel-last.
"""

from __future__ import annotations

import numpy as np


def as_grid(data, name: str = "grid") -> np.ndarray:
    """Validate ``data`` as an ``(h, w, c)`` float64 grid and return it."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (height, width, channels), got {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def interpolation_matrix(n_in: int, n_out: int, align_corners: bool = False) -> np.ndarray:
    """Linear-interpolation weights mapping ``n_in`` samples onto ``n_out``.

    Row ``i`` holds the (at most two) weights of output sample ``i``. With the
    default half-pixel convention the source coordinate of output ``i`` is
    ``(i + 0.5) * n_in / n_out - 0.5``, clamped to ``[0, n_in - 1]``. With
    ``align_corners`` the first and last samples of both axes coincide.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"sizes must be positive, got n_in={n_in}, n_out={n_out}")
    out = np.arange(n_out, dtype=np.float64)
    if align_corners:
        if n_out == 1:
            src = np.zeros(1)
        else:
            src = out * (n_in - 1) / (n_out - 1)
    else:
        src = (out + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def bilinear_resize(src, out_h: int, out_w: int, align_corners: bool = False) -> np.ndarray:
    """Resample every channel of ``src`` to ``out_h x out_w`` bilinearly."""
    if int(out_h) != out_h or int(out_w) != out_w or out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive integers, got {out_h}x{out_w}")
    src = as_grid(src, "src")
    h, w, _ = src.shape
    if (h, w) == (out_h, out_w):
        return src.copy()
    rows = interpolation_matrix(h, int(out_h), align_corners)
    cols = interpolation_matrix(w, int(out_w), align_corners)
    return np.einsum("ip,pqc,jq->ijc", rows, src, cols, optimize=True)


def bilinear_resize_adjoint(grad, in_h: int, in_w: int, align_corners: bool = False) -> np.ndarray:
    """Transpose of :func:`bilinear_resize` applied to an output-space gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    out_h, out_w, _ = grad.shape
    if (in_h, in_w) == (out_h, out_w):
        return grad.copy()
    rows = interpolation_matrix(in_h, out_h, align_corners)
    cols = interpolation_matrix(in_w, out_w, align_corners)
    return np.einsum("ip,ijc,jq->pqc", rows, grad, cols, optimize=True)


def l2_normalize_channels(src, epsilon: float = 1e-12) -> np.ndarray:
    """Scale each cell's channel vector to unit length.

    Vectors whose norm is below ``epsilon`` are passed through unchanged.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    src = as_grid(src, "src")
    norms = np.linalg.norm(src, axis=-1, keepdims=True)
    safe = np.where(norms < epsilon, 1.0, norms)
    return src / safe


def mse(a, b) -> float:
    """Mean over all elements of the squared difference."""
    a = as_grid(a, "a")
    b = as_grid(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(diff * diff))
