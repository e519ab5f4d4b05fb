"""Sliding-window planning and stitching of per-window outputs.

Two stitchers are provided. :func:`stitch_predictions` averages pixel-level
maps. :func:`stitch_features` merges patch-level feature maps into the layout a
single forward pass over the full image would produce. When the stride is not
a multiple of the patch size, the feature maps are first upsampled by ``r`` so
window patches land on a shared sub-patch lattice.

The sub-patch lattice holds the patch centres: fine index ``j`` of a window at
pixel origin ``o`` sits at pixel ``o + P/2 + j*P/r``. A window's ``k`` patch
features span ``r*(k-1) + 1`` lattice points, and upsampling and downsampling
are corner-aligned bilinear maps between the two grids. Downsampling by ``r``
therefore reads back exactly the patch-centre samples, so a lone window
survives the up/down round trip unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import as_grid, bilinear_resize


@dataclass(frozen=True)
class WindowPlan:
    image_h: int
    image_w: int
    window: int
    stride: int
    row_origins: tuple[int, ...]
    col_origins: tuple[int, ...]
    r: int

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(y, x) for y in self.row_origins for x in self.col_origins]

    @property
    def m(self) -> int:
        return len(self.row_origins) * len(self.col_origins)


def min_upsample_factor(s: int, p: int) -> int:
    """Smallest ``r`` dividing ``p`` such that ``s`` is a multiple of ``p / r``."""
    if s < 1 or p < 1:
        raise ValueError(f"stride and patch size must be positive, got s={s}, P={p}")
    for r in range(1, p + 1):
        if p % r == 0 and s % (p // r) == 0:
            return r
    return p  # unreachable: r = p always qualifies


def axis_origins(dim: int, window: int, stride: int) -> tuple[int, ...]:
    origins = list(range(0, dim - window + 1, stride))
    if origins[-1] != dim - window:
        origins.append(dim - window)
    return tuple(origins)


def plan_windows(H: int, W: int, K: int, s: int, P: int) -> WindowPlan:
    if H < K or W < K:
        raise ValueError(f"image {H}x{W} is smaller than the {K}x{K} window; resize it first")
    if not 1 <= s <= K:
        raise ValueError(f"stride must be in [1, {K}], got {s}")
    if K % P:
        raise ValueError(f"window {K} is not a multiple of patch size {P}")
    r = min_upsample_factor(s, P)
    plan = WindowPlan(H, W, K, s, axis_origins(H, K, s), axis_origins(W, K, s), r)
    if H % P == 0 and W % P == 0:
        for o in plan.row_origins + plan.col_origins:
            if (o * r) % P:
                raise AssertionError(f"origin {o} does not land on the r={r} sub-patch lattice")
    return plan


def lattice_shape(n_patches: int, r: int) -> int:
    return r * (n_patches - 1) + 1


def stitch_features(window_feats, plan: WindowPlan, P: int) -> np.ndarray:
    """Merge ``k x k x d`` window features into an ``H/P x W/P x d`` map.

    Overlaps are averaged uniformly. Accumulation runs in plan order with a
    separate count grid, divided once at the end.
    """
    window_feats = list(window_feats)
    if len(window_feats) != plan.m:
        raise ValueError(f"expected {plan.m} window feature maps, got {len(window_feats)}")
    if plan.image_h % P or plan.image_w % P:
        raise ValueError(f"image {plan.image_h}x{plan.image_w} is not a multiple of patch size {P}")
    k = plan.window // P
    r = plan.r
    h, w = plan.image_h // P, plan.image_w // P
    fk = lattice_shape(k, r)
    fh, fw = lattice_shape(h, r), lattice_shape(w, r)

    acc = None
    count = np.zeros((fh, fw, 1))
    for feat, (oy, ox) in zip(window_feats, plan.origins):
        feat = as_grid(feat, "window feature")
        if feat.shape[:2] != (k, k):
            raise ValueError(f"window feature map must be {k}x{k}, got {feat.shape[:2]}")
        if acc is None:
            acc = np.zeros((fh, fw, feat.shape[2]))
        elif feat.shape[2] != acc.shape[2]:
            raise ValueError("window feature maps disagree on channel count")
        fine = bilinear_resize(feat, fk, fk, align_corners=True) if r > 1 else feat
        y0, x0 = oy * r // P, ox * r // P
        acc[y0 : y0 + fk, x0 : x0 + fk] += fine
        count[y0 : y0 + fk, x0 : x0 + fk] += 1.0
    if np.any(count == 0):
        raise AssertionError("sub-patch lattice has uncovered cells")
    merged = acc / count
    if r == 1:
        return merged
    return bilinear_resize(merged, h, w, align_corners=True)


def stitch_predictions(window_sims, plan: WindowPlan) -> np.ndarray:
    """Average ``K x K x C`` pixel-level maps into an ``H x W x C`` map."""
    window_sims = list(window_sims)
    if len(window_sims) != plan.m:
        raise ValueError(f"expected {plan.m} window maps, got {len(window_sims)}")
    K = plan.window
    acc = None
    count = np.zeros((plan.image_h, plan.image_w, 1))
    for sim, (oy, ox) in zip(window_sims, plan.origins):
        sim = as_grid(sim, "window map")
        if sim.shape[:2] != (K, K):
            raise ValueError(f"window map must be {K}x{K}, got {sim.shape[:2]}")
        if acc is None:
            acc = np.zeros((plan.image_h, plan.image_w, sim.shape[2]))
        elif sim.shape[2] != acc.shape[2]:
            raise ValueError("window maps disagree on channel count")
        acc[oy : oy + K, ox : ox + K] += sim
        count[oy : oy + K, ox : ox + K] += 1.0
    return acc / count


def coverage_counts(plan: WindowPlan) -> np.ndarray:
    """Number of windows covering each pixel."""
    count = np.zeros((plan.image_h, plan.image_w), dtype=np.int64)
    K = plan.window
    for oy, ox in plan.origins:
        count[oy : oy + K, ox : ox + K] += 1
    return count


def crop_windows(image: np.ndarray, plan: WindowPlan) -> list[np.ndarray]:
    K = plan.window
    return [image[oy : oy + K, ox : ox + K] for oy, ox in plan.origins]
