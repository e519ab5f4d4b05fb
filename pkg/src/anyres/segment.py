"""Zero-shot segmentation from class embeddings, mIoU scoring and PCA views."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import as_grid, bilinear_resize, l2_normalize_channels

CLASS_MAGIC = "SPARCLS1"


@dataclass
class ClassEmbeddings:
    names: list[str]
    vectors: np.ndarray  # (C, d)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.names):
            raise ValueError(f"expected {len(self.names)} class vectors, got array of shape {self.vectors.shape}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate class names")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("class vectors must be finite")

    @property
    def C(self) -> int:
        return len(self.names)

    @property
    def d(self) -> int:
        return self.vectors.shape[1]


def read_class_embeddings(path) -> ClassEmbeddings:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    header = lines[0].split() if lines else []
    if len(header) != 3 or header[0] != CLASS_MAGIC:
        raise ValueError(f"{path}: expected header '{CLASS_MAGIC} C d'")
    C, d = int(header[1]), int(header[2])
    body = lines[1:]
    if len(body) != 2 * C:
        raise ValueError(f"{path}: expected {2 * C} lines after the header, found {len(body)}")
    names, vectors = [], []
    for i in range(C):
        names.append(body[2 * i].strip())
        vec = [float(v) for v in body[2 * i + 1].split()]
        if len(vec) != d:
            raise ValueError(f"{path}: class {names[-1]!r} has {len(vec)} values, expected {d}")
        vectors.append(vec)
    return ClassEmbeddings(names, np.array(vectors).reshape(C, d))


def write_class_embeddings(path, emb: ClassEmbeddings) -> None:
    out = [f"{CLASS_MAGIC} {emb.C} {emb.d}"]
    for name, vec in zip(emb.names, emb.vectors):
        out.append(name)
        out.append(" ".join(repr(float(v)) for v in vec))
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def class_similarities(V, F: ClassEmbeddings) -> np.ndarray:
    """Cosine similarity of every feature cell to every class vector, ``(h, w, C)``."""
    V = as_grid(V, "features")
    if V.shape[2] != F.d:
        raise ValueError(f"feature dimension {V.shape[2]} does not match class embedding dimension {F.d}")
    nv = l2_normalize_channels(V)
    nf = l2_normalize_channels(F.vectors[None])[0]
    return np.clip(nv @ nf.T, -1.0, 1.0)


def predict_mask(Y, out_h: int, out_w: int) -> np.ndarray:
    """Upsample similarities bilinearly and take the per-pixel argmax (lowest index wins ties)."""
    up = bilinear_resize(Y, out_h, out_w)
    return np.argmax(up, axis=-1).astype(np.int64)


@dataclass
class EvalReport:
    class_names: list[str]
    confusion: np.ndarray
    per_class_iou: np.ndarray  # NaN for classes absent from both GT and prediction
    mean_iou: float
    timings: list = field(default_factory=list)

    def table(self) -> str:
        width = max([5] + [len(n) for n in self.class_names])
        rows = [f"{'class':<{width}}  IoU"]
        for name, iou in zip(self.class_names, self.per_class_iou):
            rows.append(f"{name:<{width}}  {'n/a' if np.isnan(iou) else f'{iou:.4f}'}")
        rows.append(f"{'mIoU':<{width}}  {self.mean_iou:.4f}")
        return "\n".join(rows)

    def to_csv(self) -> str:
        lines = ["class,iou"]
        for name, iou in zip(self.class_names, self.per_class_iou):
            lines.append(f"{name},{'' if np.isnan(iou) else repr(float(iou))}")
        lines.append(f"mean,{self.mean_iou!r}")
        return "\n".join(lines) + "\n"


def confusion_matrix(pred, gt, C: int, ignore_index: int | None = None) -> np.ndarray:
    """``C x C`` counts with ground truth on rows and prediction on columns."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    keep = np.ones(gt.shape, dtype=bool) if ignore_index is None else gt != ignore_index
    g, p = gt[keep], pred[keep]
    if g.size and (g.min() < 0 or g.max() >= C):
        raise ValueError(f"ground-truth labels outside [0, {C})")
    if p.size and (p.min() < 0 or p.max() >= C):
        raise ValueError(f"predicted labels outside [0, {C})")
    return np.bincount(g * C + p, minlength=C * C).reshape(C, C)


def miou(preds, gts, C: int, ignore_index: int | None = None, class_names=None) -> EvalReport:
    conf = np.zeros((C, C), dtype=np.int64)
    for pred, gt in zip(preds, gts, strict=True):
        conf += confusion_matrix(pred, gt, C, ignore_index)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    present = union > 0
    mean = float(iou[present].mean()) if present.any() else float("nan")
    names = list(class_names) if class_names is not None else [str(c) for c in range(C)]
    return EvalReport(names, conf, iou, mean)


def pca_project(features, basis_source, rank_tol: float = 1e-10) -> np.ndarray:
    """Project ``features`` on the top three principal axes of ``basis_source``.

    Each output channel is min-max scaled to ``[0, 1]`` (constant channels map
    to zero).
    """
    features = as_grid(features, "features")
    basis_source = as_grid(basis_source, "basis_source")
    d = basis_source.shape[2]
    if d < 3:
        raise ValueError(f"need at least 3 feature channels, got {d}")
    if features.shape[2] != d:
        raise ValueError(f"feature dimension {features.shape[2]} does not match basis dimension {d}")
    cells = basis_source.reshape(-1, d)
    mean = cells.mean(axis=0)
    centred = cells - mean
    cov = centred.T @ centred / max(1, len(cells) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = evals[0] if evals.size else 0.0
    rank = int(np.sum(evals > rank_tol * max(top, np.finfo(float).tiny)) if top > 0 else 0)
    if rank < 3:
        raise ValueError(f"basis covariance has rank {rank}, need at least 3")
    proj = (features.reshape(-1, d) - mean) @ evecs[:, :3]
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    out = (proj - lo) / span
    return out.reshape(features.shape[0], features.shape[1], 3)

