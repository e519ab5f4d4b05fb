"""Teacher feature precomputation, augmentation, AdamW and the distillation loop.

A frozen teacher encodes every training image window by window and the
stitched feature maps are written to a feature store once. The student, which
starts from the same weights, then learns to reproduce those maps in a single
forward pass over the whole image.
"""

from __future__ import annotations

import logging
import re
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import as_grid, bilinear_resize, mse
from .vit import ModelParams, ViTConfig, backward_tail, block_of, forward, forward_window, tensor_shapes
from .window import crop_windows, plan_windows, stitch_features

log = logging.getLogger(__name__)

STORE_MAGIC = b"SPARFST1"
STORE_VERSION = 1
DTYPES = {"f32": (0, "<f4"), "f64": (1, "<f8")}
DTYPE_CODES = {code: (name, np_dtype) for name, (code, np_dtype) in DTYPES.items()}

# Training configurations of the parameter-subset ablation, by display name.
NAMED_CONFIGS = {
    "Last block": "last_n_blocks(1)",
    "Last 2 blocks": "last_n_blocks(2)",
    "Last 3 blocks": "last_n_blocks(3)",
    "Patch projection": "patch_projection",
    "Positional encoding": "pos_encodings",
    "Last 2 blocks - MLP": "mlp_only(2)",
    "Last 2 blocks - QKV": "qkv_only(2)",
    "ALL params": "all",
}


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 2e-5
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    trainable: str = "last_n_blocks(2)"
    seed: int = 0
    resize_short_min: int = 512
    resize_short_max: int = 2048
    crop_min: int = 512
    flip_prob: float = 0.5
    crop_prob: float = 0.5

    def __post_init__(self):
        for name in ("flip_prob", "crop_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        if self.resize_short_min > self.resize_short_max:
            raise ValueError("resize_short_min exceeds resize_short_max")
        if self.crop_min > self.resize_short_min:
            raise ValueError("crop_min exceeds resize_short_min")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


def trainable_names(spec: str, cfg: ViTConfig) -> frozenset[str]:
    """Resolve a trainable-set expression to parameter names.

    ``spec`` is a ``+``-separated list of ``last_n_blocks(n)``, ``all``,
    ``patch_projection``, ``pos_encodings``, ``mlp_only(n)`` or ``qkv_only(n)``
    (``n`` defaults to 2 for the last two). A display name from
    :data:`NAMED_CONFIGS` is accepted as well.
    """
    spec = NAMED_CONFIGS.get(spec.strip(), spec)
    names: set[str] = set()
    nb = cfg.num_blocks

    def tail(n: int) -> range:
        if not 1 <= n <= nb:
            raise ValueError(f"cannot train the last {n} blocks of a {nb}-block model")
        return range(nb - n, nb)

    for term in spec.split("+"):
        term = term.strip()
        m = re.fullmatch(r"(\w+)(?:\((\d+)\))?", term)
        if not m:
            raise ValueError(f"bad trainable term {term!r}")
        kind, arg = m.group(1), m.group(2)
        if kind == "all":
            names.update(_all_names(cfg))
        elif kind == "patch_projection":
            names.update({"patch_proj.weight", "patch_proj.bias"})
        elif kind == "pos_encodings":
            names.add("pos_embed")
        elif kind == "last_n_blocks":
            if arg is None:
                raise ValueError("last_n_blocks needs a block count, e.g. last_n_blocks(2)")
            for b in tail(int(arg)):
                names.update(n for n in _all_names(cfg) if block_of(n) == b)
        elif kind in ("mlp_only", "qkv_only"):
            part = "mlp.fc" if kind == "mlp_only" else "attn.qkv."
            for b in tail(int(arg) if arg else 2):
                names.update(n for n in _all_names(cfg) if n.startswith(f"blocks.{b}.{part}"))
        else:
            raise ValueError(f"unknown trainable term {term!r}")
    return frozenset(names)


def _all_names(cfg: ViTConfig) -> list[str]:
    return list(tensor_shapes(cfg))


# -- augmentation -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentPlan:
    """Geometry of one augmentation draw; applying it needs no randomness."""

    resize: tuple[int, int]
    crop: tuple[int, int, int, int] | None  # top, left, height, width
    flip: bool
    final: tuple[int, int]


def sample_augmentation(h: int, w: int, rng: np.random.Generator, cfg: TrainConfig, P: int) -> AugmentPlan:
    if h < 1 or w < 1:
        raise ValueError("image must be non-empty")
    short = rng.integers(cfg.resize_short_min, cfg.resize_short_max + 1)
    short = int(short)
    if h <= w:
        rh, rw = short, max(1, round(w * short / h))
    else:
        rh, rw = max(1, round(h * short / w)), short

    crop = None
    do_crop = rng.random() < cfg.crop_prob
    ch = rng.integers(min(cfg.crop_min, rh), rh + 1)
    cw = rng.integers(min(cfg.crop_min, rw), rw + 1)
    top = rng.integers(0, rh - ch + 1)
    left = rng.integers(0, rw - cw + 1)
    if do_crop and rh >= cfg.crop_min and rw >= cfg.crop_min:
        crop = (int(top), int(left), int(ch), int(cw))
    flip = bool(rng.random() < cfg.flip_prob)

    ah, aw = (crop[2], crop[3]) if crop else (rh, rw)
    final = (max(P, ah - ah % P), max(P, aw - aw % P))
    return AugmentPlan((rh, rw), crop, flip, final)


def apply_augmentation(image, plan: AugmentPlan) -> np.ndarray:
    out = bilinear_resize(image, *plan.resize)
    if plan.crop:
        top, left, ch, cw = plan.crop
        out = out[top : top + ch, left : left + cw]
    if plan.flip:
        out = out[:, ::-1]
    return bilinear_resize(np.ascontiguousarray(out), *plan.final)


def augment(image, rng: np.random.Generator, cfg: TrainConfig, P: int) -> np.ndarray:
    """Random resize, crop and horizontal flip, then snap sides down to multiples of ``P``."""
    image = as_grid(image, "image")
    plan = sample_augmentation(image.shape[0], image.shape[1], rng, cfg, P)
    return apply_augmentation(image, plan)


def ensure_min_side(image: np.ndarray, K: int, P: int) -> np.ndarray:
    """Upscale so the shorter side is at least ``K``, keeping sides multiples of ``P``."""
    h, w = image.shape[:2]
    if min(h, w) >= K:
        return image
    scale = K / min(h, w)
    nh = K if h <= w else max(K, int(h * scale) // P * P)
    nw = K if w <= h else max(K, int(w * scale) // P * P)
    return bilinear_resize(image, nh, nw)


def augmentation_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def training_view(image, index: int, cfg: TrainConfig, vit_cfg: ViTConfig) -> np.ndarray:
    """The augmented view of dataset image ``index`` seen by both teacher and student."""
    rng = augmentation_rng(cfg.seed, index)
    out = augment(image, rng, cfg, vit_cfg.patch_size)
    return ensure_min_side(out, vit_cfg.native_side, vit_cfg.patch_size)


# -- feature store ----------------------------------------------------------


@dataclass
class FeatureStoreRecord:
    image_id: str
    features: np.ndarray
    dtype: str = "f32"

    def payload(self) -> bytes:
        _, np_dtype = DTYPES[self.dtype]
        return np.ascontiguousarray(self.features, dtype=np_dtype).tobytes()


def write_store(path, records: Iterable[FeatureStoreRecord]) -> int:
    """Write records in order; returns the number of bytes written."""
    records = list(records)
    chunks = [STORE_MAGIC, struct.pack("<IQ", STORE_VERSION, len(records))]
    for rec in records:
        raw = rec.image_id.encode("utf-8")
        h, w, d = rec.features.shape
        code, _ = DTYPES[rec.dtype]
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<3IB", h, w, d, code))
        chunks.append(rec.payload())
    data = b"".join(chunks)
    Path(path).write_bytes(data)
    return len(data)


def read_store(path) -> list[FeatureStoreRecord]:
    buf = Path(path).read_bytes()
    if buf[:8] != STORE_MAGIC:
        raise ValueError(f"{path}: not a feature store (bad magic)")
    version, count = struct.unpack_from("<IQ", buf, 8)
    if version != STORE_VERSION:
        raise ValueError(f"{path}: unsupported store version {version}")
    off = 8 + struct.calcsize("<IQ")
    records = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        image_id = buf[off : off + n].decode("utf-8")
        off += n
        h, w, d, code = struct.unpack_from("<3IB", buf, off)
        off += struct.calcsize("<3IB")
        name, np_dtype = DTYPE_CODES[code]
        size = h * w * d
        feats = np.frombuffer(buf, dtype=np_dtype, count=size, offset=off).reshape(h, w, d)
        off += size * np.dtype(np_dtype).itemsize
        records.append(FeatureStoreRecord(image_id, feats.astype(np.float64), name))
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return records


def teacher_features(image, params: ModelParams, cfg: ViTConfig, stride: int) -> np.ndarray:
    """Sliding-window features of ``image`` stitched to single-pass layout."""
    K, P = cfg.native_side, cfg.patch_size
    plan = plan_windows(image.shape[0], image.shape[1], K, stride, P)
    feats = [forward_window(win, params, cfg) for win in crop_windows(image, plan)]
    return stitch_features(feats, plan, P)


def precompute_teacher(
    dataset: Sequence[tuple[str, np.ndarray]],
    teacher: ModelParams,
    vit_cfg: ViTConfig,
    train_cfg: TrainConfig,
    stride: int,
    store_path,
    dtype: str = "f32",
    threads: int = 1,
) -> list[FeatureStoreRecord]:
    """Augment each image once, encode it with the sliding-window teacher, store it.

    ``dataset`` is an ordered sequence of ``(image_id, image)`` pairs; an image
    of ``None`` marks an unreadable file, which is skipped but still consumes
    its dataset index. Records are written in dataset order whatever
    ``threads`` is.
    """
    teacher = teacher.with_trainable(())

    def one(item):
        index, (image_id, image) = item
        try:
            view = training_view(image, index, train_cfg, vit_cfg)
            feats = teacher_features(view, teacher, vit_cfg, stride)
        except Exception as exc:
            raise RuntimeError(f"teacher precompute failed for image {image_id!r}: {exc}") from exc
        return FeatureStoreRecord(image_id, feats, dtype)

    items = []
    for index, (image_id, image) in enumerate(dataset):
        if image is None:
            log.warning("skipping unreadable image %s", image_id)
        else:
            items.append((index, (image_id, image)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, items))
    else:
        records = [one(item) for item in items]
    try:
        write_store(store_path, records)
    except OSError as exc:
        raise OSError(f"cannot write feature store {store_path}: {exc}") from exc
    return records


# -- optimisation -----------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_update(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState, cfg: TrainConfig):
    """One AdamW step with decoupled weight decay and bias correction.

    Returns new ``(params, state)``; the inputs are left untouched.
    """
    if set(grads) != set(params.trainable):
        raise ValueError(
            f"gradients cover {sorted(set(grads))} but trainable tensors are {sorted(params.trainable)}"
        )
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon
    lr, wd = cfg.learning_rate, cfg.weight_decay
    t = state.t + 1
    tensors = dict(params.tensors)
    new_m, new_v = {}, {}
    for name, g in grads.items():
        p = tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} vs parameter {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        tensors[name] = p * (1.0 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return ModelParams(tensors, params.trainable), OptimizerState(new_m, new_v, t)


def distill_loss_and_grad(student_feats: np.ndarray, teacher_feats: np.ndarray) -> tuple[float, np.ndarray]:
    if student_feats.shape != teacher_feats.shape:
        raise ValueError(
            f"teacher features {teacher_feats.shape} do not match student output {student_feats.shape}; "
            "augmentation or window plan out of sync"
        )
    diff = student_feats - teacher_feats
    return mse(student_feats, teacher_feats), 2.0 * diff / diff.size


def train_step(params: ModelParams, image, teacher_feats, state: OptimizerState, vit_cfg: ViTConfig, cfg: TrainConfig):
    """Returns ``(new_params, new_state, loss)`` with the loss measured before the update."""
    feats, cache = forward(image, params, vit_cfg)
    loss, grad = distill_loss_and_grad(feats, np.asarray(teacher_feats, dtype=np.float64))
    grads = backward_tail(cache, grad, params, vit_cfg)
    new_params, new_state = adamw_update(params, grads, state, cfg)
    return new_params, new_state, loss


def train(
    cfg: TrainConfig,
    vit_cfg: ViTConfig,
    dataset: Sequence[tuple[str, np.ndarray]],
    store: Sequence[FeatureStoreRecord],
    student: ModelParams,
    on_step: Callable[[int, int, str, float], None] | None = None,
) -> ModelParams:
    """Distil the stored teacher maps into ``student`` over ``cfg.epochs`` passes.

    Images are visited in dataset order with batch size 1; each is augmented
    exactly as during precomputation. Only ``cfg.trainable`` tensors change.
    """
    by_id = {rec.image_id: rec for rec in store}
    views = []
    for index, (image_id, image) in enumerate(dataset):
        if image is None and image_id not in by_id:
            continue
        if image is None:
            raise ValueError(f"image {image_id!r} has a stored record but could not be read")
        if image_id not in by_id:
            raise KeyError(f"feature store has no record for image {image_id!r}")
        views.append((image_id, training_view(image, index, cfg, vit_cfg)))

    params = student.with_trainable(trainable_names(cfg.trainable, vit_cfg))
    state = OptimizerState()
    step = 0
    for epoch in range(cfg.epochs):
        for image_id, view in views:
            params, state, loss = train_step(params, view, by_id[image_id].features, state, vit_cfg, cfg)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch} step {step} ({image_id})")
            if on_step:
                on_step(epoch, step, image_id, loss)
            log.debug("epoch %d step %d %s loss %.6g", epoch, step, image_id, loss)
            step += 1
    return params.with_trainable(())
