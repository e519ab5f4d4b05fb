"""A small pre-norm Vision Transformer in numpy with a hand-written backward.

The encoder maps an ``H x W x 3`` image (``H`` and ``W`` multiples of the patch
size) to an ``H/P x W/P x d`` feature grid. There is no class token. Learned
positional encodings live on the native ``k x k`` grid and are resampled
bilinearly whenever the token grid has a different size.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .tensor import as_grid, bilinear_resize, bilinear_resize_adjoint

LN_EPS = 1e-6
INIT_STD = 0.02
CHECKPOINT_MAGIC = b"SPARVIT1"

BLOCK_TENSORS = (
    "ln1.weight",
    "ln1.bias",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "ln2.weight",
    "ln2.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
)


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 16
    native_side: int = 32
    channels: int = 8
    num_blocks: int = 1
    num_heads: int = 2
    mlp_ratio: float = 4.0
    last_attention_identity: bool = False

    def __post_init__(self):
        for name in ("patch_size", "native_side", "channels", "num_blocks", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.native_side % self.patch_size:
            raise ValueError(
                f"native_side {self.native_side} is not a multiple of patch_size {self.patch_size}"
            )
        if self.channels % self.num_heads:
            raise ValueError(f"channels {self.channels} not divisible by num_heads {self.num_heads}")
        if not self.mlp_ratio > 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def grid_side(self) -> int:
        return self.native_side // self.patch_size

    @property
    def hidden(self) -> int:
        return max(1, round(self.mlp_ratio * self.channels))

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


def tensor_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    """Canonical ordered mapping of parameter names to shapes."""
    d, p, k, hid = cfg.channels, cfg.patch_size, cfg.grid_side, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_proj.weight": (3 * p * p, d),
        "patch_proj.bias": (d,),
        "pos_embed": (k, k, d),
    }
    per_block = {
        "ln1.weight": (d,),
        "ln1.bias": (d,),
        "attn.qkv.weight": (d, 3 * d),
        "attn.qkv.bias": (3 * d,),
        "attn.proj.weight": (d, d),
        "attn.proj.bias": (d,),
        "ln2.weight": (d,),
        "ln2.bias": (d,),
        "mlp.fc1.weight": (d, hid),
        "mlp.fc1.bias": (hid,),
        "mlp.fc2.weight": (hid, d),
        "mlp.fc2.bias": (d,),
    }
    for b in range(cfg.num_blocks):
        for name in BLOCK_TENSORS:
            shapes[f"blocks.{b}.{name}"] = per_block[name]
    return shapes


@dataclass
class ModelParams:
    """Named parameter tensors plus the set of names that receive gradients."""

    tensors: dict[str, np.ndarray]
    trainable: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        unknown = set(self.trainable) - set(self.tensors)
        if unknown:
            raise KeyError(f"trainable names not in params: {sorted(unknown)}")
        self.trainable = frozenset(self.trainable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.trainable)

    def with_trainable(self, names) -> "ModelParams":
        return ModelParams(self.tensors, frozenset(names))

    def equal(self, other: "ModelParams") -> bool:
        return list(self.tensors) == list(other.tensors) and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        )


def init_params(cfg: ViTConfig, seed: int) -> ModelParams:
    """Gaussian(0, 0.02) weights, zero biases, unit layernorm gains."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(cfg).items():
        if name.endswith(("ln1.weight", "ln2.weight")):
            tensors[name] = np.ones(shape)
        elif name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, INIT_STD, size=shape)
    return ModelParams(tensors)


def block_of(name: str) -> int | None:
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    return None


# -- checkpoint I/O ---------------------------------------------------------


def save_checkpoint(path, params: ModelParams, cfg: ViTConfig) -> None:
    shapes = tensor_shapes(cfg)
    if list(params.tensors) != list(shapes):
        raise ValueError("params do not follow the canonical tensor order for this config")
    chunks = [
        CHECKPOINT_MAGIC,
        struct.pack(
            "<5id i",
            cfg.patch_size,
            cfg.native_side,
            cfg.channels,
            cfg.num_blocks,
            cfg.num_heads,
            cfg.mlp_ratio,
            int(cfg.last_attention_identity),
        ),
    ]
    for name, shape in shapes.items():
        arr = params.tensors[name]
        if arr.shape != shape:
            raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{len(shape)}I", len(shape), *shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[ModelParams, ViTConfig]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = 8
    p, kside, d, nb, nh, ratio, ident = struct.unpack_from("<5id i", buf, off)
    off += struct.calcsize("<5id i")
    cfg = ViTConfig(p, kside, d, nb, nh, ratio, bool(ident))
    tensors = {}
    for name, shape in tensor_shapes(cfg).items():
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        got = buf[off : off + n].decode("utf-8")
        off += n
        if got != name:
            raise ValueError(f"{path}: expected tensor {name!r}, found {got!r}")
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        if tuple(dims) != shape:
            raise ValueError(f"{path}: {name} has shape {dims}, expected {shape}")
        count = math.prod(dims)
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(dims).astype(np.float64)
        off += 8 * count
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return ModelParams(tensors), cfg


# -- forward ----------------------------------------------------------------


def interpolate_pos_encodings(pe, h: int, w: int) -> np.ndarray:
    return bilinear_resize(pe, h, w)


def patchify(image: np.ndarray, p: int) -> np.ndarray:
    """``(H, W, 3)`` -> ``(H/p * W/p, p*p*3)`` with patches in row-major order."""
    H, W, c = image.shape
    h, w = H // p, W // p
    x = image.reshape(h, p, w, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(h * w, p * p * c)


def unpatchify_grad(grad: np.ndarray, h: int, w: int, p: int) -> np.ndarray:
    return grad.reshape(h, w, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, 3)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def _layernorm(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * gamma + beta, xhat, inv


def _layernorm_backward(dy, xhat, inv, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _block_forward(x, t, prefix, cfg: ViTConfig, identity_attn: bool, keep: bool):
    n, d = x.shape
    nh, dh = cfg.num_heads, cfg.head_dim
    ln1, xhat1, inv1 = _layernorm(x, t[prefix + "ln1.weight"], t[prefix + "ln1.bias"])
    qkv = ln1 @ t[prefix + "attn.qkv.weight"] + t[prefix + "attn.qkv.bias"]
    q, k, v = (qkv[:, i * d : (i + 1) * d].reshape(n, nh, dh).transpose(1, 0, 2) for i in range(3))
    if identity_attn:
        attn = np.broadcast_to(np.eye(n), (nh, n, n))
    else:
        attn = _softmax(q @ k.transpose(0, 2, 1) / math.sqrt(dh))
    o = (attn @ v).transpose(1, 0, 2).reshape(n, d)
    x1 = x + o @ t[prefix + "attn.proj.weight"] + t[prefix + "attn.proj.bias"]
    ln2, xhat2, inv2 = _layernorm(x1, t[prefix + "ln2.weight"], t[prefix + "ln2.bias"])
    hpre = ln2 @ t[prefix + "mlp.fc1.weight"] + t[prefix + "mlp.fc1.bias"]
    hact = gelu(hpre)
    x2 = x1 + hact @ t[prefix + "mlp.fc2.weight"] + t[prefix + "mlp.fc2.bias"]
    saved = None
    if keep:
        saved = dict(
            ln1=ln1, xhat1=xhat1, inv1=inv1, q=q, k=k, v=v, attn=attn, o=o,
            ln2=ln2, xhat2=xhat2, inv2=inv2, hpre=hpre, hact=hact,
        )
    return x2, attn, saved


@dataclass
class ForwardCache:
    """Activations needed to backpropagate into the trainable tensors."""

    grid: tuple[int, int]
    first_block: int
    trainable: frozenset[str]
    blocks: dict[int, dict] = field(default_factory=dict)
    patches: np.ndarray | None = None
    attention: list[np.ndarray] = field(default_factory=list)


def _first_needed_block(params: ModelParams, cfg: ViTConfig) -> int | None:
    if not params.trainable:
        return None
    idx = [block_of(n) for n in params.trainable]
    if any(i is None for i in idx):
        return 0
    return min(idx)


def _check_image(image, cfg: ViTConfig) -> np.ndarray:
    image = as_grid(image, "image")
    H, W, c = image.shape
    if c != 3:
        raise ValueError(f"image must have 3 channels, got {c}")
    p = cfg.patch_size
    if H % p:
        raise ValueError(f"image height {H} is not a multiple of patch size {p}")
    if W % p:
        raise ValueError(f"image width {W} is not a multiple of patch size {p}")
    return image


def forward(image, params: ModelParams, cfg: ViTConfig, keep_attention: bool = False):
    """Single-pass encoding of an image of any patch-divisible size.

    Returns ``(features, cache)`` where ``features`` has shape ``(H/P, W/P, d)``.
    The cache holds activations from the first block that owns a trainable
    tensor onwards (everything if the embedding is trainable).
    """
    image = _check_image(image, cfg)
    p, d = cfg.patch_size, cfg.channels
    h, w = image.shape[0] // p, image.shape[1] // p
    t = params.tensors
    first = _first_needed_block(params, cfg)
    cache = ForwardCache((h, w), -1 if first is None else first, params.trainable)

    patches = patchify(image, p)
    pe = interpolate_pos_encodings(t["pos_embed"], h, w).reshape(h * w, d)
    x = patches @ t["patch_proj.weight"] + t["patch_proj.bias"] + pe
    if first == 0 and ({"patch_proj.weight", "patch_proj.bias"} & params.trainable):
        cache.patches = patches

    last = cfg.num_blocks - 1
    for b in range(cfg.num_blocks):
        keep = first is not None and b >= first
        ident = cfg.last_attention_identity and b == last
        x_in = x
        x, attn, saved = _block_forward(x, t, f"blocks.{b}.", cfg, ident, keep)
        if keep:
            saved["x"] = x_in
            cache.blocks[b] = saved
        if keep_attention:
            cache.attention.append(attn)
    return x.reshape(h, w, d), cache


def forward_window(window, params: ModelParams, cfg: ViTConfig) -> np.ndarray:
    """Encode one native ``K x K`` window."""
    window = as_grid(window, "window")
    if window.shape[:2] != (cfg.native_side, cfg.native_side):
        raise ValueError(
            f"window must be {cfg.native_side}x{cfg.native_side}, got {window.shape[0]}x{window.shape[1]}"
        )
    return forward(window, params.with_trainable(()), cfg)[0]


# -- backward ---------------------------------------------------------------


def _block_backward(dx2, s, t, prefix, cfg: ViTConfig, identity_attn: bool):
    n, d = dx2.shape
    nh, dh = cfg.num_heads, cfg.head_dim
    g = {}
    dmlp = dx2
    g["mlp.fc2.weight"] = s["hact"].T @ dmlp
    g["mlp.fc2.bias"] = dmlp.sum(axis=0)
    dhpre = (dmlp @ t[prefix + "mlp.fc2.weight"].T) * gelu_grad(s["hpre"])
    g["mlp.fc1.weight"] = s["ln2"].T @ dhpre
    g["mlp.fc1.bias"] = dhpre.sum(axis=0)
    dln2 = dhpre @ t[prefix + "mlp.fc1.weight"].T
    dx1_ln, g["ln2.weight"], g["ln2.bias"] = _layernorm_backward(
        dln2, s["xhat2"], s["inv2"], t[prefix + "ln2.weight"]
    )
    dx1 = dx2 + dx1_ln

    g["attn.proj.weight"] = s["o"].T @ dx1
    g["attn.proj.bias"] = dx1.sum(axis=0)
    do = (dx1 @ t[prefix + "attn.proj.weight"].T).reshape(n, nh, dh).transpose(1, 0, 2)
    attn, q, k, v = s["attn"], s["q"], s["k"], s["v"]
    dv = attn.transpose(0, 2, 1) @ do
    if identity_attn:
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
    else:
        da = do @ v.transpose(0, 2, 1)
        ds = attn * (da - (da * attn).sum(axis=-1, keepdims=True)) / math.sqrt(dh)
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
    dqkv = np.concatenate([z.transpose(1, 0, 2).reshape(n, d) for z in (dq, dk, dv)], axis=1)
    g["attn.qkv.weight"] = s["ln1"].T @ dqkv
    g["attn.qkv.bias"] = dqkv.sum(axis=0)
    dln1 = dqkv @ t[prefix + "attn.qkv.weight"].T
    dx_ln, g["ln1.weight"], g["ln1.bias"] = _layernorm_backward(
        dln1, s["xhat1"], s["inv1"], t[prefix + "ln1.weight"]
    )
    return dx1 + dx_ln, g


def backward_tail(cache: ForwardCache, grad_output, params: ModelParams, cfg: ViTConfig) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_output * features)`` for every trainable tensor.

    Frozen tensors get no entry. Backpropagation stops at the first block
    that owns a trainable tensor, or runs through the embedding when the
    patch projection or positional encodings are trainable.
    """
    if cache.trainable != params.trainable:
        raise ValueError("cache was produced with a different trainable set than params")
    if not params.trainable:
        return {}
    h, w = cache.grid
    d = cfg.channels
    grad_output = np.asarray(grad_output, dtype=np.float64)
    if grad_output.shape != (h, w, d):
        raise ValueError(f"grad_output shape {grad_output.shape} does not match features {(h, w, d)}")
    missing = [b for b in range(cache.first_block, cfg.num_blocks) if b not in cache.blocks]
    if missing:
        raise ValueError(f"cache lacks activations for blocks {missing}")

    t = params.tensors
    grads: dict[str, np.ndarray] = {}
    dx = grad_output.reshape(h * w, d)
    last = cfg.num_blocks - 1
    for b in range(last, cache.first_block - 1, -1):
        prefix = f"blocks.{b}."
        ident = cfg.last_attention_identity and b == last
        dx, g = _block_backward(dx, cache.blocks[b], t, prefix, cfg, ident)
        for name, val in g.items():
            if prefix + name in params.trainable:
                grads[prefix + name] = val
    if cache.first_block == 0:
        if "pos_embed" in params.trainable:
            k = cfg.grid_side
            grads["pos_embed"] = bilinear_resize_adjoint(dx.reshape(h, w, d), k, k)
        if "patch_proj.weight" in params.trainable:
            if cache.patches is None:
                raise ValueError("cache lacks patch inputs for patch projection gradient")
            grads["patch_proj.weight"] = cache.patches.T @ dx
        if "patch_proj.bias" in params.trainable:
            grads["patch_proj.bias"] = dx.sum(axis=0)
    return {name: grads[name] for name in params.tensors if name in grads}
