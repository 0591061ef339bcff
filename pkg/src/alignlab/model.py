"""Cross-attention classifier over linear patch embeddings.

One learned prompt vector per class; a single cross-attention layer turns the
class prompt into a query over patch tokens, yielding a per-class attention
grid. Two heads sit on top: an aligner head mapping attention weights to a
per-cell [0,1] map, and an affine classification head on the attention-pooled
feature.

Parameters live in one flat float64 vector with named slices, which keeps the
optimizer, gradient checker and checkpoint format trivial.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels as _default_kernels
from .errors import ConfigError, DataFormatError, DimensionError, UsageError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 16
    num_classes: int = 3

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} does not divide image_size {self.image_size}"
            )
        if self.embed_dim < 1 or self.num_classes < 1:
            raise ConfigError("embed_dim and num_classes must be >= 1")

    @property
    def grid_side(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid_side ** 2

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "num_classes": self.num_classes,
        }


def field_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) of every learnable field; () means scalar."""
    p2 = cfg.patch_size ** 2
    e = cfg.embed_dim
    c = cfg.num_classes
    return [
        ("patch_proj", (p2, e)),
        ("patch_bias", (e,)),
        ("class_embed", (c, e)),
        ("q_proj", (e, e)),
        ("k_proj", (e, e)),
        ("aligner_gamma", ()),
        ("aligner_beta", ()),
        ("cls_w", (e,)),
        ("cls_b", ()),
    ]


def _offsets(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    out = {}
    pos = 0
    for name, shape in field_layout(cfg):
        size = int(np.prod(shape)) if shape else 1
        out[name] = (pos, size)
        pos += size
    return out


def n_params(cfg: ModelConfig) -> int:
    return sum(length for _, length in _offsets(cfg).values())


class ModelParams:
    """Flat parameter vector with named views (views share the vector's memory)."""

    def __init__(self, config: ModelConfig, vec: np.ndarray | None = None):
        self.config = config
        total = n_params(config)
        if vec is None:
            vec = np.zeros(total, dtype=np.float64)
        vec = np.ascontiguousarray(vec, dtype=np.float64)
        if vec.shape != (total,):
            raise DimensionError(f"params vector {vec.shape} vs expected ({total},)")
        self.vec = vec
        self._offsets = _offsets(config)

    def view(self, name: str) -> np.ndarray:
        off, length = self._offsets[name]
        shape = dict(field_layout(self.config))[name]
        sl = self.vec[off:off + length]
        return sl.reshape(shape) if shape else sl

    def scalar(self, name: str) -> float:
        return float(self.view(name)[0])

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.vec.copy())

    def __eq__(self, other):
        return (isinstance(other, ModelParams)
                and self.config == other.config
                and np.array_equal(self.vec, other.vec))


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Seeded uniform init, zero-mean with half-width 1/sqrt(fan_in) per weight
    field; biases zero; aligner head at identity-ish (gamma=1, beta=0)."""
    rng = np.random.default_rng(seed)
    params = ModelParams(config)
    p2 = config.patch_size ** 2
    e = config.embed_dim
    fan_in = {"patch_proj": p2, "class_embed": e, "q_proj": e, "k_proj": e, "cls_w": e}
    for name, fi in fan_in.items():
        v = params.view(name)
        a = 1.0 / np.sqrt(fi)
        v[...] = rng.uniform(-a, a, size=v.shape)
    params.view("aligner_gamma")[0] = 1.0
    params.view("aligner_beta")[0] = 0.0
    return params


@dataclass
class Prediction:
    raw_attention: np.ndarray      # (grid, grid), nonnegative, sums to 1
    aligned_map: np.ndarray        # (grid, grid), entries in [0, 1]
    logit: float
    prob: float
    cache: object = field(default=None, repr=False)


def _check_image(cfg: ModelConfig, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"image {image.shape} vs expected {(cfg.image_size, cfg.image_size)}"
        )
    return image


def forward(params: ModelParams, image: np.ndarray, class_id: int,
            keep_cache: bool = False, backend=None) -> Prediction:
    """Run the model for one image and one class."""
    cfg = params.config
    image = _check_image(cfg, image)
    if not 0 <= class_id < cfg.num_classes:
        raise ConfigError(f"class_id {class_id} out of range [0, {cfg.num_classes})")
    logits, attn, aligned, cache = forward_batch(params, image[None], class_id, backend)
    g = cfg.grid_side
    return Prediction(
        raw_attention=attn[0].reshape(g, g).copy(),
        aligned_map=aligned[0].reshape(g, g).copy(),
        logit=float(logits[0]),
        prob=float(1.0 / (1.0 + np.exp(-logits[0]))) if logits[0] >= 0
        else float(np.exp(logits[0]) / (1.0 + np.exp(logits[0]))),
        cache=cache if keep_cache else None,
    )


def backward(params: ModelParams, class_id: int, prediction: Prediction,
             d_aligned: np.ndarray, d_logit: float, backend=None) -> np.ndarray:
    """Gradients of a scalar loss w.r.t. every parameter, as a flat vector
    aligned with params.vec. Requires forward(..., keep_cache=True)."""
    if prediction.cache is None:
        raise UsageError("backward needs a Prediction from forward(..., keep_cache=True)")
    cfg = params.config
    d_aligned = np.asarray(d_aligned, dtype=np.float64)
    if d_aligned.shape != (cfg.grid_side, cfg.grid_side):
        raise DimensionError(
            f"d_aligned {d_aligned.shape} vs grid {(cfg.grid_side, cfg.grid_side)}"
        )
    grad = np.zeros_like(params.vec)
    accumulate_backward(grad, params, class_id, prediction.cache,
                        np.array([d_logit]), d_aligned.reshape(1, -1), backend)
    return grad


def forward_batch(params: ModelParams, images: np.ndarray, class_id: int, backend=None):
    """Batch forward via the selected kernel backend.

    Returns (logits (B,), attn (B,N), aligned (B,N), cache).
    """
    k = backend or _default_kernels
    cfg = params.config
    return k.forward_batch(
        images, cfg.patch_size,
        params.view("patch_proj"), params.view("patch_bias"),
        np.ascontiguousarray(params.view("class_embed")[class_id]),
        params.view("q_proj"), params.view("k_proj"),
        params.scalar("aligner_gamma"), params.scalar("aligner_beta"),
        params.view("cls_w"), params.scalar("cls_b"),
    )


def accumulate_backward(grad_vec: np.ndarray, params: ModelParams, class_id: int,
                        cache, d_logit: np.ndarray, d_aligned: np.ndarray,
                        backend=None) -> None:
    """Add batch gradients into a flat gradient vector aligned with params.vec."""
    k = backend or _default_kernels
    (d_wp, d_bp, d_t, d_qp, d_kp, d_gamma, d_beta, d_w, d_b) = k.backward_batch(
        cache, np.ascontiguousarray(d_logit, dtype=np.float64),
        np.ascontiguousarray(d_aligned, dtype=np.float64))
    g = ModelParams(params.config, grad_vec)  # view wrapper, shares memory
    g.view("patch_proj")[...] += d_wp
    g.view("patch_bias")[...] += d_bp
    g.view("class_embed")[class_id] += d_t
    g.view("q_proj")[...] += d_qp
    g.view("k_proj")[...] += d_kp
    g.view("aligner_gamma")[0] += d_gamma
    g.view("aligner_beta")[0] += d_beta
    g.view("cls_w")[...] += d_w
    g.view("cls_b")[0] += d_b


def save_checkpoint(params: ModelParams, path) -> None:
    """One-line JSON header (config + field offsets/lengths in float64 units),
    newline, then the flat little-endian float64 parameter payload."""
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "fields": {name: {"offset": off, "length": length}
                   for name, (off, length) in _offsets(params.config).items()},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(params.vec.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as exc:
        raise DataFormatError(f"checkpoint not found: {path}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataFormatError("checkpoint: missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"checkpoint: malformed JSON header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"checkpoint: unsupported version {header.get('version')!r}")
    try:
        cfg = ModelConfig(**header["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise DataFormatError(f"checkpoint: bad config in header: {exc}") from exc
    payload = raw[nl + 1:]
    expected = n_params(cfg) * 8
    if len(payload) != expected:
        raise DataFormatError(
            f"checkpoint: payload is {len(payload)} bytes at offset {nl + 1}, expected {expected}"
        )
    vec = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return ModelParams(cfg, vec)
