"""Tiny pre-norm transformer encoders for images and token sequences.

Both encoders end in a bias-free linear projection into a shared space of
width ``out_dim``. Outputs are *not* L2-normalized here; the losses and the
evaluation harnesses normalize where cosine similarity is needed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorgrad as tg
from .errors import ConfigError, ShapeError, VocabularyError
from .tensorgrad import Tensor

INIT_STD = 0.02
MASK_FILL = -1e9
MLP_RATIO = 4
POOLINGS = ("mean", "first")


@dataclass(frozen=True)
class VisualEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 64
    depth: int = 2
    heads: int = 4
    out_dim: int = 64

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if v < (0 if k == "depth" else 1):
                raise ConfigError(f"visual.{k} must be positive, got {v}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.width % self.heads:
            raise ConfigError("visual width must be divisible by heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int = 64
    max_len: int = 32
    width: int = 64
    depth: int = 2
    heads: int = 4
    out_dim: int = 64
    pooling: str = "mean"

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if k != "pooling" and v < (0 if k == "depth" else 1):
                raise ConfigError(f"text.{k} must be positive, got {v}")
        if self.width % self.heads:
            raise ConfigError("text width must be divisible by heads")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"text pooling must be one of {POOLINGS}")


@dataclass
class EncoderPair:
    """Visual and text encoder parameters sharing one embedding width.

    ``params`` is an ordered name -> Tensor mapping; names are prefixed with
    ``visual.`` or ``text.``. Training code may add extra entries (a private
    classification head, a learnable temperature) under other prefixes.
    """

    visual: VisualEncoderConfig
    text: TextEncoderConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def out_dim(self) -> int:
        return self.visual.out_dim

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def num_parameters(self, prefix: str | None = None) -> int:
        items = self.params.items() if prefix is None else self.group(prefix).items()
        return int(np.sum([t.data.size for _, t in items], dtype=np.int64))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]


def _block_shapes(prefix: str, width: int) -> list[tuple[str, tuple[int, ...], str]]:
    hidden = MLP_RATIO * width
    return [
        (f"{prefix}.ln1.g", (width,), "one"),
        (f"{prefix}.ln1.b", (width,), "zero"),
        (f"{prefix}.attn.qkv.w", (width, 3 * width), "normal"),
        (f"{prefix}.attn.out.w", (width, width), "normal"),
        (f"{prefix}.attn.out.b", (width,), "zero"),
        (f"{prefix}.ln2.g", (width,), "one"),
        (f"{prefix}.ln2.b", (width,), "zero"),
        (f"{prefix}.mlp.fc.w", (width, hidden), "normal"),
        (f"{prefix}.mlp.fc.b", (hidden,), "zero"),
        (f"{prefix}.mlp.proj.w", (hidden, width), "normal"),
        (f"{prefix}.mlp.proj.b", (width,), "zero"),
    ]


def parameter_layout(vcfg: VisualEncoderConfig, tcfg: TextEncoderConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every encoder parameter, in canonical order."""
    p = vcfg.patch_size
    layout = [
        ("visual.patch.w", (3 * p * p, vcfg.width), "normal"),
        ("visual.patch.b", (vcfg.width,), "zero"),
        ("visual.pos", (vcfg.num_patches, vcfg.width), "normal"),
    ]
    for i in range(vcfg.depth):
        layout += _block_shapes(f"visual.block{i}", vcfg.width)
    layout += [
        ("visual.ln_f.g", (vcfg.width,), "one"),
        ("visual.ln_f.b", (vcfg.width,), "zero"),
        ("visual.proj.w", (vcfg.width, vcfg.out_dim), "normal"),
        ("text.tok", (tcfg.vocab_size, tcfg.width), "normal"),
        ("text.pos", (tcfg.max_len, tcfg.width), "normal"),
    ]
    for i in range(tcfg.depth):
        layout += _block_shapes(f"text.block{i}", tcfg.width)
    layout += [
        ("text.ln_f.g", (tcfg.width,), "one"),
        ("text.ln_f.b", (tcfg.width,), "zero"),
        ("text.proj.w", (tcfg.width, tcfg.out_dim), "normal"),
    ]
    return layout


def init_parameters(vcfg: VisualEncoderConfig, tcfg: TextEncoderConfig, seed: int) -> EncoderPair:
    vcfg.validate()
    tcfg.validate()
    if vcfg.out_dim != tcfg.out_dim:
        raise ConfigError(f"encoders disagree on out_dim ({vcfg.out_dim} vs {tcfg.out_dim})")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, kind in parameter_layout(vcfg, tcfg):
        if kind == "normal":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return EncoderPair(vcfg, tcfg, params)


# ---------------------------------------------------------------------------
# transformer pieces


def _attention(x: Tensor, P: dict[str, Tensor], prefix: str, heads: int, key_mask: np.ndarray | None) -> Tensor:
    B, T, W = x.shape
    d = W // heads
    qkv = tg.matmul(x, P[f"{prefix}.attn.qkv.w"])
    qkv = tg.transpose(tg.reshape(qkv, (B, T, 3, heads, d)), (2, 0, 3, 1, 4))
    qkv = tg.reshape(qkv, (3 * B, heads, T, d))
    q, k, v = (tg.slice_rows(qkv, i * B, (i + 1) * B) for i in range(3))
    scores = tg.scale(tg.matmul(q, tg.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if key_mask is not None:
        fill = np.where(key_mask, 0.0, MASK_FILL)[:, None, None, :]
        scores = tg.add(scores, Tensor._wrap(np.broadcast_to(fill, scores.shape)))
    attn = tg.softmax_rows(scores)
    ctx = tg.matmul(attn, v)
    ctx = tg.reshape(tg.transpose(ctx, (0, 2, 1, 3)), (B, T, W))
    return tg.add(tg.matmul(ctx, P[f"{prefix}.attn.out.w"]), P[f"{prefix}.attn.out.b"])


def _block(x: Tensor, P: dict[str, Tensor], prefix: str, heads: int, key_mask: np.ndarray | None) -> Tensor:
    h = tg.layer_norm_rows(x, P[f"{prefix}.ln1.g"], P[f"{prefix}.ln1.b"])
    x = tg.add(x, _attention(h, P, prefix, heads, key_mask))
    h = tg.layer_norm_rows(x, P[f"{prefix}.ln2.g"], P[f"{prefix}.ln2.b"])
    h = tg.gelu(tg.add(tg.matmul(h, P[f"{prefix}.mlp.fc.w"]), P[f"{prefix}.mlp.fc.b"]))
    h = tg.add(tg.matmul(h, P[f"{prefix}.mlp.proj.w"]), P[f"{prefix}.mlp.proj.b"])
    return tg.add(x, h)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """B x 3 x S x S  ->  B x P x (3*patch*patch), patches in row-major grid order."""
    B, C, S, _ = images.shape
    g = S // patch
    x = images.reshape(B, C, g, patch, g, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, C * patch * patch)


def _check_images(pair: EncoderPair, images) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    S = pair.visual.image_size
    if images.ndim != 4 or images.shape[1:] != (3, S, S):
        raise ShapeError(f"expected images of shape (B, 3, {S}, {S}), got {images.shape}")
    return images


def _visual_tokens(pair: EncoderPair, images: np.ndarray) -> Tensor:
    P, cfg = pair.params, pair.visual
    x = Tensor._wrap(patchify(images, cfg.patch_size))
    x = tg.add(tg.add(tg.matmul(x, P["visual.patch.w"]), P["visual.patch.b"]), _tile(P["visual.pos"], len(images)))
    for i in range(cfg.depth):
        x = _block(x, P, f"visual.block{i}", cfg.heads, None)
    return tg.layer_norm_rows(x, P["visual.ln_f.g"], P["visual.ln_f.b"])


def _tile(pos: Tensor, batch: int) -> Tensor:
    return tg.repeat_batch(pos, batch)


def encode_images(pair: EncoderPair, images) -> Tensor:
    images = _check_images(pair, images)
    if len(images) == 0:
        return Tensor(np.zeros((0, pair.out_dim)))
    tokens = _visual_tokens(pair, images)
    pooled = tg.mean(tokens, axis=1)
    return tg.matmul(pooled, pair.params["visual.proj.w"])


def encode_feature_map(pair: EncoderPair, images) -> Tensor:
    """Per-patch embeddings, B x P x out_dim, projected with the pooled path's matrix."""
    images = _check_images(pair, images)
    if len(images) == 0:
        return Tensor(np.zeros((0, pair.visual.num_patches, pair.out_dim)))
    tokens = _visual_tokens(pair, images)
    return tg.matmul(tokens, pair.params["visual.proj.w"])


def encode_texts(pair: EncoderPair, ids, mask) -> Tensor:
    cfg = pair.text
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or ids.shape[1] != cfg.max_len or mask.shape != ids.shape:
        raise ShapeError(f"expected token ids and mask of shape (B, {cfg.max_len}), got {ids.shape} / {mask.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabularyError(f"token id outside vocabulary of size {cfg.vocab_size}")
    B, T = ids.shape
    if B == 0:
        return Tensor(np.zeros((0, pair.out_dim)))
    if not mask[:, 0].all():
        raise ShapeError("every token row needs at least its first position unmasked")
    if (mask[:, 1:] & ~mask[:, :-1]).any():
        raise ShapeError("token masks must be a run of real positions followed by padding")
    # positions past the longest real sequence are fully masked; dropping them leaves outputs unchanged
    T = int(mask.sum(axis=1).max())
    ids, mask = ids[:, :T], mask[:, :T]
    P = pair.params
    pos = P["text.pos"] if T == cfg.max_len else tg.slice_rows(P["text.pos"], 0, T)
    x = tg.add(tg.gather_rows(P["text.tok"], ids), _tile(pos, B))
    for i in range(cfg.depth):
        x = _block(x, P, f"text.block{i}", cfg.heads, mask)
    x = tg.layer_norm_rows(x, P["text.ln_f.g"], P["text.ln_f.b"])
    if cfg.pooling == "first":
        pooled = tg.gather_rows(tg.reshape(x, (B * T, cfg.width)), np.arange(B) * T)
    else:
        weights = mask / mask.sum(axis=1, keepdims=True)
        pooled = tg.reshape(tg.matmul(Tensor._wrap(weights[:, None, :]), x), (B, cfg.width))
    return tg.matmul(pooled, P["text.proj.w"])
