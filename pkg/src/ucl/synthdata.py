"""Procedural colored-shape scenes, captions and the mixed-batch sampler.

Classes are the 16 (color, shape) combinations. A training split withholds a
configurable subset of combinations entirely (no classification records, no
captions about them); the evaluation split covers all of them, which is what
makes zero-shot measurements on the withheld classes meaningful.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError
from .losses import MixedBatch
from .textbank import ClassEntry, Vocabulary, tokenize_batch, validate_catalogue

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle", "cross")
SIZES = ("small", "large")
BACKGROUNDS = ("dark", "gray", "light")

RGB = {
    "red": (0.9, 0.15, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
BACKGROUND_LEVEL = {"dark": 0.1, "gray": 0.45, "light": 0.8}
SIZE_RADIUS = {"small": 0.12, "large": 0.2}  # fraction of image size
NOISE_STD = 0.04

# 3x3 grid, row-major
CELL_PHRASES = (
    "in the top left", "at the top", "in the top right",
    "on the left", "in the center", "on the right",
    "in the bottom left", "at the bottom", "in the bottom right",
)

SHAPE_GLOSS = {
    "square": "a four-sided regular polygon",
    "circle": "a round shape with a constant radius",
    "triangle": "a three-sided polygon pointing up",
    "cross": "two perpendicular bars crossing at the middle",
}

DISTRACTORS = ("nice", "vintage", "stock", "hd", "cool", "simple", "today", "free")

CAPTION_TEMPLATES = (
    "a {size} {color} {shape} {pos} on a {bg} background",
    "a picture showing a {size} {color} {shape} {pos}, {bg} background",
    "{pos} there is a {size} {color} {shape} on a {bg} background",
    "photo of a {color} {shape}, {size}, {pos}, {bg} background",
)

DEFAULT_HELD_OUT = (("red", "circle"), ("green", "triangle"), ("blue", "cross"), ("yellow", "square"))
DUPLICATE_NAME = "jack"


def combo_id(color: str, shape: str) -> int:
    return COLORS.index(color) * len(SHAPES) + SHAPES.index(shape)


def combo_of(class_id: int) -> tuple[str, str]:
    return COLORS[class_id // len(SHAPES)], SHAPES[class_id % len(SHAPES)]


def base_name(class_id: int) -> str:
    return " ".join(combo_of(class_id))


def base_description(class_id: int) -> str:
    color, shape = combo_of(class_id)
    return f"{SHAPE_GLOSS[shape]} colored {color}"


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    size: str
    cell: int
    background: str
    noise_seed: int

    def __post_init__(self):
        if (self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES
                or self.background not in BACKGROUNDS or not 0 <= self.cell < 9):
            raise ConfigError(f"invalid scene spec {self}")

    @property
    def class_id(self) -> int:
        return combo_id(self.color, self.shape)

    @property
    def content(self) -> tuple:
        return (self.shape, self.color, self.size, self.cell, self.background)


def random_spec(rng: np.random.Generator, class_id: int) -> SceneSpec:
    color, shape = combo_of(class_id)
    return SceneSpec(
        shape=shape,
        color=color,
        size=SIZES[rng.integers(len(SIZES))],
        cell=int(rng.integers(9)),
        background=BACKGROUNDS[rng.integers(len(BACKGROUNDS))],
        noise_seed=int(rng.integers(2**31)),
    )


def scene_mask(spec: SceneSpec, image_size: int) -> np.ndarray:
    """Boolean foreground mask (S x S) of the shape."""
    S = image_size
    r = SIZE_RADIUS[spec.size] * S
    row, col = divmod(spec.cell, 3)
    cy, cx = (row + 0.5) * S / 3, (col + 0.5) * S / 3
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    dy, dx = yy - cy, xx - cx
    if spec.shape == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if spec.shape == "circle":
        return dx * dx + dy * dy <= r * r
    if spec.shape == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    bar = r / 3
    return ((np.abs(dx) <= bar) & (np.abs(dy) <= r)) | ((np.abs(dy) <= bar) & (np.abs(dx) <= r))


def render_scene(spec: SceneSpec, image_size: int = 32) -> np.ndarray:
    """Rasterize to a 3 x S x S float image in [0, 1]; deterministic in ``spec``."""
    S = image_size
    img = np.full((3, S, S), BACKGROUND_LEVEL[spec.background])
    mask = scene_mask(spec, S)
    for c, v in enumerate(RGB[spec.color]):
        img[c][mask] = v
    noise = np.random.default_rng(spec.noise_seed).normal(0.0, NOISE_STD, size=img.shape)
    return np.clip(img + noise, 0.0, 1.0)


def render_many(specs: Sequence[SceneSpec], image_size: int) -> np.ndarray:
    threads = max(1, int(os.environ.get("UCL_THREADS", "1") or 1))
    if not specs:
        return np.zeros((0, 3, image_size, image_size))
    if threads == 1:
        images = [render_scene(s, image_size) for s in specs]
    else:
        with ThreadPoolExecutor(threads) as pool:
            images = list(pool.map(lambda s: render_scene(s, image_size), specs))
    return np.stack(images)


def caption_scene(spec: SceneSpec, rng: np.random.Generator, distractor_rate: float = 0.2) -> str:
    template = CAPTION_TEMPLATES[rng.integers(len(CAPTION_TEMPLATES))]
    text = template.format(
        size=spec.size, color=spec.color, shape=spec.shape,
        pos=CELL_PHRASES[spec.cell], bg=spec.background,
    )
    if rng.random() < distractor_rate:
        tokens = text.split(" ")
        at = int(rng.integers(len(tokens) + 1))
        tokens.insert(at, DISTRACTORS[rng.integers(len(DISTRACTORS))])
        text = " ".join(tokens)
    return text


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6, 8 bits per channel."""
    _, S, W = image.shape
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {S}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class DataConfig:
    train_per_class: int = 50
    eval_per_class: int = 20
    align_pairs: int = 800
    eval_align_pairs: int = 64
    held_out: tuple[tuple[str, str], ...] = DEFAULT_HELD_OUT
    duplicate_names: bool = False
    distractor_rate: float = 0.2
    image_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        held = set(self.held_out)
        for color, shape in held:
            if color not in COLORS or shape not in SHAPES:
                raise ConfigError(f"unknown held-out combination {(color, shape)}")
        if len(held) >= len(COLORS) * len(SHAPES):
            raise ConfigError("held-out set must leave at least one training class")
        if min(self.train_per_class, self.eval_per_class, self.align_pairs, self.eval_align_pairs) < 0:
            raise ConfigError("record counts must be non-negative")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ConfigError("distractor_rate must lie in [0, 1]")
        if self.image_size < 3:
            raise ConfigError("image_size too small")


@dataclass
class DatasetSplit:
    """Records of one split.

    ``catalogue`` is indexed locally (0..N-1); ``class_ids[i]`` gives the
    global (color, shape) id of local class ``i``. Classification labels are
    local indices. ``held_out_class_ids`` are global ids.
    """

    cls_specs: list[SceneSpec]
    cls_labels: np.ndarray
    align_specs: list[SceneSpec]
    captions: list[str]
    catalogue: tuple[ClassEntry, ...]
    class_ids: tuple[int, ...]
    held_out_class_ids: tuple[int, ...]
    image_size: int = 32
    _token_cache: dict = field(default_factory=dict, repr=False)

    @cached_property
    def cls_images(self) -> np.ndarray:
        return render_many(self.cls_specs, self.image_size)

    @cached_property
    def align_images(self) -> np.ndarray:
        return render_many(self.align_specs, self.image_size)

    def caption_tokens(self, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
        key = (vocab.tokens, vocab.max_len)
        if key not in self._token_cache:
            self._token_cache[key] = tokenize_batch(self.captions, vocab)
        return self._token_cache[key]

    def local_index(self, class_id: int) -> int:
        return self.class_ids.index(class_id)

    def with_alignment(self, specs: Sequence[SceneSpec], captions: Sequence[str]) -> "DatasetSplit":
        """Copy of this split whose alignment side is replaced (caches are not shared)."""
        if len(specs) != len(captions):
            raise ConfigError("alignment specs and captions differ in length")
        return DatasetSplit(
            self.cls_specs, self.cls_labels, list(specs), list(captions), self.catalogue,
            self.class_ids, self.held_out_class_ids, self.image_size,
        )


def _catalogue(class_ids: Sequence[int], renamed: set[int]) -> tuple[ClassEntry, ...]:
    return validate_catalogue([
        ClassEntry(i, DUPLICATE_NAME if cid in renamed else base_name(cid), base_description(cid))
        for i, cid in enumerate(class_ids)
    ])


def duplicate_pair(seen: Sequence[int]) -> tuple[int, int]:
    """First seen class and the first later seen class differing from it in both color and shape."""
    a = seen[0]
    ca, sa = combo_of(a)
    for b in seen[1:]:
        cb, sb = combo_of(b)
        if ca != cb and sa != sb:
            return a, b
    raise ConfigError("no visually distinct seen pair available for duplicate-name injection")


def build_splits(cfg: DataConfig) -> tuple[DatasetSplit, DatasetSplit]:
    cfg.validate()
    n_combos = len(COLORS) * len(SHAPES)
    held = tuple(sorted({combo_id(c, s) for c, s in cfg.held_out}))
    seen = tuple(i for i in range(n_combos) if i not in held)
    renamed = set(duplicate_pair(seen)) if cfg.duplicate_names else set()
    rng = np.random.default_rng(cfg.seed)

    train_specs, train_labels = [], []
    for local, cid in enumerate(seen):
        for _ in range(cfg.train_per_class):
            train_specs.append(random_spec(rng, cid))
            train_labels.append(local)
    align_specs, captions = [], []
    for _ in range(cfg.align_pairs):
        spec = random_spec(rng, seen[rng.integers(len(seen))])
        align_specs.append(spec)
        captions.append(caption_scene(spec, rng, cfg.distractor_rate))
    train = DatasetSplit(
        train_specs, np.array(train_labels, dtype=np.int64), align_specs, captions,
        _catalogue(seen, renamed), seen, held, cfg.image_size,
    )

    everything = tuple(range(n_combos))
    eval_specs, eval_labels = [], []
    for cid in everything:
        for _ in range(cfg.eval_per_class):
            eval_specs.append(random_spec(rng, cid))
            eval_labels.append(cid)
    # retrieval pairs: distinct visual content so every caption has a unique mate
    eval_align, eval_captions, used = [], [], set()
    limit = n_combos * len(SIZES) * 9 * len(BACKGROUNDS)
    if cfg.eval_align_pairs > limit:
        raise ConfigError(f"at most {limit} content-distinct retrieval pairs exist")
    while len(eval_align) < cfg.eval_align_pairs:
        spec = random_spec(rng, int(rng.integers(n_combos)))
        if spec.content in used:
            continue
        used.add(spec.content)
        eval_align.append(spec)
        eval_captions.append(caption_scene(spec, rng, cfg.distractor_rate))
    evaluation = DatasetSplit(
        eval_specs, np.array(eval_labels, dtype=np.int64), eval_align, eval_captions,
        _catalogue(everything, renamed), everything, held, cfg.image_size,
    )
    return train, evaluation


def mixed_batches(
    split: DatasetSplit,
    batch_size: int,
    ratio: tuple[int, int],
    seed: int,
    vocab: Vocabulary,
) -> Iterator[MixedBatch]:
    """Endless, seed-determined stream of mixed batches.

    Each side keeps its own epoch clock: records are drawn without replacement
    from a fresh permutation, and a side reshuffles when it runs out.
    """
    a, b = ratio
    if a < 0 or b < 0 or a + b == 0:
        raise ConfigError(f"invalid ratio {ratio}")
    if batch_size % (a + b):
        raise ConfigError(f"ratio {a}:{b} does not divide batch size {batch_size}")
    n_cls = batch_size // (a + b) * a
    n_align = batch_size - n_cls
    if n_cls and len(split.cls_specs) == 0:
        raise ConfigError("classification side requested but split has no classification records")
    if n_align and len(split.align_specs) == 0:
        raise ConfigError("alignment side requested but split has no alignment records")

    cls_rng, align_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    cls_stream = _epoch_stream(len(split.cls_specs), cls_rng) if n_cls else None
    align_stream = _epoch_stream(len(split.align_specs), align_rng) if n_align else None
    ids_all, mask_all = split.caption_tokens(vocab) if n_align else (None, None)
    S = split.image_size
    empty_img = np.zeros((0, 3, S, S))
    empty_tok = np.zeros((0, vocab.max_len), dtype=np.int64)

    while True:
        ci = np.array([next(cls_stream) for _ in range(n_cls)], dtype=np.int64)
        ai = np.array([next(align_stream) for _ in range(n_align)], dtype=np.int64)
        yield MixedBatch(
            cls_images=split.cls_images[ci] if n_cls else empty_img,
            cls_labels=split.cls_labels[ci] if n_cls else np.zeros(0, dtype=np.int64),
            align_images=split.align_images[ai] if n_align else empty_img,
            align_ids=ids_all[ai] if n_align else empty_tok,
            align_mask=mask_all[ai] if n_align else empty_tok.astype(bool),
            cls_record_ids=ci,
            align_record_ids=ai,
        )


def _epoch_stream(n: int, rng: np.random.Generator) -> Iterator[int]:
    while True:
        yield from (int(i) for i in rng.permutation(n))
