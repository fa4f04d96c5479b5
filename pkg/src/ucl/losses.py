"""Classification, alignment and unified contrastive losses.

All losses return a 0-d :class:`Tensor` and are differentiable through the
tape. Temperatures may be a python float (fixed) or a :class:`Temperature`
whose log-value is a trainable parameter.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensorgrad as tg
from .encoders import EncoderPair, encode_images, encode_texts
from .errors import ContractError, ShapeError
from .tensorgrad import Tensor

DEFAULT_TAU = 0.05
TAU_MIN, TAU_MAX = 0.005, 1.0
MODES = ("deep_fusion", "split_head")


@dataclass
class Temperature:
    value: float = DEFAULT_TAU
    learnable: bool = False
    log_tau: Tensor | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.value > 0:
            raise ContractError(f"temperature must be positive, got {self.value}")
        if self.learnable and self.log_tau is None:
            self.log_tau = Tensor(math.log(self.value), requires_grad=True)

    @property
    def tau(self) -> float:
        if self.learnable:
            return math.exp(float(self.log_tau.data))
        return self.value

    def clamp(self) -> None:
        if self.learnable:
            self.log_tau.data = np.clip(self.log_tau.data, math.log(TAU_MIN), math.log(TAU_MAX))


def _apply_tau(logits: Tensor, tau) -> Tensor:
    if isinstance(tau, Temperature):
        if tau.learnable:
            return tg.mul(logits, tg.exp(tg.scale(tau.log_tau, -1.0)))
        tau = tau.value
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return tg.scale(logits, 1.0 / tau)


def _check_labels(labels, batch: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"label out of range for {n_classes} classes")
    return labels


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]."""
    if logits.shape[0] == 0:
        raise ContractError("cross_entropy on an empty batch")
    return tg.scale(tg.sum(tg.pick(tg.log_softmax_rows(logits), targets)), -1.0 / logits.shape[0])


def linear_ce_loss(features: Tensor, W: Tensor, labels) -> Tensor:
    """Cross-entropy on raw inner-product logits ``features @ W.T``."""
    if features.shape[1] != W.shape[1]:
        raise ShapeError(f"feature width {features.shape[1]} != classifier width {W.shape[1]}")
    labels = _check_labels(labels, features.shape[0], W.shape[0])
    return cross_entropy(tg.matmul(features, tg.transpose(W)), labels)


def cosine_logits(a: Tensor, b: Tensor, tau) -> Tensor:
    """``cos(a_i, b_j) / tau`` for every row pair."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding widths differ: {a.shape[1]} vs {b.shape[1]}")
    sims = tg.matmul(tg.l2_normalize_rows(a), tg.transpose(tg.l2_normalize_rows(b)))
    return _apply_tau(sims, tau)


def cosine_ce_loss(features: Tensor, W: Tensor, labels, tau=DEFAULT_TAU) -> Tensor:
    labels = _check_labels(labels, features.shape[0], W.shape[0])
    return cross_entropy(cosine_logits(features, W, tau), labels)


def infonce_loss(img_emb: Tensor, txt_emb: Tensor, tau=DEFAULT_TAU, symmetric: bool = False) -> Tensor:
    """Image-anchored InfoNCE over in-batch captions; row i of each side is a positive pair."""
    if img_emb.shape != txt_emb.shape:
        raise ShapeError(f"image/text batches differ: {img_emb.shape} vs {txt_emb.shape}")
    B = img_emb.shape[0]
    if B < 1:
        raise ContractError("infonce_loss needs at least one pair")
    logits = cosine_logits(img_emb, txt_emb, tau)
    diag = np.arange(B)
    loss = cross_entropy(logits, diag)
    if symmetric:
        loss = tg.scale(tg.add(loss, cross_entropy(tg.transpose(logits), diag)), 0.5)
    return loss


TextEncoderFn = Callable[[EncoderPair, np.ndarray, np.ndarray], Tensor]


def meta_classifier_loss(
    pair: EncoderPair,
    img_emb: Tensor,
    label_tokens: tuple[np.ndarray, np.ndarray],
    labels,
    tau=DEFAULT_TAU,
    n_classes: int | None = None,
    text_encoder: TextEncoderFn = encode_texts,
) -> Tensor:
    """Cosine classification loss with class weights generated by the text encoder.

    ``label_tokens`` holds one tokenized label per class, in index order.
    ``text_encoder`` can be swapped for a stub to isolate the classifier.
    """
    ids, mask = label_tokens
    if n_classes is not None and len(ids) != n_classes:
        raise ContractError(f"label tokens cover {len(ids)} classes, expected {n_classes}")
    class_weights = text_encoder(pair, ids, mask)
    return cosine_ce_loss(img_emb, class_weights, labels, tau)


@dataclass
class MixedBatch:
    """Classification samples (image, class index) plus alignment samples (image, caption tokens)."""

    cls_images: np.ndarray
    cls_labels: np.ndarray
    align_images: np.ndarray
    align_ids: np.ndarray
    align_mask: np.ndarray
    cls_record_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    align_record_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_cls(self) -> int:
        return len(self.cls_labels)

    @property
    def n_align(self) -> int:
        return len(self.align_ids)


@dataclass
class LossOutput:
    total: Tensor
    cls_loss: Tensor | None
    align_loss: Tensor | None

    def components(self) -> dict[str, float | None]:
        return {
            "total": self.total.item(),
            "cls_loss": None if self.cls_loss is None else self.cls_loss.item(),
            "align_loss": None if self.align_loss is None else self.align_loss.item(),
        }


def unified_loss(
    pair: EncoderPair,
    batch: MixedBatch,
    label_tokens: tuple[np.ndarray, np.ndarray],
    tau=DEFAULT_TAU,
    mode: str = "deep_fusion",
    head: Tensor | None = None,
    symmetric: bool = False,
) -> LossOutput:
    """Mixed-batch objective.

    deep_fusion: classification samples are scored against text-encoded class
    labels (all classes), alignment samples against in-batch captions.
    split_head: classification samples use a private linear head ``head``.

    The total is the sample-weighted mean of the two sides; with one side
    empty it is that side's loss tensor itself.
    """
    if mode not in MODES:
        raise ContractError(f"unknown loss mode {mode!r}")
    nc, na = batch.n_cls, batch.n_align
    if nc == 0 and na == 0:
        raise ContractError("unified_loss on an empty batch")
    if mode == "split_head" and nc and head is None:
        raise ContractError("split_head mode needs a classification head")

    images = batch.cls_images if na == 0 else (
        batch.align_images if nc == 0 else np.concatenate([batch.cls_images, batch.align_images])
    )
    emb = encode_images(pair, images)

    # one text-encoder pass over class labels and captions together
    texts = None
    n_labels = len(label_tokens[0]) if (nc and mode == "deep_fusion") else 0
    if n_labels and na:
        texts = encode_texts(
            pair,
            np.concatenate([label_tokens[0], batch.align_ids]),
            np.concatenate([label_tokens[1], batch.align_mask]),
        )
    elif na:
        texts = encode_texts(pair, batch.align_ids, batch.align_mask)

    cls_loss = align_loss = None
    if nc:
        v = emb if na == 0 else tg.slice_rows(emb, 0, nc)
        if mode == "deep_fusion":
            if texts is None:
                cls_loss = meta_classifier_loss(pair, v, label_tokens, batch.cls_labels, tau)
            else:
                cls_loss = cosine_ce_loss(v, tg.slice_rows(texts, 0, n_labels), batch.cls_labels, tau)
        else:
            cls_loss = linear_ce_loss(v, head, batch.cls_labels)
    if na:
        v = emb if nc == 0 else tg.slice_rows(emb, nc, nc + na)
        s = texts if n_labels == 0 else tg.slice_rows(texts, n_labels, n_labels + na)
        align_loss = infonce_loss(v, s, tau, symmetric)

    if cls_loss is None:
        total = align_loss
    elif align_loss is None:
        total = cls_loss
    else:
        total = tg.add(tg.scale(cls_loss, nc / (nc + na)), tg.scale(align_loss, na / (nc + na)))
    return LossOutput(total, cls_loss, align_loss)
