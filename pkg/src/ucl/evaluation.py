"""Zero-shot / few-shot classification, retrieval and dense point-wise evaluation.

Every harness scores by cosine similarity and breaks ties toward the lowest
index (numpy's argmax / stable-sort behaviour), so results are deterministic.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .encoders import EncoderPair, encode_feature_map, encode_images, encode_texts
from .errors import ContractError, NumericalError, ShapeError
from .losses import DEFAULT_TAU, cosine_ce_loss
from .tensorgrad import Tensor
from .textbank import ClassEntry, Vocabulary, build_prompt_ensemble, tokenize_batch
from .trainer import OptimState, adamw_step

PROVENANCES = ("text_generated", "random_init", "trained")
BACKGROUND_MODES = ("none", "text_generated", "free_trainable")
BACKGROUND_NAME = "background"
CHUNK = 64


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(norm, 1e-12)


@dataclass
class ClassifierWeights:
    """Class weight rows in the shared embedding space.

    With a background row it is the last row of ``matrix``.
    """

    matrix: np.ndarray
    provenance: str = "text_generated"
    background_row: str = "none"

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")
        if self.background_row not in BACKGROUND_MODES:
            raise ContractError(f"unknown background mode {self.background_row!r}")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_classes(self) -> int:
        return self.n_rows - (self.background_row != "none")

    def scoring_matrix(self) -> np.ndarray:
        return normalize_rows(self.matrix)

    def subset(self, rows: Sequence[int]) -> "ClassifierWeights":
        return ClassifierWeights(self.matrix[list(rows)].copy(), self.provenance, "none")


# ---------------------------------------------------------------------------
# embedding helpers (no tape)


def image_embeddings(pair: EncoderPair, images: np.ndarray) -> np.ndarray:
    out = [encode_images(pair, images[i:i + CHUNK]).data for i in range(0, len(images), CHUNK)]
    return np.concatenate(out) if out else np.zeros((0, pair.out_dim))


def text_embeddings(pair: EncoderPair, texts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    ids, mask = tokenize_batch(list(texts), vocab)
    out = [encode_texts(pair, ids[i:i + CHUNK], mask[i:i + CHUNK]).data for i in range(0, len(ids), CHUNK)]
    return np.concatenate(out) if out else np.zeros((0, pair.out_dim))


def ensemble_embedding(pair: EncoderPair, texts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    """Normalize each prompt embedding, average, renormalize."""
    emb = normalize_rows(text_embeddings(pair, texts, vocab))
    return normalize_rows(emb.mean(axis=0, keepdims=True))[0]


def build_zeroshot_classifier(
    pair: EncoderPair,
    catalogue: Sequence[ClassEntry],
    templates: Sequence[str],
    enriched: bool,
    vocab: Vocabulary,
    background: str = "none",
    seed: int = 0,
) -> ClassifierWeights:
    if not catalogue:
        raise ContractError("zero-shot classifier needs a non-empty catalogue")
    rows = []
    for entry in catalogue:
        labels = build_prompt_ensemble(entry, templates, enriched)
        rows.append(ensemble_embedding(pair, [l.text for l in labels], vocab))
    if background == "text_generated":
        bg = ClassEntry(len(catalogue), BACKGROUND_NAME, "")
        rows.append(ensemble_embedding(pair, [l.text for l in build_prompt_ensemble(bg, templates, False)], vocab))
    elif background == "free_trainable":
        rng = np.random.default_rng(seed)
        rows.append(normalize_rows(rng.normal(0.0, 0.02, size=(1, pair.out_dim)))[0])
    elif background != "none":
        raise ContractError(f"unknown background mode {background!r}")
    return ClassifierWeights(np.stack(rows), "text_generated", background)


# ---------------------------------------------------------------------------
# classification


def cosine_scores(features: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return normalize_rows(features) @ normalize_rows(matrix).T


def predict(features: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return np.argmax(cosine_scores(features, matrix), axis=1)


def classification_metrics(scores: np.ndarray, labels: np.ndarray) -> dict:
    labels = np.asarray(labels, dtype=np.int64)
    pred = np.argmax(scores, axis=1)
    out = {"top1": float(np.mean(pred == labels)) if len(labels) else 0.0}
    if scores.shape[1] >= 5 and len(labels):
        order = np.argsort(-scores, axis=1, kind="stable")[:, :5]
        out["top5"] = float(np.mean((order == labels[:, None]).any(axis=1)))
    per_class = {}
    for c in np.unique(labels):
        sel = labels == c
        per_class[int(c)] = float(np.mean(pred[sel] == c))
    out["per_class"] = per_class
    return out


def zeroshot_classify(pair: EncoderPair, weights: ClassifierWeights, images: np.ndarray, labels) -> dict:
    """Top-1 (and top-5 when there are at least 5 rows) accuracy of cosine argmax prediction."""
    if weights.n_rows < 2:
        raise ContractError("zero-shot classification needs at least two classifier rows")
    feats = image_embeddings(pair, images)
    return classification_metrics(cosine_scores(feats, weights.matrix), labels)


def sample_support(labels: np.ndarray, n_classes: int, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``k`` support indices per class; the remaining indices form the query set."""
    if k < 1:
        raise ContractError("few-shot probe needs k >= 1")
    rng = np.random.default_rng(seed)
    support = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < k:
            raise ContractError(f"class {c} has {len(idx)} examples, fewer than k={k}")
        support.extend(sorted(rng.choice(idx, size=k, replace=False)))
    support = np.array(support, dtype=np.int64)
    query = np.setdiff1d(np.arange(len(labels)), support)
    return support, query


def fewshot_probe(
    pair: EncoderPair,
    text_weights: ClassifierWeights,
    support_images: np.ndarray,
    support_labels,
    query_images: np.ndarray,
    query_labels,
    init: str = "text_generated",
    steps: int = 50,
    lr: float = 1e-3,
    tau: float = DEFAULT_TAU,
    seed: int = 0,
) -> tuple[ClassifierWeights, dict]:
    """Fine-tune only the N x H class-weight matrix with cosine cross-entropy; both encoders stay frozen."""
    support_labels = np.asarray(support_labels, dtype=np.int64)
    n = text_weights.n_classes
    missing = sorted(set(range(n)) - set(support_labels.tolist()))
    if missing:
        raise ContractError(f"support set lacks classes {missing}")
    if init == "text_generated":
        start = text_weights.matrix[:n].copy()
    elif init == "random_init":
        start = normalize_rows(np.random.default_rng(seed).normal(0.0, 0.02, size=(n, pair.out_dim)))
    else:
        raise ContractError(f"unknown init {init!r}")

    W = Tensor(start, requires_grad=True)
    feats = Tensor(image_embeddings(pair, support_images))
    state = OptimState.for_params({"W": W}, lr_base=lr, weight_decay=0.0)
    for _ in range(steps):
        W.grad = None
        with tg.Tape() as tape:
            loss = cosine_ce_loss(feats, W, support_labels, tau)
        tape.backward(loss)
        adamw_step({"W": W}, {"W": W.grad}, state, lr)

    provenance = init if steps == 0 else "trained"
    weights = ClassifierWeights(W.data.copy(), provenance)
    query_feats = image_embeddings(pair, query_images)
    return weights, classification_metrics(cosine_scores(query_feats, weights.matrix), query_labels)


# ---------------------------------------------------------------------------
# retrieval


def _ranks_of_mates(sims: np.ndarray) -> np.ndarray:
    """0-based rank of the diagonal entry within each row; ties rank the lower column first."""
    n = sims.shape[0]
    diag = sims[np.arange(n), np.arange(n)][:, None]
    cols = np.arange(n)[None, :]
    ahead = (sims > diag) | ((sims == diag) & (cols < np.arange(n)[:, None]))
    return ahead.sum(axis=1)


def retrieval_recall(img_embs: np.ndarray, txt_embs: np.ndarray, ks: Sequence[int] = (1, 5, 10)) -> dict:
    """Recall@k for image->text and text->image; pair i is (img_embs[i], txt_embs[i])."""
    img_embs = np.asarray(img_embs, dtype=np.float64)
    txt_embs = np.asarray(txt_embs, dtype=np.float64)
    if img_embs.shape != txt_embs.shape or img_embs.ndim != 2:
        raise ShapeError(f"retrieval needs equal-count embedding matrices, got {img_embs.shape} / {txt_embs.shape}")
    if len(img_embs) == 0:
        raise ContractError("retrieval over zero pairs")
    sims = cosine_scores(img_embs, txt_embs)
    i2t = _ranks_of_mates(sims)
    t2i = _ranks_of_mates(sims.T)
    out = {}
    for k in ks:
        out[f"i2t_R@{k}"] = float(np.mean(i2t < k))
        out[f"t2i_R@{k}"] = float(np.mean(t2i < k))
    return out


# ---------------------------------------------------------------------------
# dense point-wise classification


def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """dst x src bilinear weights with half-pixel centres and edge clamping."""
    R = np.zeros((dst, src))
    for y in range(dst):
        pos = min(max((y + 0.5) * src / dst - 0.5, 0.0), src - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        R[y, lo] += 1.0 - frac
        R[y, hi] += frac
    return R


def upsample_scores(scores: np.ndarray, size: int) -> np.ndarray:
    """B x g x g x C score grids -> B x C x size x size, bilinearly."""
    g = scores.shape[1]
    R = interpolation_matrix(g, size)
    grid = scores.transpose(0, 3, 1, 2)
    return R @ grid @ R.T


def mean_iou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> tuple[float, dict]:
    """Dataset-level IoU per class (classes with non-empty union), and their mean."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    per_class = {}
    for c in range(n_classes):
        p, t = pred == c, gt == c
        union = np.count_nonzero(p | t)
        if union:
            per_class[c] = np.count_nonzero(p & t) / union
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return miou, per_class


def dense_predict(pair: EncoderPair, weights: ClassifierWeights, images: np.ndarray) -> np.ndarray:
    S = pair.visual.image_size
    g = S // pair.visual.patch_size
    feats = np.concatenate([
        encode_feature_map(pair, images[i:i + CHUNK]).data for i in range(0, len(images), CHUNK)
    ]) if len(images) else np.zeros((0, g * g, pair.out_dim))
    scores = normalize_rows(feats) @ weights.scoring_matrix().T
    scores = scores.reshape(len(images), g, g, weights.n_rows)
    return np.argmax(upsample_scores(scores, S), axis=1)


def dense_zeroshot_segment(pair: EncoderPair, weights: ClassifierWeights, images: np.ndarray, masks: np.ndarray) -> dict:
    """Patch-level cosine classification, upsampled to pixels, scored by mIoU against ``masks``."""
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks)
    S = pair.visual.image_size
    if masks.shape != (len(images), S, S):
        raise ShapeError(f"masks must have shape ({len(images)}, {S}, {S}), got {masks.shape}")
    if weights.background_row == "none":
        raise ContractError("dense segmentation needs a background row")
    pred = dense_predict(pair, weights, images)
    miou, per_class = mean_iou(pred, masks, weights.n_rows)
    return {"miou": miou, "per_class_iou": per_class}


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    metrics: dict[str, float]
    per_class: dict = field(default_factory=dict)
    seed: int = 0
    config_hash: str = ""

    def validate(self) -> None:
        for k, v in self.metrics.items():
            if not math.isfinite(v):
                raise NumericalError(f"metric {k} is not finite")

    def to_json(self) -> str:
        self.validate()
        body = {"config_hash": self.config_hash, "seed": self.seed, "metrics": self.metrics}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"
