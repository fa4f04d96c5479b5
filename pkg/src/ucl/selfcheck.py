"""Finite-difference self-test over every differentiable primitive and the full unified loss.

The full-loss check runs on a deliberately tiny encoder pair (well under 2k
parameters) so that one central difference per coordinate stays cheap. Its
parameters are jittered away from the std-0.02 initialization: at width 4 the
freshly initialized layer norms divide by tiny row deviations, and the
resulting curvature makes the finite differences (not the tape) inaccurate.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensorgrad as tg
from .encoders import TextEncoderConfig, VisualEncoderConfig, init_parameters
from .losses import MixedBatch, unified_loss
from .tensorgrad import Tensor

TOLERANCE = 1e-5
JITTER = 0.3

TINY_VISUAL = VisualEncoderConfig(image_size=8, patch_size=4, width=4, depth=1, heads=2, out_dim=8)
TINY_TEXT = TextEncoderConfig(vocab_size=10, max_len=6, width=4, depth=1, heads=2, out_dim=8)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    def t(*shape, positive=False):
        x = rng.normal(size=shape)
        return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)

    a, b = t(3, 4), t(3, 4)
    row, bias, s = t(4), t(4), t()
    x3, m2, y3 = t(2, 3, 4), t(4, 5), t(2, 4, 3)
    pos = t(3, 4, positive=True)
    ids = np.array([[0, 2], [2, 1]])
    return {
        "add": (lambda: tg.add(a, b), [a, b]),
        "add_row": (lambda: tg.add(a, row), [a, row]),
        "sub": (lambda: tg.sub(a, b), [a, b]),
        "sub_row": (lambda: tg.sub(a, row), [a, row]),
        "mul": (lambda: tg.mul(a, b), [a, b]),
        "mul_row": (lambda: tg.mul(a, row), [a, row]),
        "mul_scalar": (lambda: tg.mul(a, s), [a, s]),
        "scale": (lambda: tg.scale(a, -1.7), [a]),
        "exp": (lambda: tg.exp(a), [a]),
        "log": (lambda: tg.log(pos), [pos]),
        "gelu": (lambda: tg.gelu(a), [a]),
        "reshape": (lambda: tg.reshape(x3, (6, 4)), [x3]),
        "transpose": (lambda: tg.transpose(x3, (0, 2, 1)), [x3]),
        "concat_rows": (lambda: tg.concat_rows([a, b]), [a, b]),
        "slice_rows": (lambda: tg.slice_rows(a, 1, 3), [a]),
        "repeat_batch": (lambda: tg.repeat_batch(a, 3), [a]),
        "gather_rows": (lambda: tg.gather_rows(a, ids), [a]),
        "pick": (lambda: tg.pick(a, np.array([0, 3, 3])), [a]),
        "sum": (lambda: tg.sum(x3, axis=1), [x3]),
        "mean": (lambda: tg.mean(x3, axis=-1), [x3]),
        "matmul": (lambda: tg.matmul(a, tg.transpose(b)), [a, b]),
        "matmul_rows": (lambda: tg.matmul(x3, m2), [x3, m2]),
        "matmul_batched": (lambda: tg.matmul(x3, y3), [x3, y3]),
        "softmax_rows": (lambda: tg.softmax_rows(x3), [x3]),
        "log_softmax_rows": (lambda: tg.log_softmax_rows(a), [a]),
        "l2_normalize_rows": (lambda: tg.l2_normalize_rows(a), [a]),
        "layer_norm_rows": (lambda: tg.layer_norm_rows(x3, row, bias), [x3, row, bias]),
    }


def check_primitives(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, (fn, params) in primitive_cases(rng).items():
        # a random linear functional lets every output coordinate reach the scalar
        probe = Tensor(rng.normal(size=fn().shape))
        out[name] = tg.grad_check(lambda: tg.sum(tg.mul(fn(), probe)), params)
    return out


def tiny_problem(seed: int = 0):
    """A 2+2 mixed batch and three class labels on the tiny encoder pair."""
    pair = init_parameters(TINY_VISUAL, TINY_TEXT, seed)
    rng = np.random.default_rng([seed, 7])
    for p in pair.params.values():
        p.data = p.data + rng.normal(0.0, JITTER, size=p.shape)
    S = TINY_VISUAL.image_size
    ids = rng.integers(3, TINY_TEXT.vocab_size, size=(5, TINY_TEXT.max_len))
    mask = np.zeros_like(ids, dtype=bool)
    for i, n in enumerate([3, 5, 4, 6, 2]):
        mask[i, :n] = True
    ids = np.where(mask, ids, 0)
    batch = MixedBatch(
        cls_images=rng.uniform(size=(2, 3, S, S)),
        cls_labels=np.array([0, 2]),
        align_images=rng.uniform(size=(2, 3, S, S)),
        align_ids=ids[3:],
        align_mask=mask[3:],
    )
    return pair, batch, (ids[:3], mask[:3])


def check_unified_loss(seed: int = 0, mode: str = "deep_fusion") -> float:
    pair, batch, labels = tiny_problem(seed)
    params = list(pair.params.values())
    head = None
    if mode == "split_head":
        head = Tensor(np.random.default_rng([seed, 8]).normal(size=(3, pair.out_dim)), requires_grad=True)
        params.append(head)
    return tg.grad_check(lambda: unified_loss(pair, batch, labels, 0.05, mode, head).total, params)


def run_all(seed: int = 0) -> dict[str, float]:
    """Max relative error per check; everything should sit below ``TOLERANCE``."""
    out = {f"primitive.{k}": v for k, v in check_primitives(seed).items()}
    for mode in ("deep_fusion", "split_head"):
        out[f"unified_loss.{mode}"] = check_unified_loss(seed, mode)
    return out
