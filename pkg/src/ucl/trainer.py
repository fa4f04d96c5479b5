"""Optimization loop: AdamW, warmup + cosine schedule, global-norm clipping, checkpoints."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import checkpoint as ckpt
from . import tensorgrad as tg
from .config import RunConfig
from .encoders import POOLINGS, EncoderPair, TextEncoderConfig, VisualEncoderConfig, init_parameters
from .errors import ConfigError, ContractError, FormatError, NumericalError, ShapeError
from .losses import Temperature, unified_loss
from .synthdata import DatasetSplit, build_splits, mixed_batches
from .tensorgrad import Tensor
from .textbank import DEFAULT_TEMPLATES, Vocabulary, render_label, tokenize_batch

log = logging.getLogger(__name__)

HEAD = "head.w"
LOG_TAU = "log_tau"


# ---------------------------------------------------------------------------
# schedule / clipping / optimizer


@dataclass(frozen=True)
class Schedule:
    warmup_steps: int
    total_steps: int
    lr_base: float
    lr_min: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}/{self.total_steps}")


def lr_at(schedule: Schedule, step: int) -> float:
    s = schedule
    if not 0 <= step <= s.total_steps:
        raise ContractError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.lr_base * step / s.warmup_steps
    if step == s.warmup_steps:  # lr_min + (lr_base - lr_min) need not round back to lr_base
        return s.lr_base
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.lr_min + (s.lr_base - s.lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: Iterable[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; return the factor."""
    if not max_norm > 0:
        raise ContractError("max_norm must be positive")
    grads = list(grads)
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total <= max_norm:
        return 1.0
    factor = max_norm / total
    for g in grads:
        g *= factor
    return factor


def decays(name: str) -> bool:
    """Weight decay applies to matrices and embeddings, never to biases, norm gains or the temperature."""
    return not (name.endswith(".b") or name.endswith(".g") or name == LOG_TAU)


@dataclass
class OptimState:
    lr_base: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hparams) -> "OptimState":
        state = cls(**hparams)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState, lr: float) -> None:
    """One decoupled-weight-decay Adam update for every parameter that has a gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(f"shape mismatch for {name}: param {p.shape}, grad {g.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and decays(name):
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# experiment setup


def build_vocabulary(train: DatasetSplit, templates=DEFAULT_TEMPLATES, max_len: int = 32) -> Vocabulary:
    corpus = list(train.captions)
    for entry in train.catalogue:
        for t in templates:
            corpus.append(render_label(entry, t, enriched=True).text)
    corpus.append("background")
    return Vocabulary.build(corpus, max_len=max_len)


def label_tokens(split: DatasetSplit, vocab: Vocabulary, enriched: bool, template: str = DEFAULT_TEMPLATES[0]):
    """Tokenized training label for every class of ``split``, one fixed template."""
    return tokenize_batch([render_label(e, template, enriched).text for e in split.catalogue], vocab)


@dataclass
class Experiment:
    config: RunConfig
    train: DatasetSplit
    eval: DatasetSplit
    vocab: Vocabulary

    @property
    def text_config(self) -> TextEncoderConfig:
        t = self.config.model.text
        return TextEncoderConfig(
            vocab_size=len(self.vocab), max_len=t.max_len, width=t.width, depth=t.depth,
            heads=t.heads, out_dim=self.config.model.visual.out_dim, pooling=t.pooling,
        )


def prepare(cfg: RunConfig) -> Experiment:
    cfg.validate()
    train, evaluation = build_splits(cfg.data)
    vocab = build_vocabulary(train, max_len=cfg.model.text.max_len)
    return Experiment(cfg, train, evaluation, vocab)


def effective_mode(mode: str, ratio: tuple[int, int]) -> tuple[str, tuple[int, int]]:
    """Map a run mode onto a loss mode and batch ratio; the single-task baselines are degenerate ratios."""
    if mode == "sup_only":
        return "split_head", (1, 0)
    if mode == "vl_only":
        return "deep_fusion", (0, 1)
    if mode in ("deep_fusion", "split_head"):
        return mode, tuple(ratio)
    raise ConfigError(f"unknown mode {mode!r}")


def new_model(exp: Experiment, seed: int) -> EncoderPair:
    cfg = exp.config
    pair = init_parameters(cfg.model.visual, exp.text_config, seed)
    loss_mode, _ = effective_mode(cfg.mode, cfg.train.ratio)
    if loss_mode == "split_head":
        rng = np.random.default_rng([seed, 1])
        pair.params[HEAD] = Tensor(rng.normal(0.0, 0.02, size=(len(exp.train.catalogue), pair.out_dim)), True)
    if cfg.train.learnable_tau:
        pair.params[LOG_TAU] = Tensor(math.log(cfg.train.tau), requires_grad=True)
    return pair


def temperature_of(pair: EncoderPair, tau: float) -> Temperature:
    if LOG_TAU in pair.params:
        return Temperature(math.exp(float(pair.params[LOG_TAU].data)), True, pair.params[LOG_TAU])
    return Temperature(tau)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    pair: EncoderPair
    state: OptimState
    history: list[dict] = field(default_factory=list)


def train_run(
    exp: Experiment,
    pair: EncoderPair,
    seed: int,
    ckpt_path: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    cfg = exp.config
    loss_mode, ratio = effective_mode(cfg.mode, cfg.train.ratio)
    opt = cfg.optim
    state = OptimState.for_params(
        pair.params, lr_base=opt.lr, beta1=opt.betas[0], beta2=opt.betas[1], eps=opt.eps,
        weight_decay=opt.weight_decay,
    )
    total = cfg.schedule.total_steps
    result = TrainResult(pair, state)
    if total == 0:
        return result
    schedule = Schedule(int(cfg.schedule.warmup_frac * total), total, opt.lr, cfg.schedule.lr_min)
    temperature = temperature_of(pair, cfg.train.tau)
    tokens = label_tokens(exp.train, exp.vocab, cfg.enriched)
    stream = mixed_batches(exp.train, cfg.train.batch_size, ratio, seed, exp.vocab)
    head = pair.params.get(HEAD)

    for step in range(total):
        batch = next(stream)
        for p in pair.params.values():
            p.grad = None
        try:
            with tg.Tape() as tape:
                out = unified_loss(pair, batch, tokens, temperature, loss_mode, head, cfg.train.symmetric)
            tape.backward(out.total)
        except NumericalError as exc:
            dump = _dump_state(pair, state, ckpt_path)
            raise NumericalError(f"step {step}: {exc}; state dumped to {dump}") from exc
        grads = {n: p.grad for n, p in pair.params.items() if p.grad is not None}
        clip_global_norm(grads.values(), opt.clip)
        lr = lr_at(schedule, step)
        adamw_step(pair.params, grads, state, lr)
        temperature.clamp()
        row = {"step": step, **out.components(), "lr": lr}
        result.history.append(row)
        if on_step is not None:
            on_step(row)
        if ckpt_path is not None and cfg.train.ckpt_every and (step + 1) % cfg.train.ckpt_every == 0:
            save_checkpoint(pair, state, ckpt_path)
    if ckpt_path is not None:
        save_checkpoint(pair, state, ckpt_path)
    return result


def _dump_state(pair: EncoderPair, state: OptimState, ckpt_path) -> str:
    target = Path(ckpt_path).with_suffix(".nan_dump") if ckpt_path is not None else Path("nan_dump.ckpt")
    try:
        save_checkpoint(pair, state, target)
    except (OSError, FormatError, ValueError) as exc:  # the dump must never mask the original error
        return f"<dump failed: {exc}>"
    return str(target)


# ---------------------------------------------------------------------------
# checkpoints

_VISUAL_FIELDS = ("image_size", "patch_size", "width", "depth", "heads", "out_dim")
_TEXT_FIELDS = ("vocab_size", "max_len", "width", "depth", "heads", "out_dim")


def checkpoint_tensors(pair: EncoderPair, state: OptimState | None) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for f in _VISUAL_FIELDS:
        out[f"meta.visual.{f}"] = np.array(float(getattr(pair.visual, f)))
    for f in _TEXT_FIELDS:
        out[f"meta.text.{f}"] = np.array(float(getattr(pair.text, f)))
    out["meta.text.pooling"] = np.array(float(POOLINGS.index(pair.text.pooling)))
    for name, p in pair.params.items():
        out[name] = p.data
    if state is not None:
        out["optim.step"] = np.array(float(state.step))
        out["optim.hparams"] = np.array([state.lr_base, state.beta1, state.beta2, state.eps, state.weight_decay])
        for name in pair.params:
            out[f"optim.m.{name}"] = state.m[name]
            out[f"optim.v.{name}"] = state.v[name]
    return out


def save_checkpoint(pair: EncoderPair, state: OptimState | None, path: str | Path) -> None:
    ckpt.write_tensors(path, checkpoint_tensors(pair, state))


def load_checkpoint(path: str | Path) -> tuple[EncoderPair, OptimState | None]:
    """Rebuild the encoder pair (and optimizer state, when stored) from a checkpoint file."""
    tensors = ckpt.read_tensors(path)
    try:
        vcfg = VisualEncoderConfig(**{f: int(tensors[f"meta.visual.{f}"]) for f in _VISUAL_FIELDS})
        tcfg = TextEncoderConfig(
            **{f: int(tensors[f"meta.text.{f}"]) for f in _TEXT_FIELDS},
            pooling=POOLINGS[int(tensors["meta.text.pooling"])],
        )
    except (KeyError, IndexError) as exc:
        raise FormatError(f"checkpoint lacks model metadata: {exc}") from exc
    params = {
        n: Tensor(a, requires_grad=True) for n, a in tensors.items()
        if not (n.startswith("meta.") or n.startswith("optim."))
    }
    pair = EncoderPair(vcfg, tcfg, params)
    template = init_parameters(vcfg, tcfg, 0)
    for name, p in template.params.items():
        if name not in params or params[name].shape != p.shape:
            raise FormatError(f"checkpoint tensor {name!r} missing or mis-shaped")
    state = None
    if "optim.step" in tensors:
        hp = tensors["optim.hparams"]
        state = OptimState(
            lr_base=float(hp[0]), beta1=float(hp[1]), beta2=float(hp[2]), eps=float(hp[3]),
            weight_decay=float(hp[4]), step=int(tensors["optim.step"]),
        )
        for name in params:
            try:
                state.m[name] = tensors[f"optim.m.{name}"]
                state.v[name] = tensors[f"optim.v.{name}"]
            except KeyError as exc:
                raise FormatError(f"checkpoint lacks optimizer moments for {name!r}") from exc
    return pair, state


def check_compatible(pair: EncoderPair, exp: Experiment) -> None:
    if pair.text.vocab_size != len(exp.vocab):
        raise ShapeError(
            f"checkpoint vocabulary size {pair.text.vocab_size} does not match the configured data ({len(exp.vocab)})"
        )
