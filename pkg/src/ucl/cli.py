"""Command-line harness: ``ucl <subcommand> [flags]``.

Exit codes: 0 success, 1 contract/config/usage/I-O error, 2 numerical abort.
Every command writes ``metrics.json`` and ``manifest.json`` into ``--out``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import selfcheck
from .checkpoint import atomic_write_bytes
from .config import MODES, RunConfig, load_config
from .errors import ConfigError, NumericalError, UclError
from .evaluation import (
    EvalReport,
    build_zeroshot_classifier,
    dense_zeroshot_segment,
    fewshot_probe,
    image_embeddings,
    retrieval_recall,
    sample_support,
    text_embeddings,
    zeroshot_classify,
)
from .synthdata import build_splits, scene_mask, write_ppm
from .textbank import DEFAULT_TEMPLATES, dump_classes, duplicate_name_stats, load_classes
from .trainer import (
    Experiment,
    check_compatible,
    load_checkpoint,
    new_model,
    prepare,
    save_checkpoint,
    train_run,
)

COMMANDS = (
    "gen-data", "train", "eval-zeroshot", "eval-fewshot", "eval-retrieval", "eval-dense", "label-stats", "grad-check",
)


class UsageError(UclError, ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    config_hash: str
    seed: int
    out_dir: str
    artifacts: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        body = {
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "artifacts": sorted(self.artifacts),
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run.json; defaults apply when omitted")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--enriched", type=_bool, metavar="BOOL")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--ckpt", help="model checkpoint to write (train) or read (eval-*)")

    parser = _Parser(prog="ucl", description="Unified contrastive learning toy harness.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset description")
    gen.add_argument("--ppm", action="store_true", help="also export every image as binary PPM")
    sub.add_parser("train", parents=[common], help="train an encoder pair")
    sub.add_parser("eval-zeroshot", parents=[common], help="zero-shot classification over all classes")
    fs = sub.add_parser("eval-fewshot", parents=[common], help="few-shot probe of the class-weight matrix")
    fs.add_argument("--init", choices=("text_generated", "random_init"))
    fs.add_argument("--shots", type=int)
    fs.add_argument("--steps", type=int)
    sub.add_parser("eval-retrieval", parents=[common], help="image/text retrieval recall")
    sub.add_parser("eval-dense", parents=[common], help="point-wise zero-shot segmentation mIoU")
    ls = sub.add_parser("label-stats", parents=[common], help="duplicate-name audit of a class catalogue")
    ls.add_argument("--classes", help="classes.jsonl; defaults to the generated catalogue")
    sub.add_parser("grad-check", parents=[common], help="finite-difference self-test")
    return parser


# ---------------------------------------------------------------------------
# output


class Writer:
    """Collects the files one command writes; everything goes through an atomic rename."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.paths: list[Path] = []

    def bytes(self, name: str, data: bytes) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, data)
        self.track(path)
        return path

    def text(self, name: str, text: str) -> Path:
        return self.bytes(name, text.encode("utf-8"))

    def track(self, path: Path) -> None:
        if path not in self.paths:
            self.paths.append(path)

    def relative(self, path: Path) -> str:
        try:
            return path.relative_to(self.out_dir).as_posix()
        except ValueError:
            return str(path)


def write_report(manifest: RunManifest, report: EvalReport, writer: Writer) -> None:
    """metrics.json then manifest.json; a non-finite metric aborts before anything is written."""
    body = report.to_json()
    writer.text("metrics.json", body)
    names = {writer.relative(p) for p in writer.paths} | {"manifest.json"}
    # the directory may hold files from earlier commands; list everything present
    names |= {p.relative_to(writer.out_dir).as_posix() for p in writer.out_dir.rglob("*") if p.is_file()}
    manifest.artifacts = sorted(names)
    writer.text("manifest.json", manifest.to_json())


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# commands


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.enriched is not None:
        changes["enriched"] = args.enriched
    cfg = cfg.replace(**changes)
    cfg.validate()
    return cfg


def _load_model(args, exp: Experiment):
    if not args.ckpt:
        raise ConfigError("this command needs --ckpt")
    pair, _ = load_checkpoint(args.ckpt)
    check_compatible(pair, exp)
    return pair


def _per_class_csv(exp: Experiment, per_class: dict) -> str:
    cat = exp.eval.catalogue
    return _csv(("class_id", "name", "accuracy"), [(c, cat[c].name, _fmt(a)) for c, a in sorted(per_class.items())])


def cmd_gen_data(args, cfg: RunConfig, w: Writer) -> dict:
    train, evaluation = build_splits(cfg.data)
    w.text("dataset.json", json.dumps(cfg.to_dict()["data"], indent=2, sort_keys=True) + "\n")
    w.text("classes.jsonl", dump_classes(evaluation.catalogue))
    w.text("prompts.txt", "\n".join(DEFAULT_TEMPLATES) + "\n")
    w.text("captions.txt", "\n".join(train.captions) + "\n")
    if args.ppm:
        for split_name, split in (("train", train), ("eval", evaluation)):
            for kind, images in (("cls", split.cls_images), ("align", split.align_images)):
                for i, img in enumerate(images):
                    path = w.out_dir / "images" / split_name / f"{kind}_{i:05d}.ppm"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    write_ppm(path, img)
                    w.track(path)
    return {
        "train_classification_records": float(len(train.cls_specs)),
        "train_alignment_records": float(len(train.align_specs)),
        "eval_classification_records": float(len(evaluation.cls_specs)),
        "eval_alignment_records": float(len(evaluation.align_specs)),
        "held_out_classes": float(len(train.held_out_class_ids)),
    }


def cmd_train(args, cfg: RunConfig, w: Writer) -> dict:
    exp = prepare(cfg)
    pair = new_model(exp, cfg.seed)
    ckpt_path = Path(args.ckpt) if args.ckpt else w.out_dir / "model.ckpt"
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        result = train_run(exp, pair, cfg.seed, ckpt_path=ckpt_path)
    finally:
        dump = ckpt_path.with_suffix(".nan_dump")
        if dump.exists():
            w.track(dump)
    if not ckpt_path.exists():  # zero-step runs still leave a checkpoint behind
        save_checkpoint(pair, result.state, ckpt_path)
    w.track(ckpt_path)
    rows = [(r["step"], _fmt(r["total"]), _fmt(r["cls_loss"]), _fmt(r["align_loss"]), _fmt(r["lr"])) for r in result.history]
    w.text("loss.csv", _csv(("step", "total", "cls_loss", "align_loss", "lr"), rows))
    w.text("classes.jsonl", dump_classes(exp.train.catalogue))
    metrics = {"steps": float(len(result.history)), "parameters": float(pair.num_parameters())}
    if result.history:
        metrics["loss_first"] = result.history[0]["total"]
        metrics["loss_last"] = result.history[-1]["total"]
    return metrics


def cmd_eval_zeroshot(args, cfg: RunConfig, w: Writer) -> dict:
    exp = prepare(cfg)
    pair = _load_model(args, exp)
    ev = exp.eval
    weights = build_zeroshot_classifier(pair, ev.catalogue, DEFAULT_TEMPLATES, cfg.enriched, exp.vocab)
    res = zeroshot_classify(pair, weights, ev.cls_images, ev.cls_labels)
    held = set(ev.held_out_class_ids)
    pc = res["per_class"]
    metrics = {"top1": res["top1"], "top5": res["top5"]}
    if held:
        metrics["held_out_top1"] = float(np.mean([a for c, a in pc.items() if c in held]))
    metrics["seen_top1"] = float(np.mean([a for c, a in pc.items() if c not in held]))
    w.text("per_class.csv", _per_class_csv(exp, pc))
    return metrics


def cmd_eval_fewshot(args, cfg: RunConfig, w: Writer) -> dict:
    exp = prepare(cfg)
    pair = _load_model(args, exp)
    fcfg = cfg.fewshot
    init = args.init or fcfg.init
    shots = fcfg.shots if args.shots is None else args.shots
    steps = fcfg.steps if args.steps is None else args.steps
    ev = exp.eval
    weights = build_zeroshot_classifier(pair, ev.catalogue, DEFAULT_TEMPLATES, cfg.enriched, exp.vocab)
    support, query = sample_support(ev.cls_labels, len(ev.catalogue), shots, cfg.seed)
    images = ev.cls_images
    _, res = fewshot_probe(
        pair, weights, images[support], ev.cls_labels[support], images[query], ev.cls_labels[query],
        init=init, steps=steps, lr=fcfg.lr, tau=cfg.train.tau, seed=cfg.seed,
    )
    w.text("per_class.csv", _per_class_csv(exp, res["per_class"]))
    return {"top1": res["top1"], "top5": res["top5"], "shots": float(shots), "steps": float(steps)}


def cmd_eval_retrieval(args, cfg: RunConfig, w: Writer) -> dict:
    exp = prepare(cfg)
    pair = _load_model(args, exp)
    ev = exp.eval
    return retrieval_recall(image_embeddings(pair, ev.align_images), text_embeddings(pair, ev.captions, exp.vocab))


def segmentation_masks(exp: Experiment) -> np.ndarray:
    """Pixel labels for the eval classification images: class id on the shape, background id elsewhere."""
    ev = exp.eval
    bg = len(ev.catalogue)
    return np.stack([np.where(scene_mask(s, ev.image_size), lab, bg) for s, lab in zip(ev.cls_specs, ev.cls_labels)])


def cmd_eval_dense(args, cfg: RunConfig, w: Writer) -> dict:
    exp = prepare(cfg)
    pair = _load_model(args, exp)
    ev = exp.eval
    weights = build_zeroshot_classifier(
        pair, ev.catalogue, DEFAULT_TEMPLATES, cfg.enriched, exp.vocab, background="text_generated",
    )
    res = dense_zeroshot_segment(pair, weights, ev.cls_images, segmentation_masks(exp))
    names = [e.name for e in ev.catalogue] + ["background"]
    rows = [(c, names[c], _fmt(v)) for c, v in sorted(res["per_class_iou"].items())]
    w.text("per_class.csv", _csv(("class_id", "name", "iou"), rows))
    return {"miou": res["miou"]}


def cmd_label_stats(args, cfg: RunConfig, w: Writer) -> dict:
    if args.classes:
        catalogue = load_classes(args.classes)
    else:
        catalogue = build_splits(cfg.data)[1].catalogue
    stats = duplicate_name_stats(catalogue)
    w.text("label_stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(stats, sort_keys=True))
    return {"total": float(stats["total"]), "unique": float(stats["unique"]), "ratio": float(stats["ratio"])}


def cmd_grad_check(args, cfg: RunConfig, w: Writer) -> dict:
    errors = selfcheck.run_all(cfg.seed)
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} (tolerance {selfcheck.TOLERANCE:.0e})")
    metrics = {f"rel_err.{k}": float(v) for k, v in errors.items()}
    metrics["max_rel_err"] = float(worst)
    return metrics


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-zeroshot": cmd_eval_zeroshot,
    "eval-fewshot": cmd_eval_fewshot,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-dense": cmd_eval_dense,
    "label-stats": cmd_label_stats,
    "grad-check": cmd_grad_check,
}


def run_command(argv: Sequence[str]) -> tuple[int, RunManifest | None]:
    try:
        args = build_parser().parse_args(list(argv))
        cfg = _resolve(args)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        writer = Writer(out_dir)
        metrics = HANDLERS[args.command](args, cfg, writer)
        manifest = RunManifest(args.command, cfg.to_dict(), cfg.hash(), cfg.seed, str(out_dir))
        write_report(manifest, EvalReport(metrics, seed=cfg.seed, config_hash=cfg.hash()), writer)
    except NumericalError as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return 2, None
    except (UclError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1, None
    except SystemExit as exc:  # --help
        return int(exc.code or 0), None
    if args.command == "grad-check" and metrics["max_rel_err"] >= selfcheck.TOLERANCE:
        return 1, manifest
    return 0, manifest


def main(argv: Sequence[str] | None = None) -> int:
    code, _ = run_command(sys.argv[1:] if argv is None else argv)
    return code


if __name__ == "__main__":
    sys.exit(main())
