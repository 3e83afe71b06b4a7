"""Command-line interface.

Every subcommand prints one JSON object on stdout when it succeeds.  On
failure a single JSON line ``{"error": ..., "message": ...}`` goes to
stderr and the exit status is nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as config_mod
from .data_io import (CKPT_MAGIC, HAGF_MAGIC, load_dataset, read_checkpoint, read_checkpoint_header, read_header,
                      split, synth_generate, write_checkpoint, write_dataset)
from .hag import HagConfig, build_models, evaluate, planted_recall, positive_scores, train
from .heatmap import export_heatmap
from .metrics import classify_metrics

log = logging.getLogger("hagmil")

RUN_CONFIG = "config.json"
TRAIN_LOG = "train_log.jsonl"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------- run directories


def _ckpt_path(run: Path, level: int) -> Path:
    return run / f"level_{level}.ckpt"


def save_run(run: Path, cfg: HagConfig, data_dir: Path, models, history: list[dict], best_epoch: int) -> None:
    run.mkdir(parents=True, exist_ok=True)
    (run / RUN_CONFIG).write_text(json.dumps(
        {"train": cfg.to_dict(), "data": str(data_dir.resolve()), "config_digest": cfg.digest(),
         "best_epoch": best_epoch}, indent=2, sort_keys=True) + "\n")
    with (run / TRAIN_LOG).open("w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    for j, m in models.items():
        write_checkpoint(_ckpt_path(run, j), m.state_dict(),
                         {"level": j, "config_digest": cfg.digest(), "model": cfg.model.to_dict()})


def load_run(run) -> tuple[HagConfig, Path, dict]:
    run = Path(run)
    if not (run / RUN_CONFIG).is_file():
        raise FileNotFoundError(f"{run} is not a run directory (no {RUN_CONFIG})")
    raw = json.loads((run / RUN_CONFIG).read_text())
    cfg = HagConfig.from_dict(raw["train"])
    models = build_models(cfg)
    for j, m in models.items():
        meta, tensors = read_checkpoint(_ckpt_path(run, j))
        if meta.get("config_digest") != cfg.digest():
            raise ValueError(f"checkpoint for level {j} was written with a different config")
        m.load_state_dict(tensors)
        m.eval()
    return cfg, Path(raw["data"]), models


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> dict:
    cfg = config_mod.load_synth_config(args.config, seed=args.seed, num_slides=args.num_slides)
    slides = synth_generate(cfg)
    splits = split([s.slide_id for s in slides], [s.label for s in slides], seed=cfg.seed)
    man = write_dataset(args.out, slides, splits, cfg.class_count, extra={"synth": cfg.to_dict()})
    return {"out": str(man.root), "slides": len(slides), "splits": {k: len(v) for k, v in splits.items()}}


def cmd_train(args) -> dict:
    cfg = config_mod.load_train_config(args.config, seed=args.seed, max_epochs=args.max_epochs)
    man, pyramids = load_dataset(args.data)
    tr = [pyramids[s] for s in man.slide_ids("train")]
    va = [pyramids[s] for s in man.slide_ids("val")]
    run = Path(args.out_run)
    run.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    def on_epoch(row):
        log.info("epoch %d val_loss=%.4f val_auc=%s (%.1fs)", row["epoch"], row["val_loss"]["0"], row["val_auc"],
                 row["seconds"])

    res = train(tr, va, cfg, on_epoch=on_epoch, threads=args.threads)
    save_run(run, cfg, Path(args.data), res.models, res.log, res.best_epoch)
    return {"run": str(run), "epochs": len(res.log), "best_epoch": res.best_epoch,
            "best_val_loss": res.best_val_loss, "seconds": round(time.perf_counter() - t0, 2),
            "config_digest": cfg.digest()}


def _split_slides(data_dir, split_name):
    man, pyramids = load_dataset(data_dir)
    return [pyramids[s] for s in man.slide_ids(split_name)]


def _k_arg(text):
    if text is None:
        return None
    parts = [int(x) for x in str(text).split(",")]
    return parts[0] if len(parts) == 1 else parts


def cmd_eval(args) -> dict:
    cfg, data_dir, models = load_run(args.run)
    slides = _split_slides(data_dir, args.split)
    k = _k_arg(args.k_override)
    results = evaluate(slides, models, cfg, k_override=k, threads=args.threads)
    report = classify_metrics(positive_scores(results), [p.label for p in slides], args.threshold_mode)
    report.config_digest = cfg.digest()
    out = report.to_dict()
    if args.report:
        Path(args.report).write_text(json.dumps(out, indent=2, sort_keys=True, default=_json_default) + "\n")
    out["k_override"] = k
    return out


def cmd_sweep_k(args) -> dict:
    cfg, data_dir, models = load_run(args.run)
    slides = _split_slides(data_dir, args.split)
    rows = []
    for k in (int(x) for x in args.ks.split(",")):
        results = evaluate(slides, models, cfg, k_override=k, threads=args.threads)
        report = classify_metrics(positive_scores(results), [p.label for p in slides])
        recalls = [planted_recall(r, p) for r, p in zip(results, slides) if p.planted is not None and p.label]
        recalls = [r for r in recalls if not np.isnan(r)]
        rows.append({"k": k, "auc": report.auc, "f1": report.f1, "accuracy": report.accuracy,
                     "planted_recall": float(np.median(recalls)) if recalls else None})
    return {"run": str(args.run), "split": args.split, "sweep": rows, "config_digest": cfg.digest()}


def cmd_heatmap(args) -> dict:
    cfg, data_dir, models = load_run(args.run)
    man, pyramids = load_dataset(data_dir)
    if args.slide not in pyramids:
        raise KeyError(f"slide {args.slide!r} not in dataset {data_dir}")
    p = pyramids[args.slide]
    (res,) = evaluate([p], models, cfg, k_override=_k_arg(args.k_override))
    if not 0 <= args.level < cfg.num_levels:
        raise ValueError(f"level must be in [0, {cfg.num_levels})")
    out = Path(args.out or f"{args.slide}_level{args.level}.{args.format}")
    grid = export_heatmap(res.level(args.level), p.index, out, args.format)
    return {"out": str(out), "level": args.level, "shape": list(grid.values.shape),
            "selected": int((~grid.pruned).sum())}


def cmd_inspect(args) -> dict:
    path = Path(args.file)
    with path.open("rb") as fh:
        magic = fh.read(4)
    if magic == HAGF_MAGIC:
        return {"file": str(path), "kind": "features", **dataclasses.asdict(read_header(path))}
    if magic == CKPT_MAGIC:
        version, meta, tensors = read_checkpoint_header(path)
        return {"file": str(path), "kind": "checkpoint", "magic": magic.decode(), "version": version,
                "meta": meta, "tensors": [{"name": n, "shape": list(s)} for n, s in tensors]}
    # neither magic: let the feature reader raise its documented error
    read_header(path)
    raise AssertionError("unreachable")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hagmil", description="Hierarchical attention-guided MIL on feature pyramids.")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=1, help="slide-parallel evaluation workers")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--config", default=None, help="YAML/JSON file or profile name")
    s.add_argument("--out", required=True)
    s.add_argument("--num-slides", type=int, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model per level")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default="desk", help="YAML/JSON file or profile name (default: desk)")
    s.add_argument("--out-run", required=True)
    s.add_argument("--max-epochs", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a run on one split")
    s.add_argument("--run", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--k-override", default=None, help="one k for every level, or a comma list coarsest first")
    s.add_argument("--threshold-mode", choices=("fixed", "youden"), default="fixed")
    s.add_argument("--report", default=None, help="write the report JSON here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep-k", help="evaluate a run under several selection budgets")
    s.add_argument("--run", required=True)
    s.add_argument("--ks", default="1,2,4,8")
    s.add_argument("--split", default="test")
    s.set_defaults(func=cmd_sweep_k)

    s = sub.add_parser("heatmap", help="export one slide's attention at one level")
    s.add_argument("--run", required=True)
    s.add_argument("--slide", required=True)
    s.add_argument("--level", type=int, default=0)
    s.add_argument("--format", choices=("csv", "pgm"), default="csv")
    s.add_argument("--k-override", default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("inspect", help="print a feature or checkpoint file header")
    s.add_argument("--file", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(json.dumps({"error": "UsageError", "message": str(e)}), file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print(json.dumps({"error": "UsageError", "message": "--threads must be >= 1"}), file=sys.stderr)
        return 2
    try:
        _emit(args.func(args))
    except Exception as e:  # every failure becomes one machine-readable line
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e).strip("'\"")}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
