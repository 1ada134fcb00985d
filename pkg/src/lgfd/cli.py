"""``lgfd`` command line: data, captions, training, evaluation, ablations, checks.

Exit codes: 0 success, 1 invalid input (config, flags, files), 2 aborted run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import config as cfgmod
from .ablation import ablate, resolve_arms
from .captions import generate_caption
from .config import RunConfig
from .data import Dataset, clip_box, export_dataset, generate_dataset, load_coco, read_coco_annotations
from .evaluation import EvalConfig, evaluate, export_activation_maps
from .tensor import ConfigError
from .trainer import TrainingAborted, grad_check, load_model, tiny_config, train

log = logging.getLogger("lgfd")

EXIT_OK, EXIT_INVALID, EXIT_ABORTED = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers
def _load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    return cfgmod.load(path)


def _load_data_dir(path: str) -> Dataset:
    root = Path(path)
    ann = root / "annotations.json"
    if not ann.exists():
        raise FileNotFoundError(f"{ann}: annotation file not found (expected a directory written by gen-data)")
    return load_coco(ann, root / "images")


def _synthetic(cfg: RunConfig, split: str, count: Optional[int] = None) -> Dataset:
    spec = cfg.data.scene_spec(cfg.model.image_size)
    if split == "train":
        return generate_dataset(spec, cfg.data.train_count if count is None else count)
    return generate_dataset(spec, cfg.data.eval_count if count is None else count, start=cfg.data.eval_offset)


def _dump(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=2) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _model_from_ckpt(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"{path}: checkpoint not found")
    model, meta = load_model(path)
    cfg = cfgmod.loads(meta["config"], f"{path} (embedded config)") if meta.get("config") else None
    return model, cfg


# ----------------------------------------------------------------- commands
def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    data = _synthetic(cfg, args.split, args.count)
    ann = export_dataset(data, args.out)
    (Path(args.out) / "config.ini").write_text(cfgmod.dumps(cfg))
    log.info("wrote %d images and %s", len(data), ann)
    return EXIT_OK


def cmd_caption(args) -> int:
    index = read_coco_annotations(args.annotations)
    lines = []
    for rec in index.images:
        if "width" not in rec or "height" not in rec:
            raise ValueError(f"{args.annotations}: image id {rec['id']} lacks width/height")
        w, h = int(rec["width"]), int(rec["height"])
        boxes = [b for b in (clip_box(b, w, h) for b in index.boxes[rec["id"]]) if b is not None]
        lines.append(f"{rec['id']}\t{generate_caption(boxes, w, h, index.categories)}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg = cfg.with_train(epochs=args.epochs)
        cfg.validate()
    if args.data:
        train_set = _load_data_dir(args.data)
        eval_set = _load_data_dir(args.eval_data) if args.eval_data else train_set
    else:
        train_set = _synthetic(cfg, "train")
        eval_set = _load_data_dir(args.eval_data) if args.eval_data else _synthetic(cfg, "eval")
    if len(train_set.categories) != cfg.model.num_classes:
        raise ConfigError(
            f"model.num_classes={cfg.model.num_classes} but {args.data} has {len(train_set.categories)} categories"
        )

    def progress(row):
        log.info("epoch %d  l_det %.4f  l_al %.4f  l_ds %.4f  total %.4f", row["epoch"], row["l_det"], row["l_al"], row["l_ds"], row["total"])

    record = train(cfg.train, train_set, eval_set, cfg.eval, run_dir=args.run_dir, config_text=cfgmod.dumps(cfg), progress=progress)
    log.info("finished in %.1f s; final %s", record.wall_time, record.final.to_dict() if record.final else None)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = _model_from_ckpt(args.ckpt)
    eval_cfg = cfg.eval if cfg is not None else EvalConfig()
    if args.data:
        data = _load_data_dir(args.data)
    elif cfg is not None:
        data = _synthetic(cfg, "eval")
    else:
        raise ConfigError(f"{args.ckpt}: no embedded config; pass --data")
    _dump(evaluate(model, data, eval_cfg).to_dict(), args.out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    if args.epochs is not None:
        cfg = cfg.with_train(epochs=args.epochs)
    if args.seeds is not None and args.seeds < 1:
        raise ConfigError(f"--seeds must be at least 1, got {args.seeds}")
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be at least 1, got {args.jobs}")
    cfg.validate()
    arms = resolve_arms(args.arms)
    table = ablate(cfg, arms, seeds=args.seeds, jobs=args.jobs, cache_dir=args.cache)
    text = table.to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps({"config": cfgmod.dumps(cfg), **table.to_dict()}, indent=2) + "\n")
        (out / "ablation.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args.config)
    m = cfg.model
    tiny = tiny_config(
        tau=m.tau, alpha=m.alpha, beta=m.beta, symmetric_al=m.symmetric_al, abs_ds=m.abs_ds,
        ratio=m.ratio, decompose_levels=m.decompose_levels, head_input=m.head_input, cbr_kernel=m.cbr_kernel,
    )
    report = grad_check(tiny, count=args.count, seed=cfg.train.seed)
    _dump(report.to_dict(), None)
    return EXIT_OK if report.passed else EXIT_INVALID


def cmd_heatmaps(args) -> int:
    model, cfg = _model_from_ckpt(args.ckpt)
    data = _load_data_dir(args.data)
    images = data.images[: args.limit] if args.limit else data.images
    paths = export_activation_maps(model, images, args.out)
    log.info("wrote %d heatmaps to %s", len(paths), args.out)
    return EXIT_OK


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lgfd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("gen-data", help="write synthetic PGM images and COCO annotations")
    s.add_argument("--config", help="run config file (defaults when omitted)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--count", type=int, help="number of images (default: the split's count in [data])")
    s.add_argument("--split", choices=("train", "eval"), default="train", help="which scene index range to render")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("caption", help="write one tab-separated caption line per image")
    s.add_argument("--annotations", required=True, help="COCO-style annotation file")
    s.add_argument("--out", help="output TSV (stdout when omitted)")
    s.set_defaults(func=cmd_caption)

    s = sub.add_parser("train", help="train one model")
    s.add_argument("--config", help="run config file (defaults when omitted)")
    s.add_argument("--data", help="dataset directory from gen-data (synthesised from [data] when omitted)")
    s.add_argument("--eval-data", help="evaluation dataset directory (default: --data, or synthesised)")
    s.add_argument("--run-dir", required=True, help="directory for metrics.jsonl, report.json and checkpoints")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--data", help="dataset directory (default: the eval split of the embedded config)")
    s.add_argument("--out", help="report JSON path (stdout when omitted)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="run ablation arms over several seeds")
    s.add_argument("--config", help="base run config file (defaults when omitted)")
    s.add_argument("--arms", required=True, help="comma list of arm sets (table3, table4, table5, weights, ratio) or arm names")
    s.add_argument("--seeds", type=int, help="seeds per arm (default train.seeds)")
    s.add_argument("--epochs", type=int, help="override train.epochs")
    s.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
    s.add_argument("--out", help="directory for ablation.json and ablation.txt")
    s.add_argument("--cache", help="directory caching per-run results by config digest")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss on a tiny model")
    s.add_argument("--config", help="run config whose loss settings are checked")
    s.add_argument("--count", type=int, default=20, help="entries checked per loss component")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("heatmaps", help="export object / non-object activation maps as PGM")
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--limit", type=int, help="only the first N images")
    s.set_defaults(func=cmd_heatmaps)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (ConfigError, ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
