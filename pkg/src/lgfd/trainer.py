"""SGD training loop, checkpoints and finite-difference gradient checks."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .data import Batch, CategorySpec, Dataset, SceneSpec, generate_dataset, make_batches
from .evaluation import EvalConfig, EvalReport, evaluate
from .losses import (
    LossBundle,
    alignment_loss,
    detection_loss,
    disentangle_levels,
    similarity_matrix,
    targets_for,
)
from .model import LGFDModel, ModelConfig
from .tensor import ConfigError, Tensor, load_checkpoint, save_checkpoint
from .tensor.gradcheck import check_gradients
from .tensor.nn import SGD

log = logging.getLogger(__name__)

COMPONENTS = ("l_det", "l_al", "l_ds", "total")


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, batch: int, losses: Dict[str, float]):
        self.epoch, self.batch, self.losses = epoch, batch, losses
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {losses}")


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 42
    eval_every: int = 0  # 0: evaluate after the last epoch only
    eval_at_init: bool = True
    seeds: int = 5  # ablation repeats
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"train.batch_size must be at least 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be at least 1, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if self.eval_every < 0 or self.seeds < 1:
            raise ConfigError("train.eval_every must be >= 0 and train.seeds >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"train.seed must be a 64-bit unsigned integer, got {self.seed}")
        self.model.validate()


@dataclass
class RunRecord:
    rows: List[dict]
    final: Optional[EvalReport]
    initial: Optional[EvalReport]
    config: dict
    wall_time: float
    best_epoch: Optional[int] = None
    model: Optional[LGFDModel] = field(default=None, repr=False)

    def summary(self) -> dict:
        """JSON-ready record without the model or wall time (both non-reproducible)."""
        return {
            "config": self.config,
            "rows": self.rows,
            "initial": self.initial.to_dict() if self.initial else None,
            "final": self.final.to_dict() if self.final else None,
            "best_epoch": self.best_epoch,
        }


# ------------------------------------------------------------------- losses
def compute_losses(model: LGFDModel, batch: Batch) -> LossBundle:
    """Forward one batch and assemble the weighted objective.

    A loss with zero weight is still reported but kept out of the graph, so
    it contributes no gradient at all.
    """
    cfg = model.cfg
    out = model.forward_train(batch.images, batch.captions)
    l_det = detection_loss(out.pred, targets_for(out.pred, batch.annotations))
    if out.obj_embed is not None:
        S = similarity_matrix(out.obj_embed, out.text_embed, cfg.eps)
        l_al = alignment_loss(S, cfg.tau, cfg.symmetric_al)
    else:
        l_al = Tensor(0.0)
    l_ds = disentangle_levels(out.f_obj, out.f_nobj, cfg.eps, cfg.abs_ds)
    total = l_det
    if cfg.alpha:
        total = total + l_al * cfg.alpha
    if cfg.beta:
        total = total + l_ds * cfg.beta
    return LossBundle(l_det, l_al, l_ds, cfg.alpha, cfg.beta, total)


# ----------------------------------------------------------------- training
def save_model(path, model: LGFDModel, meta: dict) -> None:
    save_checkpoint(path, model.state_dict(), {**model.checkpoint_meta(), **meta})


def load_model(path) -> tuple:
    """Rebuild a model from a checkpoint; returns ``(model, meta)``."""
    arrays, meta = load_checkpoint(path)
    if not meta or "model" not in meta:
        raise ValueError(f"{path}: checkpoint has no model config in its manifest")
    model = LGFDModel(ModelConfig.from_dict(meta["model"]))
    model.load_state_dict(arrays)
    model.eval()
    return model, meta


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def train(
    config: TrainConfig,
    dataset: Dataset,
    eval_set: Optional[Dataset] = None,
    eval_config: Optional[EvalConfig] = None,
    run_dir=None,
    config_text: Optional[str] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> RunRecord:
    """Train from a seeded initialisation; optionally write run artifacts to ``run_dir``.

    ``config_text`` (the resolved run config) is embedded in report.json and
    in every checkpoint so a run can be replayed.
    """
    config.validate()
    if len(dataset) < config.batch_size:
        raise ValueError(f"dataset has {len(dataset)} images, fewer than one batch of {config.batch_size}")
    eval_config = eval_config or EvalConfig()
    started = time.perf_counter()
    out_dir = Path(run_dir) if run_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
    meta = {"config": config_text} if config_text is not None else {}

    model = LGFDModel(config.model, seed=config.seed)
    model.train()
    opt = SGD(model.parameters(), config.lr, config.momentum)
    initial = evaluate(model, eval_set, eval_config) if eval_set is not None and config.eval_at_init else None
    rows: List[dict] = []
    best_ap, best_epoch, final = -math.inf, None, None
    try:
        for epoch in range(1, config.epochs + 1):
            sums = dict.fromkeys(COMPONENTS, 0.0)
            n = 0
            for bi, batch in enumerate(
                make_batches(dataset, config.batch_size, config.seed, epoch - 1, train=True, encoder=model.encoder)
            ):
                bundle = compute_losses(model, batch)
                values = bundle.as_floats()
                if not all(math.isfinite(v) for v in values.values()):
                    raise TrainingAborted(epoch, bi, values)
                opt.zero_grad()
                bundle.total.backward()
                opt.step()
                for k in COMPONENTS:
                    sums[k] += values[k]
                n += 1
            row = {"epoch": epoch, **{k: sums[k] / n for k in COMPONENTS}}
            due = epoch == config.epochs or (config.eval_every and epoch % config.eval_every == 0)
            if eval_set is not None and due:
                report = evaluate(model, eval_set, eval_config)
                row["eval"] = report.to_dict()
                final = report
                ap = report.ap50 if report.ap50 is not None else -math.inf
                if best_epoch is None or ap > best_ap:
                    best_ap, best_epoch = ap, epoch
                    if out_dir is not None:
                        save_model(out_dir / "ckpt_best.bin", model, {**meta, "epoch": epoch})
            rows.append(row)
            if out_dir is not None:
                metrics_fh.write(json.dumps(row) + "\n")
                metrics_fh.flush()
            if progress is not None:
                progress(row)
            log.debug("epoch %d: %s", epoch, {k: round(row[k], 5) for k in COMPONENTS})
    finally:
        if out_dir is not None:
            metrics_fh.close()
    model.eval()
    record = RunRecord(
        rows=rows,
        final=final,
        initial=initial,
        config={"train": config_text} if config_text is not None else {"model": config.model.to_dict()},
        wall_time=time.perf_counter() - started,
        best_epoch=best_epoch,
        model=model,
    )
    if out_dir is not None:
        save_model(out_dir / "ckpt_last.bin", model, {**meta, "epoch": config.epochs})
        if best_epoch is None:
            save_model(out_dir / "ckpt_best.bin", model, {**meta, "epoch": config.epochs})
        _write_json(out_dir / "report.json", record.summary())
    return record


# ---------------------------------------------------------- gradient check
TINY_CATEGORIES = (
    CategorySpec("person", "ellipse", (2, 4), (5, 9), (0.14, 0.28)),
    CategorySpec("car", "rect", (6, 10), (3, 6), (0.14, 0.28)),
    CategorySpec("bicycle", "ellipse", (3, 5), (3, 5), (0.14, 0.28)),
)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(L=8, image_size=32, pool_S=2, heads=2, head_width=4, priors=(4.0, 8.0, 16.0))
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class GradCheckReport:
    max_rel_err: Dict[str, float]
    checked: Dict[str, int]
    skipped_at_kinks: Dict[str, int]
    tolerance: float
    required: int
    head_grad_free_for_al: bool

    @property
    def passed(self) -> bool:
        return (
            all(v <= self.tolerance for v in self.max_rel_err.values())
            and all(n >= self.required for n in self.checked.values())
            and self.head_grad_free_for_al
        )

    def to_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "checked": self.checked,
            "skipped_at_kinks": self.skipped_at_kinks,
            "tolerance": self.tolerance,
            "required": self.required,
            "head_grad_free_for_al": self.head_grad_free_for_al,
            "passed": self.passed,
        }


def grad_check(
    cfg: Optional[ModelConfig] = None,
    batch_size: int = 4,
    count: int = 20,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    seed: int = 42,
    max_draws: int = 400,
) -> GradCheckReport:
    """Central differences against backprop for each loss component and their sum.

    Entries are drawn uniformly over the parameter tensors a component reaches,
    then uniformly within the tensor. Draws whose probes flip a ReLU or
    smooth-L1 branch are set aside and redrawn until ``count`` clean entries
    are checked (or ``max_draws`` is hit).
    """
    cfg = cfg or tiny_config()
    spec = SceneSpec(image_size=cfg.image_size, categories=TINY_CATEGORIES, seed=seed)
    data = generate_dataset(spec, batch_size)
    model = LGFDModel(cfg, seed=seed)
    model.train()
    batch = next(make_batches(data, batch_size, seed, 0, train=True, encoder=model.encoder))
    params = model.parameters()
    rng = np.random.default_rng(seed)
    head_ids = {id(p) for head in model.heads.values() for p in head.parameters()}

    def component(name):
        return lambda: getattr(compute_losses(model, batch), name)

    errs, checked, skipped, head_free = {}, {}, {}, True
    for name in COMPONENTS:
        fn = component(name)
        for p in params:
            p.grad = None
        fn().backward()
        if name == "l_al":
            head_free = all(p.grad is None or not np.any(p.grad) for p in params if id(p) in head_ids)
        pool = [p for p in params if p.grad is not None and np.any(p.grad != 0)]
        clean: List[dict] = []
        draws = 0
        while pool and len(clean) < count and draws < max_draws:
            ti = int(rng.integers(len(pool)))
            idx = np.unravel_index(int(rng.integers(pool[ti].size)), pool[ti].shape)
            draws += 1
            rec = check_gradients(fn, pool, h=h, indices=[(ti, idx)])[0]
            if not rec["crossed_kink"]:
                clean.append(rec)
        errs[name] = max((r["rel_err"] for r in clean), default=0.0)
        checked[name] = len(clean)
        skipped[name] = draws - len(clean)
    return GradCheckReport(errs, checked, skipped, tolerance, count, head_free)
