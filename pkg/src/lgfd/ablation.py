"""Multi-seed ablation arms and their comparison tables."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import config as cfgmod
from .config import RunConfig
from .data import generate_dataset
from .trainer import train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str
    label: str
    changes: tuple  # (model field, value) pairs

    def apply(self, base: RunConfig) -> RunConfig:
        return base.with_model(**dict(self.changes))


def _weights(a: float, b: float) -> Arm:
    return Arm(f"ab_{a}_{b}", f"alpha={a} beta={b}", (("alpha", a), ("beta", b)))


_LEVEL_SETS = [(), ("P3",), ("P4",), ("P5",), ("P3", "P4"), ("P3", "P5"), ("P4", "P5"), ("P3", "P4", "P5")]

ARM_SETS: Dict[str, List[Arm]] = {
    "table3": [
        Arm("baseline", "SFA - / OFD -", (("alpha", 0.0), ("beta", 0.0))),
        Arm("sfa", "SFA + / OFD -", (("alpha", 1.0), ("beta", 0.0))),
        Arm("ofd", "SFA - / OFD +", (("alpha", 0.0), ("beta", 1.0))),
        Arm("full", "SFA + / OFD +", (("alpha", 1.0), ("beta", 1.0))),
    ],
    "table4": [
        Arm("head_obj", "head <- f_obj", (("head_input", "obj"),)),
        Arm("head_nobj", "head <- f_nobj", (("head_input", "nobj"),)),
        Arm("head_concat", "head <- f_obj + f_nobj", (("head_input", "concat"),)),
    ],
    "table5": [
        Arm("levels_" + ("".join(s).lower() or "none"), "decompose " + ("+".join(s) or "none"), (("decompose_levels", s),))
        for s in _LEVEL_SETS
    ],
    "weights": [_weights(a, b) for a in (0.5, 1.0, 1.5) for b in (0.5, 1.0, 1.5)],
    "ratio": [Arm(f"ratio_{r}", f"ratio={r}", (("ratio", r),)) for r in (0.25, 0.5, 0.75)],
}
ARMS: Dict[str, Arm] = {arm.name: arm for arms in ARM_SETS.values() for arm in arms}


def resolve_arms(spec: str) -> List[Arm]:
    """``spec`` is a comma list of arm-set names and/or single arm names."""
    out: List[Arm] = []
    for item in (s.strip() for s in spec.split(",")):
        if not item:
            continue
        if item in ARM_SETS:
            out.extend(ARM_SETS[item])
        elif item in ARMS:
            out.append(ARMS[item])
        else:
            raise ValueError(
                f"unknown arm {item!r}; valid arm sets: {sorted(ARM_SETS)}; valid arms: {sorted(ARMS)}"
            )
    if not out:
        raise ValueError("no ablation arms given")
    seen, unique = set(), []
    for arm in out:
        if arm.name not in seen:
            seen.add(arm.name)
            unique.append(arm)
    return unique


def seed_list(base: RunConfig, seeds: Optional[int] = None) -> List[int]:
    n = base.train.seeds if seeds is None else seeds
    return [base.train.seed + i for i in range(n)]


def run_one(cfg: RunConfig, cache_dir: Optional[str] = None) -> dict:
    """Train one configuration and return its reproducible summary.

    With ``cache_dir`` the summary is stored under the config digest and
    reused when the same resolved config is requested again.
    """
    text = cfgmod.dumps(cfg)
    path = Path(cache_dir) / f"{cfg.digest()}.json" if cache_dir else None
    if path is not None and path.exists():
        cached = json.loads(path.read_text())
        if cached.get("config_text") == text:
            return cached
    spec = cfg.data.scene_spec(cfg.model.image_size)
    train_set = generate_dataset(spec, cfg.data.train_count)
    eval_set = generate_dataset(spec, cfg.data.eval_count, start=cfg.data.eval_offset)
    record = train(cfg.train, train_set, eval_set, cfg.eval, config_text=text)
    summary = {"config_text": text, "wall_time": record.wall_time, **record.summary()}
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(summary, indent=1) + "\n")
        tmp.replace(path)
    return summary


def _run_job(args):
    text, cache_dir = args
    return run_one(cfgmod.loads(text), cache_dir)


def _stats(values: Sequence[Optional[float]]) -> tuple:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


@dataclass
class AblationRow:
    arm: str
    label: str
    seeds: List[int]
    runs: List[dict]

    def metric(self, key: str, which: str = "final") -> List[Optional[float]]:
        return [r[which][key] if r.get(which) else None for r in self.runs]

    def to_dict(self) -> dict:
        ap50 = _stats(self.metric("ap50"))
        mAP = _stats(self.metric("map"))
        return {
            "arm": self.arm,
            "label": self.label,
            "seeds": self.seeds,
            "ap50_mean": ap50[0],
            "ap50_std": ap50[1],
            "map_mean": mAP[0],
            "map_std": mAP[1],
            "ap50": self.metric("ap50"),
            "map": self.metric("map"),
            "cosine": self.metric("mean_obj_nobj_cosine"),
            "cosine_init": self.metric("mean_obj_nobj_cosine", "initial"),
            "retrieval_top1": self.metric("text_retrieval_top1"),
        }


@dataclass
class AblationTable:
    rows: List[AblationRow]

    def row(self, arm: str) -> AblationRow:
        for r in self.rows:
            if r.arm == arm:
                return r
        raise KeyError(arm)

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows]}

    def to_text(self) -> str:
        def pct(mean, std):
            return "-" if mean is None else f"{100 * mean:.2f} +/- {100 * std:.2f}"

        header = ("arm", "setting", "seeds", "AP50", "mAP")
        body = []
        for r in self.rows:
            d = r.to_dict()
            body.append((d["arm"], d["label"], str(len(d["seeds"])), pct(d["ap50_mean"], d["ap50_std"]), pct(d["map_mean"], d["map_std"])))
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        fmt = lambda row: "  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()  # noqa: E731
        lines = [fmt(header), fmt(tuple("-" * w for w in widths))] + [fmt(row) for row in body]
        return "\n".join(lines) + "\n"


def ablate(
    base: RunConfig,
    arms: Sequence[Arm],
    seeds: Optional[int] = None,
    jobs: int = 1,
    cache_dir=None,
) -> AblationTable:
    """Run every arm under every seed; runs are independent, so ``jobs`` may run them in parallel."""
    seeds_ = seed_list(base, seeds)
    jobs_list = []
    for arm in arms:
        for s in seeds_:
            cfg = arm.apply(base).with_train(seed=s)
            cfg.validate()
            jobs_list.append((cfgmod.dumps(cfg), str(cache_dir) if cache_dir else None))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_job, jobs_list))
    else:
        results = []
        for i, job in enumerate(jobs_list):
            log.info("ablation run %d/%d", i + 1, len(jobs_list))
            results.append(_run_job(job))
    rows = []
    for k, arm in enumerate(arms):
        runs = results[k * len(seeds_):(k + 1) * len(seeds_)]
        rows.append(AblationRow(arm.name, arm.label, seeds_, runs))
    return AblationTable(rows)
