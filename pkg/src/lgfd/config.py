"""Run configuration files: five INI sections with a canonical text form.

Example::

    [data]
    train_count = 1000
    [model]
    L = 32
    decompose_levels = P3,P4
    [loss]
    alpha = 1.0
    [train]
    epochs = 60
    [eval]
    score_thresh = 0.01

Missing keys take their defaults; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

from .data import DEFAULT_CATEGORIES, SceneSpec
from .evaluation import EvalConfig
from .model import ModelConfig
from .tensor import ConfigError
from .trainer import TrainConfig

LOSS_KEYS = ("tau", "alpha", "beta", "symmetric_al", "abs_ds")


@dataclass(frozen=True)
class DataConfig:
    train_count: int = 1000
    eval_count: int = 200
    seed: int = 42
    eval_offset: int = 1_000_000  # eval scenes use indices eval_offset + i
    objects_min: int = 1
    objects_max: int = 6
    background: float = 0.35
    noise_amplitude: float = 0.1
    max_iou: float = 0.3
    retries: int = 20

    def scene_spec(self, image_size: int) -> SceneSpec:
        return SceneSpec(
            image_size=image_size,
            categories=DEFAULT_CATEGORIES,
            objects_per_image=(self.objects_min, self.objects_max),
            background=self.background,
            noise_amplitude=self.noise_amplitude,
            seed=self.seed,
            max_iou=self.max_iou,
            retries=self.retries,
        )


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def model(self) -> ModelConfig:
        return self.train.model

    def validate(self) -> None:
        self.train.validate()
        self.eval.validate()
        try:
            spec = self.data.scene_spec(self.model.image_size)
        except ValueError as exc:
            raise ConfigError(f"[data]: {exc}") from None
        if self.model.num_classes != len(spec.categories):
            raise ConfigError(
                f"model.num_classes={self.model.num_classes} but the scene generator has {len(spec.categories)} categories"
            )
        if self.data.train_count < 1 or self.data.eval_count < 1:
            raise ConfigError("data.train_count and data.eval_count must be positive")

    def with_model(self, **changes) -> "RunConfig":
        model = dataclasses.replace(self.model, **changes)
        return dataclasses.replace(self, train=dataclasses.replace(self.train, model=model))

    def with_train(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **changes))

    def digest(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()[:16]


def _section_fields() -> Dict[str, List[Tuple[str, object]]]:
    model_fields = [(f.name, f.default) for f in dataclasses.fields(ModelConfig)]
    return {
        "data": [(f.name, f.default) for f in dataclasses.fields(DataConfig)],
        "model": [(n, d) for n, d in model_fields if n not in LOSS_KEYS],
        "loss": [(n, d) for n, d in model_fields if n in LOSS_KEYS],
        "train": [(f.name, f.default) for f in dataclasses.fields(TrainConfig) if f.name != "model"],
        "eval": [(f.name, f.default) for f in dataclasses.fields(EvalConfig)],
    }


SECTIONS = tuple(_section_fields())


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})") from None


def loads(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keys are case-sensitive (L)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    known = _section_fields()
    values: Dict[str, dict] = {name: {} for name in known}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"{source}: unknown section [{section}]; expected one of {list(known)}")
        defaults = dict(known[section])
        for key, raw in parser.items(section):
            where = f"{source}: {section}.{key}"
            if key not in defaults:
                raise ConfigError(f"{where}: unknown key; valid keys are {sorted(defaults)}")
            values[section][key] = _parse(raw, defaults[key], where)
    try:
        model = ModelConfig(**values["model"], **values["loss"])
        cfg = RunConfig(
            data=DataConfig(**values["data"]),
            train=TrainConfig(**values["train"], model=model),
            eval=EvalConfig(**values["eval"]),
        )
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: cannot read config ({exc.strerror})") from None
    return loads(text, str(path))


def dumps(cfg: RunConfig) -> str:
    """Canonical text: every key, in declaration order, one section after another."""
    sources = {"data": cfg.data, "model": cfg.model, "loss": cfg.model, "train": cfg.train, "eval": cfg.eval}
    lines: List[str] = []
    for section, keys in _section_fields().items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for key, _default in keys:
            lines.append(f"{key} = {_format(getattr(sources[section], key))}")
    return "\n".join(lines) + "\n"
