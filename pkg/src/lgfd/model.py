"""Tiny detector with channel-decomposed pyramid levels.

Data flow for one batch::

    image -> 2x2 mean stem -> 4 stride-2 ConvBNReLU blocks      (strides 8, 16, 32 kept)
          -> FPN (1x1 lateral, nearest 2x top-down add, 3x3 smooth)
          -> decomposed levels split into [f_obj | f_nobj] by channel position
          -> detection head on f_obj (P5 and other undecomposed levels as is)
          -> projector(f_obj) per decomposed level, averaged -> image embedding

Only the detection branch runs at inference; f_nobj, the projectors and the
text encoder are never touched there.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .captions import CaptionRecord, HashEncoder, TextEncoder, tokenize
from .tensor import ConfigError, ShapeError, Tensor
from .tensor import functional as F
from .tensor.nn import Conv2d, ConvBNReLU, Module, MultiHeadSelfAttention

LEVELS = ("P3", "P4", "P5")
STRIDES = {"P3": 8, "P4": 16, "P5": 32}
HEAD_INPUTS = ("obj", "nobj", "concat")


@dataclass
class ModelConfig:
    L: int = 32
    decompose_levels: Tuple[str, ...] = ("P3", "P4")
    ratio: float = 0.5
    pool_S: int = 4
    heads: int = 2
    num_classes: int = 3
    image_size: int = 128
    tau: float = 0.07
    alpha: float = 1.0
    beta: float = 1.0
    symmetric_al: bool = False
    abs_ds: bool = False
    head_input: str = "obj"
    head_width: int = 16
    cbr_kernel: int = 1
    priors: Tuple[float, float, float] = (10.0, 20.0, 40.0)
    text_seed: int = 42
    eps: float = 1e-8

    def __post_init__(self):
        for lvl in self.decompose_levels:
            if lvl not in LEVELS:
                raise ConfigError(f"decompose_levels: unknown level {lvl!r}; expected a subset of {LEVELS}")
        self.decompose_levels = tuple(sorted(set(self.decompose_levels), key=LEVELS.index))
        self.priors = tuple(float(p) for p in self.priors)
        self.validate()

    def validate(self) -> None:
        if self.L < 8:
            raise ConfigError(f"L must be at least 8 (text embedding width), got {self.L}")
        for lvl in self.decompose_levels:
            if lvl not in LEVELS:
                raise ConfigError(f"decompose_levels: unknown level {lvl!r}; expected a subset of {LEVELS}")
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"ratio must lie in (0, 1), got {self.ratio}")
        if not 1 <= self.obj_channels < 2 * self.L:
            raise ConfigError(f"ratio {self.ratio} with L={self.L} leaves an empty channel group")
        if self.heads < 1 or self.L % self.heads:
            raise ConfigError(f"L={self.L} is not divisible by heads={self.heads}")
        if self.image_size % 32:
            raise ConfigError(f"image_size must be divisible by 32, got {self.image_size}")
        smallest = min((self.image_size // STRIDES[lvl] for lvl in self.decompose_levels), default=self.image_size)
        if not 1 <= self.pool_S <= smallest:
            raise ConfigError(f"pool_S={self.pool_S} exceeds the smallest decomposed map ({smallest}x{smallest})")
        if self.head_input not in HEAD_INPUTS:
            raise ConfigError(f"head_input must be one of {HEAD_INPUTS}, got {self.head_input!r}")
        if self.cbr_kernel not in (1, 3):
            raise ConfigError(f"cbr_kernel must be 1 or 3, got {self.cbr_kernel}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if len(self.priors) != 3 or min(self.priors) <= 0:
            raise ConfigError(f"priors must be three positive sizes, got {self.priors}")
        if self.num_classes < 1 or self.head_width < 1:
            raise ConfigError("num_classes and head_width must be positive")

    @property
    def obj_channels(self) -> int:
        return int(math.floor(2 * self.L * self.ratio + 0.5))

    @property
    def nobj_channels(self) -> int:
        return 2 * self.L - self.obj_channels

    def level_channels(self, level: str) -> int:
        return 2 * self.L if level in self.decompose_levels else self.L

    def head_channels(self, level: str) -> int:
        if level not in self.decompose_levels:
            return self.L
        return {"obj": self.obj_channels, "nobj": self.nobj_channels, "concat": 2 * self.L}[self.head_input]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decompose_levels"] = list(self.decompose_levels)
        d["priors"] = list(self.priors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("decompose_levels", "priors"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class DensePrediction:
    """Per-level raw head outputs, ordered P3, P4, P5."""

    objectness: List[Tensor]
    classes: List[Tensor]
    boxes: List[Tensor]
    strides: Tuple[int, ...] = (8, 16, 32)
    priors: Tuple[float, ...] = (10.0, 20.0, 40.0)


@dataclass
class TrainOutput:
    pred: DensePrediction
    f_ori: Dict[str, Tensor]
    f_obj: Dict[str, Tensor]
    f_nobj: Dict[str, Tensor]
    level_embeds: Dict[str, Tensor]
    obj_embed: Optional[Tensor]
    text_embed: Tensor


class Backbone(Module):
    def __init__(self, L: int, rng: np.random.Generator):
        super().__init__()
        widths = (1, L // 2, L, 2 * L, 2 * L)
        self.blocks = [ConvBNReLU(widths[i], widths[i + 1], 3, rng, stride=2) for i in range(4)]

    def forward(self, images: Tensor) -> List[Tensor]:
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"images must be [B,1,H,W], got {images.shape}")
        H, W = images.shape[2:]
        if H % 32 or W % 32 or H != W:
            raise ShapeError(f"image height/width must be equal and divisible by 32, got {H}x{W}")
        x = F.adaptive_avg_pool2d(images, H // 2)
        stages = []
        for block in self.blocks:
            x = block(x)
            stages.append(x)
        return stages[1:]


class FPN(Module):
    """Top-down pyramid; merging happens at 2L channels, smoothing sets each level's width."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        L = cfg.L
        in_ch = {"P3": L, "P4": 2 * L, "P5": 2 * L}
        self.lateral = {lvl.lower(): Conv2d(in_ch[lvl], 2 * L, 1, rng) for lvl in LEVELS}
        self.smooth = {lvl.lower(): Conv2d(2 * L, cfg.level_channels(lvl), 3, rng) for lvl in LEVELS}

    def forward(self, stages: Sequence[Tensor]) -> Dict[str, Tensor]:
        c3, c4, c5 = stages
        m5 = self.lateral["p5"](c5)
        m4 = self.lateral["p4"](c4) + F.upsample_nearest2x(m5)
        m3 = self.lateral["p3"](c3) + F.upsample_nearest2x(m4)
        return {
            "P3": self.smooth["p3"](m3),
            "P4": self.smooth["p4"](m4),
            "P5": self.smooth["p5"](m5),
        }


class Projector(Module):
    """CBR -> adaptive pool to S x S -> self-attention -> mean over positions."""

    def __init__(self, in_ch: int, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.S = cfg.pool_S
        self.cbr = ConvBNReLU(in_ch, cfg.L, cfg.cbr_kernel, rng)
        self.attn = MultiHeadSelfAttention(cfg.L, cfg.heads, rng)

    def forward(self, f_obj: Tensor) -> Tensor:
        x = F.adaptive_avg_pool2d(self.cbr(f_obj), self.S)
        B, L = x.shape[:2]
        seq = x.reshape(B, L, self.S * self.S).transpose(0, 2, 1)
        return self.attn(seq).mean(axis=1)


class DetectHead(Module):
    def __init__(self, in_ch: int, width: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.in_ch = in_ch
        self.conv1 = Conv2d(in_ch, width, 3, rng)
        self.conv2 = Conv2d(width, width, 3, rng)
        self.obj = Conv2d(width, 1, 1, rng)
        self.cls = Conv2d(width, num_classes, 1, rng)
        self.box = Conv2d(width, 4, 1, rng)
        prior_logit = -math.log((1 - 0.01) / 0.01)
        self.obj.bias.data[:] = prior_logit
        self.cls.bias.data[:] = prior_logit
        for conv in (self.obj, self.cls, self.box):
            conv.weight.data *= 0.1

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"detection head expects {self.in_ch} input channels, got {x.shape[1]}")
        h = F.relu(self.conv2(F.relu(self.conv1(x))))
        return self.obj(h), self.cls(h), self.box(h)


FeatureHook = Callable[[str, np.ndarray], np.ndarray]


class LGFDModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 42, encoder: Optional[TextEncoder] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(cfg.L, rng)
        self.fpn = FPN(cfg, rng)
        self.projectors = {lvl.lower(): Projector(cfg.obj_channels, cfg, rng) for lvl in cfg.decompose_levels}
        self.heads = {
            lvl.lower(): DetectHead(cfg.head_channels(lvl), cfg.head_width, cfg.num_classes, rng) for lvl in LEVELS
        }
        self.encoder = encoder if encoder is not None else HashEncoder(cfg.L, cfg.text_seed)
        if self.encoder.dim != cfg.L:
            raise ConfigError(f"text encoder width {self.encoder.dim} != L={cfg.L}")

    # -------------------------------------------------------------- pieces
    def pyramid(self, images: Tensor, hook: Optional[FeatureHook] = None) -> Dict[str, Tensor]:
        feats = self.fpn(self.backbone(images))
        if hook is not None:
            feats = {lvl: _hooked(t, hook(lvl, t.data.copy())) for lvl, t in feats.items()}
        return feats

    def decompose(self, f_ori: Tensor) -> Tuple[Tensor, Tensor]:
        if f_ori.shape[1] != 2 * self.cfg.L:
            raise ShapeError(f"decompose expects {2 * self.cfg.L} channels, got {f_ori.shape[1]}")
        return F.channel_split(f_ori, self.cfg.obj_channels)

    def _head_input(self, level: str, f_ori: Tensor) -> Tensor:
        cfg = self.cfg
        if level not in cfg.decompose_levels or cfg.head_input == "concat":
            return f_ori
        k = cfg.obj_channels
        if cfg.head_input == "obj":
            return F.narrow(f_ori, 1, 0, k)
        return F.narrow(f_ori, 1, k, 2 * cfg.L)

    def detect(self, head_inputs: Dict[str, Tensor]) -> DensePrediction:
        outs = [self.heads[lvl.lower()](head_inputs[lvl]) for lvl in LEVELS]
        return DensePrediction(
            objectness=[o[0] for o in outs],
            classes=[o[1] for o in outs],
            boxes=[o[2] for o in outs],
            strides=tuple(STRIDES[lvl] for lvl in LEVELS),
            priors=self.cfg.priors,
        )

    def encode_captions(self, captions: Sequence) -> Tensor:
        rows = []
        for cap in captions:
            if isinstance(cap, CaptionRecord):
                tokens = cap.tokens
            elif isinstance(cap, str):
                tokens = tokenize(cap)
            else:
                tokens = list(cap)
            rows.append(self.encoder.encode(tokens))
        return Tensor(np.stack(rows))

    # ------------------------------------------------------------- forwards
    def forward_train(self, images: Tensor, captions: Sequence, hook: Optional[FeatureHook] = None) -> TrainOutput:
        B = images.shape[0]
        if len(captions) != B:
            raise ShapeError(f"got {len(captions)} captions for {B} images")
        if self.training and B < 2:
            raise ConfigError("forward_train needs a batch of at least 2 images in train mode")
        feats = self.pyramid(images, hook)
        f_obj, f_nobj, embeds = {}, {}, {}
        for lvl in self.cfg.decompose_levels:
            f_obj[lvl], f_nobj[lvl] = self.decompose(feats[lvl])
            embeds[lvl] = self.projectors[lvl.lower()](f_obj[lvl])
        head_in = {}
        for lvl in LEVELS:
            if lvl in self.cfg.decompose_levels:
                head_in[lvl] = {"obj": f_obj[lvl], "nobj": f_nobj[lvl], "concat": feats[lvl]}[self.cfg.head_input]
            else:
                head_in[lvl] = feats[lvl]
        pred = self.detect(head_in)
        obj_embed = None
        if embeds:
            levels = list(embeds.values())
            total = levels[0]
            for e in levels[1:]:
                total = total + e
            obj_embed = total * (1.0 / len(levels))
        return TrainOutput(pred, feats, f_obj, f_nobj, embeds, obj_embed, self.encode_captions(captions))

    def forward_infer(self, images: Tensor, hook: Optional[FeatureHook] = None) -> DensePrediction:
        if self.training:
            raise ConfigError("forward_infer requires eval mode; call model.eval() first")
        feats = self.pyramid(images, hook)
        return self.detect({lvl: self._head_input(lvl, feats[lvl]) for lvl in LEVELS})

    def forward(self, images: Tensor) -> DensePrediction:
        return self.forward_infer(images)

    def checkpoint_meta(self) -> dict:
        return {"model": self.cfg.to_dict()}


def _hooked(t: Tensor, new_data: np.ndarray) -> Tensor:
    """Replace ``t``'s values while keeping its gradient path (test instrumentation)."""
    delta = Tensor(np.asarray(new_data) - t.data)
    return t + delta


def parameter_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def head_macs(cfg: ModelConfig, head_input: Optional[str] = None) -> int:
    """Multiply-accumulates of all detection heads for one image."""
    if head_input is not None:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), "head_input": head_input})
    total = 0
    for lvl in LEVELS:
        cells = (cfg.image_size // STRIDES[lvl]) ** 2
        c_in, w = cfg.head_channels(lvl), cfg.head_width
        per_cell = 9 * c_in * w + 9 * w * w + w * (1 + cfg.num_classes + 4)
        total += cells * per_cell
    return total
