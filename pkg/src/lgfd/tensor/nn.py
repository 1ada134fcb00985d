"""Parameter containers, layers and the SGD optimiser."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Attribute-registered tree of parameters, buffers and submodules.

    Parameter names are dotted attribute paths, e.g. ``fpn.p3.conv.weight``.
    """

    def __init__(self):
        self.training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item
            elif isinstance(value, dict):
                for k in sorted(value):
                    if isinstance(value[k], (Parameter, Module)):
                        yield f"{key}.{k}", value[k]

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        out = []
        for key, child in self._children():
            path = f"{prefix}{key}"
            if isinstance(child, Parameter):
                out.append((path, child))
            else:
                out.extend(child.named_parameters(path + "."))
        return out

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
        out = []
        for key, child in self._children():
            if isinstance(child, Module):
                out.extend(child.named_buffers(f"{prefix}{key}."))
        out.extend((f"{prefix}{k}", v) for k, v in self._own_buffers())
        return out

    def _own_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return []

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {n for n, _ in self.named_buffers()}
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()
        for name, _ in self.named_buffers():
            owner, leaf = self._locate(name)
            owner._set_buffer(leaf, np.asarray(state[name], dtype=DTYPE).copy())

    def _locate(self, dotted: str):
        node = self
        parts = dotted.split(".")
        for part in parts[:-1]:
            if isinstance(node, (list, tuple)):
                node = node[int(part)]
            elif isinstance(node, dict):
                node = node[part]
            else:
                node = getattr(node, part)
        return node, parts[-1]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            if isinstance(child, Module):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        zero_grad(self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1, padding: Optional[int] = None, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(_he_normal(rng, (out_ch, in_ch, k, k), in_ch * k * k))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.state = F.BatchNormState(channels)

    def _own_buffers(self):
        return [("running_mean", self.state.running_mean), ("running_var", self.state.running_var)]

    def _set_buffer(self, name, value):
        setattr(self.state, name, value)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm2d(x, self.weight, self.bias, self.state, self.training, self.eps, self.momentum)


class ConvBNReLU(Module):
    """Convolution, batch norm and ReLU (the conv carries no bias)."""

    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, k, rng, stride=stride, bias=False)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise F.ConfigError(f"attention width {dim} is not divisible by heads={heads}")
        self.heads = heads
        scale = 1.0 / math.sqrt(dim)
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", Parameter(rng.uniform(-scale, scale, (dim, dim))))
            setattr(self, f"b{name}", Parameter(np.zeros(dim)))

    def forward(self, seq: Tensor, return_weights: bool = False):
        return F.multi_head_self_attention(
            seq, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.heads, return_weights=return_weights,
        )


# ------------------------------------------------------------------ optimiser
def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def sgd_step(params, lr: float, momentum: float = 0.0, velocity: Optional[Dict[int, np.ndarray]] = None) -> None:
    """In-place SGD update; ``velocity`` holds per-parameter momentum buffers."""
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        step = p.grad
        if momentum:
            if velocity is None:
                raise ValueError("momentum > 0 needs a velocity buffer dict")
            buf = velocity.get(i)
            buf = step.copy() if buf is None else momentum * buf + step
            velocity[i] = buf
            step = buf
        p.data -= lr * step


class SGD:
    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self.params, self.lr, self.momentum, self.velocity)

    def zero_grad(self) -> None:
        zero_grad(self.params)
