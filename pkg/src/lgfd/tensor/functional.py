"""Differentiable operators used by the detector and its losses.

Every op takes and returns :class:`~lgfd.tensor.tensor.Tensor` and records a
backward closure. Heavy convolution work goes through :mod:`.kernels`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Optional, Tuple

import numpy as np

from . import kernels
from .tensor import DTYPE, ShapeError, Tensor, _make, _sigmoid, concat, exp, log, matmul, reshape, sigmoid, transpose


class ConfigError(ValueError):
    """Raised for invalid operator or model configuration values."""


# ----------------------------------------------------------------- convolution
def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [B,C,H,W] with ``weight`` [O,C,k,k]."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be [O,C,k,k], got {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has C={C}, weight expects C={Cw}")
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv2d kernel must be 1x1 or 3x3, got {k}x{k2}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")
    oh = conv_output_size(H, k, stride, padding)
    ow = conv_output_size(W, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty: H={H}, W={W}, k={k}, stride={stride}, padding={padding}")

    K = C * k * k
    P = oh * ow
    w2 = weight.data.reshape(O, K)
    pointwise = k == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.reshape(B, C, P)
        hp = wp = 0
    else:
        xp = kernels.pad2d(x.data, padding) if padding else x.data
        hp, wp = xp.shape[2], xp.shape[3]
        cols = kernels.im2col(xp, k, stride, oh, ow).reshape(B, K, P)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, oh, ow)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(B, O, P)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                dxp = kernels.col2im(dcols.reshape(B, C, k, k, oh, ow), hp, wp, stride)
                gx = np.ascontiguousarray(dxp[:, :, padding : padding + H, padding : padding + W]) if padding else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, backward)


# -------------------------------------------------------------- normalisation
class BatchNormState:
    """Running per-channel statistics carried between batch_norm2d calls."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels, dtype=DTYPE)
        self.running_var = np.ones(channels, dtype=DTYPE)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalisation of ``x`` [B,C,H,W].

    Training mode uses biased batch statistics for the output and folds the
    unbiased variance into the running estimate.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm2d input must be [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm2d affine params must be ({C},), got {gamma.shape}/{beta.shape}")
    xd = x.data
    gd = gamma.data[None, :, None, None]
    n = B * H * W
    if training:
        if n < 2:
            raise ConfigError(f"batch_norm2d in train mode needs at least 2 values per channel, got {n}")
        mu = xd.mean(axis=(0, 2, 3))
        centered = xd - mu[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std[None, :, None, None]
        state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mu
        state.running_var = (1.0 - momentum) * state.running_var + momentum * var * (n / (n - 1))
    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (xd - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if training:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (inv_std[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# ----------------------------------------------------------------- activations
_kink_log: Optional[list] = None


@contextlib.contextmanager
def track_kinks():
    """Record which side of every non-differentiable point each op landed on.

    Two forward passes with equal logs lie in the same smooth piece of the
    graph, which is what finite-difference checks need.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _note_kinks(side: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(np.packbits(side))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_kinks(mask)
    # NaN passes through so a poisoned input reaches the loss and trips the guard
    return _make(np.where(mask | np.isnan(x.data), x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True))
    out = x.data - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward)


# --------------------------------------------------------------------- pooling
def adaptive_bins(size: int, out: int) -> list:
    """Bin ranges ``[floor(i*size/out), ceil((i+1)*size/out))`` for each output index."""
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def _pool_matrix(size: int, out: int) -> np.ndarray:
    m = np.zeros((out, size), dtype=DTYPE)
    for i, (lo, hi) in enumerate(adaptive_bins(size, out)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool2d(x: Tensor, out_size: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"adaptive_avg_pool2d input must be [B,C,H,W], got {x.shape}")
    H, W = x.shape[2], x.shape[3]
    if not 1 <= out_size <= min(H, W):
        raise ConfigError(f"adaptive_avg_pool2d output size {out_size} must lie in [1, {min(H, W)}]")
    ph = _pool_matrix(H, out_size)
    pw = _pool_matrix(W, out_size)
    out = np.matmul(ph, np.matmul(x.data, pw.T))
    return _make(out, (x,), lambda g: (np.matmul(ph.T, np.matmul(g, pw)),))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be [B,C,H,W], got {x.shape}")
    H, W = x.shape[2], x.shape[3]
    scale = 1.0 / (H * W)
    out = x.data.sum(axis=(2, 3)) * scale
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy(),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


# ------------------------------------------------------------------- channels
def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        out = np.zeros(x.shape, dtype=DTYPE)
        out[index] = g
        return (out,)

    return _make(np.ascontiguousarray(x.data[index]), (x,), backward)


def channel_split(x: Tensor, at: int) -> Tuple[Tensor, Tensor]:
    channels = x.shape[1]
    if not 0 < at < channels:
        raise ConfigError(f"channel_split point {at} must lie strictly between 0 and {channels}")
    return narrow(x, 1, 0, at), narrow(x, 1, at, channels)


def channel_concat(a: Tensor, b: Tensor) -> Tensor:
    return concat((a, b), axis=1)


# -------------------------------------------------------------------- vectors
def clamped_norm(x: Tensor, eps: float) -> Tensor:
    """``max(||x||_2, eps)`` over the last axis (keepdims)."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    out = np.maximum(n, eps)
    active = n > eps
    safe = np.where(active, n, 1.0)

    def backward(g):
        return (np.where(active, g / safe, 0.0) * x.data,)

    return _make(out, (x,), backward)


def cosine(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis with norms floored at ``eps``."""
    if u.shape[-1] != v.shape[-1]:
        raise ShapeError(f"cosine operands differ in length: {u.shape[-1]} vs {v.shape[-1]}")
    dot = (u * v).sum(axis=-1, keepdims=True)
    out = dot / (clamped_norm(u, eps) * clamped_norm(v, eps))
    return reshape(out, out.shape[:-1])


def normalize_rows(x: Tensor, eps: float = 1e-8) -> Tensor:
    return x / clamped_norm(x, eps)


# ------------------------------------------------------------------ attention
def multi_head_self_attention(
    seq: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over ``seq`` [B,T,L].

    Projection weights are [L,L] applied on the right (``seq @ w + b``).
    """
    if seq.ndim != 3:
        raise ShapeError(f"attention input must be [B,T,L], got {seq.shape}")
    B, T, L = seq.shape
    if heads < 1 or L % heads:
        raise ConfigError(f"embedding width {L} is not divisible by heads={heads}")
    d = L // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (B, T, heads, d)), (0, 2, 1, 3))

    q = split(matmul(seq, wq) + bq)
    k = split(matmul(seq, wk) + bk)
    v = split(matmul(seq, wv) + bv)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (B, T, L))
    out = matmul(ctx, wo) + bo
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------- losses
def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on raw logits (no reduction)."""
    x = logits.data
    t = np.asarray(targets, dtype=DTYPE)
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (logits,), lambda g: (g * (_sigmoid(x) - t),))


def smooth_l1(pred: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise smooth-L1 (Huber with unit transition), no reduction."""
    d = pred.data - np.asarray(targets, dtype=DTYPE)
    ad = np.abs(d)
    _note_kinks(ad < 1.0)
    out = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    return _make(out, (pred,), lambda g: (g * np.clip(d, -1.0, 1.0),))
