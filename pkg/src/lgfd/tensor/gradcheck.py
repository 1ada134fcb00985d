"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .functional import track_kinks
from .tensor import Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, index: Tuple[int, ...], h: float = 1e-4) -> float:
    """d fn / d arr[index] by central differences; ``arr`` is perturbed in place and restored."""
    old = arr[index]
    arr[index] = old + h
    plus = fn()
    arr[index] = old - h
    minus = fn()
    arr[index] = old
    return (plus - minus) / (2.0 * h)


def _traced(fn: Callable[[], Tensor]) -> Tuple[float, List[bytes]]:
    with track_kinks() as log:
        value = fn().item()
    return value, [side.tobytes() for side in log]


def kink_safe_numeric_grad(
    fn: Callable[[], Tensor], arr: np.ndarray, index: Tuple[int, ...], h: float = 1e-4
) -> Tuple[float, bool]:
    """Central difference plus whether either probe left the base point's smooth piece."""
    old = arr[index]
    _, base = _traced(fn)
    arr[index] = old + h
    plus, side_p = _traced(fn)
    arr[index] = old - h
    minus, side_m = _traced(fn)
    arr[index] = old
    return (plus - minus) / (2.0 * h), side_p != base or side_m != base


def sample_indices(rng: np.random.Generator, tensors: Sequence[Tensor], count: int) -> List[Tuple[int, Tuple[int, ...]]]:
    """Pick ``count`` (tensor index, element index) pairs, weighted by tensor size."""
    sizes = np.array([t.size for t in tensors], dtype=float)
    picks = []
    for _ in range(count):
        ti = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        flat = int(rng.integers(tensors[ti].size))
        picks.append((ti, np.unravel_index(flat, tensors[ti].shape)))
    return picks


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    count: int = 20,
    h: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
    indices: Optional[Iterable[Tuple[int, Tuple[int, ...]]]] = None,
    floor: float = 1e-8,
) -> List[dict]:
    """Compare analytic and numeric gradients at sampled entries of ``tensors``.

    ``loss_fn`` must rebuild the graph from the current tensor values each call.
    Returns one record per sampled entry with keys ``analytic``, ``numeric``,
    ``rel_err`` and ``crossed_kink`` (a ReLU or other piecewise op switched
    branch inside ``[x - h, x + h]``, so the difference quotient does not
    estimate the derivative there).
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    if indices is None:
        indices = sample_indices(rng or np.random.default_rng(0), tensors, count)
    records = []
    for ti, idx in indices:
        num, crossed = kink_safe_numeric_grad(loss_fn, tensors[ti].data, idx, h)
        ana = float(analytic[ti][idx])
        records.append({
            "tensor": ti,
            "index": tuple(int(i) for i in idx),
            "analytic": ana,
            "numeric": num,
            "rel_err": relative_error(ana, num, floor),
            "crossed_kink": crossed,
        })
    return records
