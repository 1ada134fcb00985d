"""Contrastive alignment, cosine disentanglement and dense detection losses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .boxes import BBox
from .model import DensePrediction
from .tensor import ConfigError, ShapeError, Tensor, concat
from .tensor import functional as F

log = logging.getLogger(__name__)

DET_WEIGHTS = (1.0, 1.0, 5.0)


@dataclass
class LossBundle:
    l_det: Tensor
    l_al: Tensor
    l_ds: Tensor
    alpha: float
    beta: float
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {"l_det": self.l_det.item(), "l_al": self.l_al.item(), "l_ds": self.l_ds.item(), "total": self.total.item()}


def similarity_matrix(obj_embeds: Tensor, text_embeds, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of every image embedding (rows) with every caption (columns)."""
    text = text_embeds.detach() if isinstance(text_embeds, Tensor) else Tensor(text_embeds)
    if obj_embeds.ndim != 2 or text.ndim != 2:
        raise ShapeError(f"embeddings must be [b,L]; got {obj_embeds.shape} and {text.shape}")
    if obj_embeds.shape[1] != text.shape[1]:
        raise ShapeError(f"embedding widths differ: image L={obj_embeds.shape[1]}, text L={text.shape[1]}")
    text_n = text.data / np.maximum(np.linalg.norm(text.data, axis=1, keepdims=True), eps)
    return F.normalize_rows(obj_embeds, eps) @ Tensor(np.ascontiguousarray(text_n.T))


def alignment_loss(S: Tensor, tau: float, symmetric: bool = False) -> Tensor:
    """Image-to-text InfoNCE over a square similarity matrix.

    ``-(1/b) sum_i log softmax_j(S_ij / tau)[i]``; with ``symmetric`` the
    text-to-image direction is averaged in.
    """
    if tau <= 0:
        raise ConfigError(f"temperature tau must be positive, got {tau}")
    b = S.shape[0]
    if S.shape != (b, b):
        raise ShapeError(f"similarity matrix must be square, got {S.shape}")
    eye = np.eye(b)
    logits = S * (1.0 / tau)
    loss = -(F.log_softmax(logits, axis=1) * eye).sum() * (1.0 / b)
    if symmetric:
        loss_t = -(F.log_softmax(logits, axis=0) * eye).sum() * (1.0 / b)
        loss = (loss + loss_t) * 0.5
    return loss


def disentangle_loss(f_obj: Tensor, f_nobj: Tensor, eps: float = 1e-8, absolute: bool = False) -> Tensor:
    """Batch-mean cosine between spatially averaged object and non-object features.

    When the two groups differ in width the shorter pooled vector is zero-padded.
    """
    a = F.global_avg_pool(f_obj)
    b = F.global_avg_pool(f_nobj)
    B = a.shape[0]
    if a.shape[1] < b.shape[1]:
        a = concat([a, Tensor(np.zeros((B, b.shape[1] - a.shape[1])))], axis=1)
    elif b.shape[1] < a.shape[1]:
        b = concat([b, Tensor(np.zeros((B, a.shape[1] - b.shape[1])))], axis=1)
    cos = F.cosine(a, b, eps)
    if absolute:
        F._note_kinks(cos.data > 0)
        cos = cos * np.sign(cos.data)
    return cos.mean()


def disentangle_levels(f_obj: Dict[str, Tensor], f_nobj: Dict[str, Tensor], eps: float = 1e-8, absolute: bool = False) -> Tensor:
    terms = [disentangle_loss(f_obj[lvl], f_nobj[lvl], eps, absolute) for lvl in f_obj]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


# ----------------------------------------------------------- detection targets
@dataclass
class LevelTargets:
    objectness: np.ndarray  # [B,1,h,w]
    classes: np.ndarray  # [B,C,h,w]
    boxes: np.ndarray  # [B,4,h,w]
    positive: np.ndarray  # [B,h,w] bool


@dataclass
class GridTargets:
    levels: List[LevelTargets]
    assigned: int
    skipped: int


def nearest_level(size: float, priors: Sequence[float]) -> int:
    return min(range(len(priors)), key=lambda i: (abs(priors[i] - size), i))


def assign_targets(
    annotations: Sequence[Sequence[BBox]],
    grids: Sequence[Tuple[int, int]],
    strides: Sequence[int],
    priors: Sequence[float],
    num_classes: int,
) -> GridTargets:
    """Give each box one cell: its centre cell on the level with the nearest prior size."""
    B = len(annotations)
    levels = [
        LevelTargets(
            np.zeros((B, 1, h, w)), np.zeros((B, num_classes, h, w)), np.zeros((B, 4, h, w)), np.zeros((B, h, w), dtype=bool)
        )
        for h, w in grids
    ]
    assigned = skipped = 0
    for bi, boxes in enumerate(annotations):
        owner: Dict[Tuple[int, int, int], BBox] = {}
        for box in boxes:
            li = nearest_level(math.sqrt(box.w * box.h), priors)
            h, w = grids[li]
            s = strides[li]
            cx, cy = box.center
            gx = min(max(int(cx // s), 0), w - 1)
            gy = min(max(int(cy // s), 0), h - 1)
            key = (li, gy, gx)
            if key in owner:
                skipped += 1
                log.debug("image %d: two boxes share level %d cell (%d, %d); keeping the larger", bi, li, gy, gx)
                if box.area <= owner[key].area:
                    continue
            owner[key] = box
        for (li, gy, gx), box in owner.items():
            lt = levels[li]
            s, prior = strides[li], priors[li]
            cx, cy = box.center
            lt.positive[bi, gy, gx] = True
            lt.objectness[bi, 0, gy, gx] = 1.0
            lt.classes[bi, :, gy, gx] = 0.0
            lt.classes[bi, box.category_id, gy, gx] = 1.0
            lt.boxes[bi, :, gy, gx] = (cx / s - gx, cy / s - gy, math.log(box.w / prior), math.log(box.h / prior))
            assigned += 1
    return GridTargets(levels, assigned, skipped)


def targets_for(pred: DensePrediction, annotations: Sequence[Sequence[BBox]]) -> GridTargets:
    grids = [tuple(o.shape[2:]) for o in pred.objectness]
    return assign_targets(annotations, grids, pred.strides, pred.priors, pred.classes[0].shape[1])


def _masked_mean(elementwise: Tensor, mask: np.ndarray) -> Tensor:
    count = mask.sum()
    if count == 0:
        return Tensor(0.0)
    return (elementwise * mask).sum() * (1.0 / count)


def detection_level_terms(obj: Tensor, cls: Tensor, box: Tensor, t: LevelTargets) -> Tuple[Tensor, Tensor, Tensor]:
    l_obj = F.bce_with_logits(obj, t.objectness).mean()
    pos = t.positive[:, None, :, :].astype(float)
    l_cls = _masked_mean(F.bce_with_logits(cls, t.classes), np.broadcast_to(pos, cls.shape))
    offsets = F.sigmoid(F.narrow(box, 1, 0, 2))
    sizes = F.narrow(box, 1, 2, 4)
    reg = concat([offsets, sizes], axis=1)
    l_box = _masked_mean(F.smooth_l1(reg, t.boxes), np.broadcast_to(pos, box.shape))
    return l_obj, l_cls, l_box


def detection_loss(pred: DensePrediction, targets: GridTargets, weights: Sequence[float] = DET_WEIGHTS) -> Tensor:
    """Objectness BCE on all cells, class BCE and smooth-L1 box terms on positive cells.

    Terms are averaged within each level, weighted, then summed over levels.
    """
    w_obj, w_cls, w_box = weights
    total = None
    for obj, cls, box, t in zip(pred.objectness, pred.classes, pred.boxes, targets.levels):
        l_obj, l_cls, l_box = detection_level_terms(obj, cls, box, t)
        term = l_obj * w_obj + l_cls * w_cls + l_box * w_box
        total = term if total is None else total + term
    return total


def total_loss(l_det: Tensor, l_al: Tensor, l_ds: Tensor, alpha: float, beta: float) -> LossBundle:
    total = l_det + l_al * alpha + l_ds * beta
    return LossBundle(l_det, l_al, l_ds, alpha, beta, total)
