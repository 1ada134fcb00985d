"""Decoding dense predictions, COCO-style AP, and feature diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boxes import BBox, iou
from .data import Batch, Dataset, make_batches, write_pgm
from .losses import disentangle_levels, similarity_matrix
from .model import LGFDModel
from .tensor import ConfigError, Tensor, no_grad
from .tensor.tensor import _sigmoid

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
AREA_RANGES = {"s": (0.0, 32.0 ** 2), "m": (32.0 ** 2, 96.0 ** 2), "l": (96.0 ** 2, math.inf)}
REPORT_KEYS = ("map", "ap50", "ap75", "ap_s", "ap_m", "ap_l", "per_class", "mean_obj_nobj_cosine", "text_retrieval_top1")
# size regressors are clamped before exp so decoded boxes stay finite and non-empty
_LOG_SIZE_RANGE = (-20.0, 10.0)


@dataclass(frozen=True)
class Detection:
    box: BBox
    category_id: int
    score: float


@dataclass(frozen=True)
class EvalConfig:
    score_thresh: float = 0.01
    nms_iou: float = 0.5
    max_det: int = 100
    batch_size: int = 16

    def validate(self) -> None:
        if not 0.0 <= self.score_thresh <= 1.0:
            raise ConfigError(f"eval.score_thresh must lie in [0, 1], got {self.score_thresh}")
        if not 0.0 < self.nms_iou <= 1.0:
            raise ConfigError(f"eval.nms_iou must lie in (0, 1], got {self.nms_iou}")
        if self.max_det < 1:
            raise ConfigError(f"eval.max_det must be positive, got {self.max_det}")
        if self.batch_size < 1:
            raise ConfigError(f"eval.batch_size must be positive, got {self.batch_size}")


@dataclass
class EvalReport:
    map: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_s: Optional[float]
    ap_m: Optional[float]
    ap_l: Optional[float]
    per_class: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    mean_obj_nobj_cosine: Optional[float] = None
    text_retrieval_top1: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(**{k: d[k] for k in REPORT_KEYS})


# ------------------------------------------------------------------- decoding
def decode_cell(stride: int, prior: float, gx: int, gy: int, params: Sequence[float]) -> BBox:
    """Box for raw regressor ``(tx, ty, tw, th)`` at grid cell ``(gx, gy)``."""
    tx, ty, tw, th = params
    sx, sy = _sigmoid(np.array([tx, ty], dtype=float))
    cx, cy = (gx + sx) * stride, (gy + sy) * stride
    w = prior * math.exp(min(max(tw, _LOG_SIZE_RANGE[0]), _LOG_SIZE_RANGE[1]))
    h = prior * math.exp(min(max(th, _LOG_SIZE_RANGE[0]), _LOG_SIZE_RANGE[1]))
    return BBox(cx - w / 2.0, cy - h / 2.0, w, h)


def encode_cell(box: BBox, stride: int, prior: float) -> Tuple[int, int, Tuple[float, float, float, float]]:
    """Inverse of :func:`decode_cell`: the owning cell and its raw regressor values."""
    cx, cy = box.center
    gx, gy = int(cx // stride), int(cy // stride)
    ox, oy = cx / stride - gx, cy / stride - gy
    if not (0.0 < ox < 1.0 and 0.0 < oy < 1.0):
        raise ValueError(f"box centre ({cx}, {cy}) sits on a cell edge; its offset logit is unbounded")
    logit = lambda p: math.log(p / (1.0 - p))  # noqa: E731
    return gx, gy, (logit(ox), logit(oy), math.log(box.w / prior), math.log(box.h / prior))


def _iou_many(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    # boxes as rows of (x0, y0, x1, y1)
    iw = np.minimum(box[2], others[:, 2]) - np.maximum(box[0], others[:, 0])
    ih = np.minimum(box[3], others[:, 3]) - np.maximum(box[1], others[:, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area + areas - inter)


def nms(xyxy: np.ndarray, scores: np.ndarray, iou_thresh: float) -> List[int]:
    """Greedy NMS; returns kept indices, highest score first (ties keep input order)."""
    order = np.argsort(-scores, kind="stable")
    keep: List[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest):
            suppressed[rest[_iou_many(xyxy[i], xyxy[rest]) > iou_thresh]] = True
    return keep


def decode(pred, score_thresh: float = 0.05, nms_iou: float = 0.5, max_det: int = 100) -> List[List[Detection]]:
    """Scores are sigmoid(objectness) * sigmoid(class); NMS runs per class."""
    B = pred.objectness[0].shape[0]
    parts = []
    for obj, cls, box, stride, prior in zip(pred.objectness, pred.classes, pred.boxes, pred.strides, pred.priors):
        scores = _sigmoid(obj.data[:, 0])[:, None] * _sigmoid(cls.data)
        bi, ci, gy, gx = np.nonzero(scores > score_thresh)
        raw = box.data[bi, :, gy, gx]
        off = _sigmoid(raw[:, :2])
        wh = prior * np.exp(np.clip(raw[:, 2:], *_LOG_SIZE_RANGE))
        x0 = (gx + off[:, 0]) * stride - wh[:, 0] / 2.0
        y0 = (gy + off[:, 1]) * stride - wh[:, 1] / 2.0
        parts.append((bi, ci, scores[bi, ci, gy, gx], np.stack([x0, y0, x0 + wh[:, 0], y0 + wh[:, 1]], axis=1), wh))
    bi, ci, sc, xyxy, wh = (np.concatenate(p) for p in zip(*parts))
    out: List[List[Detection]] = []
    for b in range(B):
        idx = np.flatnonzero(bi == b)
        kept: List[int] = []
        for c in np.unique(ci[idx]):
            sel = idx[ci[idx] == c]
            kept.extend(int(sel[k]) for k in nms(xyxy[sel], sc[sel], nms_iou))
        kept.sort(key=lambda i: (-sc[i], i))
        out.append([
            Detection(
                BBox(float(xyxy[i, 0]), float(xyxy[i, 1]), float(wh[i, 0]), float(wh[i, 1]), int(ci[i])),
                int(ci[i]),
                float(sc[i]),
            )
            for i in kept[:max_det]
        ])
    return out


# --------------------------------------------------------------------- metrics
def average_precision(
    detections: Sequence[Tuple[Hashable, float, BBox]],
    ground_truth: Mapping[Hashable, Sequence[BBox]],
    iou_thresh: float = 0.5,
    area_range: Optional[Tuple[float, float]] = None,
) -> Optional[float]:
    """All-point interpolated AP for one class.

    ``detections`` are ``(image_key, score, box)``; they are ranked by score with
    ties kept in the given order. Each ground-truth box is matched at most once,
    to the best-overlapping detection reaching ``iou_thresh`` first in rank.
    With ``area_range``, ground truth outside the range is ignored, as are
    detections matched to it and unmatched detections outside the range.
    Returns None when the class has no (non-ignored) ground truth.
    """
    def outside(box: BBox) -> bool:
        return area_range is not None and not (area_range[0] <= box.area < area_range[1])

    gts = {k: list(v) for k, v in ground_truth.items()}
    ignored = {k: [outside(b) for b in v] for k, v in gts.items()}
    npos = sum(not flag for flags in ignored.values() for flag in flags)
    if npos == 0:
        return None
    matched = {k: [False] * len(v) for k, v in gts.items()}
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    tp: List[float] = []
    for i in order:
        key, _score, box = detections[i]
        best, best_iou, best_ignored = -1, -1.0, True
        for j, g in enumerate(gts.get(key, ())):
            if matched[key][j]:
                continue
            o = iou(box, g)
            if o < iou_thresh:
                continue
            ign = ignored[key][j]
            # a real match always beats an ignored one
            if best < 0 or (best_ignored and not ign) or (ign == best_ignored and o > best_iou):
                best, best_iou, best_ignored = j, o, ign
        if best >= 0:
            matched[key][best] = True
            if not best_ignored:
                tp.append(1.0)
        elif not outside(box):
            tp.append(0.0)
    if not tp:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum([1.0 - t for t in tp])
    recall = tps / npos
    precision = tps / (tps + fps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def detection_metrics(
    detections: Mapping[Hashable, Sequence[Detection]],
    ground_truth: Mapping[Hashable, Sequence[BBox]],
    categories: Sequence[str],
) -> dict:
    """COCO-style summary over images keyed alike in both mappings."""
    keys = list(ground_truth)
    per_class_dets = {c: [] for c in range(len(categories))}
    for k in keys:
        for d in detections.get(k, ()):
            per_class_dets[d.category_id].append((k, d.score, d.box))
    per_class_gt = {c: {k: [b for b in ground_truth[k] if b.category_id == c] for k in keys} for c in per_class_dets}

    def ap(c, t, area=None):
        return average_precision(per_class_dets[c], per_class_gt[c], t, area)

    table = {}
    ap_by_thresh = {t: [] for t in IOU_THRESHOLDS}
    for c, name in enumerate(categories):
        aps = {t: ap(c, t) for t in IOU_THRESHOLDS}
        for t, v in aps.items():
            ap_by_thresh[t].append(v)
        table[name] = {"map": _mean(aps.values()), "ap50": aps[0.5], "ap75": aps[0.75]}
    means = {t: _mean(v) for t, v in ap_by_thresh.items()}
    out = {"map": _mean(means.values()), "ap50": means[0.5], "ap75": means[0.75], "per_class": table}
    for split, rng in AREA_RANGES.items():
        per_t = [_mean(ap(c, t, rng) for c in per_class_dets) for t in IOU_THRESHOLDS]
        out[f"ap_{split}"] = _mean(per_t)
    return out


def retrieval_hits(S: np.ndarray) -> int:
    """Rows whose own caption wins; ties go to the lowest column index."""
    return int(np.sum(np.argmax(S, axis=1) == np.arange(S.shape[0])))


def evaluate(
    model: LGFDModel,
    dataset: Dataset,
    config: Optional[EvalConfig] = None,
    predict: Optional[Callable[[Batch], List[List[Detection]]]] = None,
    retrieval_batch: int = 16,
) -> EvalReport:
    """Detection metrics plus object/non-object cosine and in-batch caption retrieval.

    ``predict`` replaces the model's decoded detections (used to inject oracles).
    Retrieval is scored on consecutive chunks of ``retrieval_batch`` images; a
    trailing partial chunk is dropped unless it is the only one.
    """
    config = config or EvalConfig()
    config.validate()
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    dets: Dict[int, List[Detection]] = {}
    gts: Dict[int, List[BBox]] = {}
    cos_sum, cos_n = 0.0, 0
    hits, scored = 0, 0
    chunk = retrieval_batch if len(dataset) >= retrieval_batch else len(dataset)
    try:
        with no_grad():
            batches = make_batches(dataset, chunk, train=False, encoder=model.encoder)
            for batch in batches:
                if predict is not None:
                    found = predict(batch)
                else:
                    found = decode(model.forward_infer(batch.images), config.score_thresh, config.nms_iou, config.max_det)
                for pos, key in enumerate(batch.image_ids):
                    dets[key] = found[pos]
                    gts[key] = batch.annotations[pos]
                out = model.forward_train(batch.images, batch.captions)
                B = len(batch.image_ids)
                if out.f_obj:
                    cos_sum += disentangle_levels(out.f_obj, out.f_nobj, model.cfg.eps).item() * B
                    cos_n += B
                if out.obj_embed is not None and B == chunk:
                    S = similarity_matrix(out.obj_embed, out.text_embed, model.cfg.eps).data
                    hits += retrieval_hits(S)
                    scored += B
    finally:
        model.train(was_training)
    m = detection_metrics(dets, gts, dataset.categories)
    return EvalReport(
        map=m["map"],
        ap50=m["ap50"],
        ap75=m["ap75"],
        ap_s=m["ap_s"],
        ap_m=m["ap_m"],
        ap_l=m["ap_l"],
        per_class=m["per_class"],
        mean_obj_nobj_cosine=cos_sum / cos_n if cos_n else None,
        text_retrieval_top1=hits / scored if scored else None,
    )


# ------------------------------------------------------------------- heatmaps
def heatmap(feature: np.ndarray, out_size: Tuple[int, int]) -> np.ndarray:
    """Channel-mean |feature| of a ``[C,h,w]`` map as uint8, min-max scaled and upsampled."""
    m = np.abs(feature).mean(axis=0)
    lo, hi = m.min(), m.max()
    norm = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    img = np.round(norm * 255.0).astype(np.uint8)
    H, W = out_size
    h, w = img.shape
    if H % h or W % w:
        raise ValueError(f"output size {out_size} is not a multiple of the feature grid {img.shape}")
    return np.repeat(np.repeat(img, H // h, axis=0), W // w, axis=1)


def export_activation_maps(model: LGFDModel, images: Sequence, out_dir) -> List[Path]:
    """Write ``<image_id>_<level>_{obj|nobj}.pgm`` for every decomposed level."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = list(images)
    written: List[Path] = []
    if not images or not model.cfg.decompose_levels:
        return written
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for start in range(0, len(images), 16):
                items = images[start:start + 16]
                feats = model.pyramid(Tensor(np.stack([im.pixels for im in items])))
                for lvl in model.cfg.decompose_levels:
                    f_obj, f_nobj = model.decompose(feats[lvl])
                    for part, t in (("obj", f_obj), ("nobj", f_nobj)):
                        for pos, im in enumerate(items):
                            path = out / f"{im.image_id}_{lvl}_{part}.pgm"
                            write_pgm(path, heatmap(t.data[pos], (im.height, im.width)))
                            written.append(path)
    finally:
        model.train(was_training)
    return written
