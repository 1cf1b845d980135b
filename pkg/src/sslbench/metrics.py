"""Evaluation metrics for classification, detection, segmentation and depth.

All functions are pure and take and return numpy arrays. Per-image dense metrics
are returned alongside their means so callers can plot distributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

EPS = 1e-8
CONFIDENCE_FLOOR = 0.05
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------
# classification


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n_d: int

    @classmethod
    def from_labels(cls, pred: Sequence[int], true: Sequence[int], n_classes: int) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=np.int64)
        true = np.asarray(true, dtype=np.int64)
        if pred.shape != true.shape:
            raise MetricError("prediction and label counts differ")
        cm = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(cm, (true, pred), 1)
        tp = np.diag(cm).copy()
        return cls(tp=tp, fp=cm.sum(0) - tp, fn=cm.sum(1) - tp, n_d=int(len(true)))


def classification_metrics(counts: ConfusionCounts, eps: float = EPS) -> dict[str, float]:
    """Macro F1/precision/recall with the epsilon-smoothed per-class ratios, plus accuracy."""
    if counts.n_d <= 0:
        raise MetricError("no samples (N_D = 0)")
    tp = np.asarray(counts.tp, dtype=np.float64)
    fp = np.asarray(counts.fp, dtype=np.float64)
    fn = np.asarray(counts.fn, dtype=np.float64)
    n_c = len(tp)
    f1 = (2 * tp + eps) / (2 * tp + fp + fn + eps)
    prec = (tp + eps) / (tp + fp + eps)
    rec = (tp + eps) / (tp + fn + eps)
    return {
        "mF1": math.fsum(f1.tolist()) / n_c,
        "mPrecision": math.fsum(prec.tolist()) / n_c,
        "mRecall": math.fsum(rec.tolist()) / n_c,
        "Accuracy": float(tp.sum()) / counts.n_d,
    }


# --------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class ScoredBox:
    box: tuple[float, float, float, float]
    confidence: float
    image_id: str


def _check_box(b: Sequence[float]) -> None:
    if not (b[2] > b[0] and b[3] > b[1]):
        raise MetricError(f"degenerate box {list(b)}")


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    _check_box(a)
    _check_box(b)
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


@dataclass
class MatchResult:
    flags: np.ndarray  # True = TP, in rank order
    n_gt: int
    fn: int
    ranked: list[ScoredBox] = field(default_factory=list)


def match_and_count(
    preds: Sequence[ScoredBox],
    gts: Mapping[str, Sequence[Sequence[float]]],
    t: float,
    conf_floor: float = CONFIDENCE_FLOOR,
    one_to_one: bool = True,
) -> MatchResult:
    """Greedy matching of confidence-ranked predictions to ground truth.

    A prediction is a TP when its IoU with an (unmatched, if ``one_to_one``)
    target of the same image is strictly greater than ``t``; the best-IoU
    candidate is consumed.
    """
    kept = [p for p in preds if p.confidence >= conf_floor]
    order = sorted(range(len(kept)), key=lambda i: -kept[i].confidence)  # sorted() is stable
    ranked = [kept[i] for i in order]
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    flags = np.zeros(len(ranked), dtype=bool)
    for r, p in enumerate(ranked):
        targets = gts.get(p.image_id, ())
        best, best_j = t, -1
        for j, g in enumerate(targets):
            if one_to_one and used[p.image_id][j]:
                continue
            iou = box_iou(p.box, g)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            flags[r] = True
            used[p.image_id][best_j] = True
    n_gt = sum(len(v) for v in gts.values())
    n_matched = sum(int(u.sum()) for u in used.values())
    return MatchResult(flags=flags, n_gt=n_gt, fn=n_gt - n_matched, ranked=ranked)


def average_precision(match: MatchResult) -> float:
    """AP at one IoU threshold from ranked TP/FP flags.

    Recall breakpoints are 0, the recall at every rank holding a false
    positive, the final recall reached, and 1. Each breakpoint takes the
    highest precision observed at exactly that recall; an unreached recall
    scores precision 0.
    """
    if match.n_gt <= 0:
        raise MetricError("undefined recall: no ground-truth boxes")
    n_gt = match.n_gt
    tp_cum = np.cumsum(match.flags.astype(np.int64))
    # recall points as TP counts to avoid float equality
    points: list[int] = [0]
    for k, is_tp in enumerate(match.flags):
        if not is_tp and 0 < tp_cum[k] < n_gt and tp_cum[k] != points[-1]:
            points.append(int(tp_cum[k]))
    final = int(tp_cum[-1]) if len(tp_cum) else 0
    if 0 < final < n_gt and final != points[-1]:
        points.append(final)
    points.append(n_gt)

    def best_precision(c: int) -> float:
        hits = np.nonzero(tp_cum == c)[0]
        if len(hits) == 0 or c == 0:
            return 0.0
        return c / (hits[0] + 1)

    ap = 0.0
    for prev, cur in zip(points[:-1], points[1:]):
        ap += (cur - prev) / n_gt * best_precision(cur)
    return ap


def ap_at(preds: Sequence[ScoredBox], gts: Mapping[str, Sequence[Sequence[float]]], t: float, **kw) -> float:
    return average_precision(match_and_count(preds, gts, t, **kw))


def ap_range(
    preds: Sequence[ScoredBox], gts: Mapping[str, Sequence[Sequence[float]]], **kw
) -> dict[str, float]:
    per_t = {t: ap_at(preds, gts, t, **kw) for t in IOU_THRESHOLDS}
    return {
        "AP": math.fsum(per_t.values()) / len(per_t),
        "AP50": per_t[0.5],
        "AP75": per_t[0.75],
    }


# --------------------------------------------------------------------------
# resampling shared by dense metrics


def resize_bilinear(a: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping, no antialiasing (float64)."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape == (oh, ow):
        return a.copy()
    t = torch.from_numpy(a)[None, None]
    return F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False)[0, 0].numpy()


# --------------------------------------------------------------------------
# segmentation


def binarize_prediction(prob: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return resize_bilinear(prob, *shape) > 0.5


def per_image_overlap(pred: np.ndarray, target: np.ndarray, eps: float = EPS) -> dict[str, float]:
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    tp = float(np.sum(pred & target))
    fp = float(np.sum(pred & ~target))
    fn = float(np.sum(~pred & target))
    return {
        "Dice": (2 * tp + eps) / (2 * tp + fp + fn + eps),
        "IoU": (tp + eps) / (tp + fp + fn + eps),
        "Precision": (tp + eps) / (tp + fp + eps),
        "Recall": (tp + eps) / (tp + fn + eps),
    }


def segmentation_metrics(
    pred_probs: Sequence[np.ndarray], targets: Sequence[np.ndarray], eps: float = EPS
) -> dict[str, object]:
    """Resize each probability map to its target size, binarise, score, average.

    Returns the means (``mDice``, ``mIoU``, ``mPrecision``, ``mRecall``) and a
    ``per_image`` list.
    """
    if len(pred_probs) == 0:
        raise MetricError("empty test set")
    if len(pred_probs) != len(targets):
        raise MetricError("prediction and target counts differ")
    per = []
    for p, t in zip(pred_probs, targets):
        t = np.asarray(t)
        per.append(per_image_overlap(binarize_prediction(p, t.shape), t > 0, eps))
    out: dict[str, object] = {f"m{k}": math.fsum(d[k] for d in per) / len(per) for k in per[0]}
    out["per_image"] = per
    return out


# --------------------------------------------------------------------------
# depth


@dataclass
class DepthEvalPair:
    prediction_cm: np.ndarray
    target_cm: np.ndarray
    lens: np.ndarray


def depth_postprocess(
    raw: np.ndarray,
    scale: float,
    shift: float,
    lens: np.ndarray,
    h: int,
    w: int,
    max_depth_cm: float = 10.0,
) -> np.ndarray:
    """Aligned network-scale prediction -> depth in cm at the original size.

    Applies ``scale``/``shift``, resizes to the padded square, crops the
    padding, clips to [0, 1], zeroes pixels off the lens and rescales.
    """
    aligned = scale * np.asarray(raw, dtype=np.float64) + shift
    side = max(h, w)
    out = resize_bilinear(aligned, side, side)[:h, :w]
    out = np.clip(out, 0.0, 1.0)
    out[~np.asarray(lens, dtype=bool)] = 0.0
    return out * max_depth_cm


def depth_metrics(pairs: Sequence[DepthEvalPair]) -> dict[str, object]:
    """Per-image RMSE, median relative error and MAE on lens pixels, averaged.

    Zero-valued targets are excluded from the relative error only; the
    returned ``flags`` list records each image where that happened.
    """
    if len(pairs) == 0:
        raise MetricError("empty test set")
    rmse, mrae, mae, flags = [], [], [], []
    for i, pr in enumerate(pairs):
        lens = np.asarray(pr.lens, dtype=bool)
        if not lens.any():
            raise MetricError(f"image {i}: empty lens mask")
        y = np.asarray(pr.target_cm, dtype=np.float64)[lens]
        yh = np.asarray(pr.prediction_cm, dtype=np.float64)[lens]
        d = yh - y
        rmse.append(math.sqrt(float(np.mean(d * d))))
        mae.append(float(np.mean(np.abs(d))))
        nz = y != 0
        if not nz.all():
            flags.append(f"image {i}: {int((~nz).sum())} zero-depth lens pixels excluded from MRAE")
        mrae.append(float(np.median(np.abs(d[nz] / y[nz]))) if nz.any() else float("nan"))
    return {
        "mRMSE": math.fsum(rmse) / len(rmse),
        "mMRAE": float(np.nanmean(mrae)),
        "mMAE": math.fsum(mae) / len(mae),
        "per_image": [{"RMSE": a, "MRAE": b, "MAE": c} for a, b, c in zip(rmse, mrae, mae)],
        "flags": flags,
    }
