import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from oracles import naive_classification, random_scene, textbook_ap
from sslbench import metrics as M


def _to_scored(preds):
    return [M.ScoredBox(tuple(b), s, img) for img, b, s in preds]


# classification ----------------------------------------------------------------


def test_perfect_two_class():
    c = M.ConfusionCounts.from_labels([0, 1, 1, 0], [0, 1, 1, 0], 2)
    assert M.classification_metrics(c) == {"mF1": 1.0, "mPrecision": 1.0, "mRecall": 1.0, "Accuracy": 1.0}


def test_worked_confusion_example():
    # class 0: TP 1, FP 1; class 1: TP 1, FN 1
    c = M.ConfusionCounts(tp=np.array([1, 1]), fp=np.array([1, 0]), fn=np.array([0, 1]), n_d=3)
    out = M.classification_metrics(c)
    assert out["mF1"] == pytest.approx(2 / 3, abs=1e-8)
    assert out["Accuracy"] == pytest.approx(2 / 3)


def test_absent_class_scores_one():
    c = M.ConfusionCounts.from_labels([0, 0], [0, 0], 2)
    assert M.classification_metrics(c)["mF1"] == 1.0


def test_empty_counts_rejected():
    with pytest.raises(ValueError):
        M.classification_metrics(M.ConfusionCounts(np.zeros(2, int), np.zeros(2, int), np.zeros(2, int), 0))


@pytest.mark.parametrize("seed", range(20))
def test_classification_matches_loop(seed):
    rng = np.random.default_rng(seed)
    n_c = int(rng.integers(2, 7))
    n = int(rng.integers(1, 60))
    pred, true = rng.integers(0, n_c, n), rng.integers(0, n_c, n)
    got = M.classification_metrics(M.ConfusionCounts.from_labels(pred, true, n_c))
    assert got == naive_classification(pred.tolist(), true.tolist(), n_c)


# boxes and AP ------------------------------------------------------------------


def test_box_iou_examples():
    assert M.box_iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert M.box_iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert M.box_iou([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7)
    with pytest.raises(ValueError):
        M.box_iou([0, 0, 0, 2], [0, 0, 1, 1])


def test_match_rules():
    gts = {"a": [[0, 0, 10, 10]]}
    two = [M.ScoredBox((0, 0, 10, 10), 0.9, "a"), M.ScoredBox((0, 0, 10, 9), 0.8, "a")]
    r = M.match_and_count(two, gts, 0.5)
    assert list(r.flags) == [True, False] and r.fn == 0
    # IoU exactly 0.5 is not a match
    half = [M.ScoredBox((0, 0, 10, 5), 0.9, "a")]
    r = M.match_and_count(half, gts, 0.5)
    assert list(r.flags) == [False] and r.fn == 1


@pytest.mark.parametrize(
    "flags,n_gt,ap",
    [([True], 1, 1.0), ([False, True], 1, 0.5), ([True, False], 1, 1.0), ([], 1, 0.0), ([True, True], 3, 2 / 3)],
)
def test_ap_small_sequences(flags, n_gt, ap):
    m = M.MatchResult(flags=np.array(flags, bool), n_gt=n_gt, fn=n_gt - sum(flags), ranked=[])
    assert M.average_precision(m) == pytest.approx(ap, abs=1e-12)


def test_ap_requires_ground_truth():
    with pytest.raises(ValueError, match="undefined recall"):
        M.average_precision(M.MatchResult(flags=np.array([False]), n_gt=0, fn=0, ranked=[]))


def test_single_pair_iou_06():
    # 10x10 gt, pred shifted so that IoU = 0.6 exactly: overlap 75 / union 125
    gts = {"a": [[0, 0, 10, 10]]}
    pred = [M.ScoredBox((2.5, 0, 12.5, 10), 0.9, "a")]
    assert M.box_iou(pred[0].box, gts["a"][0]) == pytest.approx(0.6)
    out = M.ap_range(pred, gts)
    assert out["AP"] == pytest.approx(0.2, abs=1e-12)
    assert out["AP50"] == 1.0 and out["AP75"] == 0.0


def test_below_floor_gives_zero():
    gts = {"a": [[0, 0, 10, 10]]}
    out = M.ap_range([M.ScoredBox((0, 0, 10, 10), 0.01, "a")], gts)
    assert out == {"AP": 0.0, "AP50": 0.0, "AP75": 0.0}


@pytest.mark.parametrize("seed", range(25))
def test_ap_matches_textbook(seed):
    preds, gts = random_scene(np.random.default_rng(seed))
    for t in M.IOU_THRESHOLDS:
        assert M.ap_at(_to_scored(preds), gts, t) == pytest.approx(textbook_ap(preds, gts, t), abs=1e-9)


@given(st.integers(0, 10_000))
def test_ap_bounded_by_reachable_recall(seed):
    # AP is not monotone in t (a TP can move earlier in the ranking), but it never
    # exceeds the fraction of GT boxes some prediction overlaps by more than t
    preds, gts = random_scene(np.random.default_rng(seed))
    n_gt = sum(len(v) for v in gts.values())
    for t in M.IOU_THRESHOLDS:
        ap = M.ap_at(_to_scored(preds), gts, t)
        reachable = sum(
            any(img == i and s >= M.CONFIDENCE_FLOOR and M.box_iou(b, g) > t for i, b, s in preds)
            for img, boxes in gts.items()
            for g in boxes
        )
        assert 0.0 <= ap <= reachable / n_gt + 1e-12
    r = M.ap_range(_to_scored(preds), gts)
    assert 0.0 <= r["AP"] <= 1.0


# segmentation --------------------------------------------------------------------


def test_resize_half_pixel_ramp():
    # a linear ramp resamples to the ramp evaluated at clamped half-pixel source coordinates
    for n_in, n_out in [(7, 14), (11, 5), (7, 7), (9, 20)]:
        a = np.tile(np.arange(n_in, dtype=np.float64), (3, 1))
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        np.testing.assert_allclose(M.resize_bilinear(a, 3, n_out)[0], src, atol=1e-12)
    const = np.full((5, 6), 0.37)
    np.testing.assert_allclose(M.resize_bilinear(const, 13, 2), 0.37, atol=1e-15)


def test_segmentation_examples():
    t = np.zeros((4, 4), np.uint8)
    t[:2] = 1
    perfect = M.segmentation_metrics([t.astype(float)], [t])
    assert all(perfect[k] == 1.0 for k in ("mDice", "mIoU", "mPrecision", "mRecall"))
    empty = M.segmentation_metrics([np.zeros((4, 4))], [np.zeros((4, 4), np.uint8)])
    assert empty["mDice"] == 1.0
    full = M.segmentation_metrics([np.ones((4, 4))], [t])
    assert full["mDice"] == pytest.approx(2 / 3)
    assert full["mIoU"] == pytest.approx(0.5)
    assert full["mPrecision"] == pytest.approx(0.5)
    assert full["mRecall"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        M.segmentation_metrics([], [])


def test_segmentation_resizes_before_binarising():
    # a 2x2 probability map upsampled to 4x4 keeps the thresholded quadrant structure
    p = np.array([[1.0, 0.0], [0.0, 0.0]])
    t = np.zeros((4, 4), np.uint8)
    t[:2, :2] = 1
    assert M.segmentation_metrics([p], [t])["mDice"] == pytest.approx(1.0)


@given(st.integers(0, 10_000))
def test_dice_iou_relation(seed):
    r = np.random.default_rng(seed)
    p, t = r.random((6, 6)), (r.random((6, 6)) > 0.5).astype(np.uint8)
    d = M.segmentation_metrics([p], [t])["per_image"][0]
    assert d["IoU"] <= d["Dice"] + 1e-12
    assert d["Dice"] <= 2 * d["IoU"] / (1 + d["IoU"]) + 1e-9


# depth -------------------------------------------------------------------------


def _lens(h, w):
    yy, xx = np.mgrid[:h, :w]
    return (yy - (h - 1) / 2) ** 2 + (xx - (w - 1) / 2) ** 2 <= (0.45 * min(h, w)) ** 2


def test_depth_postprocess_identity_and_clip():
    h = w = 16
    lens = _lens(h, w)
    y = np.linspace(0.1, 0.9, h * w).reshape(h, w)
    out = M.depth_postprocess(y, 1.0, 0.0, lens, h, w)
    np.testing.assert_allclose(out[lens], 10 * y[lens], atol=1e-12)
    assert (out[~lens] == 0).all()
    const = M.depth_postprocess(np.full((h, w), 2.0), 1.0, 0.0, lens, h, w)
    assert (const[lens] == 10.0).all()


def test_depth_postprocess_non_square():
    lens = _lens(10, 6)
    out = M.depth_postprocess(np.full((8, 8), 0.5), 1.0, 0.0, lens, 10, 6)
    assert out.shape == (10, 6)
    assert out.min() >= 0 and out.max() <= 10


def test_depth_metric_examples():
    lens = _lens(8, 8)
    y = np.linspace(1, 9, 64).reshape(8, 8)
    r = M.depth_metrics([M.DepthEvalPair(y + 0.1, y, lens)])
    assert r["mRMSE"] == pytest.approx(0.1) and r["mMAE"] == pytest.approx(0.1)
    assert M.depth_metrics([M.DepthEvalPair(1.1 * y, y, lens)])["mMRAE"] == pytest.approx(0.1)
    two = M.depth_metrics([M.DepthEvalPair(y + 0.1, y, lens), M.DepthEvalPair(y + 0.3, y, lens)])
    assert two["mRMSE"] == pytest.approx(0.2)


def test_zero_targets_excluded_from_relative_error():
    lens = np.ones((4, 4), bool)
    y = np.full((4, 4), 2.0)
    y[0, 0] = 0.0
    r = M.depth_metrics([M.DepthEvalPair(y * 1.5, y, lens)])
    assert r["mMRAE"] == pytest.approx(0.5)
    assert r["flags"]


def test_median_even_count():
    lens = np.ones((1, 4), bool)
    y = np.ones((1, 4))
    pred = np.array([[1.1, 1.2, 1.3, 1.4]])
    assert M.depth_metrics([M.DepthEvalPair(pred, y, lens)])["mMRAE"] == pytest.approx(0.25)
