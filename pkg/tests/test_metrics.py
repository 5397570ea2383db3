import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snn3d.metrics import (
    DetectionBox,
    average_precision,
    detections_from_output,
    iou,
    map_at_50,
    nms,
)


def box(x0, y0, x1, y1, conf=1.0, cls=0):
    return DetectionBox(x0, y0, x1, y1, conf, cls)


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def exact_iou(a, b) -> Fraction:
    f = Fraction
    w = min(f(a.x_max), f(b.x_max)) - max(f(a.x_min), f(b.x_min))
    h = min(f(a.y_max), f(b.y_max)) - max(f(a.y_min), f(b.y_min))
    if w <= 0 or h <= 0:
        return Fraction(0)
    inter = w * h
    area = lambda q: (f(q.x_max) - f(q.x_min)) * (f(q.y_max) - f(q.y_min))  # noqa: E731
    return inter / (area(a) + area(b) - inter)


def oracle_map(predictions, ground_truth) -> Fraction:
    """Enumerate every injective prediction->GT assignment per image and keep the one
    consistent with rank-ordered highest-IoU matching; AP is the exact sum over TP
    ranks of the best precision at that rank or later, divided by the GT count."""
    classes = sorted({g.class_id for gts in ground_truth for g in gts})
    aps = []
    for c in classes:
        n_gt = sum(g.class_id == c for gts in ground_truth for g in gts)
        ranked = sorted(
            ((p.confidence, img, k) for img, ps in enumerate(predictions) for k, p in enumerate(ps) if p.class_id == c),
            key=lambda e: -e[0],
        )
        tp = {}
        for img, gts in enumerate(ground_truth):
            mine = [(img, k) for _, i, k in ranked if i == img]
            cand = [j for j, g in enumerate(gts) if g.class_id == c]
            consistent = []
            for choice in itertools.product([None] + cand, repeat=len(mine)):
                taken = [j for j in choice if j is not None]
                if len(taken) != len(set(taken)):
                    continue
                ok = True
                for r, ((_, k), j) in enumerate(zip(mine, choice)):
                    free = [q for q in cand if q not in choice[:r]]
                    scores = {q: exact_iou(predictions[img][k], gts[q]) for q in free}
                    eligible = {q: v for q, v in scores.items() if v >= Fraction(1, 2)}
                    if j is None:
                        ok &= not eligible
                    else:
                        best = max(eligible.values(), default=None)
                        ok &= j in eligible and eligible[j] == best and j == min(q for q, v in eligible.items() if v == best)
                if ok:
                    consistent.append(choice)
            assert len(consistent) == 1
            for (_, k), j in zip(mine, consistent[0]):
                tp[(img, k)] = j is not None
        flags = [tp[(img, k)] for _, img, k in ranked]
        prec = [Fraction(sum(flags[: r + 1]), r + 1) for r in range(len(flags))]
        ap = sum((max(prec[r:]) for r in range(len(flags)) if flags[r]), Fraction(0)) / n_gt
        aps.append(ap)
    return sum(aps, Fraction(0)) / len(aps)


# GT boxes overlap each other; the palette straddles the 0.5 threshold
G1 = (0.0, 0.0, 10.0, 10.0)
G2 = (4.0, 0.0, 14.0, 10.0)
PALETTE = [
    G1,
    G2,
    (2.0, 0.0, 12.0, 10.0),  # 2/3 with both G1 and G2 (IoU tie)
    (0.0, 0.0, 10.0, 5.0),  # exactly 0.5 with G1
    (0.0, 0.0, 10.0, 4.5),  # 0.45 with G1
    (30.0, 30.0, 40.0, 40.0),  # disjoint
]
CONFS = (0.9, 0.7, 0.4)


def gt_configs():
    subsets = [(), (G1,), (G2,), (G1, G2)]
    for s0, s1 in itertools.product(subsets, repeat=2):
        gts = [box(*g, cls=0) for g in s0] + [box(*g, cls=1) for g in s1]
        if gts:
            yield gts


def pred_configs():
    options = [(b, c) for b in PALETTE for c in (0, 1)]
    for n in range(4):
        for combo in itertools.product(options, repeat=n):
            yield [box(*b, conf=CONFS[r], cls=c) for r, (b, c) in enumerate(combo)]


def test_exhaustive_fixture_suite():
    preds = list(pred_configs())
    checked = 0
    for gts in gt_configs():
        for ps in preds:
            assert map_at_50([ps], [gts]) == float(oracle_map([ps], [gts])), (ps, gts)
            checked += 1
    assert checked == 15 * 1885


boxes_strategy = st.tuples(
    st.integers(0, 8), st.integers(0, 8), st.integers(1, 6), st.integers(1, 6), st.integers(0, 1)
).map(lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3], t[4]))


@settings(max_examples=150, deadline=None)
@given(
    st.lists(st.lists(boxes_strategy, max_size=3), min_size=1, max_size=2),
    st.lists(st.lists(boxes_strategy, max_size=3), min_size=1, max_size=2),
    st.randoms(use_true_random=False),
)
def test_random_fixtures_match_oracle(gt_raw, pred_raw, rnd):
    n_img = min(len(gt_raw), len(pred_raw))
    gts = [[box(*b[:4], cls=b[4]) for b in g] for g in gt_raw[:n_img]]
    if not any(gts):
        return
    confs = iter(rnd.sample(range(1, 1000), 10))
    preds = [[box(*b[:4], conf=next(confs) / 1000, cls=b[4]) for b in p] for p in pred_raw[:n_img]]
    assert map_at_50(preds, gts) == float(oracle_map(preds, gts))


# ---------------------------------------------------------------------------
# hand cases
# ---------------------------------------------------------------------------


class TestIoU:
    def test_identical(self):
        assert iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1.0

    def test_partial_overlap(self):
        assert iou(box(0, 0, 2, 2), box(1, 1, 3, 3)) == pytest.approx(1 / 7)

    def test_disjoint_and_touching(self):
        assert iou(box(0, 0, 1, 1), box(2, 2, 3, 3)) == 0.0
        assert iou(box(0, 0, 1, 1), box(1, 0, 2, 1)) == 0.0

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            box(1, 0, 1, 2)
        with pytest.raises(ValueError):
            box(0, 3, 1, 2)


class TestNMS:
    def test_keeps_more_confident_duplicate(self):
        a, b = box(0, 0, 1, 1, 0.8), box(0, 0, 1, 1, 0.9)
        assert nms([a, b], 0.5) == [b]

    def test_disjoint_all_kept(self):
        bs = [box(0, 0, 1, 1, 0.5), box(2, 2, 3, 3, 0.9), box(5, 5, 6, 6, 0.7)]
        assert nms(bs, 0.5) == [bs[1], bs[2], bs[0]]

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_other_class_not_suppressed(self):
        a, b = box(0, 0, 1, 1, 0.9, 0), box(0, 0, 1, 1, 0.8, 1)
        assert nms([a, b], 0.5) == [a, b]

    def test_ties_prefer_lower_class_then_input_order(self):
        a, b, c = box(0, 0, 1, 1, 0.5, 1), box(0, 0, 1, 1, 0.5, 0), box(0, 0, 1, 1, 0.5, 0)
        assert nms([a, b, c], 0.5) == [b, a]

    def test_threshold_is_strict(self):
        a, b = box(0, 0, 10, 10, 0.9), box(0, 0, 10, 5, 0.8)
        assert nms([a, b], 0.5) == [a, b]

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1])
    def test_threshold_range(self, t):
        with pytest.raises(ValueError):
            nms([], t)


class TestMAP:
    def test_single_match(self):
        gt = [[box(0, 0, 10, 10)]]
        pred = [[box(0, 0, 10, 6, 0.9)]]
        assert iou(pred[0][0], gt[0][0]) == pytest.approx(0.6)
        assert map_at_50(pred, gt) == 1.0

    def test_false_positive_first(self):
        gt = [[box(0, 0, 10, 10)]]
        pred = [[box(50, 50, 60, 60, 0.9), box(0, 0, 10, 10, 0.8)]]
        assert map_at_50(pred, gt) == 0.5

    def test_no_predictions(self):
        assert map_at_50([[]], [[box(0, 0, 1, 1)]]) == 0.0

    def test_no_ground_truth_is_an_error(self):
        with pytest.raises(ValueError, match="undefined"):
            map_at_50([[box(0, 0, 1, 1, 0.5)]], [[]])

    def test_class_without_gt_is_ignored(self):
        gt = [[box(0, 0, 1, 1, cls=0)]]
        pred = [[box(0, 0, 1, 1, 0.9, 0), box(0, 0, 1, 1, 0.99, 1)]]
        assert map_at_50(pred, gt) == 1.0

    def test_duplicate_detection_is_false_positive(self):
        gt = [[box(0, 0, 1, 1)]]
        pred = [[box(0, 0, 1, 1, 0.9), box(0, 0, 1, 1, 0.8)]]
        assert map_at_50(pred, gt) == 1.0
        pred = [[box(0, 0, 1, 1, 0.9), box(0, 0, 1, 1, 0.8)]]
        gt2 = [[box(0, 0, 1, 1), box(5, 5, 6, 6)]]
        assert map_at_50(pred, gt2) == 0.5

    def test_mean_over_classes(self):
        gt = [[box(0, 0, 1, 1, cls=0), box(3, 3, 4, 4, cls=1)]]
        pred = [[box(0, 0, 1, 1, 0.9, 0)]]
        assert map_at_50(pred, gt) == 0.5

    def test_tuple_inputs(self):
        assert map_at_50([[(0, 0, 1, 1, 0.9, 0)]], [[(0, 0, 1, 1, 0)]]) == 1.0

    def test_image_count_mismatch(self):
        with pytest.raises(ValueError):
            map_at_50([[], []], [[box(0, 0, 1, 1)]])

    def test_envelope(self):
        assert average_precision(np.array([0.5, 0.5, 1.0]), np.array([1.0, 0.5, 2 / 3])) == pytest.approx(0.5 + 0.5 * 2 / 3)


class TestDecodeDetections:
    def test_single_confident_cell(self):
        raw = np.full((1, 2, 2, 7), 0.0)
        raw[..., 4] = -20
        raw[0, 1, 0] = [0, 0, 0, 0, 10, -5, 5]
        (dets,) = detections_from_output(raw, 2)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 1
        assert (d.x_min, d.y_min, d.x_max, d.y_max) == pytest.approx((0.0, 0.5, 0.5, 1.0))
        assert d.confidence == pytest.approx(1 / (1 + np.exp(-10)) / (1 + np.exp(-10)))

    def test_boxes_clipped_to_image(self):
        raw = np.zeros((1, 1, 1, 6))
        raw[0, 0, 0] = [-3, -3, 5, 5, 5, 0]
        (dets,) = detections_from_output(raw, 1)
        assert dets[0].x_min == 0.0 and dets[0].y_min == 0.0
