import numpy as np
import pytest

from snn3d.datasets import (
    BACKGROUND_MAX,
    OBJECT_MIN,
    content_hash,
    flash_locations,
    gen_shapes_dataset,
    gen_temporal_order_dataset,
    train_test_split,
)
from snn3d.metrics import DetectionBox
from snn3d.neuron import shuffle_time
from snn3d.tensor import Tensor


class TestTemporalOrder:
    def test_labels_follow_flash_order(self):
        d = gen_temporal_order_dataset(200, 8, 16, seed=0)
        t_a, t_b = d.flash_times.T
        np.testing.assert_array_equal(d.y, (t_a > t_b).astype(int))
        assert np.all(t_a != t_b)

    def test_frames_hold_exactly_the_two_flashes(self):
        d = gen_temporal_order_dataset(50, 6, 8, seed=1)
        (ra, ca), (rb, cb) = flash_locations(8)
        for k in range(50):
            ta, tb = d.flash_times[k]
            assert d.X[k].sum() == 8
            assert d.X[k, ta, 0, ra : ra + 2, ca : ca + 2].sum() == 4
            assert d.X[k, tb, 0, rb : rb + 2, cb : cb + 2].sum() == 4

    def test_a_at_2_b_at_5_is_label_0(self):
        d = gen_temporal_order_dataset(400, 8, 16, seed=3)
        hits = np.nonzero((d.flash_times[:, 0] == 2) & (d.flash_times[:, 1] == 5))[0]
        assert len(hits) > 0
        assert np.all(d.y[hits] == 0)

    def test_balanced(self):
        assert gen_temporal_order_dataset(1000, 8, 16, seed=0).y.sum() == 500

    def test_rate_is_class_independent(self):
        d = gen_temporal_order_dataset(100, 8, 16, seed=0)
        rates = d.X.sum(axis=1)
        np.testing.assert_array_equal(rates, np.broadcast_to(rates[0], rates.shape))

    def test_shuffled_rates_are_class_independent(self):
        d = gen_temporal_order_dataset(100, 8, 16, seed=0)
        s = shuffle_time(Tensor(d.X), seed=9).data
        np.testing.assert_array_equal(s.sum(axis=1)[d.y == 0].mean(axis=0), s.sum(axis=1)[d.y == 1].mean(axis=0))

    def test_deterministic(self):
        a = gen_temporal_order_dataset(1000, 8, 16, seed=5)
        b = gen_temporal_order_dataset(1000, 8, 16, seed=5)
        assert a.content_hash() == b.content_hash()
        assert a.X.tobytes() == b.X.tobytes()

    @pytest.mark.parametrize(("T", "size"), [(3, 16), (8, 7)])
    def test_preconditions(self, T, size):
        with pytest.raises(ValueError):
            gen_temporal_order_dataset(10, T, size, seed=0)

    def test_unschedulable_gap(self):
        with pytest.raises(ValueError, match="cannot schedule"):
            gen_temporal_order_dataset(10, 4, 8, seed=0, min_gap=4)


class TestShapes:
    def test_boxes_are_valid(self):
        d = gen_shapes_dataset(100, 32, seed=0)
        for boxes in d.boxes:
            assert 1 <= len(boxes) <= 3
            for x0, y0, x1, y1, c in boxes:
                DetectionBox(x0, y0, x1, y1, 1.0, int(c))
                assert 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1 and c in (0, 1)

    def test_boxes_do_not_overlap(self):
        from snn3d.metrics import iou

        d = gen_shapes_dataset(100, 32, seed=1)
        for boxes in d.boxes:
            bs = [DetectionBox(*b[:4]) for b in boxes]
            for i in range(len(bs)):
                for j in range(i + 1, len(bs)):
                    assert iou(bs[i], bs[j]) == 0

    def test_contrast(self):
        d = gen_shapes_dataset(50, 32, seed=2)
        for img, boxes in zip(d.images[:, 0], d.boxes):
            mask = np.zeros_like(img, dtype=bool)
            for x0, y0, x1, y1, _ in boxes:
                mask[int(round(y0 * 32)) : int(round(y1 * 32)), int(round(x0 * 32)) : int(round(x1 * 32))] = True
            assert img[~mask].max() <= BACKGROUND_MAX
            # disks leave background corners inside their boxes
            assert (img[mask] >= OBJECT_MIN).mean() > 0.7
            assert img[mask].mean() - img[~mask].mean() > OBJECT_MIN - BACKGROUND_MAX - 0.15

    def test_both_classes_appear(self):
        d = gen_shapes_dataset(50, 32, seed=3)
        classes = np.concatenate([b[:, 4] for b in d.boxes])
        assert set(classes) == {0, 1}

    def test_deterministic(self):
        a = gen_shapes_dataset(500, 32, seed=4)
        b = gen_shapes_dataset(500, 32, seed=4)
        assert a.images.tobytes() == b.images.tobytes()
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.boxes, b.boxes))
        assert a.content_hash() == b.content_hash()
        assert gen_shapes_dataset(500, 32, seed=5).content_hash() != a.content_hash()

    def test_size_precondition(self):
        with pytest.raises(ValueError):
            gen_shapes_dataset(5, 16, seed=0)


def test_content_hash_is_git_blob_sha1():
    # git hash-object of a file holding "hello\n"
    assert content_hash(np.frombuffer(b"hello\n", dtype=np.uint8)) == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_split_is_disjoint_and_deterministic():
    d = gen_temporal_order_dataset(100, 4, 8, seed=0)
    tr, te = train_test_split(d, 0.2, seed=1)
    assert len(tr) == 80 and len(te) == 20
    tr2, te2 = train_test_split(d, 0.2, seed=1)
    assert tr.content_hash() == tr2.content_hash() and te.content_hash() == te2.content_hash()
    rows = {r.tobytes() + bytes([lab]) for r, lab in zip(d.X, d.y)}
    assert {r.tobytes() + bytes([lab]) for r, lab in zip(tr.X, tr.y)} | {r.tobytes() + bytes([lab]) for r, lab in zip(te.X, te.y)} <= rows
