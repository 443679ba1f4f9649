from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsremoval.semantic import (
    MetricError,
    SemanticViewRecord,
    acc_post_ratio,
    acc_seg,
    format_drop_cell,
    format_pct,
    iou_drop,
    summarize_scene,
)

ratio = st.floats(0.0, 1.0, allow_nan=False)


def recs(posts, pre=1.0):
    return [SemanticViewRecord(f"{i:03d}", pre, p) for i, p in enumerate(posts)]


class TestIoUDrop:
    def test_table_row(self):
        assert iou_drop(0.63, 0.01) == pytest.approx(0.62)

    @given(ratio)
    def test_identical_is_zero(self, x):
        assert iou_drop(x, x) == 0.0

    def test_lower_bound(self):
        assert iou_drop(0.0, 1.0) == -1.0

    @pytest.mark.parametrize("args", [(1.1, 0.0), (0.5, -0.1), (float("nan"), 0.2)])
    def test_out_of_range(self, args):
        with pytest.raises(MetricError):
            iou_drop(*args)

    @given(ratio, ratio)
    def test_range(self, a, b):
        assert -1.0 <= iou_drop(a, b) <= 1.0


class TestAccuracy:
    def test_all_removed(self):
        for t in (0.1, 0.5, 1.0):
            assert acc_seg(recs([0.0, 0.0]), t) == 1.0
            assert acc_post_ratio(recs([0.0, 0.0]), t) == 0.0

    def test_one_of_three_below(self):
        assert acc_seg(recs([0.4, 0.6, 0.8]), 0.5) == pytest.approx(1 / 3)

    def test_two_of_three_above(self):
        assert acc_post_ratio(recs([0.6, 0.6, 0.2]), 0.5) == pytest.approx(2 / 3)

    def test_threshold_is_strict(self):
        assert acc_seg(recs([0.5]), 0.5) == 0.0
        assert acc_post_ratio(recs([0.5]), 0.5) == 0.0

    def test_empty_records(self):
        with pytest.raises(MetricError):
            acc_seg([], 0.5)
        with pytest.raises(MetricError):
            summarize_scene([])

    def test_bad_threshold(self):
        with pytest.raises(MetricError):
            acc_seg(recs([0.1]), 0.0)

    @given(st.lists(ratio, min_size=1, max_size=12), ratio, ratio)
    def test_acc_seg_monotone(self, posts, t1, t2):
        lo, hi = sorted((max(t1, 1e-6), max(t2, 1e-6)))
        assert acc_seg(recs(posts), lo) <= acc_seg(recs(posts), hi)


class TestRecords:
    def test_undetected_must_be_zero(self):
        with pytest.raises(MetricError):
            SemanticViewRecord("v", 0.5, 0.2, detected_post=False)
        assert SemanticViewRecord("v", 0.5, 0.0, detected_post=False).iou_post == 0.0


class TestSummary:
    def test_table_row(self):
        s = summarize_scene([SemanticViewRecord(str(i), 0.63, 0.01) for i in range(4)])
        assert (s.miou_pre, s.miou_post) == pytest.approx((0.63, 0.01))
        assert s.iou_drop == pytest.approx(0.62)
        assert s.pct_reduction == pytest.approx(98.41, abs=0.01)
        assert s.drop_cell() == "0.62 / 98.4"

    def test_no_change(self):
        s = summarize_scene([SemanticViewRecord("a", 0.5, 0.5)])
        assert s.iou_drop == 0.0 and s.pct_reduction == 0.0

    def test_two_views(self):
        s = summarize_scene([SemanticViewRecord("a", 0.8, 0.2), SemanticViewRecord("b", 0.6, 0.0)])
        assert s.miou_pre == pytest.approx(0.7)
        assert s.miou_post == pytest.approx(0.1)
        assert s.iou_drop == pytest.approx(0.6)
        assert s.pct_reduction == pytest.approx(85.714, abs=1e-3)

    def test_never_detected_is_low_confidence(self):
        s = summarize_scene([SemanticViewRecord("a", 0.0, 0.0, False, False)])
        assert s.low_confidence and s.iou_drop <= 0 and s.pct_reduction is None
        assert s.drop_cell() == "0.00 / n/a"

    def test_thresholds_and_skips(self):
        s = summarize_scene(recs([0.6, 0.8]), thresholds=(0.7,), skipped_views=2)
        assert s.acc_seg_at == {0.7: 0.5} and s.acc_post_at == {0.7: 0.5}
        assert s.skipped_views == 2 and s.n_views == 2

    @given(st.lists(st.tuples(ratio, ratio), min_size=1, max_size=10), st.randoms())
    def test_permutation_invariant(self, pairs, rnd: random.Random):
        records = [SemanticViewRecord(f"{i:02d}", a, b) for i, (a, b) in enumerate(pairs)]
        shuffled = list(records)
        rnd.shuffle(shuffled)
        assert summarize_scene(records) == summarize_scene(shuffled)


class TestFormatting:
    @pytest.mark.parametrize(
        "pct,text", [(98.4126, "98.4"), (100.0, "100"), (3.5, "3.50"), (0.0, "0.00"), (None, "n/a"), (12.345, "12.3")]
    )
    def test_pct(self, pct, text):
        assert format_pct(pct) == text

    def test_cell(self):
        assert format_drop_cell(0.62, 98.4126) == "0.62 / 98.4"
