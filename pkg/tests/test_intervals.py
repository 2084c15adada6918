import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iamsb import intervals as iv
from iamsb.intervals import EventCandidate


def test_to_absolute_hand_case():
    assert iv.to_absolute(0.5, 0.25, 100, 0.04) == (2.0, 3.0)


def test_to_absolute_full_clip():
    assert iv.to_absolute(0.0, 1.0, 7, 0.5) == (0.0, 3.5)


def test_to_absolute_end_clipped():
    assert iv.to_absolute(0.9, 0.5, 10, 1.0) == (9.0, 10.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(1, 200),
       st.floats(0.01, 2.0))
def test_to_absolute_never_inverts(s, d, length, dt):
    t0, t1 = iv.to_absolute(s, d, length, dt)
    assert 0.0 <= t0 <= t1 <= length * dt + 1e-12


def test_iou_identical():
    assert iv.iou_1d((0.2, 0.7), (0.2, 0.7)) == 1.0


def test_iou_disjoint():
    assert iv.iou_1d((0.0, 0.3), (0.5, 0.9)) == 0.0


def test_iou_hand_case():
    assert iv.iou_1d((0.0, 0.5), (0.25, 0.75)) == pytest.approx(1 / 3)


def test_iou_degenerate_pair():
    assert iv.iou_1d((0.4, 0.4), (0.4, 0.4)) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.tuples(st.floats(0, 1), st.floats(0.01, 1)),
       st.tuples(st.floats(0, 1), st.floats(0.01, 1)))
def test_iou_symmetry(a, b):
    i = (a[0], a[0] + a[1])
    j = (b[0], b[0] + b[1])
    assert iv.iou_1d(i, j) == pytest.approx(iv.iou_1d(j, i), abs=1e-15)


def test_eiou_identical_is_one():
    assert iv.eiou((0.1, 0.4), (0.1, 0.4)) == pytest.approx(1.0)


def test_eiou_disjoint_hand_case():
    assert iv.eiou((0.0, 0.2), (0.8, 1.0)) == pytest.approx(-0.64)


def test_eiou_same_center_hand_case():
    # lengths 0.2 vs 0.4 centered together: IoU 0.5, length penalty 0.25
    assert iv.eiou((0.4, 0.6), (0.3, 0.7)) == pytest.approx(0.25)


@settings(max_examples=300, deadline=None)
@given(st.tuples(st.floats(0, 1), st.floats(0.01, 0.9)),
       st.tuples(st.floats(0, 1), st.floats(0.01, 0.9)))
def test_eiou_at_most_iou(a, b):
    p = (a[0], a[0] + a[1])
    g = (b[0], b[0] + b[1])
    assert iv.eiou(p, g) <= iv.iou_1d(p, g) + 1e-12
    if p == g:
        assert iv.eiou(p, g) == pytest.approx(iv.iou_1d(p, g))


# ---------------------------------------------------------------------------
# matching


def test_match_one_to_one():
    matched, unmatched = iv.match_events([(0.1, 0.3)], [(0.1, 0.3)])
    assert matched == [(0, 0)] and unmatched == []


def test_match_no_gts():
    matched, unmatched = iv.match_events([(0.1, 0.3), (0.5, 0.6)], [])
    assert matched == [] and unmatched == [0, 1]


def test_match_crossing_case():
    preds = [(0.0, 0.45), (0.5, 0.95)]
    gts = [(0.45, 0.9), (0.05, 0.5)]
    matched, _ = iv.match_events(preds, gts)
    oracle, _ = iv.match_events_bruteforce(preds, gts)
    assert iv.match_cost(preds, gts, matched) == pytest.approx(
        iv.match_cost(preds, gts, oracle))
    assert sorted(matched) == [(0, 1), (1, 0)]


def test_match_equals_bruteforce_cost():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_p, n_g = int(rng.integers(0, 7)), int(rng.integers(0, 7))
        preds = [(s, s + rng.uniform(0.05, 0.4)) for s in rng.uniform(0, 0.7, n_p)]
        gts = [(s, s + rng.uniform(0.05, 0.4)) for s in rng.uniform(0, 0.7, n_g)]
        fast, fast_un = iv.match_events(preds, gts)
        oracle, _ = iv.match_events_bruteforce(preds, gts)
        assert len(fast) == len(oracle)
        assert iv.match_cost(preds, gts, fast) == pytest.approx(
            iv.match_cost(preds, gts, oracle), abs=1e-9)
        assert len(fast) + len(fast_un) == n_p


def test_match_respects_iou_floor():
    matched, unmatched = iv.match_events([(0.0, 0.1)], [(0.5, 0.6)], iou_floor=0.1)
    assert matched == [] and unmatched == [0]


# ---------------------------------------------------------------------------
# fusion


def ev(s, d, conf, m="a"):
    return EventCandidate(s, d, conf, m)


def test_nms_disjoint_concatenation():
    a = [ev(0.0, 0.2, 0.9)]
    v = [ev(0.5, 0.2, 0.7, "v")]
    fused = iv.nms_fuse(a, v, 0.5)
    assert [e.conf for e in fused] == [0.9, 0.7]


def test_nms_duplicate_suppression():
    a = [ev(0.2, 0.3, 0.9)]
    v = [ev(0.2, 0.3, 0.7, "v")]
    fused = iv.nms_fuse(a, v, 0.5)
    assert len(fused) == 1 and fused[0].conf == 0.9 and fused[0].modality == "a"


def test_nms_empty():
    assert iv.nms_fuse([], [], 0.5) == []


def test_nms_threshold_is_strict():
    a = [ev(0.0, 0.4, 0.9), ev(0.2, 0.4, 0.8)]  # IoU = 1/3
    fused = iv.nms_fuse(a, [], 1 / 3)
    assert len(fused) == 2  # suppression needs IoU strictly above the threshold
    fused2 = iv.nms_fuse(a, [], 0.33)
    assert len(fused2) == 1


# ---------------------------------------------------------------------------
# AP / AR


def test_ap_perfect_predictions():
    preds = [[(0.0, 1.0, 0.9)], [(2.0, 3.0, 0.8), (5.0, 6.0, 0.7)]]
    gts = [[(0.0, 1.0)], [(2.0, 3.0), (5.0, 6.0)]]
    for thr in (0.5, 0.75, 0.95):
        assert iv.average_precision(preds, gts, thr) == 1.0


def test_ap_all_disjoint():
    preds = [[(0.0, 1.0, 0.9)]]
    gts = [[(5.0, 6.0)]]
    assert iv.average_precision(preds, gts, 0.5) == 0.0


def test_ap_no_gt_errors():
    with pytest.raises(iv.MetricError, match="ap-undefined"):
        iv.average_precision([[(0.0, 1.0, 0.9)]], [[]], 0.5)


def test_ap_mixed_case_equals_bruteforce():
    # highest-confidence prediction is a false positive, so precision dips
    preds = [[(7.0, 8.0, 0.95), (0.0, 1.0, 0.9), (4.0, 5.0, 0.8)]]
    gts = [[(0.0, 1.0), (4.2, 5.2)]]
    fast = iv.average_precision(preds, gts, 0.5)
    oracle = iv.average_precision_bruteforce(preds, gts, 0.5)
    assert fast == oracle
    assert 0.0 < fast < 1.0


def test_ar_perfect():
    preds = [[(0.0, 1.0, 0.9), (2.0, 3.0, 0.8)]]
    gts = [[(0.0, 1.0), (2.0, 3.0)]]
    assert iv.average_recall(preds, gts, 10) == 1.0


def test_ar_empty_predictions():
    assert iv.average_recall([[], []], [[(0.0, 1.0)], [(2.0, 3.0)]], 10) == 0.0


def test_ar_partial_match_threshold_sweep():
    # one gt matched at IoU 0.6: recalled for tIoU in {0.5, 0.55, 0.6} only
    preds = [[(0.0, 0.6, 0.9), (2.0, 3.0, 0.8)]]
    gts = [[(0.0, 1.0), (2.0, 3.0)]]
    got = iv.average_recall(preds, gts, 10)
    per_thr = [(1.0 if 0.6 >= t else 0.0) + 1.0 for t in iv.AR_TIOU_GRID]
    expected = sum(v / 2.0 for v in per_thr) / len(iv.AR_TIOU_GRID)
    assert got == pytest.approx(expected)
    assert got == iv.average_recall_bruteforce(preds, gts, 10)


def test_ar_budget_truncation():
    preds = [[(0.0, 1.0, 0.1), (7.0, 8.0, 0.9)]]  # best-confidence pred is wrong
    gts = [[(0.0, 1.0)]]
    assert iv.average_recall(preds, gts, 1) == 0.0
    assert iv.average_recall(preds, gts, 2) == 1.0


def test_ap_ar_oracle_equivalence_battery():
    from iamsb.checks import check_metrics

    ok, lines = check_metrics(seed=123, instances=50)
    assert ok, "\n".join(lines)


# ---------------------------------------------------------------------------
# interchange formats


def test_predictions_jsonl_roundtrip(tmp_path):
    path = tmp_path / "preds.jsonl"
    clips = [(0, [ev(0.1, 0.2, 0.9), ev(0.5, 0.1, 0.4, "v")]), (1, [])]
    iv.write_predictions_jsonl(str(path), clips)
    back = iv.read_predictions_jsonl(str(path))
    assert back == clips


def test_metric_report_csv_format():
    report = iv.MetricReport(ap={0.5: 0.75}, ar={10: 0.5})
    text = report.to_csv()
    lines = text.strip().split("\n")
    assert lines[0] == "metric,threshold_or_n,value"
    assert lines[1] == "AP,0.5,0.750000"
    assert lines[2] == "AR,10,0.500000"
