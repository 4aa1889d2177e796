import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import brute_force_matching, drawing, line, random_symbol_sets
from textspot.metrics import (
    classwise_report,
    evaluate_tile,
    match_symbols,
    panoptic_scores,
    pq_from_components,
    scores_from_counts,
    weighted_iou,
)
from textspot.model import InvalidSymbolError, Symbol
from textspot.spotting import ground_truth_symbols


def sym(label, instance, *members):
    return Symbol(label, instance, frozenset(members))


# Lengths 1, 3 and 1 give weights ln2, ln4, ln2.
HALF = drawing([line(0, 0, 0, 1, 0), line(1, 0, 1, 3, 1), line(2, 0, 2, 1, 2)])


def test_iou_identical_and_disjoint():
    a, b = sym(1, 0, 0, 1), sym(1, 1, 2)
    assert weighted_iou(a, a, HALF) == 1.0
    assert weighted_iou(a, b, HALF) == 0.0


def test_iou_half_construction():
    p, g = sym(1, 0, 0, 1), sym(1, 0, 1, 2)
    want = math.log(4) / (math.log(2) + math.log(4) + math.log(2))
    assert want == pytest.approx(0.5, abs=1e-15)
    assert abs(weighted_iou(p, g, HALF) - 0.5) <= 1e-12


def test_iou_half_is_not_a_match():
    m = match_symbols([sym(1, 0, 0, 1)], [sym(1, 0, 1, 2)], HALF)
    assert (len(m.tp), len(m.fp), len(m.fn)) == (0, 1, 1)


def test_empty_symbols_rejected():
    with pytest.raises(InvalidSymbolError):
        Symbol(1, 0, frozenset())


def test_exact_prediction_is_all_true_positives():
    gt = [sym(1, 0, 0), sym(2, 1, 1, 2)]
    m = match_symbols(gt, gt, HALF)
    assert len(m.tp) == 2 and not m.fp and not m.fn
    assert panoptic_scores(m).pq == 1.0


def test_split_into_equal_halves():
    d = drawing([line(0, 0, 0, 2, 0), line(1, 0, 1, 2, 1)])
    m = match_symbols([sym(1, 0, 0), sym(1, 1, 1)], [sym(1, 0, 0, 1)], d)
    assert (len(m.tp), len(m.fp), len(m.fn)) == (0, 2, 1)


def test_label_mismatch_blocks_match():
    m = match_symbols([sym(2, 0, 0, 1)], [sym(1, 0, 0, 1)], HALF)
    assert (len(m.tp), len(m.fp), len(m.fn)) == (0, 1, 1)


def test_scores_by_hand():
    s = scores_from_counts(2, 1, 1, 0.8 + 0.6)
    assert s.rq == pytest.approx(2 / 3, abs=1e-15)
    assert s.sq == pytest.approx(0.7, abs=1e-15)
    assert s.pq == pytest.approx(7 / 15, abs=1e-15)
    assert round(s.pq, 4) == 0.4667


def test_no_true_positives_gives_zero():
    s = scores_from_counts(0, 3, 2, 0.0)
    assert (s.pq, s.rq, s.sq) == (0.0, 0.0, 0.0)


def test_empty_input_is_flagged():
    s = scores_from_counts(0, 0, 0, 0.0)
    assert s.empty and s.pq == 0.0


def test_component_product_row_one():
    assert round(pq_from_components(0.8298, 0.8619), 4) == 0.7152


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.floats(0.0, 1.0))
def test_pq_is_rq_times_sq(tp, fp, fn, frac):
    # IoU of each match lies in (0.5, 1], so the sum lies in (tp/2, tp].
    s = scores_from_counts(tp, fp, fn, tp * (0.5 + 0.5 * frac))
    assert abs(s.pq - s.rq * s.sq) <= 1e-12
    assert 0.0 <= s.pq <= 1.0 and 0.0 <= s.rq <= 1.0 and 0.0 <= s.sq <= 1.0


@given(st.integers(0, 30), st.integers(0, 30), st.integers(0, 30))
def test_adding_a_match_never_lowers_rq(tp, fp, fn):
    before = scores_from_counts(tp, fp, fn, 0.75 * tp)
    after = scores_from_counts(tp + 1, fp, fn, 0.75 * (tp + 1))
    assert after.rq >= before.rq


@given(st.integers(0, 2**32 - 1))
def test_iou_symmetric_and_one_only_for_equal_sets(seed):
    rng = np.random.default_rng(seed)
    pred, gt, w = random_symbol_sets(rng)
    for p in pred:
        for g in gt:
            a, b = weighted_iou(p, g, w), weighted_iou(g, p, w)
            assert a == b
            assert (a == 1.0) == (p.members == g.members)


@given(st.integers(0, 2**32 - 1))
def test_greedy_matching_is_optimal(seed):
    rng = np.random.default_rng(seed)
    pred, gt, w = random_symbol_sets(rng)
    m = match_symbols(pred, gt, w)
    count, total = brute_force_matching(pred, gt, w)
    assert len(m.tp) == count
    assert sum(iou for *_, iou in m.tp) == pytest.approx(total, abs=1e-12)
    assert len({id(p) for p, _, _ in m.tp}) == len(m.tp)
    assert all(iou > 0.5 for *_, iou in m.tp)


# ---------------------------------------------------------------- reports


def _scene():
    prims = [
        line(0, 0, 0, 1, 0, 1, 0),
        line(1, 0, 1, 1, 1, 1, 0),
        line(2, 5, 0, 6, 0, 1, 1),
        line(3, 0, 9, 9, 9, 3),
        line(4, 9, 0, 9, 9, 3),
    ]
    return drawing(prims)


def test_perfect_report_and_f1():
    d = _scene()
    r = evaluate_tile(d, d)
    assert r.overall().pq == 1.0
    assert r.f1() == 1.0
    assert set(r.per_class()) == {1, 3}  # window is absent from both sides
    assert "window" not in r.to_dict()["classes"]


def test_single_class_scene_per_class_equals_overall():
    d = drawing([line(0, 0, 0, 1, 0, 1, 0), line(1, 3, 0, 4, 0, 1, 1)])
    pred = drawing([line(0, 0, 0, 1, 0, 1, 0), line(1, 3, 0, 4, 0, 0)])
    r = evaluate_tile(pred, d)
    assert r.per_class()[1] == r.overall()


def test_f1_counts_primitive_labels():
    gt = _scene()
    prims = list(gt.primitives)
    prims[3] = line(3, 0, 9, 9, 9, 0)  # a wall primitive predicted as background
    r = evaluate_tile(drawing(prims), gt)
    # 4 correct of 4 predicted and 5 actual: P = 1, R = 0.8.
    assert r.f1() == pytest.approx(2 * 0.8 / 1.8)


def test_merge_pools_counts():
    d = _scene()
    a = evaluate_tile(d, d)
    b = evaluate_tile(d, d)
    assert a.merge(b).overall().tp == 6


def test_report_renderings_are_stable():
    d = _scene()
    r = classwise_report(match_symbols(ground_truth_symbols(d), ground_truth_symbols(d), d), d, d)
    assert r.to_json() == classwise_report(
        match_symbols(ground_truth_symbols(d), ground_truth_symbols(d), d), d, d
    ).to_json()
    table = r.to_table().splitlines()
    assert table[0].split()[:4] == ["class", "PQ", "RQ", "SQ"]
    assert table[-1].startswith("total")


def test_mismatched_primitive_count_rejected():
    with pytest.raises(ValueError):
        evaluate_tile(drawing([line(0, 0, 0, 1, 0)]), _scene())
