import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossmodal.lf_miner import UndefinedMetricError
from crossmodal.metrics import (
    auprc,
    cross_over,
    curve_csv,
    factor_analysis,
    pr_curve,
    report,
    weak_label_prf,
)
from crossmodal.synthbench import SynthConfig, generate
from crossmodal.trainers import TrainConfig, gold_targets


def brute_auprc(scores, labels):
    """Precision at every distinct threshold, weighted by the recall it adds."""
    s, y = np.asarray(scores), np.asarray(labels) == 1
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        sel = s >= t
        recall = np.sum(sel & y) / y.sum()
        total += (recall - prev_recall) * np.sum(sel & y) / sel.sum()
        prev_recall = recall
    return total


def test_pr_curve_example():
    curve = pr_curve([0.9, 0.8, 0.7], [1, -1, 1])
    assert curve == [(0.0, 1.0), (0.5, 1.0), (0.5, 0.5), (1.0, pytest.approx(2 / 3))]
    assert auprc([0.9, 0.8, 0.7], [1, -1, 1]) == 5 / 6


def test_perfect_ranking_scores_one():
    assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, -1, -1]) == 1.0


def test_all_tied_scores_give_positive_rate():
    assert auprc([0.5] * 8, [1, -1, -1, -1, 1, -1, -1, -1]) == 0.25
    assert pr_curve([0.5] * 4, [1, -1, -1, -1]) == [(0.0, 0.25), (1.0, 0.25)]


def test_no_positives_is_undefined():
    with pytest.raises(UndefinedMetricError):
        auprc([0.1, 0.2], [-1, -1])
    with pytest.raises(ValueError):
        auprc([0.1], [1, -1])


def test_random_scores_near_positive_rate():
    areas = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        y = np.repeat([1, -1], 5000)
        areas.append(auprc(rng.random(10_000), y))
    assert np.mean(areas) == pytest.approx(0.5, abs=0.02)


labelled_scores = st.lists(st.tuples(st.integers(0, 20).map(lambda v: v / 20), st.sampled_from([1, -1])),
                           min_size=1, max_size=40).filter(lambda rows: any(y == 1 for _, y in rows))


@given(labelled_scores)
def test_auprc_matches_brute_force(rows):
    s, y = zip(*rows)
    assert auprc(s, y) == pytest.approx(brute_auprc(s, y), abs=1e-12)


@given(labelled_scores, st.sampled_from([np.exp, np.sqrt, lambda v: 3 * v - 7, np.arctan]))
def test_invariant_under_monotone_transform(rows, f):
    s, y = zip(*rows)
    assert auprc(f(np.array(s)), y) == auprc(s, y)


@settings(max_examples=50)
@given(labelled_scores)
def test_curve_recall_nondecreasing_and_bounded(rows):
    s, y = zip(*rows)
    curve = pr_curve(s, y)
    rec = [r for r, _ in curve]
    assert rec == sorted(rec) and rec[-1] == 1.0
    assert all(0.0 <= p <= 1.0 for _, p in curve)


def test_report_and_csv():
    r = report([0.9, 0.8, 0.7], [1, -1, 1], baseline="text", baseline_auprc=5 / 12)
    assert r.relative_auprc == pytest.approx(2.0)
    text = curve_csv(r.pr_curve)
    assert text.splitlines()[0] == "recall,precision" and len(text.splitlines()) == 5


# -- weak label quality ---------------------------------------------------------------------


def test_weak_label_prf_example():
    prf = weak_label_prf([0.9, 0.6, 0.2], np.array([1, -1, 1]))
    assert (prf.precision, prf.recall, prf.f1, prf.coverage) == (0.5, 0.5, 0.5, 1.0)


def test_everything_abstains():
    prf = weak_label_prf([0.5, 0.5], np.array([1, -1]), eps=0.1)
    assert prf.precision is None and prf.recall is None and prf.f1 is None
    assert prf.coverage == 0.0 and "abstain" in prf.note


def test_no_positive_predictions():
    prf = weak_label_prf([0.1, 0.2], np.array([1, -1]))
    assert prf.precision is None and prf.recall == 0.0


def test_weak_label_prf_needs_gold_positive():
    with pytest.raises(UndefinedMetricError):
        weak_label_prf([0.9], np.array([-1]))


# -- cross-over and factor analysis ------------------------------------------------------------------

SMALL = SynthConfig(seed=0, n_text=800, n_image_unlabeled=0, n_image_test=600, n_image_gold_pool=600,
                    positive_rate=0.2)
FAST = TrainConfig(epochs=3, hidden_width=8)


@pytest.fixture(scope="module")
def small_data():
    return generate(SMALL)


def test_cross_over_threshold_bounds(small_data):
    pool, test = small_data["image_gold_pool"], small_data["image_test"]
    low = cross_over(0.0, pool, test, [50, 100], 1, FAST)
    assert low.cross_over_n == 50
    high = cross_over(1.01, pool, test, [50, 100], 2, FAST)
    assert high.cross_over_n is None
    assert len(high.per_repeat) == 2 and all(len(r) == 2 for r in high.per_repeat)


def test_cross_over_input_checks(small_data):
    pool, test = small_data["image_gold_pool"], small_data["image_test"]
    with pytest.raises(ValueError):
        cross_over(0.5, pool, test, [100, 50], 1, FAST)
    with pytest.raises(ValueError):
        cross_over(0.5, pool, test, [10_000], 1, FAST)
    with pytest.raises(ValueError):
        cross_over(0.5, pool, test, [50], 0, FAST)


def test_factor_single_row_is_its_own_baseline(small_data):
    text = small_data["text_labeled"]
    rows = factor_analysis([("text", "A")], FAST, [(text, gold_targets(text))], small_data["image_test"])
    assert len(rows) == 1 and rows[0].relative_auprc == 1.0


def test_factor_rows_grow_by_prefix(small_data):
    text = small_data["text_labeled"]
    sets = [("text", "A"), ("text", "B"), ("text", "N")]
    rows = factor_analysis(sets, FAST, [(text, gold_targets(text))], small_data["image_test"])
    assert [r.config for r in rows] == [sets[:1], sets[:2], sets[:3]]


def test_factor_analysis_input_checks(small_data):
    text = small_data["text_labeled"]
    with pytest.raises(ValueError):
        factor_analysis([], FAST, [(text, gold_targets(text))], small_data["image_test"])
    with pytest.raises(ValueError, match="not in schema"):
        factor_analysis([("text", "ZZ")], FAST, [(text, gold_targets(text))], small_data["image_test"])
