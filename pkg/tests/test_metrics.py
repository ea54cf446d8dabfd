import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_f1_vectorised, brute_sweep, pairwise_auroc
from scenead.metrics import (
    DegenerateTruthError,
    EvalReport,
    evaluate_maps,
    f1_from_counts,
    imbalance_demo,
    optimal_f1_sweep,
    pixel_auroc,
    pixel_f1,
)


def _instance(rng, n, levels=None):
    truth = rng.random(n) < rng.uniform(0.05, 0.5)
    truth[0], truth[1] = True, False
    scores = rng.integers(0, levels, n).astype(float) if levels else rng.random(n)
    return scores, truth.astype(np.uint8)


def test_scores_equal_truth_is_perfect():
    t = np.array([1, 0, 1, 1, 0])
    assert pixel_f1(t.astype(float), t, 0.5)["f1"] == 1.0


def test_hand_counted_six_pixels():
    r = pixel_f1([.9, .1, .8, .4, .2, .7], [1, 0, 1, 0, 0, 1], 0.5)
    assert (r["tp"], r["fp"], r["fn"]) == (3, 0, 0)
    assert r["f1"] == 1.0


def test_all_negative_prediction_scores_zero():
    r = pixel_f1(np.zeros(10), np.r_[np.ones(3), np.zeros(7)], 0.5)
    assert r["f1"] == 0.0 and r["precision"] == 0.0 and r["recall"] == 0.0


def test_threshold_is_inclusive():
    r = pixel_f1([0.5, 0.4], [1, 0], 0.5)
    assert r["tp"] == 1 and r["fp"] == 0


def test_f1_from_counts_zero_denominators():
    assert f1_from_counts(0, 0, 0) == (0.0, 0.0, 0.0)
    assert f1_from_counts(0, 5, 0)[0] == 0.0


def test_input_validation():
    with pytest.raises(ValueError):
        pixel_f1([0.1, 0.2], [1], 0.5)
    with pytest.raises(ValueError):
        pixel_f1([0.1, 0.2], [1, 2], 0.5)
    with pytest.raises(DegenerateTruthError):
        optimal_f1_sweep([0.1, 0.2], [1, 1])
    with pytest.raises(DegenerateTruthError):
        pixel_auroc([0.1, 0.2], [0, 0])


@pytest.mark.parametrize("seed", range(20))
def test_sweep_matches_brute_force_small(seed):
    rng = np.random.default_rng(seed)
    scores, truth = _instance(rng, 64, levels=None if seed % 2 else 8)
    got = optimal_f1_sweep(scores, truth)
    f1, thr = brute_sweep(scores, truth)
    assert got["f1_max"] == f1
    assert got["threshold"] == thr


def test_sweep_separable_and_constant():
    assert optimal_f1_sweep([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])["f1_max"] == 1.0
    got = optimal_f1_sweep(np.full(10, 0.3), np.r_[np.ones(4), np.zeros(6)])
    assert got["f1_max"] == pixel_f1(np.ones(10), np.r_[np.ones(4), np.zeros(6)], 0.5)["f1"]
    assert got["threshold"] == 0.3


def test_sweep_counts_sum_to_total():
    rng = np.random.default_rng(3)
    scores, truth = _instance(rng, 500)
    got = optimal_f1_sweep(scores, truth)
    assert got["tp"] + got["fp"] + got["fn"] + got["tn"] == 500
    f1, p, r = f1_from_counts(got["tp"], got["fp"], got["fn"])
    assert f1 == got["f1_max"] and p == got["precision"] and r == got["recall"]


def test_auroc_trivial_cases():
    assert pixel_auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert pixel_auroc(np.full(6, 0.4), [0, 1, 0, 1, 1, 0]) == 0.5


@pytest.mark.parametrize("seed", range(10))
def test_auroc_matches_pairwise(seed):
    rng = np.random.default_rng(100 + seed)
    scores, truth = _instance(rng, 200, levels=None if seed % 2 else 5)
    assert abs(pixel_auroc(scores, truth) - pairwise_auroc(scores, truth)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5, allow_nan=False), st.booleans()), min_size=2, max_size=60),
       st.sampled_from(["exp", "cube", "affine"]))
def test_monotone_transform_invariance(pairs, kind):
    scores = np.array([p[0] for p in pairs])
    truth = np.array([p[1] for p in pairs], dtype=np.uint8)
    if truth.all() or not truth.any():
        return
    f = {"exp": np.exp, "cube": lambda v: v ** 3, "affine": lambda v: 3 * v + 1}[kind]
    g = f(scores)
    # skip rare cases where the transform merges distinct floats
    if len(np.unique(g)) != len(np.unique(scores)):
        return
    assert optimal_f1_sweep(g, truth)["f1_max"] == optimal_f1_sweep(scores, truth)["f1_max"]
    assert abs(pixel_auroc(g, truth) - pixel_auroc(scores, truth)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=60))
def test_label_swap_complements_auroc(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    truth = np.array([p[1] for p in pairs], dtype=np.uint8)
    if truth.all() or not truth.any():
        return
    assert abs(pixel_auroc(scores, 1 - truth) - (1 - pixel_auroc(scores, truth))) <= 1e-12


def test_evaluate_maps_pools_pixels():
    rng = np.random.default_rng(0)
    maps = [rng.random((8, 8)) for _ in range(3)]
    masks = [(rng.random((8, 8)) < 0.1).astype(np.uint8) for _ in range(3)]
    masks[0][0, 0] = 1
    rep = evaluate_maps(maps, masks, ["a", "b", "c"])
    pooled_s = np.concatenate([m.ravel() for m in maps])
    pooled_t = np.concatenate([m.ravel() for m in masks])
    assert rep.pixel_f1 == brute_f1_vectorised(pooled_s, pooled_t)[0]
    assert rep.tp + rep.fp + rep.fn + rep.tn == 192
    assert len(rep.per_image_f1) == 3
    assert EvalReport.from_dict(rep.to_dict()) == rep


def test_evaluate_maps_shape_mismatch():
    with pytest.raises(ValueError):
        evaluate_maps([np.zeros((4, 4))], [np.zeros((4, 5))])


def _report(tp, fp, fn, tn, f1=0.0, auroc=0.5):
    return EvalReport(f1, auroc, 0.5, 0.0, 0.0, tp, fp, fn, tn, (tp + fn) / (tp + fp + fn + tn))


def test_imbalance_all_negative_accuracy():
    # 22 anomalous pixels out of 10000 = 0.22%
    d = imbalance_demo(_report(0, 0, 22, 9978))
    assert d["all_negative_accuracy"] == 0.9978
    assert d["all_negative_f1"] == 0.0
    d = imbalance_demo(_report(0, 0, 50, 50))
    assert d["all_negative_accuracy"] == 0.5


def test_optimistic_auroc_flag():
    assert "optimistic-AUROC" in imbalance_demo(_report(5, 100, 5, 9890, f1=0.08, auroc=0.97))["flags"]
    assert imbalance_demo(_report(5, 1, 1, 9993, f1=0.8, auroc=0.99))["flags"] == []
    assert imbalance_demo(_report(5, 100, 5, 9890, f1=0.08, auroc=0.7))["flags"] == []
