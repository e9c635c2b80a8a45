import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cpca.errors import ContractError
from cpca.self_training import (IGNORE, collect_confidences, compute_thresholds,
                                emit_pseudolabels, pseudolabels_from_probs, retention_rank)


def test_collect_counts_and_order():
    pred = np.array([[2, 2], [2, 2]])
    conf = np.array([[0.4, 0.9], [0.6, 0.7]])
    deltas, counts = collect_confidences(pred, conf, 3)
    assert counts.tolist() == [0, 0, 4] and counts.sum() == pred.size
    assert deltas[2].tolist() == [0.9, 0.7, 0.6, 0.4]
    with pytest.raises(ContractError):
        collect_confidences(np.zeros(0, int), np.zeros(0), 3)


def test_rank_example():
    d = [np.array([0.9, 0.8, 0.7, 0.6])]
    assert compute_thresholds(d, [4], 0.5)[0] == 0.8
    assert compute_thresholds(d, [4], 1.0)[0] == 0.6
    assert compute_thresholds([np.array([])], [0], 0.5)[0] == math.inf
    with pytest.raises(ContractError):
        compute_thresholds(d, [4], 0.0)


def test_emit_example_keeps_top_two():
    pred = np.zeros((1, 4), int)
    conf = np.array([[0.7, 0.9, 0.6, 0.8]])
    deltas, counts = collect_confidences(pred, conf, 2)
    pl = emit_pseudolabels(pred, conf, compute_thresholds(deltas, counts, 0.5), counts, 0.5)
    assert pl.labels.tolist() == [[IGNORE, 0, IGNORE, 0]]
    pl1 = emit_pseudolabels(pred, conf, compute_thresholds(deltas, counts, 1.0), counts, 1.0)
    assert pl1.retained == 4


def test_rank_rounding():
    assert retention_rank(30, 0.1) == 3 and retention_rank(7, 0.5) == 4


def test_from_probs_deterministic():
    g = torch.Generator().manual_seed(0)
    probs = torch.softmax(torch.randn(3, 4, 5, 5, generator=g), 1)
    a = pseudolabels_from_probs(probs, 0.5)
    b = pseudolabels_from_probs(probs, 0.5)
    assert np.array_equal(a.labels, b.labels)
    assert set(np.unique(a.labels)) <= {0, 1, 2, 3, IGNORE}


def _instance(seed, K=4, n=60):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, K, size=n)
    # coarse grid of confidences so ties occur
    conf = rng.integers(1, 11, size=n) / 10
    return pred, conf


@pytest.mark.parametrize("eta", [0.1, 0.5, 1.0])
def test_retained_count_is_rank_plus_ties(eta):
    for seed in range(20):
        pred, conf = _instance(seed)
        deltas, counts = collect_confidences(pred, conf, 4)
        sigma = compute_thresholds(deltas, counts, eta)
        pl = emit_pseudolabels(pred, conf, sigma, counts, eta)
        kept = pl.retained_per_class()
        for k in range(4):
            if counts[k] == 0:
                assert kept[k] == 0
                continue
            r = math.ceil(round(counts[k] * eta, 9))
            ties_below_rank = int(np.sum(deltas[k][r:] == deltas[k][r - 1]))
            assert kept[k] == r + ties_below_rank
            cls = pred == k
            assert (conf[cls & (pl.labels != IGNORE)] >= sigma[k]).all()
            assert (conf[cls & (pl.labels == IGNORE)] < sigma[k]).all()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_retention_monotone_in_eta(seed, e1, e2):
    lo, hi = sorted((e1, e2))
    pred, conf = _instance(seed)
    deltas, counts = collect_confidences(pred, conf, 4)
    a = emit_pseudolabels(pred, conf, compute_thresholds(deltas, counts, lo)).labels != IGNORE
    b = emit_pseudolabels(pred, conf, compute_thresholds(deltas, counts, hi)).labels != IGNORE
    assert not (a & ~b).any()
