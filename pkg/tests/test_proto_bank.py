import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cpca.errors import ContractError, TrainingError
from cpca.proto_bank import (PrototypeBank, aggregate_class, init_prototypes, log_similarity,
                             momentum, pick_own_class, similarity, update_prototypes)

IGNORE = 255


def _bank(p, valid=None):
    p = torch.as_tensor(p, dtype=torch.float64)
    v = torch.ones(p.shape[0], dtype=torch.bool) if valid is None else torch.as_tensor(valid)
    return PrototypeBank(p, v, 0, 10)


def _fmap(vectors):
    """list of d-vectors -> [1, d, 1, n] feature map."""
    a = torch.as_tensor(vectors, dtype=torch.float64).T
    return a[None, :, None, :]


# --- initialisation ----------------------------------------------------------

def test_init_mean_of_two_pixels():
    feats = _fmap([[1.0, 0.0], [3.0, 0.0]])
    labels = torch.tensor([[[0, 0]]])
    bank = init_prototypes([(feats, labels)], num_classes=4)
    assert bank.prototypes[0].tolist() == [2.0, 0.0]
    assert bank.valid.tolist() == [True, False, False, False]
    assert bank.prototypes[3].tolist() == [0.0, 0.0]


def test_init_ignores_ignore_pixels():
    feats = _fmap([[1.0, 1.0], [100.0, 100.0]])
    bank = init_prototypes([(feats, torch.tensor([[[1, IGNORE]]]))], num_classes=2)
    assert bank.prototypes[1].tolist() == [1.0, 1.0]


def test_init_requires_a_labelled_pixel():
    with pytest.raises(ContractError):
        init_prototypes([(_fmap([[1.0, 0.0]]), torch.tensor([[[IGNORE]]]))], num_classes=2)


def two_pass_mean(features, labels, K):
    """Brute-force oracle: first pass collects, second pass averages per class."""
    d = features[0].shape[1]
    buckets = {k: [] for k in range(K)}
    for f, y in zip(features, labels):
        f = f.permute(0, 2, 3, 1).reshape(-1, d).numpy()
        for vec, lab in zip(f, y.reshape(-1).tolist()):
            if lab != IGNORE:
                buckets[lab].append(vec)
    return {k: np.mean(v, axis=0) for k, v in buckets.items() if v}


def test_init_matches_two_pass_oracle_and_is_partition_invariant():
    rng = np.random.default_rng(0)
    K, d = 5, 6
    feats = [torch.from_numpy(rng.normal(size=(3, d, 4, 4)) * 10) for _ in range(4)]
    labels = [torch.from_numpy(rng.integers(0, K, size=(3, 4, 4))) for _ in range(4)]
    labels[0][0, 0, 0] = IGNORE
    oracle = two_pass_mean(feats, labels, K)
    bank = init_prototypes(zip(feats, labels), K)
    for k, mean in oracle.items():
        np.testing.assert_allclose(bank.prototypes[k].numpy(), mean, rtol=0, atol=1e-10)
    # one big batch, pixel order reversed
    allf = torch.cat(feats).flip(0)
    ally = torch.cat(labels).flip(0)
    bank2 = init_prototypes([(allf, ally)], K)
    np.testing.assert_allclose(bank2.prototypes.numpy(), bank.prototypes.numpy(), atol=1e-10)


def test_bank_never_requires_grad():
    with pytest.raises(TrainingError):
        PrototypeBank(torch.zeros(2, 2, requires_grad=True), torch.ones(2, dtype=torch.bool))


# --- similarity ----------------------------------------------------------------

def test_similarity_two_class_example():
    bank = _bank([[1.0, 0.0], [0.0, 1.0]])
    s = similarity(_fmap([[1.0, 0.0]]), bank, tau=1.0)[0, :, 0, 0]
    e = math.e
    assert s.tolist() == pytest.approx([e / (e + 1), 1 / (e + 1)], abs=1e-12)
    assert s[0].item() == pytest.approx(0.7311, abs=1e-4)


def test_similarity_uniform_when_dots_equal():
    bank = _bank([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
    s = similarity(_fmap([[0.3, -2.0]]), bank, tau=0.1)
    np.testing.assert_allclose(s.numpy(), 1 / 3, atol=1e-15)


def test_similarity_flattens_with_temperature():
    bank = _bank([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    c = _fmap([[2.0, -1.0]])
    kls = []
    for tau in (0.1, 1.0, 10.0):
        s = similarity(c, bank, tau)[0, :, 0, 0].numpy()
        kls.append(float(np.sum(s * np.log(s * 3))))
    assert kls[0] > kls[1] > kls[2] > 0


def test_similarity_stable_for_large_logits():
    bank = _bank([[1000.0, 0.0], [0.0, 1000.0]])
    logs = log_similarity(_fmap([[1000.0, 0.0]]), bank, tau=0.01)
    assert torch.isfinite(logs).all()


def test_similarity_requires_complete_bank():
    bank = _bank([[1.0, 0.0], [0.0, 1.0]], valid=[True, False])
    with pytest.raises(ContractError, match="prototype bank incomplete"):
        similarity(_fmap([[1.0, 0.0]]), bank, 1.0)
    with pytest.raises(ContractError):
        similarity(_fmap([[1.0, 0.0]]), _bank([[1.0, 0.0]]), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(2, 5), st.floats(0.05, 5.0), st.integers(0, 2**31 - 1))
def test_similarity_rows_sum_to_one(K, d, tau, seed):
    g = torch.Generator().manual_seed(seed)
    bank = _bank(torch.randn(K, d, generator=g, dtype=torch.float64))
    f = torch.randn(2, d, 3, 3, generator=g, dtype=torch.float64)
    s = similarity(f, bank, tau)
    np.testing.assert_allclose(s.sum(1).numpy(), 1.0, atol=1e-6)
    assert (s >= 0).all() and (s <= 1).all()


# --- class aggregation -------------------------------------------------------

def test_aggregate_inverse_weighting_example():
    f = torch.tensor([[1.0, 0.0], [3.0, 0.0]], dtype=torch.float64)
    out, valid = aggregate_class(f, torch.tensor([0.2, 0.6], dtype=torch.float64), torch.tensor([0, 0]), 2)
    assert out[0].tolist() == pytest.approx([5 / 3, 0.0], abs=1e-12)
    assert valid.tolist() == [True, False]


def test_aggregate_single_pixel_and_equal_weights():
    f = torch.tensor([[4.0, -1.0]], dtype=torch.float64)
    out, _ = aggregate_class(f, torch.tensor([0.93]), torch.tensor([1]), 2)
    assert out[1].tolist() == [4.0, -1.0]
    f = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]], dtype=torch.float64)
    out, _ = aggregate_class(f, torch.full((3,), 0.4), torch.zeros(3, dtype=torch.long), 1)
    np.testing.assert_allclose(out[0].numpy(), [3.0, 2.0], atol=1e-12)


def test_aggregate_all_similarities_one_falls_back_to_mean():
    f = torch.tensor([[1.0, 0.0], [3.0, 0.0]], dtype=torch.float64)
    out, _ = aggregate_class(f, torch.ones(2), torch.tensor([0, 0]), 1)
    assert out[0].tolist() == [2.0, 0.0]


def test_aggregate_direct_weighting():
    f = torch.tensor([[1.0, 0.0], [3.0, 0.0]], dtype=torch.float64)
    out, _ = aggregate_class(f, torch.tensor([0.2, 0.6]), torch.tensor([0, 0]), 1, "direct")
    assert out[0, 0].item() == pytest.approx(0.25 * 1 + 0.75 * 3)
    with pytest.raises(ContractError):
        aggregate_class(f, torch.tensor([0.2, 0.6]), torch.tensor([0, 0]), 1, "bogus")


def test_aggregate_from_feature_maps_skips_ignore():
    f = _fmap([[1.0, 0.0], [3.0, 0.0], [50.0, 50.0]])
    sims = torch.tensor([[[0.2, 0.6, 0.1]]])
    out, valid = aggregate_class(f, sims, torch.tensor([[[0, 0, IGNORE]]]), 2)
    assert out[0].tolist() == pytest.approx([5 / 3, 0.0])
    assert not valid[1]


def test_pick_own_class():
    sims = torch.tensor([[[[0.7]], [[0.3]]]]).reshape(1, 2, 1, 1)
    assert pick_own_class(sims, torch.tensor([[[1]]])).item() == pytest.approx(0.3)
    assert pick_own_class(sims, torch.tensor([[[IGNORE]]])).item() == 0.0


# --- momentum schedule and EMA -----------------------------------------------

def test_momentum_endpoints_and_midpoint():
    assert momentum(0, 100, 0.9, 0.9) == pytest.approx(0.9, abs=1e-12)
    assert momentum(100, 100, 0.9, 0.9) == pytest.approx(0.009, abs=1e-12)
    assert momentum(50, 100, 0.9, 0.9) == pytest.approx(0.891 * 0.5 ** 0.9 + 0.009, abs=1e-12)
    assert momentum(50, 100, 0.9, 0.9) == pytest.approx(0.4865, abs=1e-4)
    with pytest.raises(ContractError):
        momentum(101, 100)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0), st.integers(2, 5000))
def test_momentum_strictly_decreasing(m0, alpha, T):
    vals = [momentum(t, T, m0, alpha) for t in range(0, T + 1, max(1, T // 50))]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_update_prototypes_examples():
    bank = _bank([[2.0, 0.0], [7.0, 7.0]])
    cf = torch.tensor([[5 / 3, 0.0], [9.0, 9.0]], dtype=torch.float64)
    valid = torch.tensor([True, False])
    new = update_prototypes(bank, cf, valid, 0.3)
    assert new.prototypes[0].tolist() == pytest.approx([1.9, 0.0], abs=1e-12)
    assert new.prototypes[1].tolist() == [7.0, 7.0]
    assert new.t == 1 and bank.t == 0
    assert torch.equal(update_prototypes(bank, cf, torch.ones(2, dtype=torch.bool), 0.0).prototypes,
                       bank.prototypes)
    assert torch.equal(update_prototypes(bank, cf, torch.ones(2, dtype=torch.bool), 1.0).prototypes, cf)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_update_is_convex_combination(m, seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.randn(3, 4, generator=g, dtype=torch.float64)
    c = torch.randn(3, 4, generator=g, dtype=torch.float64)
    new = update_prototypes(_bank(p), c, torch.ones(3, dtype=torch.bool), m).prototypes
    lo, hi = torch.minimum(p, c), torch.maximum(p, c)
    assert (new >= lo - 1e-15).all() and (new <= hi + 1e-15).all()


def test_cosine_ignores_feature_scale():
    bank = _bank([[2.0, 0.0], [0.0, 0.5]])
    a = similarity(_fmap([[1.0, 1.0]]), bank, 1.0, kind="cosine")
    b = similarity(_fmap([[100.0, 100.0]]), bank, 1.0, kind="cosine")
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)
    np.testing.assert_allclose(a.numpy(), 0.5, atol=1e-12)


def test_cosine_equals_dot_on_unit_vectors():
    rng = np.random.default_rng(4)
    p = rng.normal(size=(3, 5))
    c = rng.normal(size=(6, 5))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    bank, f = _bank(p), _fmap(c)
    np.testing.assert_allclose(log_similarity(f, bank, 0.3, "cosine").numpy(),
                               log_similarity(f, bank, 0.3, "dot").numpy(), atol=1e-12)


def test_unknown_similarity_kind():
    with pytest.raises(ContractError):
        similarity(_fmap([[1.0, 0.0]]), _bank([[1.0, 0.0], [0.0, 1.0]]), 1.0, kind="l2")
