import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hylovqa import diffcore as dc
from hylovqa.anchorbank import AnchorBank, memory_loss
from hylovqa.diffcore import Tensor
from hylovqa.errors import ContractError, StateError


def brute_force(P, f):
    best, arg = -np.inf, -1
    for k in range(P.shape[0]):
        c = P[k] @ f / (np.linalg.norm(P[k]) * np.linalg.norm(f) + 1e-12)
        if c > best:
            best, arg = c, k
    return arg


def filled_bank(rng, d, k, alpha=0.9, beta=0.9, n=None):
    bank = AnchorBank(d, k, k, alpha, beta)
    for _ in range(k if n is None else n):
        bank.init_or_insert(rng.normal(size=d), rng.normal(size=d))
    return bank


def test_first_insert_copies_feature(rng):
    bank = AnchorBank(4, 3, 3)
    fv, fq = rng.normal(size=4), rng.normal(size=4)
    bank.init_or_insert(fv, fq)
    assert bank.filled_v == bank.filled_q == 1
    assert bank.P_v[0].tobytes() == fv.tobytes() and bank.P_q[0].tobytes() == fq.tobytes()


def test_capacity(rng):
    bank = filled_bank(rng, 4, 3)
    snap = (bank.P_v.copy(), bank.P_q.copy())
    bank.init_or_insert(rng.normal(size=4), rng.normal(size=4))
    assert bank.filled_v == 3
    assert np.array_equal(snap[0], bank.P_v) and np.array_equal(snap[1], bank.P_q)


def test_one_hot_anchors_retrieve_themselves():
    K = 6
    bank = AnchorBank(K, K, K)
    for k in range(K):
        bank.init_or_insert(np.eye(K)[k], np.eye(K)[k])
    for k in range(K):
        r = bank.retrieve(np.eye(K)[k], np.eye(K)[k])
        assert (r.k_v, r.k_q) == (k, k)


def test_exact_match_and_tie_rule(rng):
    bank = filled_bank(rng, 5, 6)
    r = bank.retrieve(bank.P_v[3], bank.P_q[3])
    assert r.k_v == 3 and abs(r.sim_v - 1.0) < 1e-12
    twin = AnchorBank(3, 3, 3)
    a = np.array([1.0, 2.0, 0.0])
    for _ in range(2):
        twin.init_or_insert(a, a)
    twin.init_or_insert(-a, -a)
    assert twin.retrieve(a, a).k_v == 0


@pytest.mark.parametrize("K", [1, 4, 16, 64])
def test_retrieval_matches_brute_force(K):
    r = np.random.default_rng(K)
    for _ in range(100):
        bank = filled_bank(r, 8, K)
        fv, fq = r.normal(size=8), r.normal(size=8)
        res = bank.retrieve(fv, fq)
        assert res.k_v == brute_force(bank.P_v, fv) and res.k_q == brute_force(bank.P_q, fq)


def test_partially_filled_bank_only_scans_filled(rng):
    bank = filled_bank(rng, 4, 8, n=2)
    for _ in range(20):
        assert bank.retrieve(rng.normal(size=4), rng.normal(size=4)).k_v < 2


def test_empty_bank_retrieval_fails():
    with pytest.raises(StateError):
        AnchorBank(3, 2, 2).retrieve(np.ones(3), np.ones(3))


def test_momentum_boundaries(rng):
    for alpha, expect in ((0.0, "feature"), (1.0, "anchor")):
        bank = filled_bank(rng, 4, 3, alpha, alpha)
        fv, fq = rng.normal(size=4), rng.normal(size=4)
        r = bank.retrieve(fv, fq)
        before = bank.P_v[r.k_v].copy()
        bank.momentum_update(r, fv, fq)
        want = fv if expect == "feature" else before
        assert bank.P_v[r.k_v].tobytes() == want.tobytes()


def test_momentum_half():
    bank = AnchorBank(2, 1, 1, 0.5, 0.5)
    bank.init_or_insert(np.array([2.0, 0.0]), np.array([2.0, 0.0]))
    r = bank.retrieve(np.array([0.0, 2.0]), np.array([0.0, 2.0]))
    bank.momentum_update(r, np.array([0.0, 2.0]), np.array([0.0, 2.0]))
    assert np.array_equal(bank.P_v[0], [1.0, 1.0])


def test_momentum_range_validated():
    with pytest.raises(ContractError):
        AnchorBank(2, 1, 1, alpha=1.5)
    bank = AnchorBank(2, 1, 1)
    bank.init_or_insert(np.ones(2), np.ones(2))
    r = bank.retrieve(np.ones(2), np.ones(2))
    with pytest.raises(ContractError):
        bank.momentum_update(r, np.ones(2), np.ones(2), alpha=-0.1)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_non_retrieved_anchors_untouched(K, a, b, seed):
    r = np.random.default_rng(seed)
    bank = filled_bank(r, 5, K, a, b)
    for _ in range(5):
        fv, fq = r.normal(size=5), r.normal(size=5)
        res = bank.retrieve(fv, fq)
        pv, pq = bank.P_v.copy(), bank.P_q.copy()
        bank.momentum_update(res, fv, fq)
        for k in range(K):
            if k != res.k_v:
                assert bank.P_v[k].tobytes() == pv[k].tobytes()
            if k != res.k_q:
                assert bank.P_q[k].tobytes() == pq[k].tobytes()


def test_stale_result_rejected(rng):
    bank = filled_bank(rng, 4, 2, n=1)
    r = bank.retrieve(np.ones(4), np.ones(4))
    bank.init_or_insert(rng.normal(size=4), rng.normal(size=4))
    with pytest.raises(StateError):
        bank.anchors(r)


def test_instance_context(rng):
    bank = filled_bank(rng, 4, 3, 0.0, 0.3)
    fv, fq = rng.normal(size=4), rng.normal(size=4)
    r = bank.retrieve(fv, fq)
    pq_old = bank.P_q[r.k_q].copy()
    bank.momentum_update(r, fv, fq)
    z = bank.instance_context(r)
    assert z.shape == (8,)
    assert z[:4].tobytes() == fv.tobytes()
    assert np.array_equal(z[4:], 0.3 * pq_old + 0.7 * fq)


def test_collinear_update_increases_similarity(rng):
    for _ in range(50):
        bank = AnchorBank(6, 1, 1, 0.7, 0.7)
        a = rng.normal(size=6)
        bank.init_or_insert(a, a)
        f = a + 0.5 * rng.normal() * a / np.linalg.norm(a) + 0.3 * rng.normal(size=6)
        r = bank.retrieve(f, f)
        before = r.sim_v
        bank.momentum_update(r, f, f)
        after = dc.cosine_value(f, bank.P_v[0])
        assert after >= before - 1e-12


def test_adaptive_rule_scales_momentum(rng):
    bank = AnchorBank(3, 1, 1, 0.8, 0.8, adaptive=True)
    bank.init_or_insert(np.array([1.0, 0, 0]), np.array([1.0, 0, 0]))
    f = np.array([1.0, 1.0, 0.0])
    r = bank.retrieve(f, f)
    a = 0.8 * r.sim_v
    bank.momentum_update(r, f, f)
    assert np.allclose(bank.P_v[0], a * np.array([1.0, 0, 0]) + (1 - a) * f, atol=1e-15)


def test_memory_loss_values(rng):
    bank = AnchorBank(2, 1, 1)
    bank.init_or_insert(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    r = bank.retrieve(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    same = memory_loss(Tensor([[1.0], [0.0]]), Tensor([[0.0], [1.0]]), bank, r).item()
    assert abs(same) < 1e-10  # eps guard in the cosine denominator
    orth = memory_loss(Tensor([[0.0], [1.0]]), Tensor([[1.0], [0.0]]), bank, r).item()
    assert abs(orth - 2.0) < 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_memory_loss_range(seed):
    r = np.random.default_rng(seed)
    bank = filled_bank(r, 4, 3)
    fv, fq = r.normal(size=(4, 1)), r.normal(size=(4, 1))
    res = bank.retrieve(fv, fq)
    v = memory_loss(Tensor(fv), Tensor(fq), bank, res).item()
    assert 0.0 <= v <= 4.0


def test_memory_loss_gradient_and_no_grad_to_anchors(rng):
    bank = filled_bank(rng, 5, 4)
    fv = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
    fq = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
    r = bank.retrieve(fv.data, fq.data)
    assert dc.grad_check(lambda: memory_loss(fv, fq, bank, r), [fv, fq]) < 1e-4
    loss = memory_loss(fv, fq, bank, r)
    leaves = dc.ComputationTape.from_loss(loss).leaves()
    assert all(leaf.requires_grad for leaf in leaves)
    assert {id(l) for l in leaves} == {id(fv), id(fq)}


def test_copy_and_state_round_trip(rng):
    bank = filled_bank(rng, 4, 3, 0.2, 0.6, n=2)
    other = bank.copy()
    other.init_or_insert(rng.normal(size=4), rng.normal(size=4))
    assert bank.filled_v == 2
    back = AnchorBank.from_arrays(bank.state_arrays())
    assert back.P_v.tobytes() == bank.P_v.tobytes() and back.P_q.tobytes() == bank.P_q.tobytes()
    assert (back.alpha, back.beta, back.filled_v, back.filled_q) == (0.2, 0.6, 2, 2)
