import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_mdp
from ssp_lab.errors import SolverFailure
from ssp_lab.mdp import (compute_cost_to_go, compute_fast_policy,
                         compute_hitting_times, random_policy, simulate_batch,
                         uniform_policy)
from ssp_lab.occupancy import (LoopFreeMdp, fast_horizon, flat_polytope,
                               flow_matrix, membership_check,
                               occupancy_of_policy, policy_of_occupancy,
                               skew_map, unskew)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_occupancy_identities(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 5, 3)
    pi = random_policy(mdp, rng)
    c = rng.random(mdp.n_pairs)
    q = occupancy_of_policy(mdp, pi)
    assert q @ c == pytest.approx(compute_cost_to_go(mdp, pi, c)[0], abs=1e-8)
    assert q.sum() == pytest.approx(compute_hitting_times(mdp, pi)[0], abs=1e-8)
    res = membership_check(mdp, q)
    assert res["flow"] <= 1e-10 and res["nonneg"] == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_policy_roundtrip(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 3, sparsity=1.0)
    pi = random_policy(mdp, rng)
    back = policy_of_occupancy(mdp, occupancy_of_policy(mdp, pi))
    np.testing.assert_allclose(back, pi, atol=1e-10)


def test_unvisited_state_gets_uniform_policy(toy):
    q = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    pi = policy_of_occupancy(toy, q)
    np.testing.assert_allclose(pi, [1, 0, 0.5, 0.5, 0.5, 0.5])


def test_flow_matrix_toy(toy):
    B = flow_matrix(toy)
    # s1 is entered only from (s0,a1); s2 from (s1,a1) and its own a1 loop
    np.testing.assert_allclose(B[1], [0, -1, 1, 1, 0, 0])
    np.testing.assert_allclose(B[2], [0, 0, 0, -0.5, 1, 0.5])


def test_flat_polytope_drops_unreachable_states():
    from ssp_lab.mdp import SspMdp
    mdp = SspMdp([[0, 0, 1.0], [0, 0, 1.0]], [0, 1], 0)
    poly = flat_polytope(mdp)
    assert list(poly.var_pair) == [0]


def test_flat_min_size_and_degenerate_face(toy):
    poly = flat_polytope(toy)
    tmin, x = poly.min_size()
    assert tmin == 1.0
    assert poly.size(x) == pytest.approx(1.0)
    face = poly.for_size(1.0)
    assert face.degenerate and list(face.var_pair) == [0]
    assert poly.for_size(2.0) is poly
    with pytest.raises(SolverFailure):
        poly.for_size(0.5)


def mc_layered(mdp, lf, rows, n, seed):
    pol = lf.policy(lf.occupancy(rows))
    _, _, _, tail, lay = simulate_batch(mdp, pol, n, seed, record_layers=True)
    counts = lay[:, lf.var_layer[:-1] - 1, lf.var_pair[:-1]]
    return np.column_stack([counts, tail]).astype(float)


def test_layered_occupancy_matches_simulation(toy):
    lf = LoopFreeMdp(toy, 3, 4)
    rows = np.tile(uniform_policy(toy), (3, 1))
    x = lf.occupancy(rows)
    assert max(lf.residuals(x).values()) <= 1e-12
    N = mc_layered(toy, lf, rows, 50_000, 1)
    se = N.std(axis=0, ddof=1) / math.sqrt(len(N))
    assert np.all(np.abs(N.mean(axis=0) - x) <= 4 * se + 1e-12)


def test_layered_size_counts_fast_chain(toy):
    lf = LoopFreeMdp(toy, 2, 5)
    # always a1: the walker is still in s1 at layer 2, so all mass enters the chain
    rows = np.tile(np.array([0, 1, 0, 1, 0, 1.0]), (2, 1))
    x = lf.occupancy(rows)
    assert x[-1] == pytest.approx(1.0)
    assert lf.size(x) == pytest.approx(2 + 5)
    # a0 at layer 2 exits instead
    rows[1] = [0, 1, 1, 0, 1, 0]
    x = lf.occupancy(rows)
    assert x[-1] == pytest.approx(1.0) and lf.size(x) == pytest.approx(7.0)


def test_layered_min_size_is_fast_policy(toy):
    lf = LoopFreeMdp(toy, 4, 3)
    tmin, x = lf.min_size()
    assert tmin == 1.0
    face = lf.for_size(1.0)
    assert face.degenerate and face.n_vars == 2


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(1, 4), st.integers(1, 5))
def test_layered_random_points_feasible(seed, H1, H2):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 2)
    lf = LoopFreeMdp(mdp, H1, H2)
    x = lf.random_point(rng)
    assert max(lf.residuals(x).values()) <= 1e-10
    assert lf.size(x) >= lf.min_size()[0] - 1e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 10.0), st.integers(1, 6), st.integers(0, 10 ** 6))
def test_skew_roundtrip(lam, H1, seed):
    rng = np.random.default_rng(seed)
    q = rng.random((H1, 3))
    layers = np.arange(1, H1 + 1)[:, None]
    np.testing.assert_allclose(unskew(skew_map(q, layers, lam), layers, lam), q,
                               rtol=1e-12)


def test_skew_rejects_negative_lambda():
    with pytest.raises(ValueError):
        skew_map(np.ones(2), np.ones(2), -0.1)


def test_skewed_weights_match_dense_skew(toy):
    lf = LoopFreeMdp(toy, 3, 2)
    x = lf.random_point(np.random.default_rng(0))
    lam = 0.3
    q, tail = lf.dense(x)
    dense = skew_map(q, np.arange(1, 4)[:, None], lam)
    fast = tail * sum(1 + lam * h for h in (4, 5))
    agg = lf.aggregate(x, lam)
    np.testing.assert_allclose(agg[:-1], dense.sum(axis=0), atol=1e-14)
    assert agg[-1] == pytest.approx(fast)


def test_fast_horizon_formula():
    assert fast_horizon(2.0, 100, 0.1) == math.ceil(8 * math.log(4000))


def test_fast_policy_occupancy_size(toy):
    pi, _, T = compute_fast_policy(toy)
    assert occupancy_of_policy(toy, pi).sum() == pytest.approx(T[0])
