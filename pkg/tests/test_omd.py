import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from conftest import random_mdp
from ssp_lab.errors import InfeasibleFloor
from ssp_lab.mdp import SspMdp
from ssp_lab.occupancy import LoopFreeMdp, flat_polytope
from ssp_lab.omd import (BarrierSet, ExpertState, entropy_init,
                         entropy_objective, logbarrier_init,
                         logbarrier_objective, multiscale_init,
                         multiscale_update, omd_step_entropy,
                         omd_step_logbarrier, omd_step_skewed)


def two_arm():
    """One state, two actions, both ending the episode at once."""
    return SspMdp([[0.0, 1.0], [0.0, 1.0]], [0, 0], 0)


def loop_arm():
    """a0 exits; a1 exits with probability 1/2 and otherwise stays."""
    return SspMdp([[0.0, 1.0], [0.5, 0.5]], [0, 0], 0)


def kl(x, y, w):
    return float(np.sum(w * (np.where(x > 0, x * np.log(np.where(x > 0, x, 1) / y), 0)
                             - x + y)))


# -- entropy ------------------------------------------------------------------

def test_entropy_step_is_exponential_weights():
    poly = flat_polytope(two_arm())
    init = entropy_init(poly, 5.0)
    np.testing.assert_allclose(init.x, [0.5, 0.5], atol=1e-12)
    x, logx = init.x, init.logx
    eta = 0.3
    costs = [np.array([1.0, 0.0]), np.array([0.2, 0.9]), np.array([0.5, 0.1])]
    w = np.array([0.5, 0.5])
    for c in costs:
        res = omd_step_entropy(poly, logx, c, 5.0, eta)
        w = w * np.exp(-eta * c)
        w /= w.sum()
        np.testing.assert_allclose(res.x, w, atol=1e-12)
        assert res.kkt <= 1e-8
        x, logx = res.x, res.logx


def test_zero_cost_step_is_identity(toy):
    poly = flat_polytope(toy)
    init = entropy_init(poly, 1.8)
    res = omd_step_entropy(poly, init.logx, np.zeros(toy.n_pairs), 1.8, 0.5)
    np.testing.assert_allclose(res.x, init.x, atol=1e-10)


def test_feasible_unconstrained_step_returned(toy):
    # with T slack and only (s2,*) costed, the multiplicative update can leave
    # the flow constraints violated, so use a cost that is constant per state
    poly = flat_polytope(toy)
    init = entropy_init(poly, 10.0)
    c = np.array([0.3, 0.3, 0.0, 0.0, 0.0, 0.0])
    y = init.x * np.exp(-0.7 * c)
    res = omd_step_entropy(poly, init.logx, c, 10.0, 0.7)
    # scaling both s0 actions by the same factor is not feasible: s0 flow = 1
    assert max(poly.residuals(y).values()) > 1e-3
    assert max(poly.residuals(res.x, 10.0).values()) <= 1e-8
    np.testing.assert_allclose(res.x, init.x, atol=1e-10)


def slsqp_entropy(poly, x_prev, c, T, eta):
    """Independent oracle: SLSQP on the primal projection problem."""
    W = poly.mult

    def f(x):
        return entropy_objective(np.maximum(x, 1e-15), x_prev, c, W, eta)

    cons = [{"type": "eq", "fun": lambda x: poly.A @ x - poly.b},
            {"type": "ineq", "fun": lambda x: T - W @ x}]
    sol = optimize.minimize(f, x_prev, method="SLSQP", constraints=cons,
                            bounds=[(1e-15, None)] * poly.n_vars,
                            options={"ftol": 1e-14, "maxiter": 2000})
    return sol.x, f(sol.x)


@pytest.mark.parametrize("T", [1.3, 1.7, 2.5])
def test_entropy_step_matches_slsqp(toy, T):
    poly = flat_polytope(toy)
    init = entropy_init(poly, T)
    c = np.array([1.0, 0.0, 0.2, 1.0, 1.0, 0.4])
    res = omd_step_entropy(poly, init.logx, c, T, 0.8)
    x_ref, f_ref = slsqp_entropy(poly, init.x, c, T, 0.8)
    f_ours = entropy_objective(res.x, init.x, c, poly.mult, 0.8)
    assert f_ours <= f_ref + 1e-9
    np.testing.assert_allclose(res.x, x_ref, atol=1e-4)
    assert poly.size(res.x) <= T + 1e-8


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_generalized_pythagoras(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 4, 2)
    poly = flat_polytope(mdp)
    tmin, _ = poly.min_size()
    T = tmin * (1.2 + rng.random())
    init = entropy_init(poly, T)
    c = rng.random(mdp.n_pairs)
    eta = 0.5
    res = omd_step_entropy(poly, init.logx, c, T, eta)
    y = np.exp(init.logx - eta * poly.lift_cost(c))
    W = poly.mult
    for _ in range(20):
        z = poly.random_point(rng)
        if poly.size(z) > T:
            t = (T - poly.size(res.x)) / (poly.size(z) - poly.size(res.x))
            z = res.x + max(t, 0.0) * (z - res.x)
        assert kl(z, res.x, W) <= kl(z, y, W) + 1e-8


def test_skewed_with_zero_lambda_equals_entropy(toy):
    lf = LoopFreeMdp(toy, 3, 2)
    T = 2.5
    init = entropy_init(lf, T)
    c = np.array([1.0, 0.0, 0.2, 1.0, 1.0, 0.4])
    a = omd_step_entropy(lf, init.logx, c, T, 0.4)
    b = omd_step_skewed(lf, init.logx, c, T, 0.4, 0.0)
    np.testing.assert_allclose(a.x, b.x, atol=1e-12)


def test_skewed_step_residuals(toy):
    lf = LoopFreeMdp(toy, 3, 2)
    T, lam = 2.5, 0.2
    init = entropy_init(lf, T, lam)
    res = omd_step_skewed(lf, init.logx, np.full(6, 0.5), T, 0.4, lam)
    assert res.kkt <= 1e-8
    assert max(lf.residuals(res.x, T).values()) <= 1e-8


def test_degenerate_face_projection(toy):
    poly = flat_polytope(toy).for_size(1.0)
    res = entropy_init(poly, 1.0)
    np.testing.assert_allclose(poly.dense(res.x), [1, 0, 0, 0, 0, 0], atol=1e-12)


# -- log-barrier ----------------------------------------------------------------

def barrier_1d(l0, l1, x_prev, eta):
    """Root of the derivative along the one-dimensional feasible line.

    Feasible points of ``loop_arm`` satisfy x0 = 1 - x1 / 2 with x1 in (0, 2).
    """
    x0p, x1p = x_prev

    def g(t):
        return (-l0 / 2 + l1
                + (0.5 / (1 - t / 2) - 0.5 / x0p - 1 / t + 1 / x1p) / eta)

    t = optimize.brentq(g, 1e-12, 2 - 1e-12, xtol=1e-15)
    return np.array([1 - t / 2, t])


@pytest.mark.parametrize("loss, eta", [([0.0, 1.0], 0.5), ([2.0, 0.1], 1.0),
                                       ([0.3, 0.3], 0.2), ([5.0, 0.0], 2.0)])
def test_logbarrier_matches_1d_solution(loss, eta):
    poly = flat_polytope(loop_arm())
    bset = BarrierSet(poly, 10.0)
    rates = np.full(2, eta)
    init = logbarrier_init(bset, rates, 0.0)
    # the barrier minimizer alone balances -ln x0 - ln x1 on the line
    np.testing.assert_allclose(init.x, [0.5, 1.0], atol=1e-8)
    res = omd_step_logbarrier(bset, init.x, np.array(loss), rates, 0.0)
    np.testing.assert_allclose(res.x, barrier_1d(*loss, init.x, eta), atol=1e-8)
    assert res.kkt <= 1e-8


def test_logbarrier_zero_loss_keeps_point(toy):
    lf = LoopFreeMdp(toy, 3, 2)
    bset = BarrierSet(lf, 2.5)
    rates = np.full(lf.n_groups, 0.3)
    init = logbarrier_init(bset, rates, 0.1)
    res = omd_step_logbarrier(bset, init.x, np.zeros(lf.n_groups), rates, 0.1)
    np.testing.assert_allclose(lf.aggregate(res.x, 0.1),
                               lf.aggregate(init.x, 0.1), atol=1e-8)


def test_logbarrier_beats_random_points(toy):
    lf = LoopFreeMdp(toy, 3, 2)
    T, lam = 2.5, 0.1
    bset = BarrierSet(lf, T)
    rates = np.full(lf.n_groups, 0.3)
    x = logbarrier_init(bset, rates, lam).x
    loss = np.array([1.0, 0.0, 3.0, 0.5, 0.0, 2.0, 1.0])
    res = omd_step_logbarrier(bset, x, loss, rates, lam)
    f_star = logbarrier_objective(res.x, x, loss, rates, lf, lam)
    rng = np.random.default_rng(0)
    for _ in range(300):
        z = lf.random_point(rng)
        if lf.size(z) > T:
            continue
        theta = 10 ** rng.uniform(-4, 0)
        z = res.x + theta * (z - res.x)
        assert logbarrier_objective(z, x, loss, rates, lf, lam) >= f_star - 1e-10


def test_floor_respected_and_infeasible_floor(toy):
    lf = LoopFreeMdp(toy, 2, 2)
    bset = BarrierSet(lf, 3.0, floor=1e-3)
    rates = np.full(lf.n_groups, 0.5)
    res = logbarrier_init(bset, rates, 0.0)
    q = lf.aggregate(res.x)
    present = np.bincount(lf.var_pair, minlength=lf.n_groups) > 0
    assert q[present].min() >= 1e-3 - 1e-12
    with pytest.raises(InfeasibleFloor):
        BarrierSet(lf, 3.0, floor=0.9)


# -- multi-scale experts ----------------------------------------------------------

def test_multiscale_init_example():
    st_ = multiscale_init(4.0, 1024, 16.0)
    assert st_.j0 == 1 and st_.N == 9
    assert st_.b[0] == 4.0
    assert st_.eta[0] == pytest.approx(1 / 256)
    assert st_.p.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(st_.p[1:], st_.eta[1:] / (9 * st_.eta[0]))
    assert st_.p[0] >= 1 / st_.N


def test_multiscale_single_expert():
    st_ = multiscale_init(1000.0, 1024, 16.0)
    assert st_.N == 1 and st_.p.tolist() == [1.0]


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 500.0), st.integers(2, 10 ** 6), st.floats(1.0, 100.0))
def test_multiscale_init_properties(T_fast, K, D):
    s = multiscale_init(T_fast, K, D)
    assert s.p.sum() == pytest.approx(1.0, abs=1e-12)
    assert s.p.min() > 0 and s.p[0] >= 1 / s.N - 1e-15
    assert s.b[0] >= T_fast
    np.testing.assert_allclose(s.eta, 1 / np.sqrt(s.b * K * max(D, 16)))


def simplex_oracle(p, eta, loss):
    """Minimize <x, loss + 4 eta loss^2> + D_psi(x, p) over the simplex directly."""
    full = loss + 4 * eta * loss ** 2

    def f(z):
        x = np.maximum(z, 1e-300)
        return float(full @ x + np.sum((x * np.log(x / p) - x + p) / eta))

    cons = [{"type": "eq", "fun": lambda z: z.sum() - 1}]
    sol = optimize.minimize(f, p, method="SLSQP", constraints=cons,
                            bounds=[(1e-12, 1)] * len(p),
                            options={"ftol": 1e-15, "maxiter": 1000})
    return sol.x


@pytest.mark.parametrize("eta, loss", [
    ([0.5, 0.2, 0.05], [1.0, 2.0, 4.0]),
    ([1.0, 0.3, 0.1], [0.0, 3.0, 0.5]),
    ([0.05, 0.05, 0.01], [2.0, 0.0, 10.0]),
])
def test_multiscale_matches_simplex_minimization(eta, loss):
    eta, loss = np.array(eta), np.array(loss)
    p = np.array([0.5, 0.3, 0.2])
    s = ExpertState(p, eta, np.array([2.0, 4.0, 8.0]), 0, 3)
    ours = multiscale_update(s, loss).p
    np.testing.assert_allclose(ours, simplex_oracle(p, eta, loss), atol=1e-6)


def test_uniform_rates_reduce_to_hedge():
    p = np.array([0.2, 0.3, 0.5])
    eta = 0.1
    loss = np.array([1.0, 0.0, 2.0])
    s = ExpertState(p, np.full(3, eta), np.ones(3), 0, 3)
    w = p * np.exp(-eta * (loss + 4 * eta * loss ** 2))
    np.testing.assert_allclose(multiscale_update(s, loss).p, w / w.sum(), atol=1e-12)


def test_zero_losses_keep_weights():
    s = multiscale_init(2.0, 4096, 4.0)
    np.testing.assert_allclose(multiscale_update(s, np.zeros(s.N)).p, s.p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_multiscale_keeps_simplex_and_correction_bound(seed):
    rng = np.random.default_rng(seed)
    s = multiscale_init(float(rng.integers(1, 8)), int(rng.integers(64, 5000)), 16.0)
    for _ in range(5):
        loss = rng.random(s.N) * s.b
        ok = s.eta <= 1 / (4 * s.b)
        corr = 4 * s.eta * loss ** 2
        assert np.all(corr[ok] <= loss[ok] + 1e-12)
        s = multiscale_update(s, loss)
        assert abs(s.p.sum() - 1) <= 1e-12 and s.p.min() >= 0
