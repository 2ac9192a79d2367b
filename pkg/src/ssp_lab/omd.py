"""Mirror-descent steps over occupancy polytopes and the multi-scale experts update.

Three regularizers are supported:

* negative entropy over the (possibly skewed) occupancy coordinates,
  solved by Newton's method on the dual of the KL projection;
* the aggregated log-barrier -sum_j (1/eta_j) ln q_skew(j), solved by a
  primal-dual interior point method on the layered variables;
* weighted negative entropy on the probability simplex for the experts.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy import optimize

from . import _kernels
from .errors import InfeasibleFloor, SolverFailure

KKT_TOL = 1e-8
NEWTON_TOL = 1e-11
# a weakly active size bound leaves an O(sqrt(gap)) error in the iterate,
# so the interior point target sits well below KKT_TOL
IPM_TOL = 1e-14
MAX_ITER = 10 ** 4


@dataclass
class ProjectionResult:
    """Solver output: the new point and how well it satisfies optimality."""
    x: np.ndarray
    logx: np.ndarray = None
    dual: dict = field(default_factory=dict)
    iterations: int = 0
    kkt: float = 0.0
    residuals: dict = field(default_factory=dict)


def _xlogx_ratio(x, y):
    """x ln(x/y) - x + y with the 0 ln 0 = 0 convention."""
    x = np.asarray(x, dtype=float)
    safe = np.where(x > 0, x, 1.0)
    ysafe = np.maximum(y, 1e-300)
    return np.where(x > 0, x * np.log(safe / ysafe), 0.0) - x + y


def entropy_objective(x, x_prev, cost, weights, eta):
    """<W c, x> + (1/eta) sum_i W_i (x_i ln(x_i/x_prev_i) - x_i + x_prev_i)."""
    return float(np.sum(weights * cost * x)
                 + np.sum(weights * _xlogx_ratio(x, x_prev)) / eta)


def _project_entropy(poly, logy, r, T, weights, warm=None, tol=NEWTON_TOL):
    """KL projection min sum r_i (x ln(x/y) - x + y) over poly with size <= T."""
    m = poly.A.shape[0]
    v0 = np.zeros(m) if warm is None else warm.get("v", np.zeros(m))
    mu0 = 0.0 if warm is None else warm.get("mu", 0.0)
    T_eff = np.inf if poly.degenerate else T
    w = poly.mult
    logx, v, mu, it, status = _kernels.entropy_projection(
        poly.A, poly.b, w, min(T_eff, 1e300), r, logy, v0, mu0, tol, MAX_ITER)
    if status != _kernels.OK:
        # retry cold before falling back to a quasi-Newton solve of the dual
        logx, v, mu, it2, status = _kernels.entropy_projection(
            poly.A, poly.b, w, min(T_eff, 1e300), r, logy, np.zeros(m), 0.0,
            tol, MAX_ITER)
        it += it2
    if status != _kernels.OK:
        logx, v, mu = _entropy_dual_lbfgs(poly, logy, r, T_eff)
    x, flow, size, nonneg, compl, stat, dsign = _kernels.entropy_kkt(
        poly.A, poly.b, w, min(T_eff, 1e300), r, logy, logx, v, mu)
    res = {"flow": flow, "size": size, "nonneg": nonneg, **poly.extra_residuals(x),
           "complementarity": compl, "stationarity": stat, "dual_sign": dsign}
    kkt = max(res.values())
    out = ProjectionResult(x, logx, {"v": v, "mu": mu}, int(it), kkt, res)
    if kkt > KKT_TOL:
        raise SolverFailure("entropy projection missed tolerance",
                            {"kkt": kkt, **res, "iterations": int(it)})
    return out


def _entropy_dual_lbfgs(poly, logy, r, T):
    """Fallback: minimize the smooth dual with bounded mu by L-BFGS-B."""
    A, b, w = poly.A, poly.b, poly.mult
    m = A.shape[0]
    finite = np.isfinite(T)

    def unpack(z):
        return z[:m], (z[m] if finite else 0.0)

    def fun(z):
        v, mu = unpack(z)
        lx = np.minimum(logy + (A.T @ v - mu * w) / r, 700.0)
        x = np.exp(lx)
        val = r @ x - b @ v + (mu * T if finite else 0.0)
        g = A @ x - b
        if finite:
            g = np.append(g, T - w @ x)
        return val, g

    z0 = np.zeros(m + (1 if finite else 0))
    bounds = [(None, None)] * m + ([(0.0, None)] if finite else [])
    sol = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": MAX_ITER, "gtol": 1e-13,
                                     "ftol": 1e-16})
    v, mu = unpack(sol.x)
    return np.minimum(logy + (A.T @ v - mu * w) / r, 700.0), v, mu


def omd_step_entropy(poly, logq, cost, T, eta, warm=None):
    """argmin_{q in poly, size <= T} <q, c> + KL_eta(q, q_k).

    ``logq`` is log q_k in the polytope's variables and ``cost`` is either a
    per-pair vector or already per variable.
    """
    c = _as_var_cost(poly, cost)
    W = poly.mult
    return _project_entropy(poly, logq - eta * c, W / eta, T, W, warm)


def omd_step_skewed(poly, logq, cost, T, eta, lam, warm=None):
    """Entropy step in skewed coordinates q_skew = (1 + lam h) q.

    Works on the unskewed variables: the skew only rescales every
    coordinate's weight in both the cost and the divergence.
    """
    c = _as_var_cost(poly, cost)
    W = poly.skew_weights(lam)
    return _project_entropy(poly, logq - eta * c, W / eta, T, W, warm)


def entropy_init(poly, T, lam=0.0):
    """Minimizer of the (skewed) negative entropy over the polytope."""
    W = poly.skew_weights(lam)
    logy = -1.0 - _wlogw(poly, lam) / W
    return _project_entropy(poly, logy, W, T, W)


def _wlogw(poly, lam):
    """sum over represented coordinates of W_h ln W_h, per variable."""
    out = poly.mult * 0.0
    for i in range(poly.n_vars):
        if poly.mult[i] == 1.0:
            w = 1.0 + lam * poly.layer_sum[i]
            out[i] = w * math.log(w)
        else:
            first = poly.var_layer[i]
            hs = np.arange(first, first + int(poly.mult[i]))
            ws = 1.0 + lam * hs
            out[i] = float(np.sum(ws * np.log(ws)))
    return out


def _as_var_cost(poly, cost):
    cost = np.asarray(cost, dtype=float)
    if cost.shape == (poly.n_vars,) and poly.n_vars != poly.mdp.n_pairs:
        return cost
    if cost.shape == (poly.mdp.n_pairs,):
        return poly.lift_cost(cost)
    if cost.shape == (poly.n_vars,):
        return cost
    raise ValueError("cost has the wrong length")


# -- log-barrier --------------------------------------------------------------

def logbarrier_objective(x, x_prev, loss, rates, poly, lam):
    """sum_j loss_j phi_j + (1/eta_j)(-ln phi_j + ln phi'_j + phi_j/phi'_j - 1)."""
    phi = poly.aggregate(x, lam)
    phik = poly.aggregate(x_prev, lam)
    return float(np.sum(loss * phi + (-np.log(np.maximum(phi, 1e-300))
                                      + np.log(phik) + phi / phik - 1.0) / rates))


class BarrierSet:
    """Decision set for the log-barrier steps: poly with size <= T and a floor.

    Precomputes a strictly interior reference point used to re-center warm
    starts.
    """

    def __init__(self, poly, T, floor=0.0):
        self.poly = poly.for_size(T)
        self.T = T
        self.floor = floor
        p = self.poly
        rows, h = [], []
        if not p.degenerate:
            rows.append(p.mult)
            h.append(T)
        if floor > 0:
            for j in range(p.n_groups):
                g = np.where(p.var_pair == j, p.mult, 0.0)
                if g.any():
                    rows.append(-g)
                    h.append(-floor)
        self.G = np.array(rows).reshape(len(rows), p.n_vars)
        self.h = np.array(h, dtype=float)
        self.center = self._interior_point()

    def slack(self, x):
        return self.h - self.G @ x

    def _interior_point(self):
        p = self.poly
        xe = entropy_init(p, self.T).x
        if p.degenerate:
            xc = xe
        else:
            xc = 0.5 * xe + 0.5 * p.min_size()[1]
        if np.all(self.slack(xc) > 0) and np.all(xc > 0):
            return xc
        # floor not met by the entropy center: ask an LP for a deep point
        n = p.n_vars
        c = np.zeros(n + 1)
        c[-1] = -1.0
        A_ub = np.hstack([self.G, np.ones((len(self.h), 1))])
        A_ub = np.vstack([A_ub, np.hstack([-np.eye(n), np.ones((n, 1))])])
        b_ub = np.append(self.h, np.zeros(n))
        A_eq = np.hstack([p.A, np.zeros((p.A.shape[0], 1))])
        res = optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=p.b,
                               bounds=[(None, None)] * n + [(None, 1.0)],
                               method="highs")
        if res.status != 0 or res.x[-1] <= 0:
            raise InfeasibleFloor("floored decision set is empty",
                                  {"floor": self.floor, "T": self.T})
        return res.x[:n]


def omd_step_logbarrier(bset, x_prev, loss, rates, lam, warm=None,
                        recenter=1e-3):
    """argmin over the barrier set of <q_skew, loss> + D_psi(q_skew, q_skew_prev).

    ``loss`` and ``rates`` are vectors over the aggregated pairs (the fast
    pair last). The solver runs on the layered variables; phi is the linear
    aggregation with skew weights.
    """
    p = bset.poly
    W = p.skew_weights(lam)
    loss = np.asarray(loss, dtype=float)
    rates = np.broadcast_to(np.asarray(rates, dtype=float), loss.shape).copy()
    phik = p.aggregate(x_prev, lam)
    a = loss + 1.0 / (rates * phik)
    beta = 1.0 / rates
    return _solve_barrier(bset, W, a, beta, x_prev, warm, recenter)


def logbarrier_init(bset, rates, lam):
    """Minimizer of -sum_j (1/eta_j) ln q_skew(j) over the barrier set."""
    p = bset.poly
    W = p.skew_weights(lam)
    beta = 1.0 / np.broadcast_to(np.asarray(rates, float), (p.n_groups,))
    return _solve_barrier(bset, W, np.zeros(p.n_groups), beta.copy(),
                          bset.center, None, 0.0, gap0=1.0)


def _solve_barrier(bset, W, a, beta, x_prev, warm, recenter, gap0=None):
    p = bset.poly
    x0 = (1.0 - recenter) * x_prev + recenter * bset.center
    if not (np.all(x0 > 0) and np.all(bset.slack(x0) > 0)):
        x0 = bset.center.copy()
    nu0 = np.zeros(p.A.shape[0]) if warm is None else warm["nu"]
    if gap0 is None:
        gap0 = 1e-3 if warm is not None else 1.0
    x, nu, it, status, pres, dres, gap = _kernels.logbarrier_ipm(
        p.A, p.b, bset.G, bset.h, p.var_pair, W, a, beta, x0, nu0, gap0,
        IPM_TOL, 500, KKT_TOL)
    usable = (_kernels.OK, _kernels.STALLED)
    if status not in usable or max(pres, dres, gap) > KKT_TOL:
        x, nu, it2, status, pres, dres, gap = _kernels.logbarrier_ipm(
            p.A, p.b, bset.G, bset.h, p.var_pair, W, a, beta, bset.center,
            np.zeros(p.A.shape[0]), 1.0, IPM_TOL, 2000, KKT_TOL)
        it += it2
    res = p.residuals(x, bset.T if not p.degenerate else np.inf)
    res.update({"primal": float(pres), "stationarity": float(dres),
                "gap": float(gap)})
    if bset.floor > 0:
        q = np.bincount(p.var_pair, weights=p.mult * x, minlength=p.n_groups)
        present = np.bincount(p.var_pair, minlength=p.n_groups) > 0
        res["floor"] = float(max(0.0, np.max(bset.floor - q[present])))
    kkt = max(res.values())
    if status not in usable or kkt > KKT_TOL:
        raise SolverFailure("log-barrier step missed tolerance",
                            {"kkt": kkt, **res, "iterations": int(it)})
    return ProjectionResult(x, None, {"nu": nu}, int(it), kkt, res)


# -- multi-scale experts -------------------------------------------------------

@dataclass
class ExpertState:
    """Weights p over N scales with rates eta_j and loss ranges b(j)."""
    p: np.ndarray
    eta: np.ndarray
    b: np.ndarray
    j0: int
    N: int


def multiscale_init(T_fast, K, D):
    """Scales b(j) = 2^(j0+j) starting just below the fast hitting time."""
    if T_fast < 1 or K < 2:
        raise ValueError("need T_fast >= 1 and K >= 2")
    j0 = int(math.ceil(math.log2(T_fast))) - 1
    N = max(1, int(math.ceil(math.log2(K))) - j0)
    j = np.arange(1, N + 1)
    b = 2.0 ** (j0 + j)
    eta = 1.0 / np.sqrt(b * K * max(D, 16.0))
    p = eta / (N * eta[0])
    p[0] = 1.0 - p[1:].sum()
    return ExpertState(p, eta, b, j0, N)


def multiscale_update(state, losses, tol=1e-12):
    """One OMD step with weighted entropy sum_j p_j ln p_j / eta_j on the simplex.

    Adds the correction a(j) = 4 eta_j l(j)^2 to each loss, reweights
    multiplicatively, and renormalizes with the multiplier nu solving
    sum_j p'_j exp(-eta_j nu) = 1.
    """
    losses = np.asarray(losses, dtype=float)
    eta = state.eta
    corr = 4.0 * eta * losses ** 2
    logp = np.log(np.maximum(state.p, 1e-300)) - eta * (losses + corr)

    def excess(nu):
        return math.log(np.sum(np.exp(logp - eta * nu)))

    lo, hi = -1.0, 1.0
    while excess(lo) < 0:
        lo *= 2.0
    while excess(hi) > 0:
        hi *= 2.0
    nu = optimize.brentq(excess, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)
    p = np.exp(logp - eta * nu)
    p /= p.sum()
    return ExpertState(p, eta, state.b, state.j0, state.N)


# -- optimality audit -----------------------------------------------------------

def random_feasible_check(problem, x_star, rng, n_points=1000, rtol=1e-9):
    """Compare the objective at ``x_star`` against random feasible points.

    Points are z = x* + theta (p - x*) with p the occupancy of a random
    (half of the time deterministic) policy and theta drawn log-uniformly up
    to the largest value keeping every inequality of ``problem`` satisfied.
    Returns the smallest observed f(z) - f(x*) (relative) and the number of
    points that beat x* beyond tolerance.
    """
    poly = problem.poly
    f_star = problem.objective(x_star)
    G = problem.G if problem.G is not None else np.zeros((0, poly.n_vars))
    h = problem.h if problem.h is not None else np.zeros(0)
    slack = h - G @ x_star
    scale = 1.0 + abs(f_star)
    worst = np.inf
    beaten = infeasible = 0
    for i in range(n_points):
        p = _random_vertexish(poly, rng, deterministic=(i % 2 == 1))
        d = p - x_star
        growth = G @ d
        lim = np.where(growth > 0, slack / np.where(growth > 0, growth, 1.0), np.inf)
        tmax = min(1.0, float(lim.min()) if len(lim) else 1.0)
        if tmax <= 0:
            continue
        theta = tmax * 10.0 ** rng.uniform(-6, 0)
        z = x_star + theta * d
        if max(poly.residuals(z).values()) > 1e-9:
            infeasible += 1
            continue
        margin = (problem.objective(z) - f_star) / scale
        worst = min(worst, margin)
        if margin < -rtol:
            beaten += 1
    return {"points": n_points, "min_margin": float(worst), "beaten": beaten,
            "infeasible": infeasible}


def _random_vertexish(poly, rng, deterministic):
    if poly.kind == "layered":
        rows = rng.exponential(size=(poly.H1, poly.mdp.n_pairs))
        if deterministic:
            rows = (rows == _row_max(poly, rows)).astype(float)
        return poly.occupancy(rows)
    for _ in range(100):
        w = rng.exponential(size=poly.mdp.n_pairs)
        if deterministic:
            w = (w == _row_max(poly, w[None, :])[0]).astype(float)
        try:
            return poly.occupancy(w)
        except Exception:
            continue
    return poly.random_point(rng)


def _row_max(poly, rows):
    """Per-state maxima broadcast back to pairs (rows: L x n_pairs)."""
    mdp = poly.mdp
    out = np.empty_like(rows)
    for s in range(mdp.n_states):
        sl = slice(mdp.sa_start[s], mdp.sa_start[s + 1])
        out[:, sl] = rows[:, sl].max(axis=1, keepdims=True)
    return out
