"""Monte-Carlo property suite for a small MDP.

Every check compares a sample statistic with a value computed from the model
and passes when the gap is within four standard errors (or, for one-sided
bounds, when mean + 4 SE stays below the bound). Checks never raise; a check
that cannot run is reported as failed with the reason in ``detail``.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import SspError
from .mdp import (compute_cost_to_go, compute_fast_policy, compute_hitting_times,
                  simulate_batch, uniform_policy)
from .occupancy import LoopFreeMdp, occupancy_of_policy

Z = 4.0            # standard errors of slack allowed in every check
EXACT_TOL = 1e-8   # for identities that hold exactly
LOW_POWER = 10_000


@dataclass
class CheckResult:
    """One line of the validation report.

    ``margin`` is the slack in standard errors (bound - value) / se for
    Monte-Carlo checks, or the raw slack for exact ones; positive is good.
    """
    name: str
    passed: bool
    value: float = math.nan
    bound: float = math.nan
    se: float = 0.0
    margin: float = math.nan
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {"check": self.name, "passed": bool(self.passed),
                "value": self.value, "bound": self.bound, "se": self.se,
                "margin": self.margin, **self.detail}


def _mean_se(y):
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    se = y.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(y.shape[1:])
    return y.mean(axis=0), se


def _slack(value, bound, se):
    if se > 0:
        return (bound - value) / se
    return math.inf if value <= bound + 1e-12 else -math.inf


def _upper(name, y, bound, **detail):
    """One-sided check mean(y) + Z se <= bound."""
    m, se = _mean_se(y)
    m, se = float(m), float(se)
    ok = m + Z * se <= bound + 1e-12 * max(1.0, abs(bound))
    return CheckResult(name, ok, m, float(bound), se, _slack(m + Z * se, bound, se)
                       if se > 0 else _slack(m, bound, 0.0), detail)


def _two_sided(name, y, target, labels):
    """Coordinate-wise |mean(y) - target| <= Z se; reports the worst coordinate."""
    m, se = _mean_se(y)
    target = np.asarray(target, dtype=float)
    gap = np.abs(m - target)
    tol = Z * se + 1e-9 * np.maximum(1.0, np.abs(target))
    ok = bool(np.all(gap <= tol))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, gap / np.where(se > 0, se, 1.0),
                     np.where(gap <= tol, 0.0, np.inf))
    w = int(np.argmax(z)) if len(z) else 0
    return CheckResult(name, ok, float(m[w]) if len(m) else math.nan,
                       float(target[w]) if len(m) else math.nan,
                       float(se[w]) if len(m) else 0.0,
                       float(Z - z[w]) if len(m) else math.nan,
                       {"worst": labels[w] if len(m) else None,
                        "max_z": float(z[w]) if len(m) else 0.0})


def _failed(name, err):
    return CheckResult(name, False, detail={"error": f"{type(err).__name__}: {err}"})


def default_policy(mdp):
    """Half uniform, half fast policy: proper and exploring every action."""
    pi_f, _, _ = compute_fast_policy(mdp)
    return 0.5 * uniform_policy(mdp) + 0.5 * pi_f


def property_suite(mdp, samples=100_000, seed=0, cost=None, policy=None,
                   H1=3, H2=4, checks=None):
    """Run the Monte-Carlo invariants; returns a list of CheckResult.

    ``cost`` defaults to a seeded uniform draw in [0, 1], ``policy`` to
    ``default_policy``. ``checks`` optionally restricts the run to a subset of
    names (see ``CHECKS``).
    """
    want = set(CHECKS if checks is None else checks)
    unknown = want - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    sim_seed = int(rng.integers(2 ** 32))
    lay_seed = int(rng.integers(2 ** 32))
    out = []
    if "transition-rows" in want:
        out.append(_check_rows(mdp))
    if cost is None:
        cost = rng.random(mdp.n_pairs)
    cost = np.asarray(cost, dtype=float)
    flat = want & {"flow-constraints", "occupancy-identities", "visits-mean",
                   "variance-stationary", "hitting-tail"}
    layered = want & {"sigma-distribution", "variance-layered",
                      "pair-second-moment", "estimator-unbiased",
                      "bias-unbiased"}
    try:
        pi = default_policy(mdp) if policy is None else np.asarray(policy, float)
    except SspError as err:
        return out + [_failed(n, err) for n in CHECKS if n in flat | layered]
    if flat:
        out += _stationary_checks(mdp, pi, cost, samples, sim_seed, flat)
    if layered:
        out += _layered_checks(mdp, pi, cost, samples, lay_seed, H1, H2, layered)
    order = {n: i for i, n in enumerate(CHECKS)}
    out.sort(key=lambda r: order[r.name.split("@")[0]])
    return out


def _check_rows(mdp):
    P = mdp.P
    sums = np.abs(P.sum(axis=1) - 1.0)
    rng_err = np.maximum(-P, P - 1.0).max(initial=0.0)
    err = float(max(sums.max(initial=0.0), max(rng_err, 0.0)))
    worst = mdp.pair_label(int(np.argmax(sums))) if len(sums) else None
    return CheckResult("transition-rows", err <= 1e-12, err, 1e-12, 0.0,
                       1e-12 - err, {"worst": worst})


def _stationary_checks(mdp, pi, cost, n, seed, want):
    out = []
    visits, steps, trunc, _, _ = simulate_batch(mdp, pi, n, seed)
    N = visits.astype(float)
    labels = mdp.pair_labels()
    S = mdp.n_states
    if "flow-constraints" in want:
        # per episode: visits out of s minus model-predicted visits into s
        into = N @ mdp.P[:, :S]
        out_of = np.zeros((n, S))
        for s in range(S):
            out_of[:, s] = N[:, mdp.actions(s)].sum(axis=1)
        start = np.zeros(S)
        start[mdp.initial] = 1.0
        out.append(_two_sided("flow-constraints", out_of - into - start,
                              np.zeros(S), list(mdp.state_names)))
    try:
        q = occupancy_of_policy(mdp, pi)
        J = compute_cost_to_go(mdp, pi, cost)
        T = compute_hitting_times(mdp, pi)
    except SspError as err:
        return out + [_failed(nm, err) for nm in
                      ("occupancy-identities", "visits-mean",
                       "variance-stationary", "hitting-tail") if nm in want]
    if "occupancy-identities" in want:
        e1 = abs(float(q @ cost) - J[mdp.initial])
        e2 = abs(float(q.sum()) - T[mdp.initial])
        err = max(e1, e2)
        out.append(CheckResult("occupancy-identities", err <= EXACT_TOL, err,
                               EXACT_TOL, 0.0, EXACT_TOL - err,
                               {"cost_gap": e1, "size_gap": e2}))
    if "visits-mean" in want:
        out.append(_two_sided("visits-mean", N, q, labels))
    if "variance-stationary" in want:
        q_state = np.bincount(mdp.pair_state, weights=q, minlength=S)
        bound = 2.0 * float(q_state @ J)
        out.append(_upper("variance-stationary", (N @ cost) ** 2, bound))
    if "hitting-tail" in want:
        tau = float(T.max())
        for mult in (4, 8, 16):
            m = mult * tau
            hit = (steps > m).astype(float)
            r = _upper(f"hitting-tail@{mult}tau", hit,
                       2.0 * math.exp(-m / (4.0 * tau)), m=m, tau=tau,
                       truncated=int(trunc.sum()))
            out.append(r)
    return out


def _layered_checks(mdp, pi, cost, n, seed, H1, H2, want):
    out = []
    lf = LoopFreeMdp(mdp, H1, H2)
    rows = np.tile(np.asarray(pi, float), (H1, 1))
    x = lf.occupancy(rows)
    policy = lf.policy(x)
    _, _, _, tail, lay = simulate_batch(mdp, policy, n, seed, record_layers=True)
    counts = np.empty((n, lf.n_vars))
    counts[:, :-1] = lay[:, lf.var_layer[:-1] - 1, lf.var_pair[:-1]]
    counts[:, -1] = tail
    names = [f"({mdp.pair_label(j)},{h})" for j, h in
             zip(lf.var_pair[:-1], lf.var_layer[:-1])] + ["(s_f,a_f)"]
    if "sigma-distribution" in want:
        out.append(_two_sided("sigma-distribution", counts, x, names))
    c_var = lf.lift_cost(cost)
    if "variance-layered" in want:
        total = counts @ (lf.mult * c_var)
        bound = 2.0 * float(np.sum(lf.layer_sum * c_var * x))
        out.append(_upper("variance-layered", total ** 2, bound))
    G = lf.n_groups
    onehot = np.zeros((lf.n_vars, G))
    onehot[np.arange(lf.n_vars), lf.var_pair] = 1.0
    n_pair = counts @ (lf.mult[:, None] * onehot)          # N(s,a) per episode
    q_pair = (lf.mult * x) @ onehot
    hq_pair = (lf.layer_sum * x) @ onehot
    c_pair = np.append(cost, 1.0)
    group_names = mdp.pair_labels() + ["(s_f,a_f)"]
    if "pair-second-moment" in want:
        worst = None
        for j in range(G):
            if q_pair[j] <= 0:
                continue
            r = _upper("pair-second-moment", (n_pair[:, j] * c_pair[j]) ** 2,
                       2.0 * hq_pair[j] * c_pair[j], worst=group_names[j])
            if worst is None or (not r.passed and worst.passed) or (
                    r.passed == worst.passed and r.margin < worst.margin):
                worst = r
        out.append(worst)
    live = q_pair > 0
    idx = np.flatnonzero(live)
    c_hat = n_pair[:, idx] * c_pair[idx] / q_pair[idx]
    if "estimator-unbiased" in want:
        out.append(_two_sided("estimator-unbiased", c_hat, c_pair[idx],
                              [group_names[j] for j in idx]))
    if "bias-unbiased" in want:
        ratio = hq_pair[idx] / q_pair[idx]
        out.append(_two_sided("bias-unbiased", c_hat * ratio,
                              ratio * c_pair[idx], [group_names[j] for j in idx]))
    return out


CHECKS = ("transition-rows", "flow-constraints", "occupancy-identities",
          "visits-mean", "variance-stationary", "hitting-tail",
          "sigma-distribution", "variance-layered", "pair-second-moment",
          "estimator-unbiased", "bias-unbiased")


def all_passed(results):
    return all(r.passed for r in results)
