"""Online learners for SSP with adversarial costs and known transitions.

Every learner exposes the same two calls per episode::

    policy = learner.begin_episode(rng)        # ExecutionPolicy to run
    learner.end_episode(trace, observed_cost)  # feedback after the episode

``observed_cost`` is the full cost vector for full-information learners and
a copy with NaN on every unrevealed pair for bandit learners.
"""
from dataclasses import dataclass, field, asdict
import math

import numpy as np

from .errors import DivisionHazard, ParameterViolation
from .mdp import compute_fast_policy
from .occupancy import LoopFreeMdp, fast_horizon, flat_polytope
from .omd import (BarrierSet, entropy_init, entropy_objective,
                  logbarrier_init, logbarrier_objective, multiscale_init,
                  multiscale_update, omd_step_entropy, omd_step_logbarrier,
                  omd_step_skewed)

ALGORITHMS = ("oreps", "adaptive", "skewed", "bandit", "bandit-hp")
FEEDBACK = {"oreps": "full", "adaptive": "full", "skewed": "full",
            "bandit": "bandit", "bandit-hp": "bandit"}


@dataclass
class LearnerConfig:
    """User-facing inputs; ``derive`` fills in every algorithm parameter."""
    algo: str
    K: int
    T: float = None
    H1: int = None
    delta: float = 0.1
    T_star: float = None
    derived: dict = field(default_factory=dict)

    def derive(self, mdp):
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.K < 1:
            raise ParameterViolation("K must be at least 1")
        if self.algo != "adaptive" and self.T is None:
            raise ParameterViolation(f"{self.algo} needs a hitting-time bound T")
        if not 0 < self.delta < 1:
            raise ParameterViolation("delta must lie in (0, 1)")
        _, D, Tf = compute_fast_policy(mdp)
        K, T, SA = self.K, self.T, mdp.n_pairs
        if T is not None and not T >= Tf[mdp.initial] - 1e-9:
            raise ParameterViolation(
                f"T={T} is below the fastest hitting time {Tf[mdp.initial]:.6g}")
        if self.H1 is not None and self.H1 < 1:
            raise ParameterViolation("H1 must be at least 1")
        if self.T_star is not None and not 0 < self.T_star:
            raise ParameterViolation("T_star must be positive")
        d = {"D": D, "T_fast": float(Tf[mdp.initial]), "SA": SA}
        if self.algo == "oreps":
            d["eta"] = oreps_rate(T, SA, D, K)
        elif self.algo == "adaptive":
            pass
        else:
            H1 = self.H1 if self.H1 is not None else int(math.ceil(K ** (1 / 3)))
            H2 = fast_horizon(D, K, self.delta)
            d.update(H1=H1, H2=H2, H=H1 + H2)
            t_min = LoopFreeMdp(mdp, H1, H2).min_size()[0]
            if T < t_min * (1 - 1e-9):
                raise ParameterViolation(
                    f"T={T} is below the smallest layered episode length "
                    f"{t_min:.6g} for H1={H1}, H2={H2}; raise H1 or T")
            if self.algo == "skewed":
                d["eta"] = min(0.5, math.sqrt(T / (D * K)))
                d["lam"] = math.sqrt(math.log(1 / self.delta) / (D * T * K))
            elif self.algo == "bandit":
                d["eta"] = math.sqrt(SA / (D * T * K))
                d["lam"] = 8 * d["eta"]
            else:
                d.update(bandit_hp_parameters(K, T, SA, D, self.delta,
                                              self.T_star, H1 + H2))
        self.derived = d
        return d

    def to_dict(self):
        return asdict(self)


def oreps_rate(T, SA, D, K):
    """eta = min(1/2, sqrt(T ln(SA T) / (D K)))."""
    return min(0.5, math.sqrt(T * math.log(SA * T) / (D * K)))


def bandit_hp_parameters(K, T, SA, D, delta, T_star, H):
    """Parameters of the high-probability log-barrier learner.

    ``gamma_formula`` is the textbook value, eta times a polylog factor that
    exceeds 1/H for any practical K. The value used (``gamma``) caps that
    factor at 1, keeping gamma proportional to eta, and caps gamma at 1/H so
    the fed loss c_hat - gamma b_hat stays nonnegative.
    """
    if K < 2:
        raise ParameterViolation("the high-probability learner needs K >= 2")
    ts = T_star if T_star is not None else max(T - 1.0, 1.0)
    lnK = math.log(K)
    C = math.ceil(math.log2(T * K ** 4)) * math.ceil(math.log2(T ** 2 * K ** 9))
    eta = math.sqrt(SA * math.log(1 / delta) / (D * ts * K))
    gamma_formula = 100 * eta * lnK * (1 + C * math.sqrt(8 * math.log(C * SA / delta))) ** 2
    gamma = min(gamma_formula, eta, 1.0 / H)
    return {"eta": eta, "beta": math.exp(1 / (7 * lnK)), "C": C,
            "gamma_formula": gamma_formula, "gamma": gamma,
            "lam": 40 * eta + 2 * gamma, "floor": 1.0 / (T * K ** 4),
            "rho1": 2.0 * T, "T_star_used": ts}


# -- estimators ---------------------------------------------------------------

def bandit_estimator(poly, counts, observed, x):
    """Importance-weighted costs c_hat(s,a) = N(s,a) c(s,a) / q(s,a).

    ``counts`` are the pseudo-visit counts in the polytope's variables,
    ``observed`` the revealed costs per pair (NaN if unrevealed), ``x`` the
    current occupancy. The fast pair has cost 1.
    """
    n = poly.aggregate(counts)
    q = poly.aggregate(x)
    c = np.append(np.asarray(observed, dtype=float), 1.0)
    out = np.zeros(poly.n_groups)
    hit = n > 0
    if np.any(hit & ~(q > 0)):
        raise DivisionHazard("visited pair has zero probability")
    if np.any(np.isnan(c[hit])):
        raise DivisionHazard("visited pair without revealed cost")
    out[hit] = n[hit] * c[hit] / q[hit]
    return out


def bias_vector(poly, x, c_hat):
    """b_hat(s,a) = sum_h h q(s,a,h) c_hat(s,a) / q(s,a)."""
    q = poly.aggregate(x)
    hq = np.bincount(poly.var_pair, weights=poly.layer_sum * x,
                     minlength=poly.n_groups)
    out = np.zeros(poly.n_groups)
    pos = q > 0
    out[pos] = hq[pos] * c_hat[pos] / q[pos]
    return out


# -- learners -----------------------------------------------------------------

class Learner:
    """Shared bookkeeping: the latest projection and a step log."""
    feedback = "full"

    def __init__(self):
        self.last = None        # ProjectionResult of the latest update
        self.last_problem = None
        self.max_kkt = 0.0
        self.steps = 0

    def _record(self, result, problem):
        self.last = result
        self.last_problem = problem
        self.max_kkt = max(self.max_kkt, result.kkt)
        self.steps += 1

    def begin_episode(self, rng):
        raise NotImplementedError

    def end_episode(self, trace, observed):
        raise NotImplementedError


@dataclass
class StepProblem:
    """Everything needed to re-evaluate the objective of the last update."""
    poly: object
    T: float
    objective: object
    G: np.ndarray = None
    h: np.ndarray = None


class OrepsLearner(Learner):
    """Entropic OMD over the flat occupancy polytope with size bound T."""

    def __init__(self, mdp, K, T, eta=None):
        super().__init__()
        self.mdp = mdp
        self.T = float(T)
        _, D, _ = compute_fast_policy(mdp)
        self.eta = eta if eta is not None else oreps_rate(self.T, mdp.n_pairs, D, K)
        self.poly = flat_polytope(mdp).for_size(self.T)
        init = entropy_init(self.poly, self.T)
        self.logq, self.x, self.warm = init.logx, init.x, init.dual

    def occupancy(self):
        return self.poly.dense(self.x)

    def expected_cost(self, cost):
        return float(self.poly.lift_cost(cost) @ self.x)

    def begin_episode(self, rng=None):
        return self.poly.policy(self.x)

    def end_episode(self, trace, observed):
        c = self.poly.lift_cost(observed)
        res = omd_step_entropy(self.poly, self.logq, c, self.T, self.eta, self.warm)
        x_prev, eta, W = self.x, self.eta, self.poly.mult
        self._record(res, StepProblem(
            self.poly, self.T,
            lambda z: entropy_objective(z, x_prev, c, W, eta),
            *_size_rows(self.poly, self.T)))
        self.logq, self.x, self.warm = res.logx, res.x, res.dual


def _size_rows(poly, T):
    if poly.degenerate:
        return np.zeros((0, poly.n_vars)), np.zeros(0)
    return poly.mult[None, :].copy(), np.array([T])


class AdaptiveLearner(Learner):
    """Multi-scale experts over entropic OMD instances with T = 2, 4, 8, ..."""

    def __init__(self, mdp, K):
        super().__init__()
        self.mdp = mdp
        _, D, Tf = compute_fast_policy(mdp)
        self.experts = multiscale_init(float(Tf[mdp.initial]), K, D)
        self.instances = [OrepsLearner(mdp, K, b) for b in self.experts.b]
        self.played = None

    def begin_episode(self, rng):
        p = self.experts.p
        self.played = int(rng.choice(len(p), p=p / p.sum()))
        return self.instances[self.played].begin_episode()

    def end_episode(self, trace, observed):
        losses = np.array([inst.expected_cost(observed) for inst in self.instances])
        self.losses = losses
        self.experts = multiscale_update(self.experts, losses)
        for inst in self.instances:
            inst.end_episode(trace, observed)
        worst = max(self.instances, key=lambda i: i.last.kkt)
        self._record(worst.last, worst.last_problem)
        self.sub_problems = [(i.last, i.last_problem) for i in self.instances]


class SkewedLearner(Learner):
    """Entropic OMD on the skewed layered polytope, run through sigma."""

    def __init__(self, mdp, K, T, H1, H2, eta, lam):
        super().__init__()
        self.mdp = mdp
        self.T, self.eta, self.lam = float(T), eta, lam
        self.poly = LoopFreeMdp(mdp, H1, H2).for_size(self.T)
        init = entropy_init(self.poly, self.T, lam)
        self.logq, self.x, self.warm = init.logx, init.x, init.dual

    def expected_cost(self, cost):
        return float(self.poly.lift_cost(cost) @ (self.poly.mult * self.x))

    def begin_episode(self, rng=None):
        return self.poly.policy(self.x)

    def end_episode(self, trace, observed):
        c = self.poly.lift_cost(observed)
        res = omd_step_skewed(self.poly, self.logq, c, self.T, self.eta,
                              self.lam, self.warm)
        x_prev, eta = self.x, self.eta
        W = self.poly.skew_weights(self.lam)
        self._record(res, StepProblem(
            self.poly, self.T,
            lambda z: entropy_objective(z, x_prev, c, W, eta),
            *_size_rows(self.poly, self.T)))
        self.logq, self.x, self.warm = res.logx, res.x, res.dual


class BanditLearner(Learner):
    """Log-barrier OMD on aggregated skewed occupancies with estimated costs."""
    feedback = "bandit"

    def __init__(self, mdp, K, T, H1, H2, eta, lam, floor=0.0):
        super().__init__()
        self.mdp = mdp
        self.T, self.eta, self.lam = float(T), eta, lam
        self.bset = BarrierSet(LoopFreeMdp(mdp, H1, H2), self.T, floor)
        self.poly = self.bset.poly
        self.rates = np.full(self.poly.n_groups, eta)
        init = logbarrier_init(self.bset, self.rates, lam)
        self.x, self.warm = init.x, init.dual

    def begin_episode(self, rng=None):
        return self.poly.policy(self.x)

    def _loss(self, trace, observed):
        counts = self.poly.pseudo_visits(trace)
        self.c_hat = bandit_estimator(self.poly, counts, observed, self.x)
        return self.c_hat

    def end_episode(self, trace, observed):
        loss = self._loss(trace, observed)
        res = omd_step_logbarrier(self.bset, self.x, loss, self.rates, self.lam,
                                  self.warm)
        x_prev, rates, poly, lam = self.x, self.rates.copy(), self.poly, self.lam
        self._record(res, StepProblem(
            poly, self.T,
            lambda z: logbarrier_objective(z, x_prev, loss, rates, poly, lam),
            self.bset.G, self.bset.h))
        self.x, self.warm = res.x, res.dual
        self._after_step()

    def _after_step(self):
        pass


class BanditHpLearner(BanditLearner):
    """Log-barrier learner with a bias term, a floor, and increasing rates."""

    def __init__(self, mdp, K, T, H1, H2, params):
        self.params = params
        super().__init__(mdp, K, T, H1, H2, params["eta"], params["lam"],
                         params["floor"])
        self.gamma = params["gamma"]
        self.beta = params["beta"]
        self.rho = np.full(self.poly.n_groups, params["rho1"])
        self.increases = np.zeros(self.poly.n_groups, np.int64)
        self.min_fed_loss = np.inf

    def _loss(self, trace, observed):
        c_hat = super()._loss(trace, observed)
        self.b_hat = bias_vector(self.poly, self.x, c_hat)
        fed = c_hat - self.gamma * self.b_hat
        # rounding can push exact zeros a hair below 0
        self.min_fed_loss = min(self.min_fed_loss, float(fed.min()))
        return np.maximum(fed, 0.0)

    def _after_step(self):
        phi = self.poly.aggregate(self.x, self.lam)
        present = np.bincount(self.poly.var_pair, minlength=self.poly.n_groups) > 0
        dip = present & (1.0 / np.maximum(phi, 1e-300) > self.rho)
        self.rho[dip] = 2.0 / phi[dip]
        self.rates[dip] *= self.beta
        self.increases[dip] += 1


def make_learner(config, mdp):
    """Instantiate the learner named in ``config`` (a LearnerConfig)."""
    d = config.derive(mdp)
    algo = config.algo
    if algo == "oreps":
        return OrepsLearner(mdp, config.K, config.T, d["eta"])
    if algo == "adaptive":
        return AdaptiveLearner(mdp, config.K)
    if algo == "skewed":
        return SkewedLearner(mdp, config.K, config.T, d["H1"], d["H2"],
                             d["eta"], d["lam"])
    if algo == "bandit":
        return BanditLearner(mdp, config.K, config.T, d["H1"], d["H2"],
                             d["eta"], d["lam"])
    return BanditHpLearner(mdp, config.K, config.T, d["H1"], d["H2"], d)
