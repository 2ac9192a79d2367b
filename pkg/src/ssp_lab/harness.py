"""Experiment runner: learners against adversaries, regret against hindsight.

Seeding: an experiment has one root seed. Trial t draws all of its
randomness from ``SeedSequence([root, t])``, spawned into three independent
streams (adversary, learner, simulator), so trials are independent and any
single trial can be replayed on its own.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
import csv
import io
import json
import math
import multiprocessing
import os

import numpy as np

from .adversaries import (Adversary, CallbackAdversary, LowerBoundAdversary,
                          SequenceAdversary, load_law, oblivious_sequence)
from .errors import SspError
from .learners import FEEDBACK, LearnerConfig, make_learner
from .mdp import (SspMdp, best_fixed_policy, simulate_episode)
from .occupancy import occupancy_of_policy
from .omd import multiscale_update, random_feasible_check
from .validation import CheckResult, all_passed, property_suite  # noqa: F401


# -- the toy instance used by demos, validation, and scaling runs ----------------

def toy_mdp():
    """Three states, two actions each.

    a0 at s0 exits at once; the cheap route s0 -a1-> s1 -a0-> g takes two
    deterministic steps. The a1 actions at s1 and s2 loop on s2 with
    probability 1/2.
    """
    doc = {
        "states": ["s0", "s1", "s2"], "initial": "s0", "goal": "g",
        "actions": {"s0": ["a0", "a1"], "s1": ["a0", "a1"], "s2": ["a0", "a1"]},
        "transitions": {
            "s0": {"a0": [["g", 1.0]], "a1": [["s1", 1.0]]},
            "s1": {"a0": [["g", 1.0]], "a1": [["s2", 0.5], ["g", 0.5]]},
            "s2": {"a0": [["g", 1.0]], "a1": [["s2", 0.5], ["g", 0.5]]},
        },
    }
    return SspMdp.from_dict(doc)


def toy_costs():
    """The two cost vectors alternated on the toy instance."""
    c_a = np.array([1.0, 0.0, 0.2, 1.0, 1.0, 1.0])
    c_b = np.array([1.0, 0.2, 0.0, 1.0, 1.0, 1.0])
    return c_a, c_b


# -- configuration and reports ----------------------------------------------------

@dataclass
class ExperimentConfig:
    """One (MDP, learner, adversary) cell run for several trials.

    ``adversary`` is a spec dict (see ``make_adversary``) or a callable
    ``trial_seed -> Adversary``. ``check_points`` > 0 enables the
    random-feasible-point audit of projections at episodes 1, 2, 4, 8, ...
    in trial 0.
    """
    mdp: SspMdp
    learner: LearnerConfig
    adversary: object
    trials: int = 1
    seed: int = 0
    jobs: int = 1
    check_points: int = 0
    keep_history: bool = False

    @property
    def K(self):
        return self.learner.K


@dataclass
class TrialResult:
    trial: int
    cum_learner: np.ndarray = None
    cum_comparator: np.ndarray = None
    truncations: int = 0
    max_kkt: float = 0.0
    audits: list = field(default_factory=list)
    error: str = None
    error_kind: str = None
    error_detail: dict = None
    extra: dict = field(default_factory=dict)

    @property
    def regret(self):
        return float(self.cum_learner[-1] - self.cum_comparator[-1])


@dataclass
class RegretReport:
    config: dict
    trials: list

    @property
    def ok(self):
        return [t for t in self.trials if t.error is None]

    @property
    def regrets(self):
        return np.array([t.regret for t in self.ok])

    @property
    def mean(self):
        return float(self.regrets.mean()) if len(self.ok) else math.nan

    @property
    def std(self):
        r = self.regrets
        return float(r.std(ddof=1)) if len(r) > 1 else 0.0

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["trial", "episode", "cum_learner_cost",
                    "cum_comparator_cost", "regret"])
        for t in self.ok:
            for k, (a, b) in enumerate(zip(t.cum_learner, t.cum_comparator), 1):
                w.writerow([t.trial, k, repr(float(a)), repr(float(b)),
                            repr(float(a - b))])
        return buf.getvalue()

    def summary(self):
        return {
            "config": self.config,
            "regret": {str(t.trial): t.regret for t in self.ok},
            "mean": self.mean, "std": self.std,
            "truncations": int(sum(t.truncations for t in self.trials)),
            "max_kkt": max((t.max_kkt for t in self.ok), default=0.0),
            "audits": [a for t in self.ok for a in t.audits],
            "failures": {str(t.trial): {"kind": t.error_kind, "message": t.error,
                                        "diagnostics": t.error_detail}
                         for t in self.trials if t.error is not None},
        }


# -- adversaries from specs -------------------------------------------------------

def make_adversary(spec, mdp, K, seed):
    """Build an Adversary for one trial.

    Spec dicts: {"kind": "constant"|"alternating"|"file"|"cycle"|"random", ...}
    as in ``oblivious_sequence`` (a random sequence without its own seed uses
    the trial's), or {"kind": "lowerbound", "law": LowerBoundInstance or
    "path": file}; lower-bound costs are redrawn per trial.
    """
    if callable(spec) and not isinstance(spec, dict):
        return spec(seed)
    if isinstance(spec, Adversary):
        return spec
    kind = spec["kind"]
    if kind == "lowerbound":
        law = spec["law"] if "law" in spec else load_law(spec["path"])
        return LowerBoundAdversary(mdp, law, seed=seed)
    if kind == "random" and "seed" not in spec:
        spec = {**spec, "seed": seed}
    return SequenceAdversary(oblivious_sequence(spec, mdp, K))


def parse_adversary_spec(text):
    """CLI form: constant[:V], random[:SEED], file:PATH, cycle:PATH,
    alternating:PATH (two-entry cost file), lowerbound:PATH."""
    kind, _, arg = text.partition(":")
    if kind == "constant":
        return {"kind": "constant", "value": float(arg or 0.0)}
    if kind == "random":
        return {"kind": "random", **({"seed": int(arg)} if arg else {})}
    if kind in ("file", "cycle", "lowerbound") and arg:
        return {"kind": kind, "path": arg}
    if kind == "alternating" and arg:
        return {"kind": "cycle", "path": arg}
    raise ValueError(f"cannot parse adversary spec {text!r}")


def bandit_filter(cost, trace):
    """Reveal only the costs of pairs visited in the episode."""
    observed = np.where(trace.visits > 0, cost, np.nan)
    assert np.all(np.isnan(observed[trace.visits == 0])), "unvisited cost leaked"
    return observed


def trial_streams(seed, trial):
    """(adversary seed, learner rng, simulator rng) of a trial."""
    ss = np.random.SeedSequence([int(seed), int(trial)])
    a, l, s = ss.spawn(3)
    return (int(a.generate_state(1)[0]), np.random.default_rng(l),
            np.random.default_rng(s))


def _run_trial(config, trial):
    mdp, K = config.mdp, config.K
    adv_seed, lrng, srng = trial_streams(config.seed, trial)
    out = TrialResult(trial)
    try:
        adversary = make_adversary(config.adversary, mdp, K, adv_seed)
        lcfg = replace(config.learner)
        if lcfg.T is None and lcfg.algo != "adaptive" and adversary.tstar is not None:
            lcfg.T = adversary.tstar + 1.0
        if lcfg.T_star is None and adversary.tstar is not None:
            lcfg.T_star = adversary.tstar
        learner = make_learner(lcfg, mdp)
        bandit = FEEDBACK[lcfg.algo] == "bandit"
        costs = np.empty((K, mdp.n_pairs))
        paid = np.empty(K)
        history = []
        sim_seeds = srng.integers(0, 2 ** 32, size=K)
        audit_at = {2 ** i for i in range(int(math.log2(K)) + 1)} | {K}
        for k in range(K):
            c = np.asarray(adversary.cost(k, history), dtype=float)
            costs[k] = c
            policy = learner.begin_episode(lrng)
            trace = simulate_episode(mdp, policy, c, sim_seeds[k])
            out.truncations += int(trace.truncated)
            paid[k] = trace.incurred_cost
            observed = bandit_filter(c, trace) if bandit else c
            learner.end_episode(trace, observed)
            if config.keep_history or isinstance(adversary, CallbackAdversary):
                history.append({"trace": trace,
                                "cost": None if bandit else c.copy()})
            if config.check_points and trial == 0 and (k + 1) in audit_at:
                out.audits.append(_audit(learner, k + 1, config.check_points,
                                         np.random.default_rng([config.seed, k])))
        pi_star, total = best_fixed_policy(mdp, costs)
        q_star = occupancy_of_policy(mdp, pi_star)
        out.cum_learner = np.cumsum(paid)
        out.cum_comparator = np.cumsum(costs @ q_star)
        out.max_kkt = learner.max_kkt
        out.extra = _learner_extras(learner)
        out.extra["comparator_total"] = total
    except SspError as err:
        out.error = str(err)
        out.error_kind = type(err).__name__
        out.error_detail = getattr(err, "diagnostics", None)
    return out


def _audit(learner, k, n_points, rng):
    problems = getattr(learner, "sub_problems", None) or [
        (learner.last, learner.last_problem)]
    worst = None
    for res, prob in problems:
        a = random_feasible_check(prob, res.x, rng, n_points)
        a.update(episode=k, kkt=res.kkt)
        if worst is None or a["min_margin"] < worst["min_margin"]:
            worst = a
    return worst


def _learner_extras(learner):
    out = {}
    if hasattr(learner, "increases"):
        out["rate_increases_max"] = int(learner.increases.max())
        out["min_fed_loss"] = float(learner.min_fed_loss)
        out["rate_ratio_max"] = float((learner.rates / learner.eta).max())
    return out


_SHARED = {}


def _run_shared(trial):
    return _run_trial(_SHARED["config"], trial)


def run_experiment(config):
    """Run every trial and collect a RegretReport (trials merged by index)."""
    if config.trials < 1 or config.K < 1:
        raise ValueError("need trials >= 1 and K >= 1")
    trials = range(config.trials)
    if config.jobs > 1 and config.trials > 1:
        _SHARED["config"] = config
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(config.jobs, mp_context=ctx) as pool:
            results = list(pool.map(_run_shared, trials))
    else:
        results = [_run_trial(config, t) for t in trials]
    results.sort(key=lambda r: r.trial)
    return RegretReport(describe(config), results)


def describe(config):
    adv = config.adversary
    if isinstance(adv, dict):
        adv = {k: (v.to_dict() if hasattr(v, "to_dict") else v)
               for k, v in adv.items()}
    else:
        adv = repr(adv)
    lc = config.learner
    return {"algo": lc.algo, "K": lc.K, "T": lc.T, "H1": lc.H1,
            "delta": lc.delta, "T_star": lc.T_star, "trials": config.trials,
            "seed": config.seed, "adversary": adv,
            "n_states": config.mdp.n_states, "n_pairs": config.mdp.n_pairs}


def fit_slope(Ks, means):
    """Least-squares slope of log(mean regret) against log K."""
    Ks = np.asarray(Ks, dtype=float)
    means = np.asarray(means, dtype=float)
    if np.any(means <= 0) or len(Ks) < 2:
        return math.nan
    return float(np.polyfit(np.log(Ks), np.log(means), 1)[0])


def expert_stream(state, losses):
    """Feed a K x N loss array to the multi-scale experts update.

    Returns (meta, totals, bounds): the meta learner's cumulative expected
    loss sum_k <p_k, l_k>, each expert's cumulative loss, and for each
    comparator j the guarantee
    (2 + ln(N sqrt(b(j)/b(1)))) / eta_j + 4 eta_j b(j) sum_k l_k(j).
    """
    losses = np.asarray(losses, dtype=float)
    meta = 0.0
    for row in losses:
        meta += float(state.p @ row)
        state = multiscale_update(state, row)
    totals = losses.sum(axis=0)
    eta, b, N = state.eta, state.b, state.N
    bounds = (2 + np.log(N * np.sqrt(b / b[0]))) / eta + 4 * eta * b * totals
    return meta, totals, bounds


def sweep(base, Ks, algos=None):
    """Run the cartesian grid algos x Ks; returns (cells, slopes).

    ``cells`` is a list of (algo, K, RegretReport) in grid order.
    """
    algos = algos or [base.learner.algo]
    cells = []
    for algo in algos:
        for K in Ks:
            lc = replace(base.learner, algo=algo, K=int(K), derived={})
            cells.append((algo, int(K), run_experiment(replace(base, learner=lc))))
    slopes = {}
    for algo in algos:
        pts = [(K, r.mean) for a, K, r in cells if a == algo]
        slopes[algo] = fit_slope([p[0] for p in pts], [p[1] for p in pts])
    return cells, slopes


def write_report(report, out_dir, name="regret", extra=None):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{name}.csv"), "w", newline="") as fh:
        fh.write(report.to_csv())
    summ = report.summary()
    if extra:
        summ.update(extra)
    with open(os.path.join(out_dir, f"{name}.json"), "w") as fh:
        json.dump(summ, fh, indent=1, default=_json_default)
    return summ


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
