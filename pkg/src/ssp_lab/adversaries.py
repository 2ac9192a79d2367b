"""Cost generators: oblivious sequences, adaptive callbacks, lower-bound instances."""
from dataclasses import dataclass, asdict
import json
import math

import numpy as np

from .errors import InvalidCost, MdpFormatError, ParameterViolation
from .mdp import SspMdp, deterministic_policy


def check_cost(cost, n_pairs):
    cost = np.asarray(cost, dtype=float)
    if cost.shape != (n_pairs,):
        raise InvalidCost(f"cost vector must have length {n_pairs}")
    if not np.all(np.isfinite(cost)) or cost.min() < 0 or cost.max() > 1:
        raise InvalidCost("costs must lie in [0, 1]")
    return cost


class Adversary:
    """Produces c_k from the episode index and the public history.

    ``history`` is a list with one dict per finished episode holding the
    trace and (full information only) the revealed cost vector.
    """
    tstar = None  # hitting time of the planted optimum, when known

    def cost(self, k, history):
        raise NotImplementedError


class SequenceAdversary(Adversary):
    """Replays a fixed K x n_pairs array."""

    def __init__(self, costs):
        self.costs = np.asarray(costs, dtype=float)

    def cost(self, k, history=None):
        return self.costs[k]


class CallbackAdversary(Adversary):
    """Wraps fn(k, history) -> cost vector and validates its output."""

    def __init__(self, fn, n_pairs):
        self.fn = fn
        self.n_pairs = n_pairs

    def cost(self, k, history):
        return check_cost(self.fn(k, history), self.n_pairs)


def follow_the_learner(n_pairs):
    """Charges each pair the visit share it received in the previous episode."""
    def fn(k, history):
        if not history:
            return np.zeros(n_pairs)
        v = history[-1]["trace"].visits.astype(float)
        return v / max(v.sum(), 1.0)
    return CallbackAdversary(fn, n_pairs)


# -- oblivious sequences ------------------------------------------------------

def parse_pair_costs(mdp, obj):
    """Cost vector from a {"(s,a)": value} mapping; missing pairs cost 0."""
    labels = {lab: j for j, lab in enumerate(mdp.pair_labels())}
    c = np.zeros(mdp.n_pairs)
    for key, val in obj.items():
        if key not in labels:
            raise MdpFormatError(f"unknown pair {key!r} in cost document")
        c[labels[key]] = float(val)
    return check_cost(c, mdp.n_pairs)


def pair_costs_to_json(mdp, cost):
    return {lab: float(v) for lab, v in zip(mdp.pair_labels(), cost)}


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as err:
        raise MdpFormatError(f"{path}: invalid JSON ({err})") from err
    except OSError as err:
        raise MdpFormatError(f"cannot read {path}: {err.strerror}") from err


def load_cost_file(mdp, path):
    doc = _read_json(path)
    if not isinstance(doc, list):
        raise MdpFormatError("cost file must hold a JSON array")
    return np.array([parse_pair_costs(mdp, obj) for obj in doc]).reshape(
        len(doc), mdp.n_pairs)


def oblivious_sequence(spec, mdp, K):
    """K x n_pairs cost array from a spec dict.

    Kinds: constant (value), alternating (costs: list of vectors or pair
    mappings, cycled), file (path, at least K entries), random (seed).
    """
    kind = spec["kind"]
    n = mdp.n_pairs
    if kind == "constant":
        c = check_cost(np.full(n, float(spec.get("value", 0.0))), n)
        return np.tile(c, (K, 1))
    if kind == "alternating":
        base = [parse_pair_costs(mdp, c) if isinstance(c, dict) else check_cost(c, n)
                for c in spec["costs"]]
        return np.array([base[k % len(base)] for k in range(K)]).reshape(K, n)
    if kind in ("file", "cycle"):
        seq = load_cost_file(mdp, spec["path"])
        if kind == "cycle":
            return seq[np.arange(K) % len(seq)]
        if len(seq) < K:
            raise MdpFormatError(f"cost file has {len(seq)} entries, need {K}")
        return seq[:K]
    if kind == "random":
        rng = np.random.default_rng(spec.get("seed", 0))
        return rng.random((K, n))
    raise ValueError(f"unknown sequence kind {kind!r}")


# -- lower-bound instances ----------------------------------------------------

@dataclass
class LowerBoundInstance:
    """Branching instance with one slightly cheaper branch.

    From s0 the learner picks a branch s_j. There, a_g reaches the goal with
    probability 1/T_star per step at Bernoulli cost (mean alpha on the good
    branch, alpha + epsilon elsewhere), while a_f moves for free to f, which
    costs 1 per step and exits with probability 1/D.
    """
    N: int
    D: float
    T_star: float
    K: int
    alpha: float
    epsilon: float
    good: int       # 1-based index of the good branch
    mode: str
    seed: int

    @property
    def tstar(self):
        return self.T_star

    def to_dict(self):
        return {"kind": "lowerbound", **asdict(self)}

    def branch_pairs(self, mdp):
        return [mdp.pair_index(f"s{j}", "a_g") for j in range(1, self.N + 1)]

    def means(self, mdp):
        """Expected cost vector."""
        c = np.zeros(mdp.n_pairs)
        for j, p in enumerate(self.branch_pairs(mdp), start=1):
            c[p] = self.alpha if j == self.good else self.alpha + self.epsilon
        c[mdp.pair_index("f", "a_g")] = 1.0
        return c

    def sample(self, mdp, k, seed=None):
        """Cost of episode k, a deterministic function of (seed, k)."""
        rng = np.random.default_rng([self.seed if seed is None else seed, k])
        mean = self.means(mdp)
        c = mean.copy()
        pairs = self.branch_pairs(mdp)
        c[pairs] = (rng.random(len(pairs)) < mean[pairs]).astype(float)
        return c


class LowerBoundAdversary(Adversary):
    def __init__(self, mdp, law, seed=None):
        self.mdp, self.law = mdp, law
        self.seed = law.seed if seed is None else seed
        self.tstar = law.T_star

    def cost(self, k, history=None):
        return self.law.sample(self.mdp, k, self.seed)


def lower_bound_epsilon(alpha, K, mode, N):
    if mode == "full":
        return 0.25 * math.sqrt(alpha * (1 - alpha) / (2 * K))
    return 0.25 * math.sqrt(N * alpha * (1 - alpha) / (2 * K))


def build_lower_bound(D, T_star, K, mode="full", seed=0, N=None, S=None):
    """Instance MDP and cost law; returns (SspMdp, LowerBoundInstance).

    Full information needs K >= T_star >= D + 1. Bandit mode uses N = S - 2
    branches and additionally needs K >= S * T_star.
    """
    if mode not in ("full", "bandit"):
        raise ParameterViolation(f"unknown mode {mode!r}")
    if D < 1:
        raise ParameterViolation(f"need D >= 1, got D={D}")
    if not T_star >= D + 1:
        raise ParameterViolation(f"need T* >= D+1, got T*={T_star}, D={D}")
    if not K >= T_star:
        raise ParameterViolation(f"need K >= T*, got K={K}, T*={T_star}")
    if mode == "bandit":
        if S is None:
            S = (N if N is not None else 2) + 2
        N = S - 2
        if N < 2:
            raise ParameterViolation(f"need S >= 4, got S={S}")
        if not K >= S * T_star:
            raise ParameterViolation(
                f"need K >= S*T*, got K={K}, S*T*={S * T_star}")
    else:
        N = 2 if N is None else N
        if N < 2:
            raise ParameterViolation(f"need N >= 2 branches, got N={N}")
    alpha = D / (2.0 * T_star)
    eps = lower_bound_epsilon(alpha, K, mode, N)
    if eps > alpha or alpha + eps > 1:
        raise ParameterViolation(f"need epsilon <= alpha, got {eps} > {alpha}")
    good = int(np.random.default_rng(seed).integers(1, N + 1))
    law = LowerBoundInstance(N, float(D), float(T_star), int(K), alpha, eps,
                             good, mode, int(seed))
    return lower_bound_mdp(N, D, T_star), law


def lower_bound_mdp(N, D, T_star):
    states = ["s0"] + [f"s{j}" for j in range(1, N + 1)] + ["f"]
    S = len(states)
    P, owner, names = [], [], []

    def row(pairs):
        r = np.zeros(S + 1)
        for k, p in pairs:
            r[k] += p
        return r

    for j in range(1, N + 1):
        P.append(row([(j, 1.0)]))
        owner.append(0)
        names.append(f"a{j}")
    for j in range(1, N + 1):
        P.append(row([(S, 1.0 / T_star), (j, 1.0 - 1.0 / T_star)]))
        P.append(row([(S - 1, 1.0)]))
        owner += [j, j]
        names += ["a_g", "a_f"]
    P.append(row([(S, 1.0 / D), (S - 1, 1.0 - 1.0 / D)]))
    owner.append(S - 1)
    names.append("a_g")
    return SspMdp(np.array(P), owner, 0, states, names)


def branch_policy(mdp, j):
    """pi_j: go to branch j, then wait for the goal with a_g."""
    N = mdp.n_states - 2
    return deterministic_policy(mdp, [j - 1] + [0] * N + [0])


def load_law(path):
    doc = _read_json(path)
    if not isinstance(doc, dict) or doc.get("kind") != "lowerbound":
        raise MdpFormatError("not a lower-bound cost law")
    doc = {k: v for k, v in doc.items() if k != "kind"}
    try:
        return LowerBoundInstance(**doc)
    except TypeError as err:
        raise MdpFormatError(f"malformed cost law: {err}") from err
