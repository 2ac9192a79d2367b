"""Stochastic shortest path instances, planning, and episode simulation.

States are indexed 0..S-1 and the goal is the extra index S. State-action
pairs are flattened into one index range, grouped by state, so policies,
costs, and visit counts are all plain vectors over pairs.
"""
from dataclasses import dataclass
import json

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import ImproperPolicy, MdpFormatError, NoProperPolicy

STEP_CAP = 10 ** 7
GOAL = "goal"


class SspMdp:
    """Finite SSP instance with known transitions.

    Args:
        P: array (n_pairs, S + 1); row j is the next-state distribution of
            pair j, the last column being the goal.
        pair_state: state index of every pair; pairs must be sorted by state.
        initial: index of s0.
        state_names, action_names: optional labels (action names per pair).
        validate: check that rows are probability vectors.
    """

    def __init__(self, P, pair_state, initial=0, state_names=None,
                 action_names=None, goal_name=GOAL, validate=True):
        P = np.array(P, dtype=float)
        pair_state = np.asarray(pair_state, dtype=np.int64)
        if len(pair_state) == 0:
            raise MdpFormatError("need at least one state and one pair")
        if P.ndim != 2 or P.shape[0] != pair_state.shape[0]:
            raise MdpFormatError("transition array and pair list disagree")
        S = P.shape[1] - 1
        if S < 1 or len(pair_state) == 0:
            raise MdpFormatError("need at least one state and one pair")
        if np.any(np.diff(pair_state) < 0):
            raise MdpFormatError("pairs must be grouped by state")
        counts = np.bincount(pair_state, minlength=S)
        if len(counts) != S or np.any(counts == 0):
            raise MdpFormatError("every state needs at least one action")
        if not 0 <= initial < S:
            raise MdpFormatError("initial state out of range")
        if validate:
            if np.any(~np.isfinite(P)) or P.min() < 0 or P.max() > 1:
                raise MdpFormatError("transition probabilities must lie in [0, 1]")
            bad = np.abs(P.sum(axis=1) - 1.0) > 1e-12
            if np.any(bad):
                raise MdpFormatError(
                    f"transition row {int(np.argmax(bad))} does not sum to 1")
        self.P = P
        self.P.flags.writeable = False
        self.pair_state = pair_state
        self.pair_state.flags.writeable = False
        self.sa_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.sa_start.flags.writeable = False
        self.initial = int(initial)
        self.n_states = S
        self.n_pairs = len(pair_state)
        self.goal = S
        self.state_names = list(state_names) if state_names is not None else [
            f"s{i}" for i in range(S)]
        if action_names is None:
            action_names = [f"a{j - self.sa_start[s]}"
                            for j, s in enumerate(pair_state)]
        self.action_names = list(action_names)
        self.goal_name = goal_name
        self._next_cum = None

    # -- structure helpers -------------------------------------------------
    def actions(self, s):
        """Pair indices available at state s."""
        return range(self.sa_start[s], self.sa_start[s + 1])

    @property
    def average_actions(self):
        return self.n_pairs / self.n_states

    def pair_label(self, j):
        return f"({self.state_names[self.pair_state[j]]},{self.action_names[j]})"

    def pair_index(self, state, action):
        s = self.state_names.index(state) if isinstance(state, str) else int(state)
        for j in self.actions(s):
            if self.action_names[j] == action:
                return j
        raise KeyError(f"no action {action!r} at state {state!r}")

    def pair_labels(self):
        return [self.pair_label(j) for j in range(self.n_pairs)]

    def policy_matrix(self, policy):
        """State-to-state transition matrix under a stationary policy."""
        return np.asarray(
            _state_sum(self, policy[:, None] * self.P[:, :self.n_states]))

    def next_cum(self):
        """Cumulative next-state table used by the sampler (rows normalized)."""
        if self._next_cum is None:
            rows = self.P / self.P.sum(axis=1, keepdims=True)
            cum = np.cumsum(rows, axis=1)
            cum[:, -1] = 1.0
            self._next_cum = cum
        return self._next_cum

    def support_successors(self):
        """List of successor-state sets per pair (goal excluded)."""
        return [np.flatnonzero(self.P[j, :self.n_states] > 0)
                for j in range(self.n_pairs)]

    # -- serialization -----------------------------------------------------
    @classmethod
    def from_dict(cls, doc, validate=True):
        try:
            states = list(doc["states"])
            goal = doc.get("goal", GOAL)
            initial = states.index(doc["initial"])
            P, pair_state, names = [], [], []
            for s, name in enumerate(states):
                acts = doc["actions"][name]
                rows = doc["transitions"][name]
                for a in acts:
                    row = np.zeros(len(states) + 1)
                    for nxt, prob in rows[a]:
                        k = len(states) if nxt == goal else states.index(nxt)
                        row[k] += float(prob)
                    P.append(row)
                    pair_state.append(s)
                    names.append(str(a))
        except (KeyError, ValueError, TypeError) as err:
            raise MdpFormatError(f"malformed MDP document: {err}") from err
        if goal in states:
            raise MdpFormatError("goal must not be listed among the states")
        return cls(np.array(P), pair_state, initial, states, names, goal,
                   validate=validate)

    @classmethod
    def load(cls, path, validate=True):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise MdpFormatError(f"{path}: invalid JSON ({err})") from err
        return cls.from_dict(doc, validate=validate)

    def to_dict(self):
        names = self.state_names
        out = {"states": names, "initial": names[self.initial],
               "goal": self.goal_name, "actions": {}, "transitions": {}}
        for s, name in enumerate(names):
            out["actions"][name] = [self.action_names[j] for j in self.actions(s)]
            out["transitions"][name] = {}
            for j in self.actions(s):
                row = []
                for k in np.flatnonzero(self.P[j]):
                    nxt = self.goal_name if k == self.n_states else names[k]
                    row.append([nxt, float(self.P[j, k])])
                out["transitions"][name][self.action_names[j]] = row
        return out

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _state_sum(mdp, values):
    """Sum rows of a per-pair array into per-state rows."""
    return np.add.reduceat(values, mdp.sa_start[:-1], axis=0)


def _state_min(mdp, values):
    return np.minimum.reduceat(values, mdp.sa_start[:-1])


# -- policies ---------------------------------------------------------------

def uniform_policy(mdp):
    counts = np.diff(mdp.sa_start)
    return 1.0 / counts[mdp.pair_state]


def deterministic_policy(mdp, choice):
    """Policy vector from one local action index per state."""
    pi = np.zeros(mdp.n_pairs)
    for s, c in enumerate(choice):
        if not 0 <= int(c) < mdp.sa_start[s + 1] - mdp.sa_start[s]:
            raise ValueError(f"action {c} out of range at state {s}")
        pi[mdp.sa_start[s] + int(c)] = 1.0
    return pi


def check_policy(mdp, policy):
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_pairs,) or policy.min() < 0:
        raise ValueError("policy must be a nonnegative vector over pairs")
    if np.max(np.abs(_state_sum(mdp, policy) - 1.0)) > 1e-12:
        raise ValueError("policy rows must sum to 1")
    return policy


def policy_choice(mdp, policy):
    """Local action index per state of a deterministic policy."""
    return [int(np.argmax(policy[mdp.actions(s)])) for s in range(mdp.n_states)]


def random_policy(mdp, rng):
    pi = rng.exponential(size=mdp.n_pairs)
    return pi / _state_sum(mdp, pi)[mdp.pair_state]


# -- planning -----------------------------------------------------------------

def _reaches_goal(mdp, policy=None):
    """States with a path to the goal (using only the policy's support)."""
    S = mdp.n_states
    edge = mdp.P > 0
    active = np.ones(mdp.n_pairs, bool) if policy is None else policy > 0
    ok = np.zeros(S + 1, bool)
    ok[S] = True
    while True:
        good = active & np.any(edge & ok[None, :], axis=1)
        new = np.zeros(S, bool)
        np.logical_or.at(new, mdp.pair_state, good)
        if not np.any(new & ~ok[:S]):
            return ok[:S]
        ok[:S] |= new


def _solve_policy_system(mdp, policy, rhs):
    S = mdp.n_states
    if not np.all(_reaches_goal(mdp, policy)):
        raise ImproperPolicy("goal unreachable from some state under the policy")
    M = np.eye(S) - mdp.policy_matrix(policy)
    with np.errstate(all="ignore"):
        try:
            lu = scipy.linalg.lu_factor(M, check_finite=True)
            x = scipy.linalg.lu_solve(lu, rhs)
        except (ValueError, np.linalg.LinAlgError) as err:
            raise ImproperPolicy(f"singular policy system: {err}") from err
    if not np.all(np.isfinite(x)):
        raise ImproperPolicy("policy system has non-finite solution")
    if np.max(np.abs(M @ x - rhs)) > 1e-6 * max(1.0, np.max(np.abs(x))):
        raise ImproperPolicy("policy system residual too large")
    return x


def compute_hitting_times(mdp, policy):
    """Expected steps to the goal from every state, T = (I - P_pi)^{-1} 1."""
    policy = check_policy(mdp, policy)
    T = _solve_policy_system(mdp, policy, np.ones(mdp.n_states))
    if T.min() < -1e-9:
        raise ImproperPolicy("negative hitting time")
    return np.maximum(T, 0.0)


def compute_cost_to_go(mdp, policy, cost):
    """Expected total cost to the goal, J = c_pi + P_pi J."""
    policy = check_policy(mdp, policy)
    c_pi = _state_sum(mdp, policy * np.asarray(cost, dtype=float))
    J = _solve_policy_system(mdp, policy, c_pi)
    return np.maximum(J, 0.0)


def _greedy(mdp, Q, V, tol=1e-9):
    """Lowest-index action within tol of the state minimum."""
    choice = []
    for s in range(mdp.n_states):
        q = Q[mdp.actions(s)]
        choice.append(int(np.flatnonzero(q <= V[s] + tol * max(1.0, abs(V[s])))[0]))
    return choice


def value_iteration(mdp, cost, tol=1e-10, max_iter=10 ** 6):
    """Optimal cost-to-go for strictly positive costs; returns (V, iterations)."""
    S = mdp.n_states
    Pn = mdp.P[:, :S]
    V = np.zeros(S)
    for it in range(1, max_iter + 1):
        Q = cost + Pn @ V
        V_new = _state_min(mdp, Q)
        if not np.all(np.isfinite(V_new)) or V_new.max() > 1e300:
            break
        diff = np.max(np.abs(V_new - V))
        V = V_new
        if diff <= tol:
            return V, it
    raise NoProperPolicy(f"value iteration did not converge in {max_iter} iterations")


def _policy_improve(mdp, cost, choice, max_rounds=1000):
    """Exact policy-iteration polish after value iteration."""
    S = mdp.n_states
    for _ in range(max_rounds):
        pi = deterministic_policy(mdp, choice)
        V = compute_cost_to_go(mdp, pi, cost)
        Q = cost + mdp.P[:, :S] @ V
        Vmin = _state_min(mdp, Q)
        new = list(choice)
        for s in range(S):
            cur = mdp.sa_start[s] + choice[s]
            if Q[cur] > Vmin[s] + 1e-12 * max(1.0, abs(Vmin[s])):
                new[s] = _greedy(mdp, Q, Vmin, tol=1e-12)[s]
        if new == choice:
            return choice, V
        choice = new
    return choice, V


def compute_fast_policy(mdp):
    """Deterministic policy minimizing every hitting time, and the diameter.

    Returns (policy, D, T) where T are the fast policy's hitting times.
    """
    if not np.all(_reaches_goal(mdp)):
        raise NoProperPolicy("goal unreachable from some state")
    unit = np.ones(mdp.n_pairs)
    V, _ = value_iteration(mdp, unit)
    Q = unit + mdp.P[:, :mdp.n_states] @ V
    choice, _ = _policy_improve(mdp, unit, _greedy(mdp, Q, V))
    pi = deterministic_policy(mdp, choice)
    T = compute_hitting_times(mdp, pi)
    return pi, float(T.max()), T


def best_fixed_policy(mdp, costs, eps=1e-9):
    """Best deterministic proper policy in hindsight for a cost sequence.

    Plans under the average cost plus ``eps`` (which rules out improper
    zero-cost loops) and reports the unperturbed total sum_k J_k(s0) = K * J_avg(s0). Returns (policy, total).
    """
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    K = costs.shape[0]
    cbar = costs.mean(axis=0)
    if not np.all(_reaches_goal(mdp)):
        raise NoProperPolicy("goal unreachable from some state")
    shifted = cbar + eps
    # policy iteration from the (proper) fast policy; with positive costs
    # every improvement stays proper, and zero-cost loops cannot stall it
    fast, _, _ = compute_fast_policy(mdp)
    choice, _ = _policy_improve(mdp, shifted, policy_choice(mdp, fast),
                                max_rounds=10 ** 4)
    pi = deterministic_policy(mdp, choice)
    J = compute_cost_to_go(mdp, pi, cbar)
    return pi, float(K * J[mdp.initial])


@dataclass
class PlanningDiagnostics:
    hitting_times: np.ndarray
    diameter: float
    tmax: float
    tstar: float


def diagnose(mdp, policy):
    """Hitting-time summary of a (typically optimal) policy."""
    T = compute_hitting_times(mdp, policy)
    _, D, _ = compute_fast_policy(mdp)
    return PlanningDiagnostics(T, D, float(T.max()), float(T[mdp.initial]))


# -- simulation ---------------------------------------------------------------

@dataclass
class EpisodeTrace:
    """One simulated episode.

    ``layered`` (H1 x n_pairs, 0/1) and ``reached_tail`` are filled when the
    episode was run through a layered policy.
    """
    visits: np.ndarray
    steps: int
    incurred_cost: float
    truncated: bool
    layered: np.ndarray = None
    reached_tail: bool = False


def _action_cum(mdp, policy):
    p = np.asarray(policy, dtype=float)
    out = np.empty(mdp.n_pairs)
    for s in range(mdp.n_states):
        sl = slice(mdp.sa_start[s], mdp.sa_start[s + 1])
        c = np.cumsum(p[sl])
        c[-1] = max(c[-1], 1.0)
        out[sl] = c
    return out


@dataclass
class ExecutionPolicy:
    """Stationary policy, optionally preceded by per-step layered rows.

    ``layers[h]`` is the pair distribution used at step h+1; after the
    layers run out ``stationary`` is followed until the goal.
    """
    stationary: np.ndarray
    layers: np.ndarray = None

    def tables(self, mdp):
        stat = _action_cum(mdp, self.stationary)
        if self.layers is None:
            lay = np.zeros((0, mdp.n_pairs))
        else:
            lay = np.stack([_action_cum(mdp, row) for row in self.layers])
        return stat, lay


def seed_to_int(seed):
    """Reduce any seed accepted by numpy to a 32-bit sampler seed."""
    if isinstance(seed, (int, np.integer)) and 0 <= int(seed) < 2 ** 32:
        return int(seed)
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def simulate_batch(mdp, policy, n_episodes, seed, cap=STEP_CAP,
                   record_layers=False):
    """Sample many episodes; returns (visits, steps, truncated, tail, layered)."""
    if not isinstance(policy, ExecutionPolicy):
        policy = ExecutionPolicy(np.asarray(policy, dtype=float))
    stat, lay = policy.tables(mdp)
    return _kernels.simulate_batch(seed_to_int(seed), int(n_episodes),
                                   mdp.initial, mdp.sa_start, mdp.next_cum(),
                                   stat, lay, int(cap), bool(record_layers))


def simulate_episode(mdp, policy, cost, seed, cap=STEP_CAP):
    """Run one episode from s0 and return its trace."""
    policy = policy if isinstance(policy, ExecutionPolicy) else ExecutionPolicy(
        np.asarray(policy, dtype=float))
    layered = policy.layers is not None
    visits, steps, trunc, tail, lay = simulate_batch(
        mdp, policy, 1, seed, cap=cap, record_layers=layered)
    v = visits[0]
    return EpisodeTrace(v, int(steps[0]), float(v @ np.asarray(cost, float)),
                        bool(trunc[0]), lay[0] if layered else None,
                        bool(tail[0]))
