"""Occupancy measures, their polytopes, and the loop-free layered lift.

A polytope object stores its flow constraints as a dense system ``A x = b``
over a compact variable vector ``x``. For the flat polytope ``x`` lists the
pairs of reachable states; for the layered one it lists reachable
(pair, layer) entries followed by a single variable ``m`` standing for the
fast-state mass, which is the same on each of the H2 fast layers. Helpers
translate between ``x`` and dense arrays.
"""
import math

import numpy as np

from .errors import ImproperPolicy, SolverFailure
from .mdp import (ExecutionPolicy, _state_sum, check_policy,
                  compute_fast_policy, compute_hitting_times)


# -- flat occupancy ----------------------------------------------------------

def occupancy_of_policy(mdp, policy):
    """Expected visits q(s,a) of a proper stationary policy started at s0."""
    policy = check_policy(mdp, policy)
    compute_hitting_times(mdp, policy)  # raises if improper
    S = mdp.n_states
    M = np.eye(S) - mdp.policy_matrix(policy)
    e0 = np.zeros(S)
    e0[mdp.initial] = 1.0
    d = np.linalg.solve(M.T, e0)
    return np.maximum(d[mdp.pair_state], 0.0) * policy


def policy_of_occupancy(mdp, q):
    """pi(a|s) proportional to q(s,a); rows without mass become uniform."""
    q = np.maximum(np.asarray(q, dtype=float), 0.0)
    tot = _state_sum(mdp, q)
    counts = np.diff(mdp.sa_start)
    empty = tot < 1e-300
    pi = q / np.where(empty, 1.0, tot)[mdp.pair_state]
    pi[empty[mdp.pair_state]] = (1.0 / counts)[mdp.pair_state][empty[mdp.pair_state]]
    return pi


def flow_matrix(mdp):
    """B[s, (s',a')] = 1{s = s'} - P(s | s', a')."""
    B = -mdp.P[:, :mdp.n_states].T.copy()
    B[mdp.pair_state, np.arange(mdp.n_pairs)] += 1.0
    return B


def membership_check(mdp, q, T=np.inf):
    """Largest violation of each constraint family of the flat polytope."""
    q = np.asarray(q, dtype=float)
    e0 = np.zeros(mdp.n_states)
    e0[mdp.initial] = 1.0
    flow = flow_matrix(mdp) @ q - e0
    return {"flow": float(np.max(np.abs(flow))),
            "size": float(max(0.0, q.sum() - T)),
            "nonneg": float(max(0.0, -q.min()))}


def reachable_states(mdp, allowed=None):
    """States reachable from s0 using only allowed pairs (all by default)."""
    allowed = np.ones(mdp.n_pairs, bool) if allowed is None else allowed
    seen = np.zeros(mdp.n_states, bool)
    seen[mdp.initial] = True
    frontier = [mdp.initial]
    while frontier:
        nxt = []
        for s in frontier:
            for j in mdp.actions(s):
                if not allowed[j]:
                    continue
                for t in np.flatnonzero(mdp.P[j, :mdp.n_states] > 0):
                    if not seen[t]:
                        seen[t] = True
                        nxt.append(t)
        frontier = nxt
    return seen


# -- polytopes ---------------------------------------------------------------

class Polytope:
    """Flow polytope in compact variables.

    Attributes:
        A, b: flow equalities.
        var_pair: pair index of every variable (``n_pairs`` for the fast pair).
        var_layer: layer h of every variable (0 in the flat case).
        mult: number of original coordinates a variable stands for.
        layer_sum: sum of the layers a variable stands for.
    """
    kind = "flat"

    def __init__(self, mdp, A, b, var_pair, var_layer, mult, layer_sum):
        self.mdp = mdp
        self.A = np.ascontiguousarray(A)
        self.b = np.asarray(b, dtype=float)
        self.var_pair = np.asarray(var_pair, dtype=np.int64)
        self.var_layer = np.asarray(var_layer, dtype=np.int64)
        self.mult = np.asarray(mult, dtype=float)
        self.layer_sum = np.asarray(layer_sum, dtype=float)
        self.n_vars = len(self.var_pair)
        self.n_groups = mdp.n_pairs
        self._min = None
        self._last_layer = None

    def size(self, x):
        """Expected episode length sum q of a point."""
        return float(self.mult @ x)

    def skew_weights(self, lam=0.0):
        """Per-variable factor W with <q_skew, c> = sum_i W_i c_i x_i."""
        return self.mult + lam * self.layer_sum

    def lift_cost(self, cost):
        """Per-variable cost of a cost vector over pairs."""
        c = np.ones(self.mdp.n_pairs + 1)
        c[:-1] = cost
        return c[self.var_pair]

    def aggregate(self, x, lam=0.0):
        """Sum over layers per pair: q_skew(s,a) (or q(s,a) for lam=0)."""
        return np.bincount(self.var_pair, weights=self.skew_weights(lam) * x,
                           minlength=self.n_groups)

    def residuals(self, x, T=np.inf):
        r = self.A @ x - self.b
        return {"flow": float(np.max(np.abs(r))) if len(r) else 0.0,
                "size": float(max(0.0, self.size(x) - T)),
                "nonneg": float(max(0.0, -np.min(x))), **self.extra_residuals(x)}

    def extra_residuals(self, x):
        return {}

    # flat specifics; the layered subclass overrides these
    def dense(self, x):
        q = np.zeros(self.mdp.n_pairs)
        q[self.var_pair] = x
        return q

    def compact(self, q):
        return np.asarray(q, dtype=float)[self.var_pair]

    def policy(self, x):
        return ExecutionPolicy(policy_of_occupancy(self.mdp, self.dense(x)))

    def occupancy(self, policy):
        """Compact occupancy of a stationary policy (restricted to variables)."""
        return self.compact(occupancy_of_policy(self.mdp, self._supported(policy)))

    def _supported(self, weights):
        """Policy proportional to weights on the variables' pairs; a state
        whose allowed weights vanish falls back to uniform over allowed pairs."""
        mdp = self.mdp
        inside = np.zeros(mdp.n_pairs, bool)
        inside[self.var_pair] = True
        w = np.where(inside, np.asarray(weights, dtype=float), 0.0)
        tot = _state_sum(mdp, w)[mdp.pair_state]
        fallback = inside & (tot <= 0)
        w[fallback] = 1.0
        return policy_of_occupancy(mdp, w)

    def random_point(self, rng):
        """Occupancy of a random policy supported on the variables."""
        for _ in range(100):
            pi = self._supported(rng.exponential(size=self.mdp.n_pairs))
            try:
                return self.compact(occupancy_of_policy(self.mdp, pi))
            except ImproperPolicy:
                continue
        raise RuntimeError("could not sample a proper policy")

    def min_size(self):
        """(smallest feasible size, a point attaining it)."""
        if self._min is None:
            pi, _, T = compute_fast_policy(self.mdp)
            self._min = (float(T[self.mdp.initial]), self.occupancy(pi))
        return self._min

    def min_size_mask(self, tol=1e-9):
        pi, _, Tf = compute_fast_policy(self.mdp)
        Q = 1.0 + self.mdp.P[:, :self.mdp.n_states] @ Tf
        return Q <= Tf[self.mdp.pair_state] + tol * max(1.0, Tf.max())

    def restrict(self, mask):
        return flat_polytope(self.mdp, mask)

    def for_size(self, T, tol=1e-9):
        """Polytope to project on for size bound T.

        When T equals the smallest feasible size the set collapses onto the
        face of size-minimal policies, whose support is computed here so
        that the solver never sees an empty interior.
        """
        tmin, _ = self.min_size()
        if T < tmin * (1.0 - tol):
            raise SolverFailure(f"size bound {T} below minimum {tmin}",
                                {"T": T, "T_min": tmin})
        if T <= tmin * (1.0 + tol):
            face = self.restrict(self.min_size_mask())
            face.degenerate = True
            return face
        return self

    degenerate = False


def flat_polytope(mdp, allowed=None):
    """Flow polytope over the pairs of states reachable from s0."""
    allowed = np.ones(mdp.n_pairs, bool) if allowed is None else np.asarray(allowed)
    reach = reachable_states(mdp, allowed)
    pairs = np.array([j for j in range(mdp.n_pairs)
                      if reach[mdp.pair_state[j]] and allowed[j]], dtype=np.int64)
    states = np.flatnonzero(reach)
    B = flow_matrix(mdp)
    A = B[np.ix_(states, pairs)]
    b = (states == mdp.initial).astype(float)
    n = len(pairs)
    return Polytope(mdp, A, b, pairs, np.zeros(n), np.ones(n), np.zeros(n))


class LoopFreeMdp(Polytope):
    """Layered lift: H1 copies of the MDP, then H2 steps of a fast state.

    Layer h < H1 moves as the base MDP; every pair at layer H1 moves to the
    fast state, which pays cost 1 per step for H2 steps before the goal.
    Only (state, layer) entries reachable from (s0, 1) become variables.
    """
    kind = "layered"

    def __init__(self, mdp, H1, H2, allowed=None):
        if H1 < 1 or H2 < 1:
            raise ValueError("H1 and H2 must be at least 1")
        self.H1, self.H2, self.H = int(H1), int(H2), int(H1) + int(H2)
        S, n_pairs = mdp.n_states, mdp.n_pairs
        if allowed is None:
            allowed = np.ones((self.H1, n_pairs), bool)
        self.allowed = allowed
        reach = np.zeros((self.H1, S), bool)
        reach[0, mdp.initial] = True
        succ = mdp.support_successors()
        for h in range(self.H1 - 1):
            for s in np.flatnonzero(reach[h]):
                for j in mdp.actions(s):
                    if allowed[h, j]:
                        reach[h + 1, succ[j]] = True
        self.reach = reach
        var_index = -np.ones((self.H1, n_pairs), np.int64)
        var_pair, var_layer = [], []
        for h in range(self.H1):
            for s in np.flatnonzero(reach[h]):
                for j in mdp.actions(s):
                    if allowed[h, j]:
                        var_index[h, j] = len(var_pair)
                        var_pair.append(j)
                        var_layer.append(h + 1)
        self.var_index = var_index
        n = len(var_pair) + 1
        rows = {(h, s): i for i, (h, s) in enumerate(zip(*np.nonzero(reach)))}
        m = len(rows) + 1
        A = np.zeros((m, n))
        for (h, s), r in rows.items():
            for j in mdp.actions(s):
                if var_index[h, j] >= 0:
                    A[r, var_index[h, j]] += 1.0
        for h in range(1, self.H1):
            for j in np.flatnonzero(var_index[h - 1] >= 0):
                for t in succ[j]:
                    A[rows[(h, t)], var_index[h - 1, j]] -= mdp.P[j, t]
        A[m - 1, n - 1] = 1.0
        A[m - 1, var_index[self.H1 - 1][var_index[self.H1 - 1] >= 0]] = -1.0
        b = np.zeros(m)
        b[rows[(0, mdp.initial)]] = 1.0
        self.rows = rows
        tail_layers = np.arange(self.H1 + 1, self.H + 1)
        mult = np.append(np.ones(n - 1), self.H2)
        layer_sum = np.append(np.array(var_layer, float), tail_layers.sum())
        var_pair.append(n_pairs)
        var_layer.append(self.H1 + 1)
        super().__init__(mdp, A, b, var_pair, var_layer, mult, layer_sum)
        self.n_groups = n_pairs + 1

    @property
    def base(self):
        return self.mdp

    def lift_cost(self, cost):
        """Lifted cost: base cost on layered pairs, 1 on the fast pair."""
        return super().lift_cost(cost)

    def dense(self, x):
        """(H1 x n_pairs array of q(s,a,h), fast-state mass per fast layer)."""
        q = np.zeros((self.H1, self.mdp.n_pairs))
        q[self.var_layer[:-1] - 1, self.var_pair[:-1]] = x[:-1]
        return q, float(x[-1])

    def compact(self, q, tail=None):
        q = np.asarray(q, dtype=float)
        if tail is None:
            tail = q[self.H1 - 1].sum()
        return np.append(q[self.var_layer[:-1] - 1, self.var_pair[:-1]], tail)

    def policy_rows(self, x):
        """Layered policy pi(a | s, h) proportional to q(s,a,h)."""
        q, _ = self.dense(x)
        rows = np.empty_like(q)
        for h in range(self.H1):
            rows[h] = policy_of_occupancy(self.mdp, q[h])
        return rows

    def policy(self, x, fast=None):
        """Execution policy sigma: layered rows, then the fast policy."""
        if fast is None:
            fast = self.fast_policy()
        return ExecutionPolicy(fast, self.policy_rows(x))

    def fast_policy(self):
        if not hasattr(self, "_fast"):
            self._fast = compute_fast_policy(self.mdp)[0]
        return self._fast

    def occupancy(self, rows):
        """Compact occupancy of a layered policy in the lifted MDP."""
        rows = np.asarray(rows, dtype=float)
        if rows.ndim == 1:
            rows = np.tile(rows, (self.H1, 1))
        mdp = self.mdp
        x = np.zeros(self.n_vars)
        d = np.zeros(mdp.n_states)
        d[mdp.initial] = 1.0
        for h in range(self.H1):
            idx = self.var_index[h]
            nd = np.zeros(mdp.n_states)
            for s in np.flatnonzero(d > 0):
                acts = [j for j in mdp.actions(s) if idx[j] >= 0]
                w = rows[h, acts]
                w = w / w.sum() if w.sum() > 0 else np.full(len(acts), 1 / len(acts))
                for j, p in zip(acts, w):
                    x[idx[j]] = d[s] * p
                    nd += d[s] * p * mdp.P[j, :mdp.n_states]
            d = nd
        x[-1] = x[:-1][self.var_layer[:-1] == self.H1].sum()
        return x

    def random_point(self, rng):
        return self.occupancy(rng.exponential(size=(self.H1, self.mdp.n_pairs)))

    def min_size(self):
        if self._min is None:
            V, choice = self._min_size_dp()
            rows = np.zeros((self.H1, self.mdp.n_pairs))
            for h in range(self.H1):
                rows[h, choice[h]] = 1.0
            self._min = (float(V[0, self.mdp.initial]), self.occupancy(rows))
        return self._min

    def _min_size_dp(self):
        """Backward recursion for the smallest expected length in the lift."""
        mdp = self.mdp
        S = mdp.n_states
        V = np.zeros((self.H1 + 1, S))
        Q = np.full((self.H1, mdp.n_pairs), np.inf)
        choice = np.zeros((self.H1, S), np.int64)
        for h in range(self.H1 - 1, -1, -1):
            if h == self.H1 - 1:
                q = np.full(mdp.n_pairs, 1.0 + self.H2)
            else:
                q = 1.0 + mdp.P[:, :S] @ V[h + 1]
            q = np.where(self.allowed[h], q, np.inf)
            Q[h] = q
            for s in range(S):
                acts = list(mdp.actions(s))
                k = int(np.argmin(q[acts]))
                V[h, s] = q[acts[k]]
                choice[h, s] = acts[k]
        self._Q = Q
        return V, choice

    def min_size_mask(self, tol=1e-9):
        V, _ = self._min_size_dp()
        mask = np.zeros((self.H1, self.mdp.n_pairs), bool)
        scale = tol * max(1.0, V.max())
        for h in range(self.H1):
            mask[h] = self._Q[h] <= V[h][self.mdp.pair_state] + scale
        return mask

    def restrict(self, mask):
        return LoopFreeMdp(self.mdp, self.H1, self.H2, mask & self.allowed)

    def extra_residuals(self, x):
        if self._last_layer is None:
            self._last_layer = np.flatnonzero(self.var_layer[:-1] == self.H1)
        return {"fast": float(abs(x[-1] - x[self._last_layer].sum()))}

    def pseudo_visits(self, trace):
        """Compact layered counts of an episode run through the lift."""
        counts = np.zeros(self.n_vars)
        lay = trace.layered
        counts[:-1] = lay[self.var_layer[:-1] - 1, self.var_pair[:-1]]
        counts[-1] = 1.0 if trace.reached_tail else 0.0
        return counts

    def to_json(self, x):
        """Sparse dump keyed by "(s,a,h)", fast layers expanded."""
        mdp = self.mdp
        out = {}
        for i in range(self.n_vars - 1):
            j = self.var_pair[i]
            out[f"({mdp.state_names[mdp.pair_state[j]]},{mdp.action_names[j]},"
                f"{self.var_layer[i]})"] = float(x[i])
        for h in range(self.H1 + 1, self.H + 1):
            out[f"(s_f,a_f,{h})"] = float(x[-1])
        return out


def build_loop_free(mdp, H1, H2):
    return LoopFreeMdp(mdp, H1, H2)


def fast_horizon(D, K, delta):
    """H2 = ceil(4 D ln(4K / delta))."""
    return int(math.ceil(4.0 * D * math.log(4.0 * K / delta)))


def flat_to_json(mdp, q):
    return {mdp.pair_label(j): float(q[j]) for j in range(mdp.n_pairs)}


# -- skewed view --------------------------------------------------------------

def skew_map(q, layers, lam):
    """q_skew(s,a,h) = (1 + lam h) q(s,a,h) for dense arrays with given layers."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    return (1.0 + lam * np.asarray(layers, dtype=float)) * q


def unskew(q_skew, layers, lam):
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    return q_skew / (1.0 + lam * np.asarray(layers, dtype=float))


def layer_grid(H1, n_pairs):
    """Layer index broadcastable against an (H1, n_pairs) array."""
    return np.arange(1, H1 + 1)[:, None] * np.ones((1, n_pairs))


# -- sigma executor -----------------------------------------------------------

def sigma_executor(loopfree, rows, fast=None):
    """Run layered rows for the first H1 steps, then the fast policy.

    The simulator records per-step pair indicators and whether an action was
    taken at step H1, which is exactly when the lifted MDP moves into the
    fast chain.
    """
    if fast is None:
        fast = loopfree.fast_policy()
    return ExecutionPolicy(np.asarray(fast, dtype=float), np.asarray(rows, dtype=float))
