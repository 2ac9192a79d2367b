import itertools

import numpy as np
import pytest

from ssp_lab import harness
from ssp_lab.errors import ImproperPolicy
from ssp_lab.mdp import SspMdp, compute_cost_to_go, deterministic_policy


def random_mdp(rng, S, A, goal_p=0.2, sparsity=0.5, max_actions=None):
    """Random SSP: every pair reaches the goal with probability >= goal_p / 2.

    ``A`` is the action count per state, or, with ``max_actions``, a random
    count in 1..max_actions per state.
    """
    rows, owner = [], []
    for s in range(S):
        n_act = A if max_actions is None else int(rng.integers(1, max_actions + 1))
        for _ in range(n_act):
            w = rng.random(S) * (rng.random(S) < sparsity)
            g = goal_p * (0.5 + rng.random())
            row = np.append(w / w.sum() * (1 - g) if w.sum() > 0 else np.zeros(S),
                            g if w.sum() > 0 else 1.0)
            rows.append(row)
            owner.append(s)
    return SspMdp(np.array(rows), owner, 0)


def trapping_mdp(rng, S, A):
    """Random MDP with self-loops, so some deterministic policies are improper."""
    rows, owner = [], []
    for s in range(S):
        for a in range(A):
            row = np.zeros(S + 1)
            if a == 0:
                row[s] = 1.0                      # stay forever
            else:
                w = rng.random(S + 1)
                w[S] += 0.2
                row = w / w.sum()
            rows.append(row)
            owner.append(s)
    return SspMdp(np.array(rows), owner, 0)


def enumerate_policies(mdp, costs):
    """(best choice, best total) over all proper deterministic policies."""
    costs = np.atleast_2d(costs)
    cbar = costs.sum(axis=0)
    ranges = [range(mdp.sa_start[s + 1] - mdp.sa_start[s])
              for s in range(mdp.n_states)]
    best = (None, np.inf)
    for choice in itertools.product(*ranges):
        pi = deterministic_policy(mdp, choice)
        try:
            J = compute_cost_to_go(mdp, pi, cbar)[mdp.initial]
        except ImproperPolicy:
            continue
        if J < best[1]:
            best = (list(choice), float(J))
    return best


@pytest.fixture
def toy():
    return harness.toy_mdp()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, note = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {note}")
