"""Regret of the five learners on the three-state toy instance.

Costs alternate between two vectors. The best fixed policy takes the
two-step route s0 -a1-> s1 -a0-> g and pays 0.2 per episode.
"""
import argparse

import numpy as np

from ssp_lab import harness
from ssp_lab.learners import ALGORITHMS, FEEDBACK, LearnerConfig
from ssp_lab.mdp import compute_fast_policy

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--Ks", default="256,1024,4096")
parser.add_argument("--trials", type=int, default=5)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
Ks = [int(k) for k in args.Ks.split(",")]

mdp = harness.toy_mdp()
_, D, T_fast = compute_fast_policy(mdp)
print(f"toy: {mdp.n_states} states, {mdp.n_pairs} pairs, diameter {D:g}, "
      f"fast hitting time from s0 {T_fast[mdp.initial]:g}")

ca, cb = harness.toy_costs()
adversary = {"kind": "alternating", "costs": [ca.tolist(), cb.tolist()]}

print(f"\n{'learner':10s} {'feedback':8s} " + " ".join(f"{'K=' + str(K):>14s}" for K in Ks)
      + "   slope")
for algo in ALGORITHMS:
    means = []
    cells = []
    for K in Ks:
        lc = LearnerConfig(algo, K, T=None if algo == "adaptive" else 3.0, H1=6)
        rep = harness.run_experiment(harness.ExperimentConfig(
            mdp, lc, adversary, trials=args.trials, seed=args.seed))
        means.append(rep.mean)
        cells.append(f"{rep.mean:7.1f} +- {rep.std:4.1f}")
    slope = harness.fit_slope(Ks, means)
    print(f"{algo:10s} {FEEDBACK[algo]:8s} " + " ".join(f"{c:>14s}" for c in cells)
          + f"   {slope:.2f}")

# regret divided by sqrt(K) should level off for a sqrt(K) learner
print("\nregret / sqrt(K) for oreps:")
for K in Ks:
    lc = LearnerConfig("oreps", K, T=3.0)
    rep = harness.run_experiment(harness.ExperimentConfig(mdp, lc, adversary,
                                                          trials=args.trials, seed=args.seed))
    print(f"  K={K:6d}  {rep.mean / np.sqrt(K):.3f}")
