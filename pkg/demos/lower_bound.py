"""Build a lower-bound instance and run a learner against its cost law.

Each branch j is a policy with hitting time T* + 1; one planted branch has
Bernoulli(alpha) costs, the others Bernoulli(alpha + epsilon).
"""
import argparse

from ssp_lab import harness
from ssp_lab.adversaries import branch_policy, build_lower_bound
from ssp_lab.learners import LearnerConfig
from ssp_lab.mdp import compute_fast_policy, compute_hitting_times

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--D", type=float, default=4.0)
parser.add_argument("--Tstar", type=float, default=8.0)
parser.add_argument("--K", type=int, default=2048)
parser.add_argument("--trials", type=int, default=4)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

mdp, law = build_lower_bound(args.D, args.Tstar, args.K, seed=args.seed)
_, D, _ = compute_fast_policy(mdp)
print(f"instance: states {mdp.state_names}, diameter {D:g}")
for j in range(1, law.N + 1):
    T = compute_hitting_times(mdp, branch_policy(mdp, j))[mdp.initial]
    tag = "  <- planted" if j == law.good else ""
    print(f"  branch {j}: hitting time {T:g}{tag}")
print(f"alpha = {law.alpha:g}, epsilon = {law.epsilon:.3e}")

# the learners are told T = T* + 1, the planted branch's hitting time
for algo in ("oreps", "adaptive"):
    lc = LearnerConfig(algo, args.K)
    rep = harness.run_experiment(harness.ExperimentConfig(
        mdp, lc, {"kind": "lowerbound", "law": law}, trials=args.trials, seed=args.seed))
    print(f"{algo:9s} mean regret {rep.mean:8.2f} +- {rep.std:.2f} over {args.trials} trials")
