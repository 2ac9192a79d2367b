"""Monte-Carlo property suite on the toy instance, then on a faulty copy.

The faulty copy has a transition row summing to 1.4. The simulator
renormalizes rows while the model computations do not, so the
sample-versus-model checks fail.
"""
import argparse

from ssp_lab import harness
from ssp_lab.mdp import SspMdp
from ssp_lab.validation import property_suite

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--samples", type=int, default=100_000)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()


def show(title, mdp):
    print(title)
    for r in property_suite(mdp, args.samples, seed=args.seed):
        print(f"  {'ok  ' if r.passed else 'FAIL'} {r.name:24s} value {r.value:10.4g}"
              f"  bound {r.bound:10.4g}  margin {r.margin:8.2f}")


toy = harness.toy_mdp()
show("toy instance", toy)

P = toy.P.copy()
P[toy.pair_index("s1", "a1"), toy.n_states] += 0.4
show("\nfaulty copy", SspMdp(P, toy.pair_state, validate=False))
