import numpy as np
import pytest

from conftest import random_mdp
from ssp_lab.mdp import SspMdp
from ssp_lab.validation import CHECKS, all_passed, property_suite


def leaky_toy():
    # a row of (s1,a1) sums to 1.4; the sampler renormalizes, the model does not
    P = np.zeros((6, 4))
    P[0, 3] = 1
    P[1, 1] = 1
    P[2, 3] = 1
    P[3, 2], P[3, 3] = 0.9, 0.5
    P[4, 3] = 1
    P[5, 2], P[5, 3] = 0.5, 0.5
    return SspMdp(P, [0, 0, 1, 1, 2, 2], validate=False)


def test_toy_passes(toy):
    res = property_suite(toy, 20_000, seed=1)
    assert all_passed(res), [r.to_dict() for r in res if not r.passed]
    names = {r.name.split("@")[0] for r in res}
    assert names == set(CHECKS)


def test_random_mdp_passes():
    mdp = random_mdp(np.random.default_rng(4), 4, 2, goal_p=0.3)
    assert all_passed(property_suite(mdp, 20_000, seed=2))


def test_fault_injection_is_caught():
    res = {r.name: r for r in property_suite(leaky_toy(), 20_000, seed=1)}
    for name in ("transition-rows", "flow-constraints", "visits-mean",
                 "sigma-distribution", "estimator-unbiased"):
        assert not res[name].passed, name
        assert res[name].margin < 0
    assert res["flow-constraints"].detail["worst"] == "s2"


def test_no_proper_policy_reports_failure():
    P = np.zeros((1, 2))
    P[0, 0] = 1.0
    mdp = SspMdp(P, [0])
    res = property_suite(mdp, 100, seed=0)
    bad = [r for r in res if not r.passed]
    assert bad and all("NoProperPolicy" in r.detail["error"] for r in bad)


def test_subset_and_unknown(toy):
    res = property_suite(toy, 500, checks=["transition-rows", "hitting-tail"])
    assert [r.name for r in res] == ["transition-rows", "hitting-tail@4tau",
                                     "hitting-tail@8tau", "hitting-tail@16tau"]
    with pytest.raises(ValueError):
        property_suite(toy, 10, checks=["nope"])


def test_seeded_results_repeat(toy):
    a = [r.to_dict() for r in property_suite(toy, 2000, seed=7)]
    b = [r.to_dict() for r in property_suite(toy, 2000, seed=7)]
    assert a == b
