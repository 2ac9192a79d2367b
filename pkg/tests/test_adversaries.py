import json
import math

import numpy as np
import pytest

from ssp_lab.adversaries import (LowerBoundAdversary, branch_policy,
                                 build_lower_bound, check_cost,
                                 follow_the_learner, load_cost_file, load_law,
                                 lower_bound_epsilon, oblivious_sequence,
                                 pair_costs_to_json, parse_pair_costs)
from ssp_lab.errors import InvalidCost, MdpFormatError, ParameterViolation
from ssp_lab.mdp import (EpisodeTrace, best_fixed_policy, compute_fast_policy,
                         compute_hitting_times, policy_choice)


@pytest.mark.parametrize("D, Ts", [(4, 8), (8, 32), (2, 3)])
def test_lower_bound_structure(D, Ts):
    mdp, law = build_lower_bound(D, Ts, 1000)
    _, diam, _ = compute_fast_policy(mdp)
    assert diam == pytest.approx(D + 2, abs=1e-6)
    for j in range(1, law.N + 1):
        T = compute_hitting_times(mdp, branch_policy(mdp, j))
        assert T[0] == pytest.approx(Ts + 1, abs=1e-6)
    assert mdp.state_names == ["s0", "s1", "s2", "f"]


def test_epsilon_example():
    # alpha = 1/8: (1/4) sqrt(0.125 * 0.875 / 8192)
    _, law = build_lower_bound(8, 32, 4096)
    assert law.alpha == 0.125
    assert law.epsilon == pytest.approx(9.1349e-4, rel=1e-4)
    assert lower_bound_epsilon(0.125, 4096, "bandit", 4) == pytest.approx(
        2 * law.epsilon)


def test_bandit_mode_sizes():
    mdp, law = build_lower_bound(4, 8, 8 * 6, mode="bandit", S=6)
    assert law.N == 4 and mdp.n_states == 6
    with pytest.raises(ParameterViolation):
        build_lower_bound(4, 8, 8 * 6 - 1, mode="bandit", S=6)


@pytest.mark.parametrize("args", [
    (4, 4, 100), (4, 8, 7), (0.5, 8, 100), (4, 8, 100, "semi"),
])
def test_lower_bound_preconditions(args):
    with pytest.raises(ParameterViolation):
        build_lower_bound(*args)


def test_lower_bound_cost_means():
    mdp, law = build_lower_bound(4, 8, 20_000, seed=3)
    adv = LowerBoundAdversary(mdp, law)
    C = np.array([adv.cost(k) for k in range(20_000)])
    pairs = law.branch_pairs(mdp)
    for j, p in enumerate(pairs, start=1):
        mean = law.alpha if j == law.good else law.alpha + law.epsilon
        se = math.sqrt(mean * (1 - mean) / len(C))
        assert abs(C[:, p].mean() - mean) <= 4 * se
    f = mdp.pair_index("f", "a_g")
    assert np.all(C[:, f] == 1.0)
    others = np.setdiff1d(np.arange(mdp.n_pairs), pairs + [f])
    assert np.all(C[:, others] == 0.0)
    # the planted branch is the best fixed policy under the means
    pi, _ = best_fixed_policy(mdp, law.means(mdp))
    assert policy_choice(mdp, pi)[0] == law.good - 1


def test_lower_bound_costs_replayable():
    mdp, law = build_lower_bound(4, 8, 100, seed=1)
    a = LowerBoundAdversary(mdp, law, seed=9)
    b = LowerBoundAdversary(mdp, law, seed=9)
    assert all(np.array_equal(a.cost(k), b.cost(k)) for k in range(20))


def test_law_roundtrip(tmp_path):
    _, law = build_lower_bound(4, 8, 100, seed=2)
    path = tmp_path / "law.json"
    path.write_text(json.dumps(law.to_dict()))
    assert load_law(path) == law
    path.write_text(json.dumps({"kind": "other"}))
    with pytest.raises(MdpFormatError):
        load_law(path)


def test_check_cost():
    with pytest.raises(InvalidCost):
        check_cost([0.5, 1.5], 2)
    with pytest.raises(InvalidCost):
        check_cost([0.5], 2)
    with pytest.raises(InvalidCost):
        check_cost([np.nan, 0.1], 2)


def test_pair_cost_documents(toy, tmp_path):
    c = np.array([0.1, 0, 0.2, 0.3, 0, 1.0])
    doc = pair_costs_to_json(toy, c)
    np.testing.assert_array_equal(parse_pair_costs(toy, doc), c)
    with pytest.raises(MdpFormatError):
        parse_pair_costs(toy, {"(s9,a0)": 0.1})
    path = tmp_path / "costs.json"
    path.write_text(json.dumps([doc, {"(s0,a0)": 1}]))
    seq = load_cost_file(toy, path)
    assert seq.shape == (2, 6) and seq[1, 0] == 1 and seq[1, 1:].sum() == 0
    path.write_text("{")
    with pytest.raises(MdpFormatError):
        load_cost_file(toy, path)


def test_oblivious_sequences(toy, tmp_path):
    c = oblivious_sequence({"kind": "constant", "value": 0.5}, toy, 3)
    assert c.shape == (3, 6) and np.all(c == 0.5)
    alt = oblivious_sequence({"kind": "alternating",
                              "costs": [[0] * 6, {"(s0,a0)": 1}]}, toy, 4)
    assert alt[:, 0].tolist() == [0, 1, 0, 1]
    r1 = oblivious_sequence({"kind": "random", "seed": 4}, toy, 5)
    r2 = oblivious_sequence({"kind": "random", "seed": 4}, toy, 5)
    np.testing.assert_array_equal(r1, r2)
    path = tmp_path / "c.json"
    path.write_text(json.dumps([{"(s0,a0)": 0.3}]))
    cyc = oblivious_sequence({"kind": "cycle", "path": str(path)}, toy, 3)
    assert cyc[:, 0].tolist() == [0.3] * 3
    with pytest.raises(MdpFormatError):
        oblivious_sequence({"kind": "file", "path": str(path)}, toy, 3)


def test_follow_the_learner(toy):
    adv = follow_the_learner(toy.n_pairs)
    assert adv.cost(0, []).sum() == 0
    tr = EpisodeTrace(np.array([0, 1, 1, 0, 0, 0]), 2, 0.0, False)
    np.testing.assert_allclose(adv.cost(1, [{"trace": tr}]), [0, .5, .5, 0, 0, 0])
