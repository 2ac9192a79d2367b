"""Command-line front end: ssp-lab {plan,run,sweep,lowerbound,validate}.

Exit codes: 0 success, 1 usage or parameter error, 2 unreadable or invalid
input file, 3 no proper policy, 4 solver failure, 5 failed validation.
Diagnostics go to stderr as one JSON object per line.
"""
import argparse
import json
import os
import sys

import numpy as np

from . import harness
from .adversaries import build_lower_bound, load_cost_file, load_law
from .errors import (MdpFormatError, NoProperPolicy, ParameterViolation,
                     SolverFailure, SspError)
from .learners import ALGORITHMS, FEEDBACK, LearnerConfig
from .mdp import SspMdp, compute_fast_policy, compute_hitting_times
from .validation import LOW_POWER, property_suite

EXIT_USAGE, EXIT_PARSE, EXIT_IMPROPER, EXIT_SOLVER, EXIT_INVALID = 1, 2, 3, 4, 5


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        emit("error", "usage", message)
        raise SystemExit(EXIT_USAGE)


def emit(level, kind, message, **extra):
    print(json.dumps({"level": level, "kind": kind, "message": message, **extra},
                     default=harness._json_default), file=sys.stderr)


def env_seed():
    raw = os.environ.get("SSP_LAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SSP_LAB_SEED must be an integer, got {raw!r}")


def load_mdp(path, validate=True):
    """Read an MDP document; ``toy`` names the built-in three-state instance."""
    if path in (None, "toy"):
        return harness.toy_mdp()
    try:
        return SspMdp.load(path, validate=validate)
    except OSError as err:
        raise MdpFormatError(f"cannot read {path}: {err.strerror}") from err


def _ints(text):
    try:
        return [int(float(v)) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _names(text):
    return [v for v in text.split(",") if v]


# -- subcommands --------------------------------------------------------------

def cmd_plan(args):
    mdp = load_mdp(args.mdp)
    pi, D, Tf = compute_fast_policy(mdp)
    choice = {}
    for s in range(mdp.n_states):
        acts = mdp.actions(s)
        choice[mdp.state_names[s]] = mdp.action_names[acts[int(np.argmax(pi[acts]))]]
    out = {"diameter": D, "fast_policy": choice,
           "T_fast_s0": float(Tf[mdp.initial]),
           "hitting_times": dict(zip(mdp.state_names, map(float, compute_hitting_times(mdp, pi)))),
           "n_states": mdp.n_states, "n_pairs": mdp.n_pairs}
    print(json.dumps(out, indent=1))
    return 0


def _experiment(args, mdp, algo, K):
    adv = _adversary(args, mdp)
    T, T_star = args.T, args.T_star
    if adv.get("kind") == "lowerbound":
        # the planted optimum's hitting time is known: T = T* + 1
        law = load_law(adv["path"])
        T = law.T_star + 1.0 if T is None else T
        T_star = law.T_star if T_star is None else T_star
    if algo != "adaptive" and T is None:
        raise UsageError(f"--algo {algo} needs --T")
    lc = LearnerConfig(algo, int(K), T=T, H1=args.H1, delta=args.delta,
                       T_star=T_star)
    lc.derive(mdp)      # fail fast on bad parameters
    return harness.ExperimentConfig(mdp, lc, adv, trials=args.trials,
                                    seed=args.seed, jobs=args.jobs,
                                    check_points=args.check_points)


def _adversary(args, mdp):
    if args.adversary is None:
        if args.mdp not in (None, "toy"):
            raise UsageError("--adversary is required with --mdp")
        ca, cb = harness.toy_costs()
        return {"kind": "alternating", "costs": [ca.tolist(), cb.tolist()]}
    try:
        return harness.parse_adversary_spec(args.adversary)
    except ValueError as err:
        raise UsageError(str(err))


def _check_failures(report):
    """Exit code for the first failed trial, after logging every failure."""
    code = 0
    for t in report.trials:
        if t.error is None:
            continue
        emit("error", t.error_kind, t.error, trial=t.trial,
             diagnostics=t.error_detail)
        code = code or _code_for(t.error_kind)
    return code


def _code_for(kind):
    if kind == "NoProperPolicy":
        return EXIT_IMPROPER
    if kind in ("ParameterViolation", "InvalidCost"):
        return EXIT_USAGE
    if kind == "MdpFormatError":
        return EXIT_PARSE
    return EXIT_SOLVER


def cmd_run(args):
    mdp = load_mdp(args.mdp)
    config = _experiment(args, mdp, args.algo, args.K)
    report = harness.run_experiment(config)
    summ = harness.write_report(report, args.out, "regret")
    print(json.dumps({"mean": summ["mean"], "std": summ["std"],
                      "regret": summ["regret"], "out": args.out},
                     default=harness._json_default))
    return _check_failures(report)


def cmd_sweep(args):
    mdp = load_mdp(args.mdp)
    code = 0
    cells = []
    for algo in args.algos:
        if algo not in ALGORITHMS:
            raise UsageError(f"unknown algorithm {algo!r}")
    for algo in args.algos:
        for K in args.Ks:
            config = _experiment(args, mdp, algo, K)
            report = harness.run_experiment(config)
            harness.write_report(report, args.out, f"{algo}_K{K}")
            cells.append((algo, K, report))
            code = code or _check_failures(report)
    slopes = {}
    for algo in args.algos:
        pts = [(K, r.mean) for a, K, r in cells if a == algo]
        slopes[algo] = harness.fit_slope([p[0] for p in pts], [p[1] for p in pts])
    table = [{"algo": a, "K": K, "mean": r.mean, "std": r.std,
              "feedback": FEEDBACK[a]} for a, K, r in cells]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sweep.json"), "w") as fh:
        json.dump({"cells": table, "slopes": slopes}, fh, indent=1,
                  default=harness._json_default)
    print(json.dumps({"slopes": slopes, "cells": table},
                     default=harness._json_default))
    return code


def cmd_lowerbound(args):
    mdp, law = build_lower_bound(args.D, args.Tstar, args.K, args.mode,
                                 args.seed, N=args.N, S=args.S)
    os.makedirs(args.out, exist_ok=True)
    mdp_path = os.path.join(args.out, "mdp.json")
    law_path = os.path.join(args.out, "law.json")
    mdp.save(mdp_path)
    with open(law_path, "w") as fh:
        json.dump(law.to_dict(), fh, indent=1)
    print(json.dumps({"mdp": mdp_path, "law": law_path, **law.to_dict()}))
    return 0


def cmd_validate(args):
    mdp = load_mdp(args.mdp, validate=False)
    if args.samples < LOW_POWER:
        emit("warning", "low-power",
             f"{args.samples} samples: 4-SE checks have little power below {LOW_POWER}")
    cost = None
    if args.cost is not None:
        cost = load_cost_file(mdp, args.cost)[0]
    results = property_suite(mdp, samples=args.samples, seed=args.seed,
                             cost=cost, H1=args.H1, H2=args.H2)
    for r in results:
        print(json.dumps(r.to_dict(), default=harness._json_default))
    failed = [r.name for r in results if not r.passed]
    if failed:
        emit("error", "validation", f"{len(failed)} check(s) failed", checks=failed)
        return EXIT_INVALID
    return 0


# -- parser -------------------------------------------------------------------

def _experiment_flags(p):
    p.add_argument("--mdp", help="MDP JSON file, or 'toy' for the built-in instance (default)")
    p.add_argument("--T", type=float, help="upper bound on the optimal policy's hitting time")
    p.add_argument("--T-star", dest="T_star", type=float,
                   help="optimal hitting time used by bandit-hp (default T-1)")
    p.add_argument("--H1", type=int, help="layered horizon (default ceil(K^(1/3)))")
    p.add_argument("--delta", type=float, default=0.1, help="confidence level (default 0.1)")
    p.add_argument("--trials", type=int, default=1, help="independent trials (default 1)")
    p.add_argument("--adversary", help="constant[:V] | random[:SEED] | file:PATH | "
                   "cycle:PATH | alternating:PATH | lowerbound:LAW.json")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for trials")
    p.add_argument("--check-points", dest="check_points", type=int, default=0,
                   help="random feasible points per projection audit (0 = off)")
    p.add_argument("--out", default="out", help="output directory (default ./out)")


def build_parser():
    top = Parser(prog="ssp-lab", description=__doc__.splitlines()[0])
    top.add_argument("--config", help="JSON file of flag values; explicit flags win")
    sub = top.add_subparsers(dest="command", parser_class=Parser)
    sub.required = True

    p = sub.add_parser("plan", help="diameter and fast policy of an MDP")
    p.add_argument("--mdp", help="MDP JSON file, or 'toy'")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="run one learner for K episodes")
    p.add_argument("--algo", choices=ALGORITHMS, help="learner id (required)")
    p.add_argument("--K", type=int, help="number of episodes (required)")
    p.add_argument("--seed", type=int, help="root seed (default $SSP_LAB_SEED or 0)")
    _experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid over learners and K, with slope fits")
    p.add_argument("--algos", type=_names, default=list(ALGORITHMS),
                   help="comma-separated learner ids (default all)")
    p.add_argument("--Ks", type=_ints, default=[1024, 4096, 16384],
                   help="comma-separated episode counts")
    p.add_argument("--seed", type=int, help="root seed (default $SSP_LAB_SEED or 0)")
    _experiment_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("lowerbound", help="write a lower-bound instance and its cost law")
    p.add_argument("--D", type=float, help="diameter (required)")
    p.add_argument("--Tstar", type=float, help="planted hitting time (required)")
    p.add_argument("--K", type=int, help="number of episodes (required)")
    p.add_argument("--mode", choices=("full", "bandit"), default="full")
    p.add_argument("--N", type=int, help="branches in full mode (default 2)")
    p.add_argument("--S", type=int, help="state count in bandit mode (N = S - 2)")
    p.add_argument("--seed", type=int, help="seed for the good branch")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_lowerbound)

    p = sub.add_parser("validate", help="Monte-Carlo property suite")
    p.add_argument("--mdp", help="MDP JSON file, or 'toy'")
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int, help="root seed (default $SSP_LAB_SEED or 0)")
    p.add_argument("--cost", help="cost file; its first entry is used")
    p.add_argument("--H1", type=int, default=3, help="layered horizon for lifted checks")
    p.add_argument("--H2", type=int, default=4, help="fast-chain length for lifted checks")
    p.set_defaults(func=cmd_validate)
    return top


REQUIRED = {"run": ("algo", "K"), "lowerbound": ("D", "Tstar", "K")}


def parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise MdpFormatError(f"cannot read config {args.config}: {err}")
        if not isinstance(conf, dict):
            raise MdpFormatError("config file must hold a JSON object")
        known = vars(args)
        bad = [k for k in conf if k not in known or k in ("func", "command", "config")]
        if bad:
            raise UsageError(f"unknown config keys for {args.command}: {bad}")
        # re-parse with file values as defaults so explicit flags still win
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**conf)
        args = parser.parse_args(argv)
    # checked after merging the config file, which may supply these
    missing = [f"--{k}" for k in REQUIRED.get(args.command, ()) if getattr(args, k) is None]
    if missing:
        raise UsageError(f"the following arguments are required: {', '.join(missing)}")
    if getattr(args, "seed", 0) is None:
        args.seed = env_seed()
    return args


def main(argv=None):
    try:
        args = parse(sys.argv[1:] if argv is None else argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as err:
        emit("error", "usage", str(err))
        return EXIT_USAGE
    except ParameterViolation as err:
        emit("error", "ParameterViolation", str(err))
        return EXIT_USAGE
    except MdpFormatError as err:
        emit("error", "MdpFormatError", str(err))
        return EXIT_PARSE
    except NoProperPolicy as err:
        emit("error", "NoProperPolicy", str(err))
        return EXIT_IMPROPER
    except SolverFailure as err:
        emit("error", type(err).__name__, str(err), diagnostics=err.diagnostics)
        return EXIT_SOLVER
    except SspError as err:
        emit("error", type(err).__name__, str(err))
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
