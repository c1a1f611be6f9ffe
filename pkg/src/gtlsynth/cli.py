"""Command-line interface.

Five subcommands cover the pipeline end to end:

* ``compile``  — parse a GTL formula and dump the compiled automaton.
* ``synth``    — build one of the occupancy programs for a generated
  scenario or a model file and solve it, centrally or distributed.
* ``simulate`` — roll out a saved policy and dump sampled trajectories.
* ``evaluate`` — score a saved policy against its obligations, exactly
  where the composition fits and by Monte Carlo elsewhere.
* ``bench``    — the measurement harness (yield study, urban/rescue
  benchmark runs, scaling sweep, kernel comparison).

Every subcommand writes a :class:`~gtlsynth.manifest.RunManifest` into the
output directory before doing any work and finalizes it at the end, and
prints the paths it produced to stdout in a stable order, manifest first.

Exit status: 0 on success, 1 when a program is infeasible or a run fails
(size caps included), 2 on usage errors — argparse's own convention — and
unreadable or malformed inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from .admm import run_admm, split_blocks, write_trace_csv
from .automata import compile_dfa
from .builders import build_local_lp, build_monolithic_lp, build_neighboring_lp
from .gtl import Formula, GtlError, format_formula, parse_gtl
from .gtl import horizon as formula_horizon
from .lp import (
    LpError,
    LpSizeError,
    check_solution,
    extract_policy,
    policy_from_dict,
    policy_to_dict,
)
from .manifest import RunManifest
from .model import FactoredMdp, ModelError, build_model
from .oracle import (
    OracleError,
    exact_local_satisfaction,
    exact_satisfaction,
    monte_carlo_satisfaction,
    simulate_batch,
)
from .product import ProductModel, build_product, compose_joint, trivial_product
from .scenarios import KINDS, ScenarioConfig, ScenarioError, generate, resolve_config
from .solvers import SolverError, solve_lp

USAGE_ERROR = 2
RUN_FAILED = 1

_INPUT_ERRORS = (
    GtlError,
    ModelError,
    ScenarioError,
    OSError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)


class CliError(Exception):
    """Bad invocation detected past argparse (maps to exit status 2)."""


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _add_source_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_argument_group("problem source (scenario or model file)")
    src.add_argument("--scenario", choices=KINDS,
                     help="generate one of the benchmark scenarios")
    src.add_argument("--agents", type=int, help="scenario size")
    src.add_argument("--window", type=int,
                     help="scenario obligation window (drives the horizon)")
    src.add_argument("--epsilon", type=float, default=0.05,
                     help="crop: baseline infestation probability")
    src.add_argument("--infect-p", type=float, default=0.1, dest="infect",
                     help="crop: per-neighbor infestation pressure")
    src.add_argument("--recover", type=float, default=0.1,
                     help="crop: recovery probability under fallow")
    src.add_argument("--constrained-fraction", type=float, default=None,
                     help="fraction of agents carrying the obligation")
    src.add_argument("--seed", type=int, default=0,
                     help="scenario / sampling seed")
    src.add_argument("--model", type=Path,
                     help="model file in the JSON schema dialect")
    src.add_argument("--formula", action="append", default=[],
                     metavar="AGENT:GTL",
                     help="obligation for one agent (name or index); "
                          "repeatable; required with --model")


def _load_problem(args) -> tuple[FactoredMdp, dict[int, Formula], dict]:
    """Resolve the source flags to (model, per-agent formulas, config echo)."""
    if (args.scenario is None) == (args.model is None):
        raise CliError("pass exactly one of --scenario or --model")
    if args.scenario:
        config = ScenarioConfig(
            kind=args.scenario,
            n_agents=args.agents,
            window=args.window,
            epsilon=args.epsilon,
            infect=args.infect,
            recover=args.recover,
            threshold=getattr(args, "lam", None),
            constrained_fraction=args.constrained_fraction,
            seed=args.seed,
        )
        model, specs = generate(config)
        return model, specs, {"scenario": resolve_config(config)}
    model = build_model(json.loads(args.model.read_text()))
    specs: dict[int, Formula] = {}
    for item in args.formula:
        agent_text, _, formula_text = item.partition(":")
        if not formula_text:
            raise CliError(f"--formula needs AGENT:GTL, got {item!r}")
        agent_text = agent_text.strip()
        if agent_text.lstrip("-").isdigit():
            agent = int(agent_text)
            if not (0 <= agent < model.n_agents):
                raise CliError(f"agent index {agent} out of range")
        else:
            agent = model.name_to_idx.get(agent_text, -1)
            if agent < 0:
                raise CliError(f"unknown agent name {agent_text!r}")
        specs[agent] = parse_gtl(formula_text)
    if not specs:
        raise CliError("--model needs at least one --formula AGENT:GTL")
    return model, specs, {"model_file": str(args.model),
                          "formulas": {i: format_formula(f)
                                       for i, f in specs.items()}}


def _build_products(model: FactoredMdp,
                    specs: dict[int, Formula]) -> dict[int, ProductModel]:
    return {i: build_product(model, i, compile_dfa(f))
            for i, f in specs.items()}


def _horizon_of(specs: dict[int, Formula], override: int | None) -> int:
    need = max(formula_horizon(f) for f in specs.values())
    if override is None:
        return need
    if override < need:
        raise CliError(f"--horizon {override} is shorter than the "
                       f"obligations need ({need})")
    return override


def _print_paths(*paths) -> None:
    for p in paths:
        print(p)


# ---------------------------------------------------------------------------
# compile
# ---------------------------------------------------------------------------


def cmd_compile(args) -> int:
    formula = parse_gtl(args.gtl)
    out = args.out
    manifest = RunManifest(out / "manifest.json", command="compile",
                           config={"formula": format_formula(formula)})
    t0 = time.perf_counter()
    dfa = compile_dfa(formula)
    manifest.add_timing("compile", time.perf_counter() - t0)
    doc = {
        "formula": format_formula(formula),
        "horizon": formula_horizon(formula),
        "n_states": dfa.n_states,
        "initial": dfa.initial,
        "accepting": sorted(dfa.accepting),
        "atoms": [format_formula(a) for a in dfa.atoms],
        "transitions": dfa.delta.tolist(),
    }
    dump = out / "dfa.json"
    dump.write_text(json.dumps(doc, indent=2) + "\n")
    manifest.add_result(dump)
    manifest.merge(n_states=dfa.n_states, n_atoms=len(dfa.atoms))
    manifest.finalize("ok")
    _print_paths(manifest.path, dump)
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _build_program(method: str, program: str, model: FactoredMdp,
                   specs: dict[int, Formula], lam: float, horizon: int):
    products = _build_products(model, specs)
    lambdas = {i: lam for i in specs}
    if method == "monolithic":
        joint = compose_joint(model, products)
        return build_monolithic_lp(joint, lam, horizon), products
    kind = program if method == "admm" else method
    if kind == "neighboring":
        full = dict(products)
        for i in range(model.n_agents):
            full.setdefault(i, trivial_product(model, i))
        return build_neighboring_lp(model, full, lambdas, horizon), full
    return build_local_lp(model, products, lambdas, horizon), products


def cmd_synth(args) -> int:
    model, specs, echo = _load_problem(args)
    horizon = _horizon_of(specs, args.horizon)
    out = args.out
    manifest = RunManifest(
        out / "manifest.json", command="synth", config=echo,
        backend=args.backend,
        seeds={"scenario": args.seed},
    )
    manifest.merge(
        method=args.method, program=args.program, lam=args.lam,
        horizon=horizon, constrained_agents=sorted(specs),
        beta=args.beta, gamma=args.gamma, max_iters=args.iters,
    )
    try:
        t0 = time.perf_counter()
        lp, products = _build_program(args.method, args.program, model, specs,
                                      args.lam, horizon)
        manifest.add_timing("build", time.perf_counter() - t0)
        manifest.merge(n_vars=lp.n_vars, n_eq=lp.n_eq, n_ge=lp.n_ge,
                       exact_closure=all(p.exact_closure
                                         for p in products.values()))
    except LpSizeError as e:
        manifest.finalize("failed", error=str(e))
        print(f"synthesis failed: {e}", file=sys.stderr)
        _print_paths(manifest.path)
        return RUN_FAILED

    paths = [manifest.path]
    if args.method == "admm":
        blocks = split_blocks(lp)
        t0 = time.perf_counter()
        run = run_admm(blocks, beta=args.beta, gamma=args.gamma,
                       max_iters=args.iters, backend=args.backend)
        manifest.add_timing("solve", time.perf_counter() - t0)
        trace_path = out / "residuals.csv"
        write_trace_csv(run.trace, trace_path)
        manifest.add_result(trace_path)
        paths.append(trace_path)
        manifest.merge(status=run.status, iterations=run.iterations,
                       objective=run.objective, res_p=run.res_p,
                       res_d=run.res_d, check_ok=bool(run.check.ok))
        policy, objective = run.policy, run.objective
    else:
        t0 = time.perf_counter()
        res = solve_lp(lp, backend=args.backend)
        manifest.add_timing("solve", time.perf_counter() - t0)
        if not res.ok:
            manifest.merge(status=res.status, solver_info=res.info)
            manifest.finalize("infeasible" if res.status == "infeasible"
                              else "failed")
            print(f"solver reports {res.status}", file=sys.stderr)
            _print_paths(manifest.path)
            return RUN_FAILED
        report = check_solution(lp, res.x)
        manifest.merge(status=res.status, iterations=res.iterations,
                       objective=res.objective, check_ok=bool(report.ok),
                       threshold_slack={str(i): v for i, v in
                                        report.threshold_slack.items()})
        policy, objective = extract_policy(lp, res.x), res.objective

    policy_path = out / "policy.json"
    policy_path.write_text(json.dumps(policy_to_dict(policy), indent=1) + "\n")
    manifest.add_result(policy_path)
    paths.append(policy_path)
    manifest.finalize("ok")
    print(f"objective {objective:.6f}")
    _print_paths(*paths)
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    model, specs, echo = _load_problem(args)
    policy = policy_from_dict(json.loads(args.policy.read_text()))
    horizon = args.horizon if args.horizon is not None else policy.horizon
    out = args.out
    manifest = RunManifest(
        out / "manifest.json", command="simulate", config=echo,
        seeds={"scenario": args.seed, "rollouts": args.sim_seed},
    )
    manifest.merge(policy_file=str(args.policy), runs=args.runs,
                   horizon=horizon, formulation=policy.formulation)
    products = _build_products(model, specs)
    t0 = time.perf_counter()
    states = simulate_batch(model, policy, horizon, args.runs,
                            seed=args.sim_seed, products=products)
    manifest.add_timing("simulate", time.perf_counter() - t0)

    traj_path = out / "trajectories.csv"
    with open(traj_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "t", "agent", "state", "state_name"])
        for r in range(states.shape[0]):
            for t in range(states.shape[1]):
                for i in range(states.shape[2]):
                    s = int(states[r, t, i])
                    writer.writerow(
                        [r, t, model.names[i], s,
                         model.agents[i].states[s].name])
    manifest.add_result(traj_path)
    manifest.finalize("ok")
    _print_paths(manifest.path, traj_path)
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _score_agent(mode: str, model, policy, formula, owner, horizon,
                 products, args) -> tuple[str, float, float]:
    """Returns (mode used, satisfaction, half width)."""
    if mode in ("exact", "auto"):
        try:
            if policy.formulation == "local":
                return ("exact", exact_local_satisfaction(
                    model, policy, formula, owner, horizon=horizon), 0.0)
            return ("exact", exact_satisfaction(
                model, policy, formula, owner, horizon=horizon,
                products=products), 0.0)
        except OracleError:
            if mode == "exact":
                raise
    row = monte_carlo_satisfaction(
        model, policy, formula, owner, runs=args.runs, seed=args.sim_seed,
        horizon=horizon, products=products,
        confidence=args.confidence).row_for(owner)
    return ("mc", row.satisfaction, row.half_width)


def cmd_evaluate(args) -> int:
    model, specs, echo = _load_problem(args)
    policy = policy_from_dict(json.loads(args.policy.read_text()))
    horizon = args.horizon if args.horizon is not None else policy.horizon
    out = args.out
    manifest = RunManifest(
        out / "manifest.json", command="evaluate", config=echo,
        seeds={"scenario": args.seed, "rollouts": args.sim_seed},
    )
    manifest.merge(policy_file=str(args.policy), mode=args.mode,
                   runs=args.runs, horizon=horizon,
                   confidence=args.confidence)
    products = _build_products(model, specs)

    rows = []
    shortfalls = []
    try:
        for owner in sorted(specs):
            used, sat, half = _score_agent(
                args.mode, model, policy, specs[owner], owner, horizon,
                products, args)
            declared = policy.lambdas.get(owner)
            meets = "" if declared is None else str(sat >= declared - 0.02 - half)
            rows.append([model.names[owner], used, f"{sat:.6f}",
                         f"{half:.6f}",
                         "" if declared is None else f"{declared:.4f}", meets])
            if declared is not None and sat < declared - 0.02 - half:
                shortfalls.append((owner, sat, declared))
    except OracleError as e:
        manifest.finalize("failed", error=str(e))
        print(f"evaluation failed: {e}", file=sys.stderr)
        _print_paths(manifest.path)
        return USAGE_ERROR

    eval_path = out / "evaluation.csv"
    with open(eval_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent", "mode", "satisfaction", "half_width",
                         "declared_threshold", "meets_declared"])
        writer.writerows(rows)
    manifest.add_result(eval_path)
    manifest.merge(shortfalls=[{"agent": int(i), "realized": s, "declared": d}
                               for i, s, d in shortfalls])
    manifest.finalize("ok")
    for owner, sat, declared in shortfalls:
        print(f"shortfall: agent {model.names[owner]} realizes {sat:.4f} "
              f"below declared {declared}", file=sys.stderr)
    _print_paths(manifest.path, eval_path)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    from . import bench

    runners = {
        "crop": bench.run_crop_study,
        "urban": bench.run_urban,
        "rescue": bench.run_rescue,
        "scaling": bench.run_scaling,
        "kernels": bench.run_kernels,
    }
    return runners[args.study](args)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gtlsynth",
        description="Synthesize and validate multi-agent policies under "
                    "graph temporal logic obligations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="compile a GTL formula to an automaton")
    p.add_argument("gtl", help="formula text")
    p.add_argument("--out", type=Path, default=Path("runs/compile"))
    p.set_defaults(fn=cmd_compile)

    p = sub.add_parser("synth", help="synthesize a policy")
    _add_source_flags(p)
    p.add_argument("--method", required=True,
                   choices=("monolithic", "neighboring", "local", "admm"))
    p.add_argument("--program", choices=("neighboring", "local"),
                   default="neighboring",
                   help="which program the distributed method splits")
    p.add_argument("--lambda", type=float, required=True, dest="lam",
                   help="satisfaction threshold")
    p.add_argument("--beta", type=float, default=1.0, help="penalty weight")
    p.add_argument("--gamma", type=float, default=1e-4,
                   help="residual tolerance")
    p.add_argument("--iters", type=int, default=500,
                   help="distributed iteration cap")
    p.add_argument("--backend", default="ipm",
                   help="LP backend (ipm | highs | splitting)")
    p.add_argument("--horizon", type=int, default=None,
                   help="override the planning horizon (>= formula need)")
    p.add_argument("--out", type=Path, default=Path("runs/synth"))
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("simulate", help="roll out a saved policy")
    _add_source_flags(p)
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--sim-seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/simulate"))
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("evaluate", help="score a saved policy")
    _add_source_flags(p)
    p.add_argument("--policy", type=Path, required=True)
    p.add_argument("--mode", choices=("exact", "mc", "auto"), default="auto")
    p.add_argument("--runs", type=int, default=10_000,
                   help="Monte Carlo rollouts")
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--sim-seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/evaluate"))
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("bench", help="measurement harness")
    bsub = p.add_subparsers(dest="study", required=True)

    b = bsub.add_parser("crop", help="yield/threshold study")
    b.add_argument("--agents", type=int, default=25)
    b.add_argument("--window", type=int, default=2)
    b.add_argument("--lambdas", type=float, nargs="+",
                   default=[0.9, 0.8, 0.7, 0.6])
    b.add_argument("--epsilons", type=float, nargs="+",
                   default=[0.01, 0.05, 0.1])
    b.add_argument("--infect-grid", type=float, nargs="+",
                   default=[0.05, 0.1, 0.2], dest="infect_grid")
    b.add_argument("--recover-grid", type=float, nargs="+",
                   default=[0.4, 0.8], dest="recover_grid")
    b.add_argument("--runs", type=int, default=2000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--backend", default="ipm")
    b.add_argument("--out", type=Path, default=Path("runs/bench-crop"))

    b = bsub.add_parser("urban", help="street-map benchmark run")
    b.add_argument("--window", type=int, default=2)
    b.add_argument("--lambda", type=float, default=0.9, dest="lam")
    b.add_argument("--method", default="local",
                   choices=("monolithic", "neighboring", "local", "admm"))
    b.add_argument("--backend", default="ipm")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=Path, default=Path("runs/bench-urban"))

    b = bsub.add_parser("rescue", help="search-and-rescue benchmark run")
    b.add_argument("--agents", type=int, default=50)
    b.add_argument("--window", type=int, default=4)
    b.add_argument("--lambda", type=float, default=0.95, dest="lam")
    b.add_argument("--beta", type=float, default=1.0)
    b.add_argument("--gamma", type=float, default=1e-4)
    b.add_argument("--iters", type=int, default=60)
    b.add_argument("--backend", default="splitting")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--runs", type=int, default=20_000)
    b.add_argument("--out", type=Path, default=Path("runs/bench-rescue"))

    b = bsub.add_parser("scaling", help="wall-time vs field count")
    b.add_argument("--agents", type=int, nargs="+",
                   default=[50, 100, 200, 400])
    b.add_argument("--window", type=int, default=0)
    b.add_argument("--lambda", type=float, default=0.6, dest="lam")
    b.add_argument("--beta", type=float, default=1.0)
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--central-cap-s", type=float, default=600.0,
                   help="wall-clock cap per centralized solve")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=Path, default=Path("runs/bench-scaling"))

    b = bsub.add_parser("kernels", help="accelerated vs fallback hot loops")
    b.add_argument("--runs", type=int, default=200_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=Path, default=Path("runs/bench-kernels"))

    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except LpSizeError as e:
        print(f"error: {e}", file=sys.stderr)
        return RUN_FAILED
    except (SolverError, LpError, OracleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return RUN_FAILED
    except _INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
