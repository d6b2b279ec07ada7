"""Command-line front end for the dispatch laboratory.

One verb per workflow: scenario generation, the five experiment
drivers, the exact truncated-chain oracle, the rate-program solver,
one-off simulation runs, and a kernel benchmark. Experiment verbs
write ``<experiment>.csv`` plus a YAML manifest into ``--out`` and
print the aggregate summary; the other verbs print YAML documents so
output stays pipeable.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import yaml

from . import _kernel
from .experiments import (MEMORY_GRID, RATIO_GRID, ScenarioSpec,
                          exp_critical_memory, exp_generic_gain,
                          exp_lagrange_iterations, exp_memory_sweep,
                          exp_policy_comparison, generate_scenarios)
from .model import InfeasibleConfigError, SystemConfig
from .oracle import (InfeasibleInstanceError, build_truncated,
                     evaluate_policy_exact, policy_table, solve_clbc)
from .policies import PolicySpec
from .rates import (InfeasibleProgramError, link_capacity_program,
                    solve_link_capacity)
from .sim import RunSpec, simulate, write_csv


def _int_list(text: str) -> tuple:
    return tuple(int(x) for x in text.split(",") if x)


def _float_list(text: str) -> tuple:
    return tuple(float(x) for x in text.split(",") if x)


def _window_arg(text: str):
    return text if text == "auto" else int(text)


def _load_config(path, index: int = 0) -> SystemConfig:
    """One SystemConfig from YAML: a single document, a plain list, or
    a gen-scenarios file with a ``scenarios`` key."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if isinstance(doc, dict) and "scenarios" in doc:
        doc = doc["scenarios"]
    if isinstance(doc, list):
        if not 0 <= index < len(doc):
            raise SystemExit(
                f"--index {index} outside 0..{len(doc) - 1}")
        doc = doc[index]
    return SystemConfig.from_dict(doc)


def _resolve_config(args) -> SystemConfig:
    if args.config:
        return _load_config(args.config, args.index)
    if args.n is None:
        raise SystemExit("provide --config FILE or --n N to sample one")
    spec = ScenarioSpec(args.n, regime=args.regime, seed=args.seed)
    return generate_scenarios(spec, 1)[0]


def _emit(doc: dict, out, name: str) -> None:
    text = yaml.safe_dump(doc, sort_keys=False)
    if out:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / name
        path.write_text(text)
        print(path)
    else:
        sys.stdout.write(text)


def _finish_experiment(result, args) -> int:
    if args.out:
        csv_path, manifest_path = result.write(args.out)
        print(csv_path)
        print(manifest_path)
    yaml.safe_dump({"aggregates": result.aggregates}, sys.stdout,
                   sort_keys=False)
    return 0


def cmd_gen_scenarios(args) -> int:
    spec = ScenarioSpec(args.n, regime=args.regime, seed=args.seed,
                        n_constrained=args.m, theta_mode=args.theta_mode)
    cfgs = generate_scenarios(spec, args.count)
    doc = {"spec": spec.to_dict(), "count": len(cfgs),
           "scenarios": [cfg.to_dict() for cfg in cfgs]}
    _emit(doc, args.out, "scenarios.yaml")
    return 0


def cmd_exp_lagrange(args) -> int:
    result = exp_lagrange_iterations(
        n_list=args.n_list, reps=args.reps, regime=args.regime,
        cap=args.cap, eval_horizon=args.horizon,
        step_scale=args.step_scale, seed=args.seed, workers=args.workers)
    return _finish_experiment(result, args)


def cmd_exp_memory_sweep(args) -> int:
    cfg = _load_config(args.config, args.index) if args.config else None
    result = exp_memory_sweep(
        cfg=cfg, k_list=args.k_list, horizon=args.horizon,
        reps=args.reps, seed=args.seed, workers=args.workers)
    return _finish_experiment(result, args)


def cmd_exp_critical_k(args) -> int:
    result = exp_critical_memory(
        n_list=args.n_list, regime=args.regime, seed=args.seed,
        n_scenarios=args.n_scenarios, horizon=args.horizon,
        reps=args.reps, k_cap=args.k_cap,
        probe_horizon=args.probe_horizon, workers=args.workers)
    return _finish_experiment(result, args)


def cmd_exp_compare(args) -> int:
    result = exp_policy_comparison(
        ratios=args.ratios, n_scenarios=args.n_scenarios,
        n_queues=args.n_queues, k_window=args.k_window,
        horizon=args.horizon, seed=args.seed, workers=args.workers)
    return _finish_experiment(result, args)


def cmd_exp_gain(args) -> int:
    result = exp_generic_gain(
        n_scenarios=args.n_scenarios, n_queues=args.n_queues,
        gain_kind=args.kind, k_window=args.k_window,
        horizon=args.horizon, seed=args.seed, workers=args.workers)
    return _finish_experiment(result, args)


def cmd_oracle(args) -> int:
    cfg = _resolve_config(args)
    mdp = build_truncated(cfg, args.buffer)
    sol = solve_clbc(mdp)
    doc = {
        "config": cfg.to_dict(),
        "buffer": int(args.buffer),
        "n_states": int(mdp.n_states),
        "objective": float(sol.objective),
        "budget_usage": [float(k) for k in sol.cost_values],
        "theta": [float(t) for t in sol.theta],
        "randomizing_states": len(sol.randomizing),
        "duality_gap": float(sol.duality_gap),
    }
    policies = {}
    for tag in args.policy or ():
        spec = PolicySpec.parse(tag)
        j, k = evaluate_policy_exact(mdp, policy_table(mdp, spec))
        policies[spec.tag] = {"objective": float(j),
                              "budget_usage": [float(x) for x in k]}
    if policies:
        doc["policies"] = policies
    _emit(doc, args.out, "oracle.yaml")
    return 0


def cmd_solve_rates(args) -> int:
    cfg = _resolve_config(args)
    rates = solve_link_capacity(link_capacity_program(cfg))
    doc = {"config": cfg.to_dict(), "rates": rates.to_dict()}
    _emit(doc, args.out, "rates.yaml")
    return 0


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    policy = PolicySpec.parse(args.policy)
    spec = RunSpec(cfg, policy, horizon=args.horizon, seed=args.seed,
                   warmup=args.warmup)
    metrics = simulate(spec, kernel=args.kernel)
    doc = {
        "policy": metrics.policy,
        "seed": int(metrics.seed),
        "load_ratio": float(metrics.load_ratio),
        "occupancy": float(metrics.occupancy),
        "occupancy_hw": float(metrics.occupancy_hw),
        "epoch_occupancy": float(metrics.epoch_occupancy),
        "khat": [float(x) for x in metrics.khat],
        "max_norm_cost": float(metrics.max_norm_cost),
        "max_norm_cost_hw": float(metrics.max_norm_cost_hw),
        "min_norm_gain": float(metrics.min_norm_gain),
        "fallback_events": int(metrics.fallback_events),
        "n_epochs": int(metrics.n_epochs),
        "exploded": bool(metrics.exploded),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "run.csv", [metrics], cfg.n_queues)
        print(out / "run.csv")
    yaml.safe_dump(doc, sys.stdout, sort_keys=False)
    return 0


def cmd_bench(args) -> int:
    """Throughput of every available kernel on matched runs."""
    cfg = generate_scenarios(
        ScenarioSpec(args.n, regime="light", seed=args.seed), 1)[0]
    kernels = ["pure"] + (["compiled"] if _kernel.HAS_COMPILED else [])
    rows, baseline = [], {}
    for tag in args.policies:
        policy = PolicySpec.parse(tag)
        for kernel in kernels:
            spec = RunSpec(cfg, policy, horizon=args.horizon,
                           seed=args.seed)
            t0 = time.perf_counter()
            m = simulate(spec, kernel=kernel)
            dt = time.perf_counter() - t0
            rows.append({"policy": policy.tag, "kernel": kernel,
                         "arrivals_per_sec": round(args.horizon / dt),
                         "occupancy": float(m.occupancy)})
            baseline.setdefault(policy.tag, m.occupancy)
            # matched seeds must agree across kernels exactly
            if abs(m.occupancy - baseline[policy.tag]) > 1e-12:
                raise RuntimeError(
                    f"kernel disagreement for {policy.tag}: "
                    f"{m.occupancy!r} vs {baseline[policy.tag]!r}")
    doc = {"active_kernel": _kernel.ACTIVE,
           "has_compiled": _kernel.HAS_COMPILED,
           "n_queues": int(cfg.n_queues),
           "horizon": int(args.horizon),
           "runs": rows}
    if _kernel.HAS_COMPILED:
        speedup = {}
        for tag in {r["policy"] for r in rows}:
            per = {r["kernel"]: r["arrivals_per_sec"]
                   for r in rows if r["policy"] == tag}
            speedup[tag] = round(per["compiled"] / per["pure"], 2)
        doc["compiled_speedup"] = speedup
    yaml.safe_dump(doc, sys.stdout, sort_keys=False)
    return 0


def _add_config_source(p) -> None:
    p.add_argument("--config", help="YAML config file (single document, "
                   "list, or gen-scenarios output)")
    p.add_argument("--index", type=int, default=0,
                   help="which entry of a config list (default 0)")
    p.add_argument("--n", type=int, default=None,
                   help="sample one scenario with this many queues "
                   "instead of reading --config")
    p.add_argument("--regime", choices=("light", "heavy"),
                   default="light", help="load regime for sampling")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safelb",
        description="Constrained dispatch laboratory: simulation, "
                    "rate programs, exact oracle, experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None,
                       help="output directory (default: print to stdout)")
        p.add_argument("--workers", type=int, default=1)
        return p

    p = add("gen-scenarios", cmd_gen_scenarios,
            "sample feasible random system configs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--regime", choices=("light", "heavy"), default="light")
    p.add_argument("--m", type=int, default=None,
                   help="constrained count (default: half of N, rounded up)")
    p.add_argument("--theta-mode", choices=("absolute", "share"),
                   default="absolute")

    p = add("exp-lagrange", cmd_exp_lagrange,
            "dual-ascent tuning effort vs system size")
    p.add_argument("--n-list", type=_int_list, default=(5, 10, 25))
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--regime", choices=("light", "heavy"), default="light")
    p.add_argument("--cap", type=int, default=50)
    p.add_argument("--horizon", type=int, default=100_000,
                   help="policy-evaluation horizon per iteration")
    p.add_argument("--step-scale", type=float, default=1.0)

    p = add("exp-memory-sweep", cmd_exp_memory_sweep,
            "window-length sweep for the bounded-memory dispatcher")
    p.add_argument("--k-list", type=_int_list, default=MEMORY_GRID)
    p.add_argument("--horizon", type=int, default=1_000_000)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--config", default=None,
                   help="sweep this config instead of the default scenario")
    p.add_argument("--index", type=int, default=0)

    p = add("exp-critical-k", cmd_exp_critical_k,
            "smallest safe window size vs queue count")
    p.add_argument("--n-list", type=_int_list, default=(4, 10, 20, 50))
    p.add_argument("--regime", choices=("light", "heavy"), default="light")
    p.add_argument("--n-scenarios", type=int, default=5)
    p.add_argument("--horizon", type=int, default=1_000_000)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--k-cap", type=int, default=10_000)
    p.add_argument("--probe-horizon", type=int, default=150_000)

    p = add("exp-compare", cmd_exp_compare,
            "policy comparison across arrival-to-capacity ratios")
    p.add_argument("--ratios", type=_float_list, default=RATIO_GRID)
    p.add_argument("--n-scenarios", type=int, default=50)
    p.add_argument("--n-queues", type=int, default=10)
    p.add_argument("--k-window", type=_window_arg, default="auto",
                   help="window for the bounded-memory policy, or "
                   "'auto' to match the tight budgets (default)")
    p.add_argument("--horizon", type=int, default=500_000)

    p = add("exp-gain", cmd_exp_gain,
            "comparison under per-queue activity floors")
    p.add_argument("--n-scenarios", type=int, default=50)
    p.add_argument("--n-queues", type=int, default=10)
    p.add_argument("--kind", choices=("linear", "quadratic"),
                   default="quadratic")
    p.add_argument("--k-window", type=int, default=250)
    p.add_argument("--horizon", type=int, default=500_000)

    p = add("oracle", cmd_oracle,
            "exact constrained optimum on the truncated chain")
    _add_config_source(p)
    p.add_argument("--buffer", type=int, default=20,
                   help="per-queue truncation level")
    p.add_argument("--policy", action="append", default=None,
                   help="also evaluate this policy exactly (repeatable); "
                   "tags like jsed, jssq, rjssq, lagrangian:lambda=0.5")

    p = add("solve-rates", cmd_solve_rates,
            "split the arrival stream within budgets")
    _add_config_source(p)

    p = add("simulate", cmd_simulate, "one seeded simulation run")
    _add_config_source(p)
    p.add_argument("--policy", required=True,
                   help="jsed | jsedk:k=250 | jsved | jssq | rjssq | "
                   "lagrangian:lambda=...")
    p.add_argument("--horizon", type=int, default=1_000_000)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--kernel", choices=("auto", "pure", "compiled"),
                   default="auto")

    p = add("bench", cmd_bench, "kernel throughput comparison")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--horizon", type=int, default=2_000_000)
    p.add_argument("--policies", type=lambda s: tuple(s.split(",")),
                   default=("jsed", "jsved", "jssq", "jsedk:k=250"))

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InfeasibleConfigError, InfeasibleProgramError,
            InfeasibleInstanceError, ValueError, RuntimeError) as exc:
        print(f"safelb: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
