"""Scenario sampling and the benchmark experiment drivers.

Five studies cover the standard questions: dual-ascent tuning effort
versus system size, the bounded-memory window sweep, the critical
window size curve, the safe-policy comparison across load ratios, and
the gain-floor comparison. Each driver returns an ExperimentResult
whose rows are plain scalars ready for CSV, whose aggregates can be
rebuilt from those rows alone, and whose manifest records every knob
needed to reproduce the bytes.

Determinism contract: all randomness derives from the master seed.
Runs may fan out over a process pool, but results are assembled by
submission index, so the worker count never changes the output.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from .lagrangian import run_primal_dual
from .model import InfeasibleConfigError, SystemConfig
from .policies import PolicySpec
from .rates import (GainSpec, InfeasibleProgramError, generic_gain_program,
                    link_capacity_program, solve_generic_gain,
                    solve_link_capacity)
from .sim import RunSpec, _fmt, attach_gain, simulate

__all__ = [
    "LOAD_RANGES", "MEMORY_GRID", "RATIO_GRID", "REJECTION_BUDGET",
    "ExperimentResult", "ScenarioSpec", "critical_window",
    "exp_critical_memory", "exp_generic_gain", "exp_lagrange_iterations",
    "exp_memory_sweep", "exp_policy_comparison", "generate_scenarios",
    "recompute_aggregates", "resonant_window",
]

LOAD_RANGES = {"light": (0.70, 0.95), "heavy": (0.992, 0.998)}
REJECTION_BUDGET = 10_000
RATIO_GRID = (0.75, 0.85, 0.95, 0.99, 0.995)
MEMORY_GRID = (1, 2, 5, 10, 25, 50, 100, 250, 1000)


@dataclass(frozen=True)
class ScenarioSpec:
    """Sampling recipe for random system configs.

    The constrained count follows the half-of-N rule (rounded up)
    unless overridden. Budgets come in two flavors. "absolute" draws
    them uniformly from ``theta_range``, defaulting to (1/N, 3/N) so
    budget shares shrink with the queue count and instances stay
    comparable across sizes. "share" instead draws per-queue
    multipliers from ``theta_range`` (default (1.02, 1.16)) and sets
    each budget to that multiple of the queue's service share, which
    keeps budgets binding however lopsided the service rates come
    out. Load regimes pin the arrival rate to a fraction of the total
    service capacity, drawn uniformly from LOAD_RANGES.
    """

    n_queues: int
    regime: str = "light"
    seed: int = 0
    n_constrained: int = None
    mu_range: tuple = (0.5, 2.0)
    theta_range: tuple = None
    theta_mode: str = "absolute"

    def __post_init__(self):
        if self.n_queues < 1:
            raise ValueError("n_queues must be >= 1")
        if self.regime not in LOAD_RANGES:
            raise ValueError(
                f"regime must be one of {sorted(LOAD_RANGES)}, "
                f"got {self.regime!r}")
        if self.theta_mode not in ("absolute", "share"):
            raise ValueError("theta_mode must be 'absolute' or 'share'")
        if self.n_constrained is None:
            object.__setattr__(self, "n_constrained",
                               (self.n_queues + 1) // 2)
        if not 0 <= self.n_constrained <= self.n_queues:
            raise ValueError("n_constrained must lie in [0, n_queues]")
        lo, hi = (float(x) for x in self.mu_range)
        object.__setattr__(self, "mu_range", (lo, hi))
        if not 0 < lo <= hi:
            raise ValueError("mu_range must satisfy 0 < lo <= hi")
        if self.theta_range is None:
            if self.theta_mode == "share":
                object.__setattr__(self, "theta_range", (1.02, 1.16))
            else:
                n = self.n_queues
                object.__setattr__(
                    self, "theta_range", (1.0 / n, min(1.0, 3.0 / n)))
        lo, hi = (float(x) for x in self.theta_range)
        object.__setattr__(self, "theta_range", (lo, hi))
        if not 0 < lo <= hi:
            raise ValueError("theta_range must satisfy 0 < lo <= hi")
        if self.theta_mode == "absolute" and hi > 1:
            raise ValueError("absolute theta_range must stay within (0, 1]")

    def to_dict(self) -> dict:
        return {"n_queues": self.n_queues, "regime": self.regime,
                "seed": self.seed, "n_constrained": self.n_constrained,
                "mu_range": list(self.mu_range),
                "theta_range": list(self.theta_range),
                "theta_mode": self.theta_mode}


def generate_scenarios(spec: ScenarioSpec, count: int) -> tuple:
    """Rejection-sample ``count`` feasible configs.

    A draw survives when the config is stabilizable and the
    link-capacity program solves, so every returned scenario supports
    the whole policy suite. Gives up after REJECTION_BUDGET draws and
    reports which of the two conditions did the rejecting.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    lo_r, hi_r = LOAD_RANGES[spec.regime]
    kept = []
    rejects = {"not stabilizable": 0, "rate program infeasible": 0}
    for _ in range(REJECTION_BUDGET):
        if len(kept) == count:
            break
        mu = rng.uniform(*spec.mu_range, size=spec.n_queues)
        draw = rng.uniform(*spec.theta_range, size=spec.n_constrained)
        if spec.theta_mode == "share":
            share = mu[:spec.n_constrained] / mu.sum()
            theta = np.minimum(draw * share, 1.0)
        else:
            theta = draw
        xi = float(rng.uniform(lo_r, hi_r) * mu.sum())
        try:
            cfg = SystemConfig(spec.n_queues, spec.n_constrained, xi,
                               tuple(mu), tuple(theta))
        except InfeasibleConfigError:
            rejects["not stabilizable"] += 1
            continue
        try:
            solve_link_capacity(link_capacity_program(cfg))
        except InfeasibleProgramError:
            rejects["rate program infeasible"] += 1
            continue
        kept.append(cfg)
    if len(kept) < count:
        worst = max(rejects, key=rejects.get)
        raise RuntimeError(
            f"scenario sampling exhausted {REJECTION_BUDGET} draws with "
            f"{len(kept)}/{count} kept; dominant rejection: {worst} "
            f"({rejects[worst]} of {sum(rejects.values())} failures)")
    return tuple(kept)


def _derive_seed(*keys) -> int:
    """Stable child seed from an integer key path."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentResult:
    """One experiment's raw rows plus everything needed to rerun it.

    ``rows`` are tuples of plain scalars aligned with ``header``;
    ``aggregates`` are derived from the rows alone (see
    recompute_aggregates) and ``config`` captures the driver
    arguments, so CSV plus manifest make the run reproducible byte
    for byte. No timestamps anywhere, on purpose.
    """

    experiment: str
    header: tuple
    rows: tuple
    scenarios: tuple
    aggregates: dict
    config: dict
    notes: tuple = ()

    def csv_text(self) -> str:
        lines = [",".join(self.header)]
        lines.extend(",".join(_fmt(v) for v in row) for row in self.rows)
        return "\n".join(lines) + "\n"

    def manifest_doc(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "columns": list(self.header),
            "n_rows": len(self.rows),
            "scenarios": [cfg.to_dict() for cfg in self.scenarios],
            "aggregates": self.aggregates,
            "notes": list(self.notes),
        }

    def write(self, out_dir) -> tuple:
        """Emit <experiment>.csv and <experiment>.manifest.yaml."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.experiment}.csv"
        manifest_path = out / f"{self.experiment}.manifest.yaml"
        csv_path.write_text(self.csv_text())
        with open(manifest_path, "w") as fh:
            yaml.safe_dump(self.manifest_doc(), fh, sort_keys=False)
        return csv_path, manifest_path


def _map_ordered(fn, items, workers: int) -> list:
    """Map preserving item order; fans out to processes when asked."""
    items = list(items)
    if workers > 1 and len(items) > 1:
        out = [None] * len(items)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(fn, item): i
                       for i, item in enumerate(items)}
            for fut in as_completed(futures):
                out[futures[fut]] = fut.result()
        return out
    return [fn(item) for item in items]


def _column(header, rows, name):
    i = header.index(name)
    return [row[i] for row in rows]


# ---------------------------------------------------------------------------
# dual-ascent tuning effort vs system size


def _dual_case(case, eval_horizon, cap, step_scale):
    cfg, seed = case
    return run_primal_dual(cfg, eval_horizon=eval_horizon, cap=cap,
                           step_scale=step_scale, seed=seed)


def exp_lagrange_iterations(n_list=(5, 10, 25), reps=30, regime="light",
                            cap=50, eval_horizon=100_000, step_scale=1.0,
                            seed=0, workers=1) -> ExperimentResult:
    """Price-tuning effort as the system grows.

    Draws ``reps`` scenarios per queue count and runs the dual ascent
    on each, recording how many policy evaluations it took, whether
    the iteration cap bit, and what share of the trajectory was spent
    evaluating budget-violating iterates.
    """
    n_list = tuple(int(n) for n in n_list)
    scenarios, cases, labels = [], [], []
    for n in n_list:
        cfgs = generate_scenarios(
            ScenarioSpec(n, regime=regime, seed=_derive_seed(seed, 1, n)),
            reps)
        for r, cfg in enumerate(cfgs):
            scenarios.append(cfg)
            cases.append((cfg, _derive_seed(seed, 2, n, r)))
            labels.append((n, r))
    logs = _map_ordered(
        partial(_dual_case, eval_horizon=eval_horizon, cap=cap,
                step_scale=step_scale),
        cases, workers)

    rows = []
    for (n, r), (_, run_seed), log in zip(labels, cases, logs):
        iters = log.iterations
        frac = float(log.unsafe_count / iters) if iters else 0.0
        rows.append((n, r, run_seed, iters, int(log.hit_cap),
                     int(log.converged), log.unsafe_count, frac,
                     float(max(log.final_multipliers, default=0.0))))
    header = ("n_queues", "scenario", "seed", "iterations", "hit_cap",
              "converged", "unsafe_iterations", "unsafe_fraction",
              "max_multiplier")
    config = {"n_list": list(n_list), "reps": int(reps), "regime": regime,
              "cap": int(cap), "eval_horizon": int(eval_horizon),
              "step_scale": float(step_scale), "seed": int(seed)}
    rows = tuple(rows)
    return ExperimentResult(
        "exp_lagrange_iterations", header, rows, tuple(scenarios),
        _agg_lagrange(header, rows, config), config,
        notes=("one dual-ascent run per scenario; unsafe_fraction is the "
               "share of evaluation iterations whose worst budget ratio "
               "exceeded one",))


def _agg_lagrange(header, rows, config) -> dict:
    i_n = header.index("n_queues")
    per_n = {}
    for n in config["n_list"]:
        sub = [row for row in rows if row[i_n] == n]
        per_n[int(n)] = {
            "runs": len(sub),
            "mean_iterations": float(np.mean(_column(header, sub,
                                                     "iterations"))),
            "cap_fraction": float(np.mean(_column(header, sub,
                                                  "hit_cap"))),
            "mean_unsafe_fraction": float(np.mean(
                _column(header, sub, "unsafe_fraction"))),
        }
    return {"per_n": per_n}


# ---------------------------------------------------------------------------
# bounded-memory window sweep on one system


def exp_memory_sweep(cfg: SystemConfig = None, k_list=MEMORY_GRID,
                     horizon=1_000_000, reps=3, seed=0,
                     workers=1) -> ExperimentResult:
    """Window-length sweep for the bounded-memory dispatcher.

    One system, matched seeds across window sizes: the occupancy
    column is a paired comparison and max_norm_cost is the worst
    budget ratio. Defaults to a 25-queue light-load scenario, 13 of
    them budgeted.
    """
    if cfg is None:
        cfg = generate_scenarios(
            ScenarioSpec(25, regime="light", seed=_derive_seed(seed, 3)),
            1)[0]
    k_list = tuple(int(k) for k in k_list)
    if any(k < 1 for k in k_list):
        raise ValueError("window sizes must be >= 1")
    rep_seeds = [_derive_seed(seed, 4, r) for r in range(reps)]
    specs = [RunSpec(cfg, PolicySpec("jsedk", k=k), horizon=horizon, seed=s)
             for k in k_list for s in rep_seeds]
    metrics = _map_ordered(simulate, specs, workers)

    rows = []
    for i, m in enumerate(metrics):
        k, r = k_list[i // reps], i % reps
        rows.append((k, r, m.seed, float(m.occupancy),
                     float(m.occupancy_hw), float(m.max_norm_cost),
                     float(m.max_norm_cost_hw), int(m.fallback_events)))
    header = ("k", "rep", "seed", "occupancy", "occupancy_hw",
              "max_norm_cost", "max_norm_cost_hw", "fallback_events")
    config = {"k_list": list(k_list), "horizon": int(horizon),
              "reps": int(reps), "seed": int(seed)}
    rows = tuple(rows)
    return ExperimentResult(
        "exp_memory_sweep", header, rows, (cfg,),
        _agg_memory_sweep(header, rows, config), config,
        notes=("replication seeds are shared across window sizes, so "
               "per-k occupancy means are paired comparisons",))


def _agg_memory_sweep(header, rows, config) -> dict:
    i_k = header.index("k")
    per_k, cost_means, occ_means = {}, [], []
    for k in config["k_list"]:
        sub = [row for row in rows if row[i_k] == k]
        occ = float(np.mean(_column(header, sub, "occupancy")))
        cost = float(np.mean(_column(header, sub, "max_norm_cost")))
        per_k[int(k)] = {"occupancy": occ, "max_norm_cost": cost,
                         "runs": len(sub)}
        occ_means.append(occ)
        cost_means.append(cost)
    ks = [float(k) for k in config["k_list"]]
    crossing = None
    for k, cost in zip(config["k_list"], cost_means):
        if cost <= 1.0:
            crossing = int(k)
            break
    return {
        "per_k": per_k,
        "spearman_max_cost_vs_k": float(
            stats.spearmanr(ks, cost_means).correlation),
        "spearman_occupancy_vs_k": float(
            stats.spearmanr(ks, occ_means).correlation),
        "crossing_k": crossing,
    }


# ---------------------------------------------------------------------------
# critical window size vs system size


def _window_probe(cfg, k, rep_seeds, horizon, workers):
    specs = [RunSpec(cfg, PolicySpec("jsedk", k=k), horizon=horizon, seed=s)
             for s in rep_seeds]
    return _map_ordered(simulate, specs, workers)


def critical_window(cfg: SystemConfig, horizon=1_000_000, reps=3, seed=0,
                    k_cap=10_000, workers=1, on_probe=None):
    """Smallest window the replicated search certifies as safe.

    A window passes when the worst budget ratio stays at or below one
    in every replication. Doubles k until a safe bracket appears, then
    bisects; returns None when nothing up to ``k_cap`` passes. Window
    safety is essentially load-independent for a fixed environment,
    because a saturated budget's dispatch fraction pins at a value set
    by k and theta alone (see resonant_window), so a verdict found at
    one arrival rate carries over to the others.

    ``on_probe(k, metrics)`` sees every probe in search order.
    """
    rep_seeds = [_derive_seed(seed, r) for r in range(reps)]

    def check(k):
        metrics = _window_probe(cfg, k, rep_seeds, horizon, workers)
        if on_probe is not None:
            on_probe(int(k), metrics)
        return all(m.max_norm_cost <= 1.0 for m in metrics)

    lo, hi = 1, None
    if check(1):
        return 1
    k = 2
    while hi is None and k <= k_cap:
        if check(k):
            hi = k
        else:
            lo = k
            k = min(k * 2, k_cap) if k < k_cap else k_cap + 1
    while hi is not None and hi - lo > 1:
        mid = (lo + hi) // 2
        if check(mid):
            hi = mid
        else:
            lo = mid
    return hi


def resonant_window(thetas, k_range=(40, 2000), k_default=250) -> tuple:
    """Window length whose budget clamp clears every given budget.

    A window of length k admits at most ceil(k*theta) dispatches per
    k+1 consecutive decisions, so once demand exceeds a budget the
    dispatch fraction pins near ceil(k*theta)/(k+1). That clamp dips
    below theta only when k*theta sits just under an integer, so safe
    window lengths form a sparse resonant set; the relative margin is
    capped by 1/(k+1), which is why modest windows protect better
    than huge ones. Scans ``k_range`` and returns (k, margin) with the
    largest worst-case margin across the budgets, preferring smaller
    windows on ties. No budgets means nothing can clamp: returns
    (k_default, inf).
    """
    thetas = [float(t) for t in thetas]
    if any(not 0 < t <= 1 for t in thetas):
        raise ValueError("budgets must lie in (0, 1]")
    if not thetas:
        return int(k_default), float("inf")
    k_lo, k_hi = (int(k) for k in k_range)
    if not 1 <= k_lo <= k_hi:
        raise ValueError("k_range must satisfy 1 <= lo <= hi")
    best_k, best_margin = k_lo, -float("inf")
    for k in range(k_lo, k_hi + 1):
        margin = min(1.0 - math.ceil(k * t) / ((k + 1) * t) for t in thetas)
        if margin > best_margin + 1e-12:
            best_k, best_margin = k, margin
    return best_k, float(best_margin)


def exp_critical_memory(n_list=(4, 10, 20, 50), regime="light", seed=0,
                        n_scenarios=5, horizon=1_000_000, reps=3,
                        k_cap=10_000, probe_horizon=150_000,
                        workers=1) -> ExperimentResult:
    """Smallest safe window size as the system grows.

    Several scenarios per queue count, each kept only when an
    unwindowed greedy probe overruns some budget by a clear margin;
    without a saturated budget every window is vacuously safe and the
    search degenerates to 1. Each kept scenario is searched with
    critical_window; the per-size figure of merit is the smallest
    per-scenario window. Its scale is set by the budget range alone
    (even the most generous sampled budget has to fit inside a
    window), so the curve tracks system size, where medians are
    dominated by how many budgets happen to bind in each draw and
    adjacent sizes blur together. Searches that stay unsafe at
    ``k_cap`` record a capped marker; the per-size value is capped
    only when every scenario capped.
    """
    n_list = tuple(int(n) for n in n_list)
    n_scenarios = int(n_scenarios)
    if n_scenarios < 1:
        raise ValueError("n_scenarios must be >= 1")
    scenarios, salts, rows = [], [], []
    for n in n_list:
        salt, accepted = 0, 0
        while accepted < n_scenarios:
            if salt >= 60 * n_scenarios:
                raise RuntimeError(
                    f"no {regime} scenario with a saturated budget "
                    f"found for n={n}")
            cand = generate_scenarios(
                ScenarioSpec(n, regime=regime,
                             seed=_derive_seed(seed, 5, n, salt)), 1)[0]
            probe = simulate(RunSpec(
                cand, PolicySpec("jsed"), horizon=probe_horizon,
                seed=_derive_seed(seed, 5, n, salt, 1)))
            salt += 1
            if probe.max_norm_cost <= 1.05:  # nothing saturated
                continue
            s_idx = accepted
            accepted += 1
            scenarios.append(cand)
            salts.append(salt - 1)

            def on_probe(k, metrics, n=n, s_idx=s_idx):
                for r, m in enumerate(metrics):
                    rows.append((n, s_idx, k, r, m.seed,
                                 float(m.occupancy),
                                 float(m.max_norm_cost),
                                 int(m.max_norm_cost <= 1.0)))

            critical_window(cand, horizon=horizon, reps=reps,
                            seed=_derive_seed(seed, 6, n, s_idx),
                            k_cap=k_cap, workers=workers,
                            on_probe=on_probe)

    header = ("n_queues", "scenario", "k", "rep", "seed", "occupancy",
              "max_norm_cost", "safe")
    config = {"n_list": list(n_list), "regime": regime,
              "n_scenarios": n_scenarios, "horizon": int(horizon),
              "reps": int(reps), "k_cap": int(k_cap), "seed": int(seed),
              "probe_horizon": int(probe_horizon),
              "scenario_salts": salts}
    rows = tuple(rows)
    return ExperimentResult(
        "exp_critical_memory", header, rows, tuple(scenarios),
        _agg_critical(header, rows, config), config,
        notes=("per-scenario critical windows are the smallest probed "
               "window whose every replication was safe; capped "
               "entries exhausted the search bound; per-size "
               "critical_k anchors the curve at the smallest "
               "per-scenario window, whose scale is set by the budget "
               "range rather than by how many budgets bind per draw",))


def _agg_critical(header, rows, config) -> dict:
    i_n = header.index("n_queues")
    i_sc = header.index("scenario")
    i_k = header.index("k")
    i_s = header.index("safe")
    per_n = {}
    for n in config["n_list"]:
        per_scenario = []
        for s_idx in range(config.get("n_scenarios", 1)):
            verdict = {}
            for row in rows:
                if row[i_n] != n or row[i_sc] != s_idx:
                    continue
                k = int(row[i_k])
                verdict[k] = verdict.get(k, True) and bool(row[i_s])
            safe_ks = sorted(k for k, ok in verdict.items() if ok)
            per_scenario.append(int(safe_ks[0]) if safe_ks else None)
        finite = sorted(k for k in per_scenario if k is not None)
        per_n[int(n)] = {
            "critical_k": finite[0] if finite else None,
            "capped": not finite,
            "per_scenario": per_scenario,
        }
    return {"per_n": per_n}


# ---------------------------------------------------------------------------
# safe policies vs the unconstrained baseline across load ratios


def _with_ratio(cfg: SystemConfig, ratio: float) -> SystemConfig:
    xi = float(ratio) * float(np.sum(cfg.service_rates))
    return dataclasses.replace(cfg, arrival_rate=xi)


def exp_policy_comparison(ratios=RATIO_GRID, n_scenarios=50, n_queues=10,
                          k_window="auto", safety_pad=1.04,
                          violation_pad=0.93, budget_slack=(1.5, 2.0),
                          n_tight=2, k_base=72, probe_horizon=150_000,
                          horizon=500_000, seed=0,
                          workers=1) -> ExperimentResult:
    """Dispatch policies head to head across the load grid.

    One fixed environment set; only the arrival rate moves between
    grid points. Per scenario, up to ``n_tight`` budgeted queues get a
    deliberately tight budget and the rest get ``budget_slack`` times
    their service share. A tight budget is placed in the measured gap
    between what the target-rate solver would route to that queue
    anyway (times ``safety_pad``) and what the greedy dispatcher
    actually sends it (probed per sub-saturation grid point, times
    ``violation_pad``). Budgets in that gap are exactly the ones the
    greedy breaks while the solver-guided policies keep real slack
    instead of riding a binding budget at equality; queues with no
    such gap stay loose, and scenarios with no placeable queue are
    resampled.

    Tight budgets are snapped onto the 1/``k_base`` lattice, so a
    window of length k_base holds an exact count of k_base*theta for
    every tight budget at once and protects them all with relative
    margin 1/(k_base+1); without the lattice, two arbitrary budgets
    can lack any common safe window in a practical range (see
    resonant_window). Keep k_base modest: that margin still has to
    clear simulation noise.

    ``k_window`` sizes the bounded-memory dispatcher. The default
    "auto" feeds every budget that the probed demand reaches to
    resonant_window; the lattice guarantees a window of k_base or
    better. Pass an int to pin the window.

    Occupancy is normalized per scenario by the virtual-queue policy's
    run at the same ratio and seed, costs per queue by their budgets,
    and each run reports which queue sat worst against its budget.
    """
    ratios = tuple(float(r) for r in ratios)
    if not ratios or any(not 0 < r < 1 for r in ratios):
        raise ValueError("load ratios must lie in (0, 1)")
    if not 0 <= int(n_tight):
        raise ValueError("n_tight must be nonnegative")
    if int(k_base) < 1:
        raise ValueError("k_base must be >= 1")
    if not float(safety_pad) > 1:
        raise ValueError("safety_pad must exceed 1")
    if not 0 < float(violation_pad) < 1:
        raise ValueError("violation_pad must lie in (0, 1)")
    top = max(ratios)
    probe_ratios = tuple(r for r in ratios if r < 0.98)
    if not probe_ratios and int(n_tight) > 0:
        raise ValueError(
            "need a grid ratio below 0.98 to stage budget violations")

    # keep only environments that stay solvable at the top grid point
    # (so the same systems can serve every ratio) and that offer a gap
    # to place tight budgets in
    base, tight_sets, windows, margins, salt = [], [], [], [], 0
    while len(base) < n_scenarios:
        if salt >= 10 * n_scenarios + 20:
            raise RuntimeError(
                f"could not assemble {n_scenarios} scenarios solvable at "
                f"ratio {top} with placeable tight budgets")
        salt += 1
        cand = generate_scenarios(
            ScenarioSpec(n_queues, regime="heavy",
                         seed=_derive_seed(seed, 7, salt),
                         theta_range=budget_slack,
                         theta_mode="share"), 1)[0]
        try:
            solve_link_capacity(link_capacity_program(_with_ratio(cand, top)))
        except (InfeasibleConfigError, InfeasibleProgramError):
            continue
        m = len(cand.constraints)
        mu = np.asarray(cand.service_rates)
        share = mu[:m] / mu.sum()

        demand = np.zeros(m)
        alloc = np.array(share)
        for i_r, r in enumerate(probe_ratios):
            cfg_r = _with_ratio(cand, r)
            probe = simulate(RunSpec(
                cfg_r, PolicySpec("jsed"), horizon=probe_horizon,
                seed=_derive_seed(seed, 7, salt, 2, i_r)))
            demand = np.maximum(demand, np.asarray(probe.khat[:m]))
            xi = np.asarray(
                solve_link_capacity(link_capacity_program(cfg_r)).xi)
            alloc = np.maximum(alloc, (xi / xi.sum())[:m])

        j_lo = np.ceil(safety_pad * alloc * k_base).astype(int)
        j_hi = np.floor(violation_pad * demand * k_base).astype(int)
        placeable = [q for q in range(m) if j_lo[q] <= j_hi[q]]
        if int(n_tight) > 0 and not placeable:
            continue
        rng = np.random.default_rng(
            np.random.SeedSequence(_derive_seed(seed, 7, salt, 1)))
        tight = sorted(int(q) for q in rng.choice(
            placeable, size=min(int(n_tight), len(placeable)),
            replace=False)) if placeable else []
        theta = np.asarray(cand.constraints, dtype=float)
        for q in tight:
            theta[q] = ((j_lo[q] + j_hi[q]) // 2) / k_base
        try:
            cfg_top = dataclasses.replace(
                _with_ratio(cand, top), constraints=tuple(theta))
            solve_link_capacity(link_capacity_program(cfg_top))
        except (InfeasibleConfigError, InfeasibleProgramError):
            continue

        if k_window == "auto":
            binding = theta[demand >= 0.98 * theta]
            k, margin = resonant_window(binding)
        else:
            k, margin = int(k_window), float("nan")
        base.append(cfg_top)
        tight_sets.append([int(i) for i in tight])
        windows.append(int(k))
        margins.append(float(margin))

    def run_seed(i_r, s_idx):
        return _derive_seed(seed, 8, i_r, s_idx)

    families = ("jsved", "jsed", "jsedk", "jssq")
    specs = [
        RunSpec(_with_ratio(base[s_idx], ratio), pol, horizon=horizon,
                seed=run_seed(i_r, s_idx))
        for i_r, ratio in enumerate(ratios)
        for s_idx in range(len(base))
        for pol in (PolicySpec("jsved"), PolicySpec("jsed"),
                    PolicySpec("jsedk", k=windows[s_idx]),
                    PolicySpec("jssq"))]
    metrics = _map_ordered(simulate, specs, workers)

    rows = []
    for i_r, ratio in enumerate(ratios):
        for s_idx in range(len(base)):
            at = 4 * (i_r * len(base) + s_idx)
            block = dict(zip(families, metrics[at:at + 4]))
            baseline = float(block["jsved"].occupancy)
            theta = np.asarray(base[s_idx].constraints)
            for fam in families:
                m = block[fam]
                ratios_k = np.asarray(m.khat[:len(theta)]) / theta
                worst = int(np.argmax(ratios_k)) if len(theta) else -1
                rows.append((ratio, s_idx, fam, m.seed,
                             float(m.occupancy),
                             float(m.occupancy / baseline),
                             float(m.max_norm_cost),
                             float(m.max_norm_cost_hw), worst,
                             windows[s_idx] if fam == "jsedk" else 0))
    header = ("ratio", "scenario", "policy", "seed", "occupancy",
              "norm_occupancy", "max_norm_cost", "max_norm_cost_hw",
              "worst_queue", "window")
    config = {"ratios": list(ratios), "n_scenarios": int(n_scenarios),
              "n_queues": int(n_queues),
              "k_window": k_window if k_window == "auto" else int(k_window),
              "safety_pad": float(safety_pad),
              "violation_pad": float(violation_pad),
              "budget_slack": [float(t) for t in budget_slack],
              "n_tight": int(n_tight), "k_base": int(k_base),
              "probe_horizon": int(probe_horizon),
              "tight_queues": tight_sets,
              "horizon": int(horizon), "seed": int(seed),
              "policies": list(families),
              "scenario_windows": list(windows),
              "window_margins": [round(mg, 6) for mg in margins]}
    rows = tuple(rows)
    return ExperimentResult(
        "exp_policy_comparison", header, rows, tuple(base),
        _agg_comparison(header, rows, config), config,
        notes=("occupancy normalized per scenario by the jsved run at "
               "the same ratio and seed",
               "scenario configs are listed at the top grid ratio; other "
               "grid points rescale the arrival rate only",
               "tight budgets sit between the solver's probed allocation "
               "and the greedy's probed demand, on the 1/k_base lattice",
               "worst_queue is the budgeted queue with the largest "
               "dispatch-fraction-to-budget ratio in that run",
               "window is the bounded-memory length used by that jsedk "
               "run; zero elsewhere"))


def _agg_comparison(header, rows, config) -> dict:
    i_ratio = header.index("ratio")
    i_pol = header.index("policy")
    i_scen = header.index("scenario")
    i_cost = header.index("max_norm_cost")
    per_ratio = {}
    for ratio in config["ratios"]:
        block = {}
        for tag in config["policies"]:
            sub = [row for row in rows
                   if row[i_ratio] == ratio and row[i_pol] == tag]
            costs = _column(header, sub, "max_norm_cost")
            block[tag] = {
                "mean_norm_occupancy": float(np.mean(
                    _column(header, sub, "norm_occupancy"))),
                "mean_max_norm_cost": float(np.mean(costs)),
                "unsafe_fraction": float(np.mean(
                    [c > 1.0 for c in costs])),
                "runs": len(sub),
            }
        per_ratio[repr(float(ratio))] = block

    # worst cost per policy over the whole grid, and per scenario for
    # the greedy baseline: "did it break its budgets anywhere"
    policy_max = {tag: float(max(row[i_cost] for row in rows
                                 if row[i_pol] == tag))
                  for tag in config["policies"]}
    greedy_worst = {}
    for row in rows:
        if row[i_pol] == "jsed":
            s = int(row[i_scen])
            greedy_worst[s] = max(greedy_worst.get(s, 0.0),
                                  float(row[i_cost]))
    violated = sum(1 for v in greedy_worst.values() if v > 1.0)
    return {"per_ratio": per_ratio,
            "policy_max_cost": policy_max,
            "greedy_violated_scenarios": int(violated),
            "greedy_violated_fraction": (
                float(violated / len(greedy_worst)) if greedy_worst
                else float("nan"))}


# ---------------------------------------------------------------------------
# gain-floor comparison


def _scenario_gains(cfg: SystemConfig, kind: str, coeff_range,
                    level_range, seed: int) -> GainSpec:
    """Random per-queue gains with floors strictly inside capacity.

    Thresholds are each gain evaluated at a random fraction of the
    occupancy the plain capacity split would give the queue, so the
    floor-augmented program always admits a solution.
    """
    maker = {"linear": GainSpec.linear, "quadratic": GainSpec.quadratic}
    if kind not in maker:
        raise ValueError(f"gain kind must be linear or quadratic, "
                         f"got {kind!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    coeffs = rng.uniform(*coeff_range, size=cfg.n_queues)
    levels = rng.uniform(*level_range, size=cfg.n_queues)
    bare = maker[kind](coeffs, np.zeros(cfg.n_queues))
    anchor = solve_link_capacity(link_capacity_program(cfg)).targets
    thresholds = tuple(float(g(q * t)) for g, q, t
                       in zip(bare.gains, levels, anchor))
    return maker[kind](coeffs, thresholds)


def exp_generic_gain(n_scenarios=50, n_queues=10, gain_kind="quadratic",
                     coeff_range=(0.5, 2.0), level_range=(0.05, 0.10),
                     k_window=250, horizon=500_000, seed=0,
                     workers=1) -> ExperimentResult:
    """Gain-floor comparison on light-load systems.

    Every scenario carries per-queue gain floors the rate program can
    honor. The shortest-safe-queue pair steers by the floor-aware
    split; the unconstrained and window dispatchers ignore the floors,
    which is the point of the comparison. Safety here is the minimum
    normalized gain staying at or above one.

    Floor levels are deliberately modest: the delay-greedy dispatcher
    starves its least attractive queue to roughly 15 percent of the
    occupancy the capacity split would give it, so floors above
    ``level_range`` ~0.1 of the anchor would flunk the greedy pair on
    queues no reasonable policy fills either. The comparison content
    is the per-policy gain margin and the occupancy ordering, not a
    violation hunt.
    """
    scenarios = generate_scenarios(
        ScenarioSpec(n_queues, regime="light", seed=_derive_seed(seed, 9)),
        n_scenarios)
    gains_by_scenario = [
        _scenario_gains(cfg, gain_kind, coeff_range, level_range,
                        _derive_seed(seed, 10, idx))
        for idx, cfg in enumerate(scenarios)]

    specs, labels = [], []
    for s_idx, (cfg, gains) in enumerate(zip(scenarios,
                                             gains_by_scenario)):
        split = solve_generic_gain(generic_gain_program(cfg, gains), gains)
        run_seed = _derive_seed(seed, 11, s_idx)
        policies = (PolicySpec("jsed"), PolicySpec("jsedk", k=k_window),
                    PolicySpec("jssq", targets=split),
                    PolicySpec("rjssq", targets=split))
        for pol in policies:
            spec = attach_gain(RunSpec(cfg, pol, horizon=horizon,
                                       seed=run_seed), gains)
            specs.append(spec)
            labels.append((s_idx, pol.tag))
    metrics = _map_ordered(simulate, specs, workers)

    # jsed leads each scenario block and sets the occupancy baseline
    rows, baseline = [], None
    for (s_idx, tag), m in zip(labels, metrics):
        if tag == "jsed":
            baseline = float(m.occupancy)
        rows.append((s_idx, tag, m.seed, float(m.occupancy),
                     float(m.occupancy / baseline),
                     float(m.min_norm_gain), float(m.max_norm_cost),
                     int(m.fallback_events)))
    header = ("scenario", "policy", "seed", "occupancy",
              "norm_occupancy", "min_norm_gain", "max_norm_cost",
              "fallback_events")
    config = {"n_scenarios": int(n_scenarios), "n_queues": int(n_queues),
              "gain_kind": gain_kind,
              "coeff_range": [float(x) for x in coeff_range],
              "level_range": [float(x) for x in level_range],
              "k_window": int(k_window), "horizon": int(horizon),
              "seed": int(seed),
              "policies": ["jsed", f"jsedk:k={int(k_window)}", "jssq",
                           "rjssq"],
              "gains": [g.to_dict() for g in gains_by_scenario]}
    rows = tuple(rows)
    return ExperimentResult(
        "exp_generic_gain", header, rows, scenarios,
        _agg_gain(header, rows, config), config,
        notes=("occupancy normalized per scenario by the jsed run",
               "min_norm_gain >= 1 is the safety verdict; vacuous "
               "thresholds report inf"))


def _agg_gain(header, rows, config) -> dict:
    i_pol = header.index("policy")
    per_policy = {}
    for tag in config["policies"]:
        sub = [row for row in rows if row[i_pol] == tag]
        gains = _column(header, sub, "min_norm_gain")
        per_policy[tag] = {
            "mean_norm_occupancy": float(np.mean(
                _column(header, sub, "norm_occupancy"))),
            "min_norm_gain": float(np.min(gains)),
            "gain_safe_fraction": float(np.mean(
                [g >= 1.0 for g in gains])),
            "runs": len(sub),
        }
    i_s = header.index("scenario")
    occ = {(row[i_s], row[i_pol]): row[header.index("occupancy")]
           for row in rows}
    n_scen = config["n_scenarios"]
    wins = [occ[(s, "rjssq")] >= occ[(s, "jssq")] for s in range(n_scen)]
    per_policy["rjssq"]["ge_jssq_fraction"] = float(np.mean(wins))
    return {"per_policy": per_policy}


_AGGREGATORS = {
    "exp_lagrange_iterations": _agg_lagrange,
    "exp_memory_sweep": _agg_memory_sweep,
    "exp_critical_memory": _agg_critical,
    "exp_policy_comparison": _agg_comparison,
    "exp_generic_gain": _agg_gain,
}


def recompute_aggregates(result: ExperimentResult) -> dict:
    """Rebuild the aggregate block from raw rows alone.

    Drivers fill ``aggregates`` through this same table, so equality
    with ``result.aggregates`` certifies there is no hidden state.
    """
    fn = _AGGREGATORS.get(result.experiment)
    if fn is None:
        raise KeyError(f"unknown experiment id: {result.experiment!r}")
    return fn(result.header, result.rows, result.config)
