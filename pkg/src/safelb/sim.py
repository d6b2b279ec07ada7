"""Event-driven simulation of the dispatch system at arrival epochs.

A run draws Poisson arrivals, lets a policy place each job, and plays
exponential services between arrivals (exact sequential sampling, no
time discretization). Metrics come in two flavors that PASTA ties
together: time-weighted integrals over continuous time and per-epoch
samples of the state each arrival finds. Identical seeds give
bit-identical metrics under either kernel.
"""

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from safelb import _kernel
from safelb._pure import POLICY_CODES
from safelb.model import SystemConfig, effective_rates
from safelb.policies import PolicySpec
from safelb.rates import GainSpec, TargetRates, link_capacity_program, \
    solve_link_capacity

DYNAMICS = {"sequential": 0, "embedded": 1}


@dataclass(frozen=True)
class RunSpec:
    """One seeded simulation run.

    ``warmup`` arrivals are discarded from every metric (default 10% of
    the horizon). ``cadence`` thins occupancy sampling: state snapshots
    are taken every cadence-th post-warmup arrival, while dispatch
    counts always cover every arrival. ``dynamics`` picks the system:
    "sequential" is the physical one, a single server per queue working
    jobs one at a time inside the shared inter-arrival window;
    "embedded" samples the closed-form transition law instead (each
    queue gets a private window, every job present before the arrival
    races it independently, and the newcomer is held to the next
    arrival instant). The embedded mode has no common clock, so its
    time-weighted metrics come back NaN.
    """

    cfg: SystemConfig
    policy: PolicySpec
    horizon: int
    seed: int
    warmup: int = None
    cadence: int = 1
    gains: GainSpec = None
    dynamics: str = "sequential"
    explosion_bound: float = 1e6
    init_state: tuple = None
    n_batches: int = 32
    hist_cap: int = 8192

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.warmup is None:
            object.__setattr__(self, "warmup", self.horizon // 10)
        if not 0 <= self.warmup < self.horizon:
            raise ValueError("need 0 <= warmup < horizon")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.dynamics not in DYNAMICS:
            raise ValueError(f"unknown dynamics: {self.dynamics!r}")
        if self.gains is not None and len(self.gains) != self.cfg.n_queues:
            raise ValueError("gain spec length must match queue count")
        if self.init_state is not None:
            state = tuple(int(v) for v in self.init_state)
            if len(state) != self.cfg.n_queues or any(v < 0 for v in state):
                raise ValueError("bad initial state")
            object.__setattr__(self, "init_state", state)
        if self.n_batches < 1:
            raise ValueError("n_batches must be >= 1")
        if self.hist_cap < 1:
            raise ValueError("hist_cap must be >= 1")


@dataclass(frozen=True)
class RunMetrics:
    """Post-warmup averages of one run.

    ``occupancy`` is the time-weighted total across queues;
    ``epoch_occupancy`` averages the totals each arrival found (equal
    in expectation by PASTA). ``khat`` are dispatch fractions summing
    to one. Normalized cost is max khat_i/theta_i over constrained
    queues; normalized gain is min avg_gain_i/threshold_i over queues
    with positive gain thresholds. Both are NaN when the quantity does
    not apply (no constrained queues, no gain spec attached), except
    that an attached gain spec whose thresholds are all zero reports
    +inf: there is nothing to violate. Half-widths are 95% batch-means
    confidence intervals.
    """

    seed: int
    policy: str
    load_ratio: float
    occupancy: float
    epoch_occupancy: float
    per_queue_occupancy: tuple
    khat: tuple
    max_norm_cost: float
    min_norm_gain: float
    avg_gain: tuple
    per_queue_epoch_occupancy: tuple
    fallback_events: int
    occupancy_hw: float
    epoch_occupancy_hw: float
    khat_hw: tuple
    max_norm_cost_hw: float
    duration: float
    n_epochs: int
    exploded: bool
    max_total_occupancy: int
    final_state: tuple

    CSV_BASE = ("seed", "policy", "load_ratio", "occupancy")
    CSV_TAIL = ("max_norm_cost", "min_norm_gain", "fallback_events")


def attach_gain(spec: RunSpec, gains: GainSpec) -> RunSpec:
    """Copy of the run spec that also accumulates per-queue gains."""
    return dataclasses.replace(spec, gains=gains)


def _resolve_targets(spec: RunSpec) -> TargetRates:
    if spec.policy.targets is not None:
        return spec.policy.targets
    return solve_link_capacity(link_capacity_program(spec.cfg))


def _halfwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    if len(x) < 2:
        return float("nan")
    return float(1.96 * x.std(ddof=1) / np.sqrt(len(x)))


def simulate(spec: RunSpec, kernel: str = None) -> RunMetrics:
    """Run one seeded simulation and reduce it to RunMetrics.

    ``kernel`` forces 'pure' or 'compiled'; default is the fastest
    available. Emits a warning (and flags the metrics) if total
    occupancy ever exceeds the explosion bound.
    """
    cfg = spec.cfg
    n, m = cfg.n_queues, cfg.n_constrained
    mu = np.asarray(cfg.service_rates, dtype=np.float64)
    theta = np.asarray(cfg.constraints, dtype=np.float64)
    code = POLICY_CODES[spec.policy.variant]

    virtual_rates = np.zeros(m, dtype=np.float64)
    targets = np.zeros(n, dtype=np.float64)
    xi_raw = np.zeros(n, dtype=np.float64)
    fallback_probs = np.zeros(n, dtype=np.float64)
    prices = np.zeros(n, dtype=np.float64)
    k = 0
    if spec.policy.variant == "jsved":
        virtual_rates = effective_rates(cfg)[:m].astype(np.float64)
    elif spec.policy.variant == "jsedk":
        k = spec.policy.k
    elif spec.policy.variant in ("jssq", "rjssq"):
        t = _resolve_targets(spec)
        if len(t.xi) != n:
            raise ValueError("target rates length must match queue count")
        xi_raw = np.asarray(t.xi, dtype=np.float64)
        targets = np.asarray(t.targets, dtype=np.float64)
        fallback_probs = xi_raw / float(xi_raw.sum())
    elif spec.policy.variant == "lagrangian":
        lam = np.zeros(n)
        lam[:len(spec.policy.multipliers)] = spec.policy.multipliers
        prices = spec.policy.penalty * lam

    init_state = np.zeros(n, dtype=np.int64)
    if spec.init_state is not None:
        init_state = np.asarray(spec.init_state, dtype=np.int64)
    init_virtual = np.zeros(m, dtype=np.int64)

    seq = np.random.SeedSequence(spec.seed)
    bitgens = [np.random.Philox(child) for child in seq.spawn(n + m + 2)]

    run = _kernel.get_kernel(kernel)
    raw = run(code, DYNAMICS[spec.dynamics], n, m, mu, float(cfg.arrival_rate),
              theta, k, virtual_rates, targets, xi_raw, fallback_probs,
              prices, spec.horizon, spec.warmup, spec.cadence, init_state,
              init_virtual, float(spec.explosion_bound), spec.n_batches,
              spec.hist_cap, bitgens)

    n_post = spec.horizon - spec.warmup
    counts = raw["counts"]
    khat = counts / float(n_post)
    duration = raw["duration"]
    area_q = raw["area_q"]
    if duration > 0.0:
        occupancy = float(area_q.sum() / duration)
        per_queue = tuple(float(v) for v in area_q / duration)
    else:
        occupancy = float("nan")
        per_queue = (float("nan"),) * n
    epoch_occupancy = float(raw["epoch_occ_sum"] / raw["epoch_occ_n"])

    if m:
        norm = khat[:m] / theta
        i_star = int(np.argmax(norm))
        max_norm_cost = float(norm[i_star])
    else:
        i_star = -1
        max_norm_cost = float("nan")

    # batch-means confidence half-widths
    epochs_b = raw["batch_epochs"]
    khat_hw = tuple(_halfwidth(raw["batch_counts"][:, i] / epochs_b)
                    for i in range(n))
    dur_b = raw["batch_dur"]
    if duration > 0.0 and (dur_b > 0).all():
        occupancy_hw = _halfwidth(raw["batch_area"] / dur_b)
    else:
        occupancy_hw = float("nan")
    occ_n_b = raw["batch_occ_n"]
    live = occ_n_b > 0
    epoch_occupancy_hw = _halfwidth(raw["batch_occ_sum"][live] /
                                    occ_n_b[live])
    if m:
        max_norm_cost_hw = float(khat_hw[i_star] / theta[i_star])
    else:
        max_norm_cost_hw = float("nan")

    hist = raw["hist"]
    sampled = int(raw["epoch_occ_n"])
    levels = np.arange(spec.hist_cap + 1, dtype=np.float64)
    per_queue_epoch = []
    for j in range(n):
        if hist[j, spec.hist_cap] > 0:
            per_queue_epoch.append(float("nan"))
        else:
            per_queue_epoch.append(float(hist[j] @ levels / sampled))

    avg_gain = ()
    min_norm_gain = float("nan")
    if spec.gains is not None:
        gbar = []
        for j, g in enumerate(spec.gains.gains):
            if hist[j, spec.hist_cap] > 0:
                warnings.warn(
                    f"queue {j} occupancy overflowed the histogram cap "
                    f"{spec.hist_cap}; gain average unavailable")
                gbar.append(float("nan"))
                continue
            vals = np.array([float(g(v)) for v in
                             range(spec.hist_cap)], dtype=np.float64)
            gbar.append(float(hist[j, :spec.hist_cap] @ vals / sampled))
        avg_gain = tuple(gbar)
        ratios = [c / thr for c, thr in zip(gbar, spec.gains.thresholds)
                  if thr > 0]
        # no positive threshold: nothing to violate, trivially safe
        min_norm_gain = float(np.min(ratios)) if ratios else float("inf")

    exploded = bool(raw["exploded"])
    if exploded:
        warnings.warn(
            f"unstable run: total occupancy exceeded "
            f"{spec.explosion_bound:g} (policy {spec.policy.tag}, "
            f"seed {spec.seed})")

    return RunMetrics(
        seed=spec.seed,
        policy=spec.policy.tag,
        load_ratio=cfg.load_ratio,
        occupancy=occupancy,
        epoch_occupancy=epoch_occupancy,
        per_queue_occupancy=per_queue,
        khat=tuple(float(v) for v in khat),
        max_norm_cost=max_norm_cost,
        min_norm_gain=min_norm_gain,
        avg_gain=avg_gain,
        per_queue_epoch_occupancy=tuple(per_queue_epoch),
        fallback_events=int(raw["fallback_events"]),
        occupancy_hw=occupancy_hw,
        epoch_occupancy_hw=epoch_occupancy_hw,
        khat_hw=khat_hw,
        max_norm_cost_hw=max_norm_cost_hw,
        duration=float(duration),
        n_epochs=n_post,
        exploded=exploded,
        max_total_occupancy=int(raw["max_total"]),
        final_state=tuple(int(v) for v in raw["final_state"]),
    )


@dataclass(frozen=True)
class RunEnsemble:
    """Replicated runs of one spec, ordered by seed."""

    runs: tuple

    def values(self, name: str) -> np.ndarray:
        return np.asarray([getattr(r, name) for r in self.runs], dtype=float)

    def mean(self, name: str) -> float:
        return float(self.values(name).mean())

    def std(self, name: str) -> float:
        v = self.values(name)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    def quantile(self, name: str, q) -> np.ndarray:
        return np.quantile(self.values(name), q)

    @property
    def khat_matrix(self) -> np.ndarray:
        return np.asarray([r.khat for r in self.runs], dtype=float)


def replicate(spec: RunSpec, n_reps: int, seeds=None,
              kernel: str = None) -> RunEnsemble:
    """Independent runs of the same spec under distinct seeds.

    Default seeds are spec.seed, spec.seed+1, ... Runs execute and
    reduce in ascending seed order so ensembles are reproducible
    regardless of caller-side ordering.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    if seeds is None:
        seeds = [spec.seed + i for i in range(n_reps)]
    seeds = sorted(int(s) for s in seeds)
    if len(seeds) != n_reps:
        raise ValueError("seed list length must equal n_reps")
    if len(set(seeds)) != n_reps:
        raise ValueError("seeds must be distinct")
    runs = tuple(simulate(dataclasses.replace(spec, seed=s), kernel=kernel)
                 for s in seeds)
    return RunEnsemble(runs=runs)


def csv_header(n_queues: int) -> str:
    cols = list(RunMetrics.CSV_BASE)
    cols += [f"khat_{i + 1}" for i in range(n_queues)]
    cols += list(RunMetrics.CSV_TAIL)
    return ",".join(cols)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def csv_row(r: RunMetrics) -> str:
    vals = [r.seed, r.policy, r.load_ratio, r.occupancy]
    vals += list(r.khat)
    vals += [r.max_norm_cost, r.min_norm_gain, r.fallback_events]
    return ",".join(_fmt(v) for v in vals)


def write_csv(path, metrics, n_queues: int) -> None:
    """One row per run; stable column set and float formatting so a
    rerun with the same seeds is byte-identical."""
    rows = [csv_header(n_queues)]
    rows += [csv_row(r) for r in metrics]
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
