"""Multiplier-based tuning of the priced greedy policy.

The dispatch constraints enter the reward as nonnegative prices on the
constrained queues. A projected subgradient loop alternates between
estimating dispatch fractions under the current prices (by simulation)
and moving each price toward its constraint boundary. The module also
carries quadratic-potential drift diagnostics that certify the
stability story behind the priced greedy rule on recorded traces.
"""

import math
from dataclasses import dataclass

import numpy as np

from safelb._pure import _serve
from safelb.model import InfeasibleConfigError, SystemConfig, \
    is_stabilizable
from safelb.policies import PolicySpec, lagrangian_greedy_action
from safelb.sim import RunSpec, simulate

DEFAULT_TOL = 0.01


def relaxed_reward(state, action: int, multipliers,
                   cfg: SystemConfig) -> float:
    """Pre-arrival holding cost plus the price of the chosen queue.

    Sum of s_i/mu_i over all queues, plus lambda_a when the action is a
    constrained queue. With zero prices this is action-independent.
    """
    if not 0 <= action < cfg.n_queues:
        raise ValueError("action out of range")
    s = np.asarray(state, dtype=float)
    mu = np.asarray(cfg.service_rates, dtype=float)
    base = float((s / mu).sum())
    if action < len(multipliers):
        lam = float(multipliers[action])
        if lam < 0:
            raise ValueError("multipliers must be nonnegative")
        return base + lam
    return base


def dual_update(multipliers, khat, theta, step: float) -> tuple:
    """Projected subgradient step on the prices.

    lambda_i <- max(0, lambda_i + step*(khat_i - theta_i)): a violated
    constraint raises its price, a slack one lowers it until the
    projection pins it at zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    lam = np.asarray(multipliers, dtype=float)
    gap = np.asarray(khat, dtype=float) - np.asarray(theta, dtype=float)
    return tuple(float(v) for v in np.maximum(0.0, lam + step * gap))


@dataclass(frozen=True)
class DualIterationLog:
    """Trajectory of one tuning loop.

    Row t holds the prices used by iteration t's evaluation together
    with what that evaluation measured. ``unsafe`` marks iterations
    whose estimated dispatch fractions violate some constraint.
    """

    lambdas: tuple
    khats: tuple
    occupancies: tuple
    unsafe: tuple
    converged: bool
    cap: int

    @property
    def iterations(self) -> int:
        return len(self.lambdas)

    @property
    def hit_cap(self) -> bool:
        return not self.converged and self.iterations == self.cap

    @property
    def unsafe_count(self) -> int:
        return sum(1 for u in self.unsafe if u)

    @property
    def final_multipliers(self) -> tuple:
        return self.lambdas[-1]

    def to_csv(self) -> str:
        m = len(self.lambdas[0])
        cols = ["iter"]
        cols += [f"lambda_{i + 1}" for i in range(m)]
        cols += [f"khat_{i + 1}" for i in range(m)]
        cols += ["occupancy", "unsafe"]
        rows = [",".join(cols)]
        for t in range(self.iterations):
            vals = [str(t + 1)]
            vals += [repr(v) for v in self.lambdas[t]]
            vals += [repr(v) for v in self.khats[t]]
            vals += [repr(self.occupancies[t]), str(int(self.unsafe[t]))]
            rows.append(",".join(vals))
        return "\n".join(rows) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def run_primal_dual(cfg: SystemConfig, eval_horizon: int = 100_000,
                    step_scale: float = 1.0, cap: int = 50,
                    tol: float = DEFAULT_TOL, seed: int = 0,
                    penalty: float = 1.0) -> DualIterationLog:
    """Tune the prices until every constraint is met and binding.

    Each iteration simulates the priced greedy policy for
    ``eval_horizon`` arrivals under a fresh derived seed, then applies
    dual_update with step step_scale/sqrt(t). The loop stops once all
    estimated fractions are within their budgets and each budget is
    either nearly tight (within tol) or carries a zero price; slack
    constraints with zero price are settled by complementary
    slackness, so waiting for them to tighten would never end.
    """
    if not is_stabilizable(cfg):
        raise InfeasibleConfigError(
            "price tuning needs a stabilizable configuration")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    m = cfg.n_constrained
    theta = np.asarray(cfg.constraints, dtype=float)
    iter_seeds = np.random.SeedSequence(seed).generate_state(
        cap, dtype=np.uint64)
    lam = (0.0,) * m
    lambdas, khats, occs, unsafe = [], [], [], []
    converged = False
    for t in range(1, cap + 1):
        spec = RunSpec(
            cfg=cfg,
            policy=PolicySpec(variant="lagrangian", multipliers=lam,
                              penalty=penalty),
            horizon=eval_horizon, seed=int(iter_seeds[t - 1]))
        metrics = simulate(spec)
        khat = np.asarray(metrics.khat[:m])
        lambdas.append(lam)
        khats.append(tuple(float(v) for v in khat))
        occs.append(metrics.occupancy)
        unsafe.append(bool((khat > theta).any()))
        met = khat <= theta
        settled = (theta - khat <= tol) | (np.asarray(lam) == 0.0)
        if met.all() and settled.all():
            converged = True
            break
        lam = dual_update(lam, khat, theta, step_scale / math.sqrt(t))
    return DualIterationLog(lambdas=tuple(lambdas), khats=tuple(khats),
                            occupancies=tuple(occs), unsafe=tuple(unsafe),
                            converged=converged, cap=cap)


@dataclass(frozen=True)
class DriftRecord:
    """Per-slot quadratic-potential samples from one traced run.

    Slots are arrival epochs. ``potential`` holds L(s) = half the sum
    of s_i^2/mu_i at each slot (length T+1 including the final state),
    ``drift`` its per-slot increments, ``penalty`` the priced reward
    paid in each slot, ``weight`` the holding cost sum s_i/mu_i seen by
    each slot, and ``burst`` the per-slot quantity whose supremum
    bounds the drift: (arrivals^2 + departures^2 summed over queues,
    each over mu)/2. ``potential_gap`` is the largest disagreement
    between the incrementally tracked and freshly recomputed L.
    """

    potential: np.ndarray
    drift: np.ndarray
    penalty: np.ndarray
    weight: np.ndarray
    burst: np.ndarray
    occupancy: np.ndarray
    potential_gap: float
    penalty_weight: float
    final_state: tuple

    @property
    def n_slots(self) -> int:
        return len(self.drift)


def collect_drift(cfg: SystemConfig, multipliers, horizon: int,
                  seed: int, penalty: float = 1.0) -> DriftRecord:
    """Trace the priced greedy policy slot by slot.

    A compact reference loop (same service sampling as the kernels)
    that keeps per-slot bookkeeping the fast kernels do not expose.
    """
    n = cfg.n_queues
    mu = np.asarray(cfg.service_rates, dtype=float)
    xi = cfg.arrival_rate
    seq = np.random.SeedSequence(seed)
    gens = [np.random.Generator(np.random.Philox(c))
            for c in seq.spawn(n + cfg.n_constrained + 2)]
    arrival, queues = gens[0], gens[1:1 + n]
    s = np.zeros(n, dtype=np.int64)
    potential = np.empty(horizon + 1)
    drift = np.empty(horizon)
    penalty_paid = np.empty(horizon)
    weight = np.empty(horizon)
    burst = np.empty(horizon)
    occupancy = np.empty(horizon)
    l_inc = 0.0
    gap = 0.0
    potential[0] = 0.0
    for t in range(horizon):
        a = lagrangian_greedy_action(s, multipliers, cfg, penalty)
        weight[t] = float((s / mu).sum())
        occupancy[t] = float(s.sum())
        penalty_paid[t] = relaxed_reward(s, a, multipliers, cfg)
        # arrival joins queue a, then services run until the next one
        l_inc += (2 * s[a] + 1) / (2 * mu[a])
        s[a] += 1
        eta_sq = 1.0 / mu[a]
        dt = -math.log1p(-arrival.random()) / xi
        if dt > 0.0:
            for j in range(n):
                if s[j]:
                    served, _ = _serve(queues[j].random, mu[j],
                                       int(s[j]), dt)
                    if served:
                        l_inc -= (2 * s[j] - served) * served / (2 * mu[j])
                        s[j] -= served
                        eta_sq += served * served / mu[j]
        burst[t] = eta_sq / 2.0
        fresh = float((s.astype(float) ** 2 / mu).sum() / 2.0)
        gap = max(gap, abs(fresh - l_inc))
        potential[t + 1] = l_inc
        drift[t] = potential[t + 1] - potential[t]
    return DriftRecord(potential=potential, drift=drift,
                       penalty=penalty_paid, weight=weight, burst=burst,
                       occupancy=occupancy, potential_gap=gap,
                       penalty_weight=penalty,
                       final_state=tuple(int(v) for v in s))


@dataclass(frozen=True)
class DriftReport:
    """Fitted drift-bound certificate for one trace."""

    burst_bound: float
    epsilon: float
    coverage: float
    mean_drift: float
    mean_penalty: float
    mean_occupancy: float

    @property
    def passed(self) -> bool:
        return self.epsilon > 0.0 and self.coverage >= 0.99


def drift_check(record: DriftRecord, cfg: SystemConfig,
                coverage: float = 0.99) -> DriftReport:
    """Fit the largest drain rate the trace supports.

    With B-hat the empirical supremum of the per-slot burst term and
    r-bar the best average priced reward seen, finds the largest
    epsilon such that drift + V*penalty <= B-hat + V*r-bar -
    epsilon*weight on at least the requested fraction of slots. A
    stable run yields epsilon > 0; the constants are fitted, not
    asserted, because they are existential.
    """
    del cfg
    t = record.n_slots
    if t < 1000:
        raise ValueError(
            f"drift trace too short: {t} slots, need at least 1000")
    v = record.penalty_weight
    b_hat = float(record.burst.max())
    r_bar = float(record.penalty.mean())
    headroom = b_hat + v * r_bar - (record.drift + v * record.penalty)
    pos = record.weight > 0
    ratios = headroom[pos] / record.weight[pos]
    if len(ratios) == 0:
        eps = float("inf") if (headroom >= 0).all() else 0.0
        cov = float((headroom >= 0).mean())
    else:
        eps = float(np.quantile(ratios, 1.0 - coverage))
        cov = float((headroom >= eps * record.weight).mean())
    return DriftReport(burst_bound=b_hat, epsilon=eps, coverage=cov,
                       mean_drift=float(record.drift.mean()),
                       mean_penalty=r_bar,
                       mean_occupancy=float(record.occupancy.mean()))
