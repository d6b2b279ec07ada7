"""Per-queue arrival-rate programs and their water-filling solver.

The programs minimize total expected occupancy sum_i xi_i/(mu_i - xi_i)
over nonnegative rate splits with a fixed total, under per-queue boxes:
upper caps encode dispatch-fraction limits, lower floors encode minimum
average-activity requirements obtained by inverting a gain function.

The objective is separable and strictly convex, so the KKT conditions
reduce to a single scalar water level nu: every queue sits at
xi_i = clip(mu_i - sqrt(mu_i/nu), floor, cap), and nu is found by
bisection on the monotone total. verify_kkt re-derives the certificate
from scratch for any candidate solution.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import yaml

from safelb.model import SystemConfig, effective_rates

# closed-constraint stand-in for the strict inequalities xi < mu and
# gain > threshold; see link_capacity_program / gain_floor
STRICTNESS = 1e-6

_SUM_TOL = 1e-10
_MAX_BISECT = 400


class InfeasibleProgramError(ValueError):
    """No rate split satisfies the box and total-rate constraints."""


@dataclass(frozen=True)
class RateProgram:
    """Box-constrained occupancy-minimization instance."""

    cfg: SystemConfig
    caps: tuple
    floors: tuple
    margin: float

    def __post_init__(self):
        object.__setattr__(self, "caps", tuple(float(c) for c in self.caps))
        object.__setattr__(self, "floors",
                           tuple(float(f) for f in self.floors))
        n = self.cfg.n_queues
        if len(self.caps) != n or len(self.floors) != n:
            raise ValueError("caps/floors must have length n_queues")
        mu = self.cfg.service_rates
        for i in range(n):
            if not 0 <= self.floors[i] <= self.caps[i] < mu[i]:
                raise ValueError(
                    f"queue {i}: need 0 <= floor <= cap < mu, got "
                    f"floor={self.floors[i]}, cap={self.caps[i]}, mu={mu[i]}")


@dataclass(frozen=True)
class GainSpec:
    """Per-queue nondecreasing convex gain functions with thresholds.

    ``gains[i]`` maps an average occupancy level to a gain value;
    ``thresholds[i]`` is the level the long-run average gain must reach.
    Convexity and monotonicity are spot-checked on a sample grid at
    construction; kind/coefficients are retained when built from the
    shipped presets so the spec can round-trip through files.
    """

    gains: tuple
    thresholds: tuple
    kind: str = field(default="custom", compare=False)
    coefficients: tuple = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "thresholds",
                           tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "gains", tuple(self.gains))
        if len(self.gains) != len(self.thresholds):
            raise ValueError("gains and thresholds must have equal length")
        xs = np.linspace(0.0, 50.0, 26)
        for i, g in enumerate(self.gains):
            ys = np.array([float(g(x)) for x in xs])
            steps = np.diff(ys)
            if (steps < -1e-9).any():
                raise ValueError(f"gain {i} is not nondecreasing")
            if (np.diff(steps) < -1e-9).any():
                raise ValueError(f"gain {i} is not convex")

    def __len__(self):
        return len(self.gains)

    @classmethod
    def linear(cls, coefficients: Sequence[float],
               thresholds: Sequence[float]) -> "GainSpec":
        coeffs = tuple(float(a) for a in coefficients)
        return cls(gains=tuple(_LinearGain(a) for a in coeffs),
                   thresholds=tuple(thresholds), kind="linear",
                   coefficients=coeffs)

    @classmethod
    def quadratic(cls, coefficients: Sequence[float],
                  thresholds: Sequence[float]) -> "GainSpec":
        coeffs = tuple(float(a) for a in coefficients)
        return cls(gains=tuple(_QuadraticGain(a) for a in coeffs),
                   thresholds=tuple(thresholds), kind="quadratic",
                   coefficients=coeffs)

    def to_dict(self) -> dict:
        if self.kind not in ("linear", "quadratic"):
            raise ValueError("only preset gain specs serialize")
        return {"kind": self.kind,
                "coefficients": list(self.coefficients),
                "thresholds": list(self.thresholds)}

    @classmethod
    def from_dict(cls, doc: dict) -> "GainSpec":
        for key in ("kind", "coefficients", "thresholds"):
            if key not in doc:
                raise ValueError(f"gain spec missing field: {key}")
        maker = {"linear": cls.linear, "quadratic": cls.quadratic}.get(
            doc["kind"])
        if maker is None:
            raise ValueError(f"unknown gain kind: {doc['kind']}")
        return maker(doc["coefficients"], doc["thresholds"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path) -> "GainSpec":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


class _LinearGain:
    def __init__(self, a):
        self.a = float(a)

    def __call__(self, x):
        return self.a * x


class _QuadraticGain:
    def __init__(self, a):
        self.a = float(a)

    def __call__(self, x):
        return self.a * x * x


@dataclass(frozen=True)
class TargetRates:
    """Solved per-queue arrival rates and their implied occupancy targets."""

    xi: tuple
    targets: tuple

    def __post_init__(self):
        object.__setattr__(self, "xi", tuple(float(x) for x in self.xi))
        object.__setattr__(self, "targets",
                           tuple(float(t) for t in self.targets))
        if len(self.xi) != len(self.targets):
            raise ValueError("xi and targets must have equal length")

    @property
    def total(self) -> float:
        return float(sum(self.xi))

    def to_dict(self) -> dict:
        return {"xi": list(self.xi), "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, doc: dict) -> "TargetRates":
        for key in ("xi", "targets"):
            if key not in doc:
                raise ValueError(f"target rates missing field: {key}")
        return cls(xi=tuple(doc["xi"]), targets=tuple(doc["targets"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path) -> "TargetRates":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def expected_occupancy(xi, mu) -> float:
    """Total steady-state occupancy of independent servers fed at xi."""
    xi = np.asarray(xi, dtype=float)
    mu = np.asarray(mu, dtype=float)
    return float(np.sum(xi / (mu - xi)))


def link_capacity_program(cfg: SystemConfig, margin: float = None
                          ) -> RateProgram:
    """Build the capped program: constrained queues cannot exceed their
    dispatch-fraction budget, unconstrained queues only respect stability.

    The constrained-queue cap margin defaults to 1% but shrinks
    automatically when the feasibility slack is thin (near saturation a
    fixed 1% would make the program infeasible even though the config is
    stabilizable).
    """
    mu = np.asarray(cfg.service_rates, dtype=float)
    m = cfg.n_constrained
    eff = effective_rates(cfg)[:m]
    cap_free = mu[m:] * (1.0 - STRICTNESS)
    if margin is None:
        slack = float(eff.sum() + cap_free.sum() - cfg.arrival_rate)
        if m == 0 or slack <= 0.0:
            margin = 0.01
        else:
            margin = min(0.01, 0.5 * slack / float(eff.sum()))
            margin = max(margin, 1e-12)
    caps = np.concatenate([eff * (1.0 - margin), cap_free])
    return RateProgram(cfg=cfg, caps=tuple(caps),
                       floors=(0.0,) * cfg.n_queues, margin=float(margin))


def gain_floor(gain: Callable[[float], float], threshold: float,
               mu: float) -> float:
    """Smallest arrival rate whose steady-state occupancy meets a gain
    threshold; the strict '>' is closed by a relative STRICTNESS bump.

    Inverts gain(L) >= threshold for the occupancy level L by bisection
    (the gain is nondecreasing), then maps L back to a rate via
    xi = mu*L/(1+L).
    """
    target = threshold * (1.0 + STRICTNESS)
    if float(gain(0.0)) >= target:
        return 0.0
    lo, hi = 0.0, 1.0
    expansions = 0
    while float(gain(hi)) < target:
        hi *= 2.0
        expansions += 1
        if expansions > 60:
            raise InfeasibleProgramError(
                f"gain never reaches threshold {threshold}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if float(gain(mid)) >= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
    level = hi
    return mu * level / (1.0 + level)


def generic_gain_program(cfg: SystemConfig, gains: GainSpec,
                         margin: float = None) -> RateProgram:
    """Link-capacity program plus activity floors from gain inversion."""
    base = link_capacity_program(cfg, margin=margin)
    mu = cfg.service_rates
    if len(gains) != cfg.n_queues:
        raise ValueError("gain spec must cover every queue")
    floors = tuple(
        gain_floor(gains.gains[i], gains.thresholds[i], mu[i])
        for i in range(cfg.n_queues))
    for i, (lo, hi) in enumerate(zip(floors, base.caps)):
        if lo > hi:
            raise InfeasibleProgramError(
                f"queue {i}: activity floor {lo:.6g} exceeds cap {hi:.6g}")
    return RateProgram(cfg=cfg, caps=base.caps, floors=floors,
                       margin=base.margin)


def _waterfill(mu, floors, caps, nu):
    ideal = mu - np.sqrt(mu / nu)
    return np.clip(ideal, floors, caps)


def _solve_box(cfg, floors, caps) -> TargetRates:
    mu = np.asarray(cfg.service_rates, dtype=float)
    floors = np.asarray(floors, dtype=float)
    caps = np.asarray(caps, dtype=float)
    total = cfg.arrival_rate
    cap_sum = float(caps.sum())
    floor_sum = float(floors.sum())
    if total >= cap_sum:
        raise InfeasibleProgramError(
            f"total rate {total:.6g} exceeds cap budget {cap_sum:.6g} "
            f"(slack {cap_sum - total:.3g})")
    if floor_sum > total:
        raise InfeasibleProgramError(
            f"activity floors demand {floor_sum:.6g} but only {total:.6g} "
            f"arrives")
    # bracket the water level: below nu_lo everything clips to its floor,
    # above nu_hi everything clips to its cap
    grad_at = lambda x: mu / (mu - x) ** 2
    nu_lo = float(np.min(grad_at(floors))) * 0.5
    nu_hi = float(np.max(grad_at(caps))) * 2.0
    for _ in range(200):
        if float(_waterfill(mu, floors, caps, nu_lo).sum()) <= total:
            break
        nu_lo *= 0.25
    for _ in range(200):
        if float(_waterfill(mu, floors, caps, nu_hi).sum()) >= total:
            break
        nu_hi *= 4.0
    xi = None
    for _ in range(_MAX_BISECT):
        nu = 0.5 * (nu_lo + nu_hi)
        xi = _waterfill(mu, floors, caps, nu)
        gap = float(xi.sum()) - total
        if abs(gap) <= _SUM_TOL:
            break
        if gap < 0:
            nu_lo = nu
        else:
            nu_hi = nu
    if abs(float(xi.sum()) - total) > _SUM_TOL:
        raise RuntimeError("water-level bisection failed to close the sum")
    targets = xi / (mu - xi)
    return TargetRates(xi=tuple(xi), targets=tuple(targets))


def solve_link_capacity(prog: RateProgram) -> TargetRates:
    """Optimal rate split under caps alone (floors of the program apply)."""
    return _solve_box(prog.cfg, prog.floors, prog.caps)


def solve_generic_gain(prog: RateProgram, gains: GainSpec) -> TargetRates:
    """Optimal rate split with gain-derived floors.

    The floors may already be baked into ``prog`` (generic_gain_program);
    passing gains here recomputes them so a bare capped program can be
    combined with a gain spec in one call.
    """
    enriched = generic_gain_program(prog.cfg, gains, margin=prog.margin)
    floors = np.maximum(enriched.floors, prog.floors)
    return _solve_box(prog.cfg, tuple(floors), prog.caps)


def targets_from_rates(xi, cfg: SystemConfig) -> TargetRates:
    """Occupancy targets L_i = xi_i/(mu_i - xi_i) for given rates."""
    xi = np.asarray(xi, dtype=float)
    mu = np.asarray(cfg.service_rates, dtype=float)
    if xi.shape != mu.shape:
        raise ValueError("rate vector length mismatch")
    if (xi < 0).any() or (xi >= mu).any():
        raise ValueError("rates must satisfy 0 <= xi_i < mu_i")
    return TargetRates(xi=tuple(xi), targets=tuple(xi / (mu - xi)))


@dataclass(frozen=True)
class KKTReport:
    """Certificate for a candidate rate split."""

    passed: bool
    max_residual: float
    stationarity_residual: float
    feasibility_residual: float
    water_level: float


def verify_kkt(t: TargetRates, prog: RateProgram, tol: float = 1e-8
               ) -> KKTReport:
    """First-order certificate, re-derived without trusting the solver.

    Interior queues must share one water level (gradient equality);
    floor-active queues must have gradient >= that level, cap-active
    ones <= it; the split must land in the box and sum to the total.
    All residuals are relative to the water level / total rate.
    """
    mu = np.asarray(prog.cfg.service_rates, dtype=float)
    xi = np.asarray(t.xi, dtype=float)
    floors = np.asarray(prog.floors, dtype=float)
    caps = np.asarray(prog.caps, dtype=float)
    grad = mu / (mu - xi) ** 2

    box_tol = 1e-9 * np.maximum(1.0, caps)
    at_floor = xi <= floors + box_tol
    at_cap = xi >= caps - box_tol
    interior = ~(at_floor | at_cap)

    feas = max(
        abs(float(xi.sum()) - prog.cfg.arrival_rate) /
        max(1.0, prog.cfg.arrival_rate),
        float(np.max(np.maximum(floors - xi, 0.0), initial=0.0)),
        float(np.max(np.maximum(xi - caps, 0.0), initial=0.0)),
    )

    if interior.any():
        nu = float(np.median(grad[interior]))
    else:
        # all queues pinned: any level between the largest cap-side and
        # smallest floor-side gradient certifies; take the midpoint
        lo_side = grad[at_floor & ~at_cap]
        hi_side = grad[at_cap & ~at_floor]
        lo = float(lo_side.min()) if lo_side.size else np.inf
        hi = float(hi_side.max()) if hi_side.size else 0.0
        if np.isinf(lo):
            nu = hi if hi > 0 else 1.0
        elif hi == 0.0:
            nu = lo
        else:
            nu = 0.5 * (min(lo, hi) + max(lo, hi))
    stat = 0.0
    if interior.any():
        stat = float(np.max(np.abs(grad[interior] - nu))) / nu
    if at_floor.any():
        stat = max(stat, float(np.max(nu - grad[at_floor], initial=0.0)) / nu)
    if at_cap.any():
        stat = max(stat, float(np.max(grad[at_cap] - nu, initial=0.0)) / nu)

    worst = max(stat, feas)
    return KKTReport(passed=worst < tol, max_residual=worst,
                     stationarity_residual=stat, feasibility_residual=feas,
                     water_level=nu)
