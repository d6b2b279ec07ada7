"""Single-step analytic model for a bank of parallel exponential queues.

State is observed at arrival instants: one dispatcher routes each arriving job
to one of ``n_queues`` queues, the first ``n_constrained`` of which carry an
access-cost budget.  Everything in this module is exact arithmetic on that
embedded chain; simulation lives in :mod:`safelb.sim`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
import yaml


class InfeasibleConfigError(ValueError):
    """Raised when no dispatch rule can meet the budgets at this arrival rate."""


@dataclass(frozen=True)
class SystemConfig:
    """Immutable description of one system instance.

    Args:
        n_queues: number of parallel queues, N >= 1.
        n_constrained: number of budgeted queues M, 0 <= M <= N; the budgeted
            queues are always the first M indices.
        arrival_rate: rate of the dispatcher's Poisson arrival stream.
        service_rates: per-queue exponential service rates, length N.
        constraints: per-budgeted-queue caps on the long-run fraction of
            arrivals admitted, length M, each in (0, 1].
        allow_unstable: skip the stability check (stress/probe configs only).
    """

    n_queues: int
    n_constrained: int
    arrival_rate: float
    service_rates: tuple[float, ...]
    constraints: tuple[float, ...]
    allow_unstable: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "service_rates", tuple(float(m) for m in self.service_rates))
        object.__setattr__(self, "constraints", tuple(float(t) for t in self.constraints))
        if self.n_queues < 1:
            raise ValueError("n_queues must be >= 1")
        if not 0 <= self.n_constrained <= self.n_queues:
            raise ValueError("n_constrained must lie in [0, n_queues]")
        if len(self.service_rates) != self.n_queues:
            raise ValueError("service_rates must have length n_queues")
        if len(self.constraints) != self.n_constrained:
            raise ValueError("constraints must have length n_constrained")
        if self.arrival_rate <= 0:
            raise ValueError("arrival_rate must be positive")
        if any(m <= 0 for m in self.service_rates):
            raise ValueError("service rates must be positive")
        if any(not 0 < t <= 1 for t in self.constraints):
            raise ValueError("constraints must lie in (0, 1]")
        if not self.allow_unstable and not is_stabilizable(self):
            total = float(np.sum(effective_rates(self)))
            raise InfeasibleConfigError(
                f"no stabilizing dispatch rule exists: effective capacity "
                f"{total:.6g} must strictly exceed arrival rate {self.arrival_rate:.6g}"
            )

    # -- serialization: a flat key/value document with arrays ----------------

    def to_dict(self) -> dict:
        return {
            "n_queues": self.n_queues,
            "n_constrained": self.n_constrained,
            "arrival_rate": float(self.arrival_rate),
            "service_rates": [float(m) for m in self.service_rates],
            "constraints": [float(t) for t in self.constraints],
        }

    @classmethod
    def from_dict(cls, doc: dict, allow_unstable: bool = False) -> "SystemConfig":
        missing = {"n_queues", "n_constrained", "arrival_rate", "service_rates",
                   "constraints"} - set(doc)
        if missing:
            raise ValueError(f"config document missing fields: {sorted(missing)}")
        return cls(
            n_queues=int(doc["n_queues"]),
            n_constrained=int(doc["n_constrained"]),
            arrival_rate=float(doc["arrival_rate"]),
            service_rates=tuple(doc["service_rates"]),
            constraints=tuple(doc["constraints"]),
            allow_unstable=allow_unstable,
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path, allow_unstable: bool = False) -> "SystemConfig":
        with open(path) as fh:
            doc = yaml.safe_load(fh)
        return cls.from_dict(doc, allow_unstable=allow_unstable)

    @property
    def load_ratio(self) -> float:
        return self.arrival_rate / float(np.sum(self.service_rates))


def effective_rates(cfg: SystemConfig) -> np.ndarray:
    """Per-queue service capacity usable by any budget-respecting dispatcher.

    A queue capped at fraction theta_i of a rate-Xi arrival stream can never
    drain faster than Xi * theta_i on average, so its usable rate is
    min(Xi * theta_i, mu_i); unbudgeted queues keep their full rate.
    """
    mu = np.asarray(cfg.service_rates, dtype=float)
    out = mu.copy()
    m = cfg.n_constrained
    if m:
        theta = np.asarray(cfg.constraints, dtype=float)
        out[:m] = np.minimum(cfg.arrival_rate * theta, mu[:m])
    return out


def is_stabilizable(cfg: SystemConfig) -> bool:
    """True iff the arrival rate is strictly below the total effective capacity."""
    return cfg.arrival_rate < float(np.sum(effective_rates(cfg)))


def departure_prob(u: int, size: int, mu: float, xi: float) -> float:
    """Probability that exactly ``u`` of ``size`` jobs finish before the next arrival.

    Each of the ``size`` jobs present carries an independent Exp(mu) remaining
    service time and the arrival clock is Exp(xi).  Integrating the binomial
    survival profile against the arrival density gives

        xi * C(size, u) * sum_{m=0..u} C(u, m) (-1)^m / (mu*(size-u+m) + xi)

    The alternating sum cancels catastrophically in floats once ``size`` is a
    few dozen, so terms are accumulated in exact rational arithmetic and only
    the final value is rounded.  Supported range: size <= 10_000.

    Returns 0.0 for u > size.
    """
    if u < 0 or size < 0:
        raise ValueError("u and size must be nonnegative")
    if mu <= 0 or xi <= 0:
        raise ValueError("rates must be positive")
    if u > size:
        return 0.0
    mu_f = Fraction(mu)
    xi_f = Fraction(xi)
    total = Fraction(0)
    comb = math.comb
    for m in range(u + 1):
        term = Fraction(comb(u, m), 1) / (mu_f * (size - u + m) + xi_f)
        total += term if m % 2 == 0 else -term
    return float(xi_f * comb(size, u) * total)


def departure_pmf(size: int, mu: float, xi: float) -> np.ndarray:
    """Vector of departure_prob(u, size, mu, xi) for u = 0..size."""
    return np.array([departure_prob(u, size, mu, xi) for u in range(size + 1)])


def transition_prob(cfg: SystemConfig, state: Sequence[int], action: int,
                    next_state: Sequence[int]) -> float:
    """One-step probability of the embedded chain under dispatch ``action``.

    The arriving job joins queue ``action`` and both it and the next arrival
    bracket one inter-arrival interval; the joined queue must keep the new job
    until the next arrival instant, so its factor is evaluated at the
    pre-arrival size with one extra departure slot:

        p(s' | s, a) = phat(s_a - s'_a + 1; s_a) * prod_{j != a} phat(s_j - s'_j; s_j)
    """
    s = np.asarray(state, dtype=int)
    s_next = np.asarray(next_state, dtype=int)
    if s.shape != (cfg.n_queues,) or s_next.shape != (cfg.n_queues,):
        raise ValueError("state vectors must have length n_queues")
    if (s < 0).any() or (s_next < 0).any():
        raise ValueError("occupancies must be nonnegative")
    if not 0 <= action < cfg.n_queues:
        raise ValueError("action out of range")
    prob = 1.0
    for j in range(cfg.n_queues):
        departures = int(s[j]) - int(s_next[j]) + (1 if j == action else 0)
        if departures < 0:
            return 0.0
        prob *= departure_prob(departures, int(s[j]), cfg.service_rates[j],
                               cfg.arrival_rate)
        if prob == 0.0:
            return 0.0
    return prob


def reward(cfg: SystemConfig, state: Sequence[int], action: int) -> float:
    """Expected time to drain every job present just after the dispatch."""
    s = np.asarray(state, dtype=float)
    if not 0 <= action < cfg.n_queues:
        raise ValueError("action out of range")
    mu = np.asarray(cfg.service_rates, dtype=float)
    return float(np.sum(s / mu) + 1.0 / mu[action])


def access_cost(cfg: SystemConfig, queue: int, action: int) -> float:
    """Per-decision cost charged to ``queue``: 1 iff the job was sent there."""
    if not 0 <= queue < cfg.n_queues or not 0 <= action < cfg.n_queues:
        raise ValueError("index out of range")
    return 1.0 if queue == action else 0.0
