"""Dispatch policies.

Every policy maps the observable state to the queue that receives the
arriving job. Some carry private state: a set of virtual queues whose
stability encodes the dispatch-fraction constraints, or a sliding
window of recent actions whose counts implement a hard budget. All
deterministic policies break score ties by lowest queue index so runs
replay exactly.

Queue indices are 0-based throughout; the first ``n_constrained``
queues are the constrained ones.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from safelb.model import SystemConfig, effective_rates
from safelb.rates import TargetRates

_VARIANTS = ("jsed", "jsved", "jsedk", "jssq", "rjssq", "lagrangian")


def _exp_draw(rng, rate: float) -> float:
    # inverse-CDF form shared with the simulation kernels so identical
    # uniform streams give identical event times everywhere
    return -math.log1p(-rng.random()) / rate


@dataclass(frozen=True)
class PolicySpec:
    """Tagged policy selector plus the parameters that variant needs.

    ``targets`` may be left unset for jssq/rjssq; the simulation layer
    solves them from the config when missing.  ``multipliers`` are the
    per-constrained-queue price vector of the greedy baseline and
    ``penalty`` its occupancy weight.
    """

    variant: str
    k: int = 0
    targets: TargetRates = None
    multipliers: tuple = ()
    penalty: float = 1.0

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown policy variant: {self.variant!r}")
        object.__setattr__(self, "multipliers",
                           tuple(float(x) for x in self.multipliers))
        if self.variant == "jsedk" and self.k < 1:
            raise ValueError("jsedk needs a window size k >= 1")
        if any(lam < 0 for lam in self.multipliers):
            raise ValueError("multipliers must be nonnegative")
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")

    @property
    def tag(self) -> str:
        if self.variant == "jsedk":
            return f"jsedk:k={self.k}"
        if self.variant == "lagrangian" and self.penalty != 1.0:
            return f"lagrangian:v={self.penalty:g}"
        return self.variant

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        """Parse CLI-style tags: ``jsed``, ``jsedk:k=250``,
        ``lagrangian:lambda=0.5,0.2:v=2`` or ``lagrangian:<yaml-file>``
        where the file holds ``multipliers`` and optional ``penalty``.
        """
        parts = text.strip().split(":")
        variant, args = parts[0].lower(), parts[1:]
        kwargs = {}
        for seg in args:
            if "=" not in seg:
                with open(seg) as fh:
                    doc = yaml.safe_load(fh)
                kwargs["multipliers"] = tuple(doc["multipliers"])
                if "penalty" in doc:
                    kwargs["penalty"] = float(doc["penalty"])
                continue
            key, val = seg.split("=", 1)
            key = key.lower()
            if key == "k":
                kwargs["k"] = int(val)
            elif key in ("v", "penalty"):
                kwargs["penalty"] = float(val)
            elif key in ("lambda", "multipliers"):
                kwargs["multipliers"] = tuple(
                    float(x) for x in val.split(",") if x)
            else:
                raise ValueError(f"unknown policy argument: {key}")
        return cls(variant=variant, **kwargs)


class VirtualQueueState:
    """Simulated companion queues, one per constrained real queue.

    Each runs at the throttled rate min(arrival_rate * theta_i, mu_i);
    keeping them stable keeps the real dispatch fractions within their
    budgets.
    """

    __slots__ = ("occupancy", "rates")

    def __init__(self, occupancy, rates):
        self.occupancy = np.asarray(occupancy, dtype=np.int64).copy()
        self.rates = np.asarray(rates, dtype=float).copy()
        if self.occupancy.shape != self.rates.shape:
            raise ValueError("occupancy/rates length mismatch")
        if (self.occupancy < 0).any():
            raise ValueError("virtual occupancies must be nonnegative")

    @classmethod
    def fresh(cls, cfg: SystemConfig) -> "VirtualQueueState":
        m = cfg.n_constrained
        return cls(np.zeros(m, dtype=np.int64), effective_rates(cfg)[:m])


class ActionWindow:
    """Ring buffer of the last k dispatch decisions with running counts."""

    __slots__ = ("k", "buf", "head", "length", "counts")

    def __init__(self, k: int, n_queues: int):
        if k < 1:
            raise ValueError("window size must be >= 1")
        self.k = k
        self.buf = np.zeros(k, dtype=np.int64)
        self.head = 0
        self.length = 0
        self.counts = np.zeros(n_queues, dtype=np.int64)

    def push(self, action: int) -> None:
        if self.length == self.k:
            self.counts[self.buf[self.head]] -= 1
        else:
            self.length += 1
        self.buf[self.head] = action
        self.counts[action] += 1
        self.head = (self.head + 1) % self.k

    def recount(self) -> np.ndarray:
        """Counts rebuilt from the raw buffer (bookkeeping cross-check)."""
        fresh = np.zeros_like(self.counts)
        if self.length < self.k:
            start = (self.head - self.length) % self.k
            idx = [(start + j) % self.k for j in range(self.length)]
            actions = self.buf[idx]
        else:
            actions = self.buf
        for a in actions:
            fresh[a] += 1
        return fresh


def jsed_action(state, cfg: SystemConfig) -> int:
    """Queue with the smallest expected drain time s_i/mu_i."""
    s = np.asarray(state, dtype=float)
    return int(np.argmin(s / np.asarray(cfg.service_rates)))


def jsved_action(state, vq: VirtualQueueState, cfg: SystemConfig) -> int:
    """Shortest expected delay where constrained queues are judged by
    their virtual counterparts instead of their real occupancy."""
    m = cfg.n_constrained
    s = np.asarray(state, dtype=float)
    mu = np.asarray(cfg.service_rates, dtype=float)
    scores = s / mu
    if m:
        scores = scores.copy()
        scores[:m] = vq.occupancy / vq.rates
    return int(np.argmin(scores))


def jsved_update(vq: VirtualQueueState, action: int, dt: float,
                 rng) -> VirtualQueueState:
    """Advance the virtual queues across one inter-arrival gap.

    The dispatched queue's virtual twin admits one job first, then each
    busy virtual queue serves jobs one at a time at its own rate for dt
    time units (exact single-server dynamics, sampled sequentially).
    Mutates and returns ``vq``.
    """
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    m = len(vq.occupancy)
    if 0 <= action < m:
        vq.occupancy[action] += 1
    if dt == 0.0:
        return vq
    for i in range(m):
        size = int(vq.occupancy[i])
        if size == 0:
            continue
        served = 0
        t_used = _exp_draw(rng, vq.rates[i])
        while t_used <= dt and served < size:
            served += 1
            if served == size:
                break
            t_used += _exp_draw(rng, vq.rates[i])
        vq.occupancy[i] = size - served
    return vq


def jsedk_eligible(w: ActionWindow, cfg: SystemConfig) -> np.ndarray:
    """Safe-set mask: unconstrained queues always; constrained queue i
    while its window count stays strictly below its share of the window.

    Until the window has filled, the current length stands in for k, so
    the budget is enforced from the very first dispatch.
    """
    n, m = cfg.n_queues, cfg.n_constrained
    mask = np.ones(n, dtype=bool)
    horizon = w.length if w.length < w.k else w.k
    for i in range(m):
        mask[i] = w.counts[i] < horizon * cfg.constraints[i]
    return mask


def jsedk_decision(state, w: ActionWindow, cfg: SystemConfig,
                   k: int = None) -> tuple:
    """JSED restricted to the window-budget safe set.

    Returns (action, fell_back). fell_back is only True in the
    fully-constrained corner case (every queue constrained and every
    budget exhausted), where the least-saturated queue is picked so the
    arrival still lands somewhere; callers surface the count.
    """
    del k  # window size lives in w; kept for signature compatibility
    s = np.asarray(state, dtype=float)
    mu = np.asarray(cfg.service_rates, dtype=float)
    mask = jsedk_eligible(w, cfg)
    if mask.any():
        scores = np.where(mask, s / mu, np.inf)
        return int(np.argmin(scores)), False
    theta = np.asarray(cfg.constraints, dtype=float)
    saturation = w.counts[:cfg.n_constrained] / (w.k * theta)
    return int(np.argmin(saturation)), True


def jsedk_action(state, w: ActionWindow, cfg: SystemConfig,
                 k: int = None) -> int:
    return jsedk_decision(state, w, cfg, k)[0]


def jssq_probabilities(state, t: TargetRates) -> np.ndarray:
    """Dispatch distribution: below-target queues split the mass in
    proportion to their solved rates; if none is below target (or the
    below-target set carries zero rate) every queue does."""
    s = np.asarray(state, dtype=float)
    xi = np.asarray(t.xi, dtype=float)
    targets = np.asarray(t.targets, dtype=float)
    below = s < targets
    if below.any():
        mass = float(xi[below].sum())
        if mass > 0.0:
            p = np.where(below, xi, 0.0)
            return p / mass
    return xi / float(xi.sum())


def _sample_index(p: np.ndarray, rng) -> int:
    u = rng.random()
    acc = 0.0
    for i in range(len(p) - 1):
        acc += p[i]
        if u < acc:
            return i
    return len(p) - 1


def jssq_action(state, t: TargetRates, cfg: SystemConfig, rng) -> int:
    """Sample from jssq_probabilities with a single uniform draw."""
    del cfg
    return _sample_index(jssq_probabilities(state, t), rng)


def randomized_jssq_action(t: TargetRates, rng) -> int:
    """State-independent split proportional to the solved rates."""
    xi = np.asarray(t.xi, dtype=float)
    return _sample_index(xi / float(xi.sum()), rng)


def lagrangian_greedy_action(state, multipliers, cfg: SystemConfig,
                             penalty: float = 1.0) -> int:
    """Greedy minimizer of post-arrival drain time plus priced access.

    Scores (s_a+1)/mu_a + penalty*lambda_a with lambda zero-padded over
    unconstrained queues; penalty=1 recovers the plain priced rule.
    """
    s = np.asarray(state, dtype=float)
    mu = np.asarray(cfg.service_rates, dtype=float)
    lam = np.zeros(cfg.n_queues)
    m = len(multipliers)
    if m > cfg.n_queues:
        raise ValueError("more multipliers than queues")
    lam[:m] = multipliers
    scores = (s + 1.0) / mu + penalty * lam
    return int(np.argmin(scores))
