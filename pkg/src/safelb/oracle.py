"""Exact ground truth on small truncated instances of the dispatch chain.

The embedded chain of :mod:`safelb.model` lives on an infinite grid; capping
every queue at ``B`` jobs and folding overflow mass into the capped state
gives a finite chain whose constrained average-cost problem is a linear
program over occupation measures.  Solving that LP yields the optimal cost,
the budget usage, and an optimal policy that randomizes in at most as many
states as there are budgets.  None of this scales: the intended range is a
handful of queues and buffers, used to ground-truth the heuristic policies.

Truncation folds rather than rejects: a fold keeps every kernel row
stochastic, and the bias it introduces vanishes as ``B`` grows (the tests
measure it against untruncated simulation).  The chain is started from the
empty state wherever a start matters; under the average-cost criterion on
these chains the value is start-independent, which the tests also check.

One wrinkle needs care: dispatch decisions here price each queue almost
independently, so the LP optimum is often massively degenerate and the
simplex vertex can be a policy whose chain splits into disjoint closed
classes, mixed only at the distribution level.  ``solve_clbc`` detects
that (the chain's own stationary answer stops matching the program) and
rebuilds the policy from the zero-reduced-cost frontier, bisecting the
binding budget so policy and program agree again.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq, linprog
from scipy.sparse.linalg import LinearOperator, eigs

from .model import SystemConfig, departure_pmf
from .policies import (ActionWindow, PolicySpec, VirtualQueueState,
                       jsed_action, jsedk_decision, jssq_probabilities,
                       jsved_action, lagrangian_greedy_action)
from .rates import link_capacity_program, solve_link_capacity

MAX_STATES = 1_000_000
# extended chains are handled through a structured operator, never as a
# dense matrix, but eigensolver workspace still scales with this count
MAX_EXTENDED_STATES = 200_000

# defaults leave balance residuals near 1e-8, which the chain's mixing
# time can amplify past the re-evaluation tolerance; pin them down
_LP_OPTS = {"primal_feasibility_tolerance": 1e-10,
            "dual_feasibility_tolerance": 1e-10}


def _linprog_robust(label, **kwargs):
    """HiGHS with pinned tolerances, falling back to solver defaults.

    On rare instances the pinned 1e-10 tolerances push HiGHS into an
    Unknown status; the default tolerances then solve cleanly, and the
    consistency checks downstream still vouch for the answer.
    """
    res = linprog(method=kwargs.pop("method", "highs"),
                  options=_LP_OPTS, **kwargs)
    if res.status != 0:
        res = linprog(method="highs", options={}, **kwargs)
    if res.status != 0:
        raise RuntimeError(f"{label} failed: {res.message}")
    return res


class InfeasibleInstanceError(ValueError):
    """No stationary dispatch rule on the truncated chain meets the budgets.

    ``violated`` holds the offending constrained-queue indices and
    ``achievable`` the smallest usage any policy can reach for them (under
    the least-total-violation split).
    """

    def __init__(self, message, violated=(), achievable=()):
        super().__init__(message)
        self.violated = tuple(int(i) for i in violated)
        self.achievable = tuple(float(v) for v in achievable)


@dataclass(frozen=True, eq=False)
class TruncatedMDP:
    """Finite dispatch chain with every queue capped at ``buffer`` jobs.

    ``states`` enumerates all occupancy vectors with entries <= buffer in
    C order (last queue fastest), ``kernel[s, a, t]`` is the one-step
    probability of moving from state ``s`` to state ``t`` when the arrival
    is sent to queue ``a``, ``rewards[s, a]`` the expected drain time of
    everything present just after that dispatch, and ``costs[a, i]`` the
    budget charge to constrained queue ``i`` (1 exactly when a == i).
    """

    cfg: SystemConfig
    buffer: int
    states: np.ndarray
    kernel: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray

    @property
    def n_states(self) -> int:
        return self.states.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cfg.n_queues

    def index(self, state) -> int:
        """Position of an occupancy vector in the enumeration order."""
        s = np.asarray(state, dtype=int)
        if s.shape != (self.cfg.n_queues,):
            raise ValueError("state must have length n_queues")
        if (s < 0).any() or (s > self.buffer).any():
            raise ValueError("state outside the truncated grid")
        dims = (self.buffer + 1,) * self.cfg.n_queues
        return int(np.ravel_multi_index(tuple(s), dims))


def _queue_matrices(cap: int, mu: float, xi: float):
    """Per-queue single-step size transition matrices up to ``cap``.

    ``idle[s, s']`` covers a queue the arrival skipped: of the ``s`` jobs
    present, each may finish before the next arrival.  ``join[s, s']``
    covers the queue that received the job; the newcomer stays until the
    next arrival instant, so sizes land in 1..s+1, and the s+1 cell is
    folded back onto the cap when it would overflow.
    """
    idle = np.zeros((cap + 1, cap + 1))
    join = np.zeros((cap + 1, cap + 1))
    for s in range(cap + 1):
        pmf = departure_pmf(s, mu, xi)
        pmf = pmf / pmf.sum()  # kill float drift so joint rows stay stochastic
        for u in range(s + 1):
            idle[s, s - u] = pmf[u]
            join[s, min(s + 1 - u, cap)] += pmf[u]
    return idle, join


def build_truncated(cfg: SystemConfig, buffer: int) -> TruncatedMDP:
    """Materialize the dense truncated chain for ``cfg``.

    Guarded at (buffer+1)^N <= 1e6 enumerated states; dense kernels grow
    quadratically in that count, so practical instances are much smaller.
    """
    if buffer < 0:
        raise ValueError("buffer must be >= 0")
    n = cfg.n_queues
    n_states = (buffer + 1) ** n
    if n_states > MAX_STATES:
        raise ValueError(
            f"(buffer+1)^n_queues = {n_states} exceeds the "
            f"{MAX_STATES} state guard")
    mu = np.asarray(cfg.service_rates, dtype=float)
    xi = cfg.arrival_rate

    pairs = [_queue_matrices(buffer, mu[j], xi) for j in range(n)]
    per_action = []
    for a in range(n):
        acc = np.ones((1, 1))
        for j in range(n):
            acc = np.kron(acc, pairs[j][1] if j == a else pairs[j][0])
        per_action.append(acc)
    kernel = np.stack(per_action, axis=1)

    states = np.stack(
        np.unravel_index(np.arange(n_states), (buffer + 1,) * n),
        axis=1).astype(np.int64)
    # same float expression as model.reward: sum of s_i/mu_i plus 1/mu_a
    base = (states / mu).sum(axis=1)
    rewards = base[:, None] + 1.0 / mu[None, :]
    costs = np.eye(n)[:, :cfg.n_constrained].copy()
    return TruncatedMDP(cfg=cfg, buffer=buffer, states=states,
                        kernel=kernel, rewards=rewards, costs=costs)


@dataclass(frozen=True, eq=False)
class OccupationSolution:
    """Optimal occupation measure of the constrained average-cost LP.

    ``rho[s, a]`` is the long-run fraction of decisions taken in state s
    with action a; ``objective`` the minimal average drain-time reward;
    ``cost_values[i]`` the optimal budget usage of constrained queue i.
    ``policy[s, a]`` is the conditional rule rho(s,a)/rho(s,.) on states
    the optimum visits, filled with the greedy drain-time rule elsewhere,
    and ``randomizing`` lists the state indices where it actually mixes.
    """

    rho: np.ndarray
    objective: float
    cost_values: tuple
    policy: np.ndarray
    randomizing: tuple
    duality_gap: float
    theta: tuple


def solve_clbc(mdp: TruncatedMDP, theta=None) -> OccupationSolution:
    """Solve the budgeted dispatch problem exactly on the truncated chain.

    Minimizes the stationary average of ``rewards`` over occupation
    measures subject to balance, normalization, and per-budget caps
    ``sum_s rho(s, i) <= theta_i``.  A feasibility program runs first so
    an unattainable budget set is reported as such rather than as a
    solver failure.  The main solve uses dual simplex, whose vertex
    solutions mix in at most one state per budget.
    """
    cfg = mdp.cfg
    n_s, n_a, m = mdp.n_states, mdp.n_actions, cfg.n_constrained
    if theta is None:
        theta = cfg.constraints
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (m,):
        raise ValueError("theta must have one entry per constrained queue")
    if (theta <= 0).any():
        raise ValueError("theta entries must be positive")

    c = mdp.rewards.reshape(-1)
    # balance: mass leaving each state equals mass landing there
    occupancy_of = sp.kron(sp.eye(n_s), np.ones((1, n_a)), format="csr")
    landing = sp.csr_matrix(mdp.kernel.reshape(n_s * n_a, n_s).T)
    a_eq = sp.vstack([sp.csr_matrix(np.ones((1, n_s * n_a))),
                      occupancy_of - landing], format="csr")
    b_eq = np.zeros(n_s + 1)
    b_eq[0] = 1.0
    if m:
        cols = np.arange(n_s) * n_a
        a_ub = sp.csr_matrix(
            (np.ones(n_s * m),
             (np.repeat(np.arange(m), n_s), np.concatenate(
                 [cols + i for i in range(m)]))),
            shape=(m, n_s * n_a))
    else:
        a_ub = None

    if m:
        # phase 1: smallest total budget violation any policy can manage
        pad = sp.csr_matrix((n_s + 1, m))
        feas = linprog(
            c=np.r_[np.zeros(n_s * n_a), np.ones(m)],
            A_ub=sp.hstack([a_ub, -sp.eye(m)], format="csr"), b_ub=theta,
            A_eq=sp.hstack([a_eq, pad], format="csr"), b_eq=b_eq,
            bounds=(0, None), method="highs", options=_LP_OPTS)
        if feas.status != 0:
            raise RuntimeError(f"feasibility solve failed: {feas.message}")
        slack = feas.x[-m:]
        if feas.fun > 1e-9:
            bad = np.where(slack > 1e-9)[0]
            need = theta[bad] + slack[bad]
            raise InfeasibleInstanceError(
                "budgets unattainable on the truncated chain: queue(s) "
                f"{bad.tolist()} need at least {need.round(6).tolist()} "
                f"against theta {theta[bad].tolist()}",
                violated=bad, achievable=need)

    res = linprog(c=c, A_ub=a_ub, b_ub=theta if m else None,
                  A_eq=a_eq, b_eq=b_eq, bounds=(0, None),
                  method="highs-ds", options=_LP_OPTS)
    if res.status != 0:
        raise RuntimeError(f"LP solve failed: {res.message}")

    rho = np.clip(res.x, 0.0, None).reshape(n_s, n_a)
    cost_values = tuple(float(v) for v in rho[:, :m].sum(axis=0))
    dual = float(b_eq @ res.eqlin.marginals)
    if m:
        dual += float(theta @ res.ineqlin.marginals)
    gap = abs(float(res.fun) - dual)

    mass = rho.sum(axis=1)
    policy = np.zeros_like(rho)
    visited = mass > 1e-10
    rows = rho[visited] / mass[visited, None]
    rows[rows < 1e-9] = 0.0  # LP dust is not randomization
    policy[visited] = rows / rows.sum(axis=1, keepdims=True)
    for s in np.where(~visited)[0]:
        policy[s, jsed_action(mdp.states[s], cfg)] = 1.0

    # a degenerate vertex can split the chain into closed classes that
    # the measure mixes but no single start ever sees; when the chain's
    # own answer disagrees with the program, rebuild the policy from
    # the indifference frontier so the two agree again
    scale = max(1.0, abs(float(res.fun)))
    j_chk, k_chk = evaluate_policy_exact(mdp, policy)
    consistent = abs(j_chk - float(res.fun)) <= 1e-7 * scale
    if m and consistent:
        consistent = np.max(
            np.abs(k_chk - np.asarray(cost_values))) <= 1e-7
    if not consistent:
        policy, rho, cost_values = _frontier_policy(
            mdp, res, c, a_ub, a_eq, theta)

    randomizing = tuple(int(s) for s in np.where(
        (policy > 0).sum(axis=1) >= 2)[0])
    return OccupationSolution(rho=rho, objective=float(res.fun),
                              cost_values=cost_values, policy=policy,
                              randomizing=randomizing, duality_gap=gap,
                              theta=tuple(float(t) for t in theta))


def _reduced_costs(res, c, a_ub, a_eq) -> np.ndarray:
    """Reduced cost of every (state, action) pair at the LP optimum.

    Tries both multiplier sign conventions and keeps the combination
    that is dual feasible and vanishes on the support of the solution.
    """
    terms = [c]
    if a_ub is not None:
        terms.append(a_ub.T @ res.ineqlin.marginals)
    terms.append(a_eq.T @ res.eqlin.marginals)
    support = res.x > 1e-8
    tol = 1e-6 * max(1.0, abs(float(res.fun)))
    for s_ub in (1.0, -1.0):
        for s_eq in (1.0, -1.0):
            rc = terms[0].astype(float).copy()
            if a_ub is not None:
                rc += s_ub * terms[1]
            rc += s_eq * terms[-1]
            if rc.min() > -tol and np.abs(rc[support]).max() < tol:
                return np.maximum(rc, 0.0)
    raise RuntimeError("could not recover reduced costs from the solver")


def _frontier_policy(mdp: TruncatedMDP, res, c, a_ub, a_eq, theta):
    """Consistent optimal policy built from zero-reduced-cost actions.

    Every policy supported on the frontier satisfies J = g - lambda K,
    so once the binding budget is bisected back to theta the chain's
    stationary answer reproduces the program's optimum exactly.  Only
    a single binding budget is supported; richer degeneracy has no
    canonical one-dimensional walk.
    """
    m = len(theta)
    n_s, n_a = mdp.n_states, mdp.n_actions
    rc = _reduced_costs(res, c, a_ub, a_eq).reshape(n_s, n_a)
    # the stationary answer drifts off the optimum by at most the
    # mass-weighted reduced cost of what we admit, so admit sparingly
    frontier = rc <= 1e-8 * max(1.0, abs(float(res.fun)))
    # states the measure never visits can price every action above
    # zero; steer them toward the frontier along the cheapest action
    bare = ~frontier.any(axis=1)
    frontier[bare, np.argmin(rc[bare], axis=1)] = True

    lam = np.abs(res.ineqlin.marginals) if m else np.zeros(0)
    # cheapest-usage choice: the highest-index optimal action never
    # touches budget 0, the lowest-index one prefers it
    lo_idx = n_a - 1 - np.argmax(frontier[:, ::-1], axis=1)
    hi_idx = np.where(frontier[:, 0], 0, lo_idx)

    def chain_answer(table):
        j, k = evaluate_policy_exact(mdp, table)
        p_pi = np.einsum("sa,sat->st", table, mdp.kernel)
        return j, k, _stationary(p_pi)

    eye = np.eye(n_a)
    table = eye[lo_idx]
    j, k, w = chain_answer(table)
    binding = m == 1 and lam.size and lam[0] > 1e-9
    if binding and k[0] < theta[0] - 1e-10:
        flips = np.flatnonzero(hi_idx != lo_idx)

        def usage(prefix: int, mix: float = 0.0) -> tuple:
            t = eye[lo_idx]
            t[flips[:prefix]] = eye[hi_idx[flips[:prefix]]]
            if mix and prefix < len(flips):
                s = flips[prefix]
                t[s] = (1.0 - mix) * eye[lo_idx[s]] + mix * eye[hi_idx[s]]
            return t, *chain_answer(t)

        lo_n, hi_n = 0, len(flips)
        _, _, k_full, _ = usage(hi_n)
        if k_full[0] < theta[0] - 1e-9:
            raise RuntimeError("frontier cannot reach the binding budget")
        while hi_n - lo_n > 1:  # usage grows with the flipped prefix
            mid = (lo_n + hi_n) // 2
            _, _, k_mid, _ = usage(mid)
            if k_mid[0] >= theta[0]:
                hi_n = mid
            else:
                lo_n = mid

        def gap_at(q):
            _, _, k_q, _ = usage(lo_n, q)
            return k_q[0] - theta[0]

        if abs(gap_at(0.0)) > 1e-12:
            q_star = brentq(gap_at, 0.0, 1.0, xtol=1e-13)
        else:
            q_star = 0.0
        table, j, k, w = usage(lo_n, q_star)
    elif m == 1 and lam.size and lam[0] > 1e-9 and k[0] > theta[0] + 1e-9:
        raise RuntimeError("frontier cannot reach the binding budget")
    elif m > 1:
        over = np.asarray(k) > theta + 1e-9
        if over.any():
            raise RuntimeError(
                "degenerate optimum with several binding budgets has no "
                "one-dimensional frontier walk; perturb the rates")

    if abs(j - float(res.fun)) > 5e-7 * max(1.0, abs(float(res.fun))):
        raise RuntimeError("frontier policy failed to reproduce the optimum")
    rho = w[:, None] * table
    return table, rho, tuple(float(v) for v in k)


def _stationary(p: np.ndarray, tol: float = 1e-12,
                max_sweeps: int = 1_000_000) -> np.ndarray:
    """Stationary row vector of a dense stochastic matrix.

    Direct linear solve first (one balance row swapped for normalization);
    falls back to power iteration when that system is singular or its
    answer fails the residual check, warning if the sweep budget runs out
    before the iterates settle, as happens on non-ergodic chains.
    """
    n = p.shape[0]
    lhs = p.T - np.eye(n)
    lhs[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        w = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        w = None
    if w is not None and w.min() > -1e-9:
        w = np.clip(w, 0.0, None)
        w /= w.sum()
        if np.abs(w @ p - w).max() < 1e-10:
            return w
    w = np.full(n, 1.0 / n)
    for _ in range(max_sweeps):
        w_next = w @ p
        w_next /= w_next.sum()
        if np.abs(w_next - w).max() < tol:
            return w_next
        w = w_next
    warnings.warn("stationary distribution did not settle; the chain "
                  "looks non-ergodic under this policy", RuntimeWarning)
    return w


def _coerce_table(mdp: TruncatedMDP, policy) -> np.ndarray:
    """Accept an action index per state or an (S, A) row distribution."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    table = np.asarray(policy)
    if table.ndim == 1:
        if table.shape != (n_s,):
            raise ValueError("need one action per state")
        if table.min() < 0 or table.max() >= n_a:
            raise ValueError("action index out of range")
        return np.eye(n_a)[table.astype(int)]
    table = table.astype(float)
    if table.shape != (n_s, n_a):
        raise ValueError("policy table must be (n_states, n_actions)")
    if table.min() < -1e-12:
        raise ValueError("policy probabilities must be nonnegative")
    if np.abs(table.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("policy rows must sum to one")
    return table


def evaluate_policy_exact(mdp: TruncatedMDP, policy):
    """Long-run reward and budget usage of a fixed rule on the chain.

    ``policy`` is either an action index per state or a full (S, A) row
    distribution.  Returns ``(J, K)``: the stationary average drain-time
    reward and the per-budget usage vector.
    """
    table = _coerce_table(mdp, policy)
    p_pi = np.einsum("sa,sat->st", table, mdp.kernel)
    w = _stationary(p_pi)
    j = float(w @ (table * mdp.rewards).sum(axis=1))
    k = w @ table[:, :mdp.cfg.n_constrained]
    return j, k


def stationary_occupancy(mdp: TruncatedMDP, policy) -> float:
    """Long-run mean number in system under a fixed rule.

    This is the plain head count (what a simulation's per-epoch occupancy
    estimates), not the drain-time objective ``J``.
    """
    table = _coerce_table(mdp, policy)
    p_pi = np.einsum("sa,sat->st", table, mdp.kernel)
    w = _stationary(p_pi)
    return float(w @ mdp.states.sum(axis=1))


def _race_matrices(cap: int, rate: float, xi: float):
    """Companion-queue single-step transition matrices up to ``cap``.

    A companion serves one job at a time at ``rate`` while the next
    arrival's Exp(xi) clock runs, so each completion beats the clock
    independently with odds q = rate / (rate + xi): out of ``v`` jobs,
    ``u < v`` finish with probability q^u (1 - q) and all ``v`` with
    q^v.  ``join`` admits the newcomer before the race; its overflow
    cell folds onto the cap, mirroring :func:`_queue_matrices`.
    """
    q = rate / (rate + xi)

    def race_pmf(size):
        pmf = q ** np.arange(size + 1) * (1.0 - q)
        pmf[size] = q ** size  # the queue empties: no survivor to lose the race
        return pmf

    idle = np.zeros((cap + 1, cap + 1))
    join = np.zeros((cap + 1, cap + 1))
    for v in range(cap + 1):
        idle[v, v - np.arange(v + 1)] = race_pmf(v)
        lands = np.minimum(v + 1 - np.arange(v + 2), cap)
        np.add.at(join, (v, lands), race_pmf(v + 1))
    return idle, join


def _structured_stationary(g_mats, m_mats, act) -> np.ndarray:
    """Stationary (grid, memory) weight matrix of a product-form chain.

    The chain moves from (g, w) by looking up the deterministic action
    ``a = act[g, w]`` and then stepping both coordinates independently
    through ``g_mats[a]`` and ``m_mats[a]``.  That structure keeps the
    transfer operator cheap (three small matrix products per action),
    so the principal left eigenvector comes from ARPACK on the
    operator; a damped power sweep from the empty corner, which is
    where every run starts, covers the rare case ARPACK rejects.
    """
    n_s, n_mem = act.shape
    n_ext = n_s * n_mem
    masks = [act == a for a in range(len(g_mats))]
    g_t = [np.ascontiguousarray(g.T) for g in g_mats]

    def transfer(flat):
        w = flat.reshape(n_s, n_mem)
        out = np.zeros_like(w)
        for a, mask in enumerate(masks):
            out += g_t[a] @ np.where(mask, w, 0.0) @ m_mats[a]
        return out.reshape(-1)

    def settled(flat):
        if flat.min() < -1e-9:
            return None
        flat = np.clip(flat, 0.0, None)
        flat = flat / flat.sum()
        if np.abs(transfer(flat) - flat).max() >= 1e-10:
            return None
        return flat

    if n_ext >= 8:
        op = LinearOperator((n_ext, n_ext), matvec=transfer, dtype=float)
        try:
            vals, vecs = eigs(op, k=1, which="LM", maxiter=100 * n_ext)
        except Exception:
            vals = None
        if vals is not None and abs(vals[0] - 1.0) < 1e-8:
            vec = vecs[:, 0]
            total = vec.sum()
            if abs(total) > 1e-12:
                vec = vec / total  # rotates the arbitrary phase out
                if np.abs(vec.imag).max() < 1e-10:
                    good = settled(vec.real)
                    if good is not None:
                        return good.reshape(n_s, n_mem)

    flat = np.zeros(n_ext)
    flat[0] = 1.0
    for _ in range(200_000):
        nxt = 0.5 * (transfer(flat) + flat)  # damping kills periodicity
        nxt /= nxt.sum()
        if np.abs(nxt - flat).max() < 1e-13:
            flat = nxt
            break
        flat = nxt
    else:
        warnings.warn("extended stationary distribution did not settle; "
                      "the chain looks non-ergodic under this rule",
                      RuntimeWarning)
    return np.clip(flat, 0.0, None).reshape(n_s, n_mem) / flat.sum()


def evaluate_memory_exact(mdp: TruncatedMDP, policy: PolicySpec, *,
                          virtual_buffer: int = 80):
    """Long-run reward and budget usage of a memory-keeping rule.

    Counterpart of :func:`evaluate_policy_exact` for the two variants
    that carry per-run state, which gets folded into the chain itself:
    the ordered window of the last ``k`` dispatches for ``jsedk``, the
    companion occupancies for ``jsved`` (each capped at
    ``virtual_buffer`` jobs, folding overflow like the grid does).  The
    memory coordinate steps through its own per-action kernel alongside
    the grid kernel, composed factor by factor exactly as
    :func:`build_truncated` composes queues, and ``(J, K)`` is read off
    the extended stationary law, so the numbers are directly comparable
    with :func:`solve_clbc` on the same instance.
    """
    cfg = mdp.cfg
    n, m = cfg.n_queues, cfg.n_constrained
    g_mats = [np.ascontiguousarray(mdp.kernel[:, a, :]) for a in range(n)]

    if policy.variant == "jsedk":
        k = policy.k
        n_mem = n ** k
        if mdp.n_states * n_mem > MAX_EXTENDED_STATES:
            raise ValueError(
                f"window chain needs {mdp.n_states * n_mem} extended "
                f"states, over the {MAX_EXTENDED_STATES} guard")
        # windows are base-n words, oldest dispatch in the highest digit;
        # pushing action a drops that digit and appends a at the bottom
        digits = np.stack(
            np.unravel_index(np.arange(n_mem), (n,) * k), axis=1)
        tail = np.arange(n_mem) % (n ** (k - 1))
        m_mats = []
        for a in range(n):
            step = np.zeros((n_mem, n_mem))
            step[np.arange(n_mem), tail * n + a] = 1.0
            m_mats.append(step)
        window = ActionWindow(k, n)
        window.length = k  # steady state: short windows are transient
        act = np.empty((mdp.n_states, n_mem), dtype=np.int64)
        for w_idx in range(n_mem):
            window.counts = np.bincount(digits[w_idx], minlength=n)
            for g in range(mdp.n_states):
                act[g, w_idx] = jsedk_decision(mdp.states[g], window, cfg)[0]
    elif policy.variant == "jsved":
        if virtual_buffer < 1:
            raise ValueError("virtual_buffer must be >= 1")
        rates = VirtualQueueState.fresh(cfg).rates
        dims = (virtual_buffer + 1,) * m
        n_mem = int(np.prod(dims)) if m else 1
        if mdp.n_states * n_mem > MAX_EXTENDED_STATES:
            raise ValueError(
                f"companion chain needs {mdp.n_states * n_mem} extended "
                f"states, over the {MAX_EXTENDED_STATES} guard")
        pairs = [_race_matrices(virtual_buffer, rates[i], cfg.arrival_rate)
                 for i in range(m)]
        m_mats = []
        for a in range(n):
            acc = np.ones((1, 1))
            for i in range(m):
                acc = np.kron(acc, pairs[i][1] if a == i else pairs[i][0])
            m_mats.append(acc)
        occ = (np.stack(np.unravel_index(np.arange(n_mem), dims), axis=1)
               if m else np.zeros((1, 0), dtype=int))
        act = np.empty((mdp.n_states, n_mem), dtype=np.int64)
        for v_idx in range(n_mem):
            vq = VirtualQueueState(occ[v_idx], rates)
            for g in range(mdp.n_states):
                act[g, v_idx] = jsved_action(mdp.states[g], vq, cfg)
    else:
        raise ValueError(f"policy {policy.variant!r} is memoryless; pair "
                         "policy_table with evaluate_policy_exact instead")

    weight = _structured_stationary(g_mats, m_mats, act)
    j = float((weight * np.take_along_axis(mdp.rewards, act, axis=1)).sum())
    k_usage = np.array([float(weight[act == i].sum()) for i in range(m)])
    return j, k_usage


def policy_table(mdp: TruncatedMDP, policy: PolicySpec) -> np.ndarray:
    """Stationary (S, A) table of a memoryless policy on the grid.

    Windowed and virtual-queue variants carry per-run state and have no
    such table; asking for one raises.
    """
    cfg = mdp.cfg
    n_a = mdp.n_actions
    if policy.variant == "jsed":
        idx = [jsed_action(s, cfg) for s in mdp.states]
        return np.eye(n_a)[idx]
    if policy.variant == "lagrangian":
        idx = [lagrangian_greedy_action(s, policy.multipliers, cfg,
                                        policy.penalty)
               for s in mdp.states]
        return np.eye(n_a)[idx]
    if policy.variant in ("jssq", "rjssq"):
        targets = policy.targets
        if targets is None:
            targets = solve_link_capacity(link_capacity_program(cfg))
        if policy.variant == "rjssq":
            xi = np.asarray(targets.xi, dtype=float)
            return np.tile(xi / xi.sum(), (mdp.n_states, 1))
        return np.stack([jssq_probabilities(s, targets)
                         for s in mdp.states])
    raise ValueError(f"policy {policy.variant!r} keeps per-run memory; "
                     "it has no stationary state table")
