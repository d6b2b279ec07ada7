"""Pure-Python event-loop kernel.

Reference implementation of the per-arrival simulation step. The
compiled twin in ``safelb._core`` mirrors this module draw for draw:
same stream layout, same draw order, same tie-breaking, so a run is
bit-identical under either kernel. Change one, change both.

Stream layout (one counter-based generator each, spawned from the run
seed): stream 0 inter-arrival gaps, streams 1..N per-queue services,
streams N+1..N+M virtual-queue services, stream N+M+1 policy
randomization. Exponentials are always drawn as -log1p(-u)/rate.

Per-epoch draw order: policy uniform (randomized policies only), then
the arrival gap, then queue services 0..N-1, then virtual services
0..M-1. A zero-length gap skips every service draw.

Dynamics 0 serves every queue inside the shared inter-arrival gap
with one server working the jobs in sequence (the physical system).
Dynamics 1 samples the embedded analytic chain instead: each queue
with jobs to lose draws its own Exp(arrival-rate) window from its own
stream, every job present before the arrival races it with one
Exp(service-rate) draw apiece, and the job that just arrived is held
until the next arrival instant. That is exactly the factorized
next-state law of the closed-form kernel; there is no shared clock,
so time-weighted metrics stay zero. Draw order per queue: window
first, then one exponential per racing job.
"""

from math import log1p

import numpy as np

POLICY_CODES = {"jsed": 0, "jsved": 1, "jsedk": 2, "jssq": 3,
                "rjssq": 4, "lagrangian": 5}


def _serve(random, rate, size, dt):
    """Sequential exponential services inside one window.

    Returns (jobs served, occupancy-area removed by those departures).
    Draw pattern: one exponential, then one more per service completed
    short of draining the queue, so a drained queue stops drawing.
    """
    served = 0
    removed = 0.0
    t_used = -log1p(-random()) / rate
    while t_used <= dt and served < size:
        served += 1
        removed += dt - t_used
        if served == size:
            break
        t_used += -log1p(-random()) / rate
    return served, removed


def run_chain(policy_code, dynamics, n, m, mu, xi, theta, k,
              virtual_rates, targets, xi_raw, fallback_probs, prices,
              horizon, warmup, cadence, init_state, init_virtual,
              explosion_bound, n_batches, hist_cap, bitgens):
    """Run `horizon` arrival epochs and return raw accumulators.

    See module docstring for the stream/draw contract. `bitgens` is the
    spawned generator list laid out as documented there.
    """
    arrival = np.random.Generator(bitgens[0]).random
    queue_random = [np.random.Generator(bitgens[1 + j]).random
                    for j in range(n)]
    virt_random = [np.random.Generator(bitgens[1 + n + i]).random
                   for i in range(m)]
    policy_random = np.random.Generator(bitgens[1 + n + m]).random

    s = [int(v) for v in init_state]
    virt = [int(v) for v in init_virtual]
    total = sum(s)
    max_total = total

    # jsedk ring buffer
    win_buf = [0] * k if k else []
    win_head = 0
    win_len = 0
    win_counts = [0] * n

    n_post = horizon - warmup
    nb = min(n_batches, n_post)
    batch_size = n_post // nb
    counts = np.zeros(n, dtype=np.int64)
    batch_counts = np.zeros((nb, n), dtype=np.int64)
    batch_epochs = np.zeros(nb, dtype=np.int64)
    batch_occ_sum = np.zeros(nb, dtype=np.float64)
    batch_occ_n = np.zeros(nb, dtype=np.int64)
    batch_area = np.zeros(nb, dtype=np.float64)
    batch_dur = np.zeros(nb, dtype=np.float64)
    hist = np.zeros((n, hist_cap + 1), dtype=np.int64)
    area_q = np.zeros(n, dtype=np.float64)
    epoch_occ_sum = 0.0
    epoch_occ_n = 0
    duration = 0.0
    fallback_events = 0
    exploded = 0

    for t in range(horizon):
        if total > max_total:
            max_total = total

        # --- policy decision on the pre-arrival state ---
        fell_back = False
        if policy_code == 0:  # jsed
            a = 0
            best = s[0] / mu[0]
            for i in range(1, n):
                sc = s[i] / mu[i]
                if sc < best:
                    best = sc
                    a = i
        elif policy_code == 1:  # jsved
            a = 0
            best = (virt[0] / virtual_rates[0]) if m > 0 else s[0] / mu[0]
            for i in range(1, n):
                sc = (virt[i] / virtual_rates[i]) if i < m else s[i] / mu[i]
                if sc < best:
                    best = sc
                    a = i
        elif policy_code == 2:  # jsedk
            horizon_w = win_len if win_len < k else k
            a = -1
            best = np.inf
            for i in range(n):
                if i < m and not (win_counts[i] < horizon_w * theta[i]):
                    continue
                sc = s[i] / mu[i]
                if sc < best:
                    best = sc
                    a = i
            if a < 0:  # every queue constrained and over budget
                fell_back = True
                a = 0
                best = win_counts[0] / (k * theta[0])
                for i in range(1, m):
                    sc = win_counts[i] / (k * theta[i])
                    if sc < best:
                        best = sc
                        a = i
        elif policy_code == 3:  # jssq
            u = policy_random()
            mass = 0.0
            any_below = False
            for i in range(n):
                if s[i] < targets[i]:
                    any_below = True
                    mass += xi_raw[i]
            a = n - 1
            acc = 0.0
            if any_below and mass > 0.0:
                for i in range(n - 1):
                    if s[i] < targets[i]:
                        acc += xi_raw[i] / mass
                    if u < acc:
                        a = i
                        break
            else:
                for i in range(n - 1):
                    acc += fallback_probs[i]
                    if u < acc:
                        a = i
                        break
        elif policy_code == 4:  # rjssq
            u = policy_random()
            a = n - 1
            acc = 0.0
            for i in range(n - 1):
                acc += fallback_probs[i]
                if u < acc:
                    a = i
                    break
        else:  # lagrangian greedy
            a = 0
            best = (s[0] + 1.0) / mu[0] + prices[0]
            for i in range(1, n):
                sc = (s[i] + 1.0) / mu[i] + prices[i]
                if sc < best:
                    best = sc
                    a = i

        # --- post-warmup metrics on the pre-arrival state ---
        post = t - warmup
        if post >= 0:
            b = post // batch_size
            if b >= nb:
                b = nb - 1
            counts[a] += 1
            batch_counts[b, a] += 1
            batch_epochs[b] += 1
            if fell_back:
                fallback_events += 1
            if post % cadence == 0:
                epoch_occ_sum += total
                epoch_occ_n += 1
                batch_occ_sum[b] += total
                batch_occ_n[b] += 1
                for j in range(n):
                    sj = s[j]
                    hist[j, sj if sj < hist_cap else hist_cap] += 1

        # --- arrival joins, window/virtual bookkeeping ---
        s[a] += 1
        total += 1
        if k:
            if win_len == k:
                win_counts[win_buf[win_head]] -= 1
            else:
                win_len += 1
            win_buf[win_head] = a
            win_counts[a] += 1
            win_head += 1
            if win_head == k:
                win_head = 0
        if policy_code == 1 and a < m:
            virt[a] += 1

        # --- services until the next arrival ---
        if dynamics == 0:
            dt = -log1p(-arrival()) / xi
            if dt > 0.0:
                epoch_area = 0.0
                for j in range(n):
                    size = s[j]
                    if size:
                        served, removed = _serve(queue_random[j], mu[j],
                                                 size, dt)
                        s[j] = size - served
                        total -= served
                    else:
                        removed = 0.0
                    if post >= 0:
                        gained = size * dt - removed
                        area_q[j] += gained
                        epoch_area += gained
                if policy_code == 1:
                    for i in range(m):
                        size = virt[i]
                        if size:
                            served, _ = _serve(virt_random[i],
                                               virtual_rates[i], size, dt)
                            virt[i] = size - served
                if post >= 0:
                    duration += dt
                    batch_area[b] += epoch_area
                    batch_dur[b] += dt
        else:
            for j in range(n):
                size = s[j] - 1 if j == a else s[j]  # newcomer is held
                if size > 0:
                    w = -log1p(-queue_random[j]()) / xi
                    served = 0
                    for _ in range(size):
                        if -log1p(-queue_random[j]()) / mu[j] <= w:
                            served += 1
                    s[j] -= served
                    total -= served
            if policy_code == 1:
                for i in range(m):
                    size = virt[i] - 1 if i == a else virt[i]
                    if size > 0:
                        w = -log1p(-virt_random[i]()) / xi
                        served = 0
                        for _ in range(size):
                            if (-log1p(-virt_random[i]())
                                    / virtual_rates[i] <= w):
                                served += 1
                        virt[i] -= served

        if total > explosion_bound:
            exploded = 1

    return {
        "counts": counts,
        "fallback_events": fallback_events,
        "epoch_occ_sum": epoch_occ_sum,
        "epoch_occ_n": epoch_occ_n,
        "area_q": area_q,
        "duration": duration,
        "batch_counts": batch_counts,
        "batch_epochs": batch_epochs,
        "batch_occ_sum": batch_occ_sum,
        "batch_occ_n": batch_occ_n,
        "batch_area": batch_area,
        "batch_dur": batch_dur,
        "hist": hist,
        "exploded": exploded,
        "max_total": max_total,
        "final_state": np.asarray(s, dtype=np.int64),
        "final_virtual": np.asarray(virt, dtype=np.int64),
    }
