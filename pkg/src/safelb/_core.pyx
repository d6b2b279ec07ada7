# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled event-loop kernel. Mirrors safelb._pure exactly, draw for draw.

The pure module is the reference: stream layout, per-epoch draw order,
tie-breaking and float expression shapes are documented there and must
stay in lockstep so both kernels produce bit-identical runs.
"""
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport INFINITY, log1p
from libc.stdlib cimport free, malloc

import numpy as np

cimport numpy as cnp
from numpy.random cimport bitgen_t

cnp.import_array()


cdef bitgen_t *_bitgen(object bit_generator):
    return <bitgen_t *> PyCapsule_GetPointer(bit_generator.capsule, "BitGenerator")


def _stream_probe(object bit_generator, int n):
    """Draw n doubles straight from a BitGenerator (parity check helper)."""
    cdef bitgen_t *rng = _bitgen(bit_generator)
    cdef int i
    out = []
    for i in range(n):
        out.append(rng.next_double(rng.state))
    return out


cdef inline double _exp(bitgen_t *rng, double rate) noexcept:
    return -log1p(-rng.next_double(rng.state)) / rate


cdef inline long long _serve(bitgen_t *rng, double rate, long long size,
                             double dt, double *removed) noexcept:
    # sequential services; drained queues stop drawing (see _pure._serve)
    cdef long long served = 0
    cdef double t_used = _exp(rng, rate)
    removed[0] = 0.0
    while t_used <= dt and served < size:
        served += 1
        removed[0] += dt - t_used
        if served == size:
            break
        t_used += _exp(rng, rate)
    return served


def run_chain(int policy_code, int dynamics, int n, int m,
              double[::1] mu, double xi, double[::1] theta, int k,
              double[::1] virtual_rates, double[::1] targets,
              double[::1] xi_raw, double[::1] fallback_probs,
              double[::1] prices, long long horizon, long long warmup,
              long long cadence, cnp.int64_t[::1] init_state,
              cnp.int64_t[::1] init_virtual, double explosion_bound,
              int n_batches, int hist_cap, list bitgens):
    """Compiled twin of safelb._pure.run_chain; same arguments, same
    return dict, same random streams."""
    cdef long long n_post = horizon - warmup
    cdef int nb = n_batches if n_batches < n_post else <int> n_post
    cdef long long batch_size = n_post // nb

    state_arr = np.array(init_state, dtype=np.int64)
    virt_arr = np.array(init_virtual, dtype=np.int64)
    counts_arr = np.zeros(n, dtype=np.int64)
    batch_counts_arr = np.zeros((nb, n), dtype=np.int64)
    batch_epochs_arr = np.zeros(nb, dtype=np.int64)
    batch_occ_sum_arr = np.zeros(nb, dtype=np.float64)
    batch_occ_n_arr = np.zeros(nb, dtype=np.int64)
    batch_area_arr = np.zeros(nb, dtype=np.float64)
    batch_dur_arr = np.zeros(nb, dtype=np.float64)
    hist_arr = np.zeros((n, hist_cap + 1), dtype=np.int64)
    area_q_arr = np.zeros(n, dtype=np.float64)
    win_buf_arr = np.zeros(k if k else 1, dtype=np.int64)
    win_counts_arr = np.zeros(n, dtype=np.int64)

    cdef cnp.int64_t[::1] s = state_arr
    cdef cnp.int64_t[::1] virt = virt_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef cnp.int64_t[:, ::1] batch_counts = batch_counts_arr
    cdef cnp.int64_t[::1] batch_epochs = batch_epochs_arr
    cdef double[::1] batch_occ_sum = batch_occ_sum_arr
    cdef cnp.int64_t[::1] batch_occ_n = batch_occ_n_arr
    cdef double[::1] batch_area = batch_area_arr
    cdef double[::1] batch_dur = batch_dur_arr
    cdef cnp.int64_t[:, ::1] hist = hist_arr
    cdef double[::1] area_q = area_q_arr
    cdef cnp.int64_t[::1] win_buf = win_buf_arr
    cdef cnp.int64_t[::1] win_counts = win_counts_arr

    cdef bitgen_t *arrival = _bitgen(bitgens[0])
    cdef bitgen_t *policy_rng = _bitgen(bitgens[1 + n + m])
    cdef bitgen_t **queue_rng = <bitgen_t **> malloc(
        (n + (m if m else 1)) * sizeof(bitgen_t *))
    if queue_rng == NULL:
        raise MemoryError()
    cdef bitgen_t **virt_rng = queue_rng + n
    cdef int j
    for j in range(n):
        queue_rng[j] = _bitgen(bitgens[1 + j])
    for j in range(m):
        virt_rng[j] = _bitgen(bitgens[1 + n + j])

    cdef long long total = 0
    for j in range(n):
        total += s[j]
    cdef long long max_total = total

    cdef int win_head = 0
    cdef int win_len = 0
    cdef long long epoch_occ_n = 0
    cdef long long fallback_events = 0
    cdef double epoch_occ_sum = 0.0
    cdef double duration = 0.0
    cdef int exploded = 0

    cdef long long t, post, b, size, served, horizon_w, sj, race
    cdef int a, i, fell_back
    cdef double best, sc, u, mass, acc, dt, w, removed, epoch_area, gained

    try:
        for t in range(horizon):
            if total > max_total:
                max_total = total

            # --- policy decision on the pre-arrival state ---
            fell_back = 0
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
                best = INFINITY
                for i in range(n):
                    if i < m and not (win_counts[i] < horizon_w * theta[i]):
                        continue
                    sc = s[i] / mu[i]
                    if sc < best:
                        best = sc
                        a = i
                if a < 0:  # every queue constrained and over budget
                    fell_back = 1
                    a = 0
                    best = win_counts[0] / (k * theta[0])
                    for i in range(1, m):
                        sc = win_counts[i] / (k * theta[i])
                        if sc < best:
                            best = sc
                            a = i
            elif policy_code == 3:  # jssq
                u = policy_rng.next_double(policy_rng.state)
                mass = 0.0
                a = n - 1
                acc = 0.0
                if _any_below(s, targets, xi_raw, n, &mass):
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
                u = policy_rng.next_double(policy_rng.state)
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
            b = 0
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
                dt = _exp(arrival, xi)
                if dt > 0.0:
                    epoch_area = 0.0
                    for j in range(n):
                        size = s[j]
                        removed = 0.0
                        if size:
                            served = _serve(queue_rng[j], mu[j], size, dt,
                                            &removed)
                            s[j] = size - served
                            total -= served
                        if post >= 0:
                            gained = size * dt - removed
                            area_q[j] += gained
                            epoch_area += gained
                    if policy_code == 1:
                        for i in range(m):
                            size = virt[i]
                            if size:
                                served = _serve(virt_rng[i], virtual_rates[i],
                                                size, dt, &removed)
                                virt[i] = size - served
                    if post >= 0:
                        duration += dt
                        batch_area[b] += epoch_area
                        batch_dur[b] += dt
            else:
                for j in range(n):
                    size = s[j] - 1 if j == a else s[j]  # newcomer is held
                    if size > 0:
                        w = _exp(queue_rng[j], xi)
                        served = 0
                        for race in range(size):
                            if _exp(queue_rng[j], mu[j]) <= w:
                                served += 1
                        s[j] -= served
                        total -= served
                if policy_code == 1:
                    for i in range(m):
                        size = virt[i] - 1 if i == a else virt[i]
                        if size > 0:
                            w = _exp(virt_rng[i], xi)
                            served = 0
                            for race in range(size):
                                if _exp(virt_rng[i],
                                        virtual_rates[i]) <= w:
                                    served += 1
                            virt[i] -= served

            if total > explosion_bound:
                exploded = 1
    finally:
        free(queue_rng)

    return {
        "counts": counts_arr,
        "fallback_events": fallback_events,
        "epoch_occ_sum": epoch_occ_sum,
        "epoch_occ_n": epoch_occ_n,
        "area_q": area_q_arr,
        "duration": duration,
        "batch_counts": batch_counts_arr,
        "batch_epochs": batch_epochs_arr,
        "batch_occ_sum": batch_occ_sum_arr,
        "batch_occ_n": batch_occ_n_arr,
        "batch_area": batch_area_arr,
        "batch_dur": batch_dur_arr,
        "hist": hist_arr,
        "exploded": exploded,
        "max_total": max_total,
        "final_state": state_arr,
        "final_virtual": virt_arr,
    }


cdef inline bint _any_below(cnp.int64_t[::1] s, double[::1] targets,
                            double[::1] xi_raw, int n,
                            double *mass) noexcept:
    # mirrors _pure: true when some queue sits below target AND the
    # below set carries positive rate mass
    cdef int i
    cdef bint any_below = 0
    mass[0] = 0.0
    for i in range(n):
        if s[i] < targets[i]:
            any_below = 1
            mass[0] += xi_raw[i]
    return any_below and mass[0] > 0.0
