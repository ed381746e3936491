"""Compiled single-trial loop. Mirrors ``engine.simulate_reference`` step for step."""

import numpy as np
from numba import njit

ALWAYS, ORACLE, LEARNED, NOISY, CASCADE, FIXED = range(6)
SELECTOR_CODES = {"always": ALWAYS, "oracle": ORACLE, "learned": LEARNED,
                  "noisy": NOISY, "cascade": CASCADE, "fixed": FIXED}


@njit(cache=True)
def _intended(i, kind, sel_model, order, table, best, est, rates):
    if kind == ALWAYS:
        return est[i, sel_model]
    if kind == LEARNED:
        m = est[i, 0]
        for k in range(1, est.shape[1]):
            if est[i, k] < m:
                m = est[i, k]
        return m
    if kind == ORACLE or kind == NOISY:
        return est[i, best[i]]
    if kind == FIXED:
        return est[i, table[i]]
    acc = 0.0
    reach = 1.0
    for j in range(order.size):
        k = order[j]
        acc += reach * est[i, k]
        reach *= rates[i, k]
    return acc


@njit(cache=True)
def _score(i, t, lec, oracle_scores, freq, counts, kind, sel_model, order, table, best,
           lcb, rates, truth, fail_prob):
    if oracle_scores:
        p = freq[i]
        if not lec:
            return p
        return p * _intended(i, kind, sel_model, order, table, best, truth, fail_prob)
    p = counts[i] / (t + 1)
    if not lec:
        return p
    return p * _intended(i, kind, sel_model, order, table, best, lcb, rates)


@njit(cache=True)
def _learned(lcb, i):
    # argmin with ties to the highest index
    K = lcb.shape[1]
    k = K - 1
    for j in range(K - 2, -1, -1):
        if lcb[i, j] < lcb[i, k]:
            k = j
    return k


@njit(cache=True)
def run_trial(queries, costs, fails, offsets, noise, pick,
              freq, truth, fail_prob, static_cost, best,
              kind, sel_model, accuracy, order, table,
              lec, capacity, init_cache, frozen, oracle_scores,
              b1, b2, logterm):
    T = queries.size
    Q, K = truth.shape
    hit = np.zeros(T, np.bool_)
    model = np.full(T, -1, np.int64)
    realized = np.zeros(T)
    expected = np.zeros(T)

    counts = np.zeros(Q, np.int64)
    obs = np.zeros((Q, K), np.int64)
    fcnt = np.zeros((Q, K), np.int64)
    sums = np.zeros((Q, K))
    lcb = np.full((Q, K), b1)
    rates = np.zeros((Q, K))
    used = np.zeros((Q, K), np.int64)

    in_cache = np.zeros(Q, np.bool_)
    entries = np.full(max(capacity, 1), -1, np.int64)
    n_entries = 0
    for e in init_cache:
        in_cache[e] = True
        entries[n_entries] = e
        n_entries += 1

    choice = np.zeros(Q, np.int64)
    updated = False
    ec = static_cost.copy()
    if kind == LEARNED:
        for i in range(Q):
            ec[i] = truth[i, 0]

    for t in range(T):
        q = queries[t]
        s = 0.0
        for i in range(Q):
            if not in_cache[i]:
                s += freq[i] * ec[i]
        expected[t] = s
        if not frozen:
            counts[q] += 1
        if in_cache[q]:
            hit[t] = True
            continue

        if kind == ALWAYS:
            k = sel_model
        elif kind == ORACLE:
            k = best[q]
        elif kind == LEARNED:
            k = choice[q]
        elif kind == NOISY:
            if noise[t] < accuracy or K == 1:
                k = best[q]
            else:
                j = min(int(pick[t] * (K - 1)), K - 2)
                k = j if j < best[q] else j + 1
        elif kind == FIXED:
            k = table[q]
        else:
            k = order[0]
        model[t] = k

        total = 0.0
        stages = order.size if kind == CASCADE else 1
        for st in range(stages):
            kk = order[st] if kind == CASCADE else k
            pos = offsets[q] + used[q, kk]
            used[q, kk] += 1
            c = costs[kk, pos]
            f = fails[kk, pos]
            total += c
            if not frozen:
                obs[q, kk] += 1
                sums[q, kk] += c
                if f:
                    fcnt[q, kk] += 1
                n = obs[q, kk]
                lcb[q, kk] = max(b1, sums[q, kk] / n - (b2 - b1) * np.sqrt(logterm / (2.0 * n)))
                rates[q, kk] = fcnt[q, kk] / n
            if not f:
                break
        realized[t] = total
        if frozen:
            continue

        if kind == LEARNED:
            if not updated:
                updated = True
                for i in range(Q):
                    choice[i] = _learned(lcb, i)
                    ec[i] = truth[i, choice[i]]
            else:
                choice[q] = _learned(lcb, q)
                ec[q] = truth[q, choice[q]]

        if capacity == 0:
            continue
        if n_entries < capacity:
            entries[n_entries] = q
            n_entries += 1
            in_cache[q] = True
            continue
        vpos = 0
        vscore = np.inf
        for e in range(n_entries):
            i = entries[e]
            sc = _score(i, t, lec, oracle_scores, freq, counts, kind, sel_model, order, table,
                        best, lcb, rates, truth, fail_prob)
            if sc < vscore or (sc == vscore and i > entries[vpos]):
                vscore = sc
                vpos = e
        sq = _score(q, t, lec, oracle_scores, freq, counts, kind, sel_model, order, table,
                    best, lcb, rates, truth, fail_prob)
        if sq > vscore:
            in_cache[entries[vpos]] = False
            entries[vpos] = q
            in_cache[q] = True

    return hit, model, realized, expected, counts, obs, fcnt, sums, entries[:n_entries].copy(), used

