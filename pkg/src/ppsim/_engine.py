"""Compiled Prime+Probe monitoring loop.

Everything random inside comes from a 32-bit xorshift generator written
in plain integer arithmetic, so ``monitor_core.py_func`` (interpreted)
and the compiled version produce identical output.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

M32 = 0xFFFFFFFF


@njit(cache=True)
def _next(rs):
    x = rs[0]
    x ^= (x << 13) & M32
    x ^= x >> 17
    x ^= (x << 5) & M32
    rs[0] = x
    return x


@njit(cache=True)
def _uniform(rs):
    return _next(rs) / 4294967296.0


@njit(cache=True)
def _geometric(rs, p):
    u = _uniform(rs)
    if p >= 1.0:
        return 1
    return int(math.ceil(math.log(1.0 - u) / math.log(1.0 - p))) if u > 0.0 else 1


@njit(cache=True)
def _find(st, cnt, tag):
    for i in range(cnt):
        if st[i] == tag:
            return i
    return -1


@njit(cache=True)
def _to_mru(st, cnt, i):
    tag = st[i]
    for j in range(i, cnt - 1):
        st[j] = st[j + 1]
    st[cnt - 1] = tag


@njit(cache=True)
def _insert(st, cnt, ways, tag, rs, rand_victim_p, bimodal_p):
    """Policy insert; returns the new occupancy."""
    if cnt >= ways:
        k = 0
        if rand_victim_p < 1.0 and _uniform(rs) >= rand_victim_p:
            k = _next(rs) % cnt
        for j in range(k, cnt - 1):
            st[j] = st[j + 1]
        cnt -= 1
    if bimodal_p < 1.0 and _uniform(rs) >= bimodal_p:
        for j in range(cnt, 0, -1):
            st[j] = st[j - 1]
        st[0] = tag
    else:
        st[cnt] = tag
    return cnt + 1


@njit(cache=True)
def _dram(line, bank, row, open_rows, lat3, jitter, rs):
    b = bank[line]
    r = open_rows[b]
    if r < 0:
        lat = lat3[1]
    elif r == row[line]:
        lat = lat3[0]
    else:
        lat = lat3[2]
    open_rows[b] = row[line]
    if jitter > 0:
        lat += _next(rs) % (2 * jitter + 1) - jitter
    return lat


@njit(cache=True)
def _ticks(t, s_starts, s_ends, s_cum, res, offset):
    lo = 0
    hi = len(s_starts)
    while lo < hi:
        mid = (lo + hi) // 2
        if s_starts[mid] <= t:
            lo = mid + 1
        else:
            hi = mid
    susp = 0.0
    if lo > 0:
        if lo >= 2:
            susp = s_cum[lo - 2]
        susp += min(t, s_ends[lo - 1]) - s_starts[lo - 1]
    return offset + int((t - susp) / res)


@njit(cache=True)
def monitor_core(st, cnt, ways, n_es, order, canonical, bank, row, open_rows, lat3, jitter,
                 hit, reuse, overhead, baseline, thr, rand_victim_p, bimodal_p,
                 vt, vline, ap_s, ap_d, s_starts, s_ends, s_cum, res, offset,
                 p_spur, t0, t_end, seed):
    """Run the probe loop over ``[t0, t_end)``.

    Lines are small integer ids: ``0..n_es-1`` eviction-set lines, then
    victim lines; foreign lines get fresh ids past the table.  ``st[:cnt]``
    is the monitored set, LRU first.  Returns (timestamps, latencies,
    n_probes, latency sum, end time, occupancy).
    """
    rs = np.empty(1, dtype=np.int64)
    rs[0] = (seed & M32) | 1
    ts_out = np.empty(1024, dtype=np.int64)
    lat_out = np.empty(1024, dtype=np.int64)
    n_out = 0
    n_lines = len(bank)
    foreign = n_lines
    seen = np.zeros(n_es, dtype=np.uint8)
    nv = len(vt)
    na = len(ap_s)
    big = 1 << 62
    spur_left = _geometric(rs, p_spur) if p_spur > 0.0 else big
    t = t0
    vi = 0
    ai = 0
    n_probes = 0
    lat_sum = 0.0
    n_can = len(canonical)
    while t < t_end:
        while vi < nv and vt[vi] < t:
            ln = vline[vi]
            k = _find(st, cnt, ln)
            if k >= 0:
                _to_mru(st, cnt, k)
            else:
                cnt = _insert(st, cnt, ways, ln, rs, rand_victim_p, bimodal_p)
                _dram(ln, bank, row, open_rows, lat3, jitter, rs)
            vi += 1
        spur_left -= 1
        if spur_left <= 0:
            cnt = _insert(st, cnt, ways, foreign, rs, rand_victim_p, bimodal_p)
            foreign += 1
            spur_left = _geometric(rs, p_spur)
        elif n_can > 0 and cnt == n_es:
            clean = True
            for i in range(cnt):
                if st[i] >= n_es:
                    clean = False
                    break
            if clean:
                nxt = t_end
                if vi < nv and vt[vi] < nxt:
                    nxt = vt[vi]
                if ai < na and ap_s[ai] < nxt:
                    nxt = ap_s[ai]
                n = int((nxt - t) // baseline)
                if spur_left < big and n > spur_left - 1:
                    n = spur_left - 1
                if n > 0:
                    for i in range(n_can):
                        st[i] = canonical[i]
                    t += n * baseline
                    n_probes += n
                    lat_sum += n * baseline
                    spur_left -= n
                    continue
        # one probe over the eviction set
        lat = overhead
        seen[:] = 0
        for j in range(len(order)):
            ln = order[j]
            k = _find(st, cnt, ln)
            if k >= 0:
                _to_mru(st, cnt, k)
                lat += reuse if seen[ln] else hit
            else:
                cnt = _insert(st, cnt, ways, ln, rs, rand_victim_p, bimodal_p)
                lat += _dram(ln, bank, row, open_rows, lat3, jitter, rs)
            seen[ln] = 1
        dur = float(lat)
        while ai < na and ap_s[ai] < t + dur:
            dur += ap_d[ai]
            ai += 1
        t_next = t + dur
        n_probes += 1
        lat_sum += lat
        if lat > thr or dur > lat:
            tick_end = _ticks(t_next, s_starts, s_ends, s_cum, res, offset)
            tick_lat = tick_end - _ticks(t, s_starts, s_ends, s_cum, res, offset)
            if tick_lat > thr / res:
                if n_out == len(ts_out):
                    ts_out = np.concatenate((ts_out, np.empty(n_out, dtype=np.int64)))
                    lat_out = np.concatenate((lat_out, np.empty(n_out, dtype=np.int64)))
                ts_out[n_out] = tick_end
                lat_out[n_out] = tick_lat
                n_out += 1
        t = t_next
    return ts_out[:n_out].copy(), lat_out[:n_out].copy(), n_probes, lat_sum, t, cnt


@njit(cache=True)
def _touch(st, cnt, rs, line_set, line, ways, rand_p, bip_p):
    s = line_set[line]
    row = st[s]
    i = _find(row, cnt[s], line)
    if i >= 0:
        _to_mru(row, cnt[s], i)
    else:
        cnt[s] = _insert(row, cnt[s], ways, line, rs[s], rand_p, bip_p)


@njit(cache=True)
def rate_core(line_set, order, n_local, ways, trials, rand_p, bip_p, seeds, max_fail):
    """Eviction-rate trials on empty sets; line 0 is the target.

    ``line_set`` maps each line id to a local set index.  Returns the
    number of evictions and the final set contents (LRU first).
    """
    st = np.full((n_local, ways + 1), -1, dtype=np.int64)
    cnt = np.zeros(n_local, dtype=np.int64)
    rs = np.empty((n_local, 1), dtype=np.int64)
    for k in range(n_local):
        rs[k, 0] = seeds[k]
    ts = line_set[0]
    evicted = 0
    fails = 0
    for _ in range(trials):
        _touch(st, cnt, rs, line_set, 0, ways, rand_p, bip_p)
        for a in order:
            _touch(st, cnt, rs, line_set, a, ways, rand_p, bip_p)
        if _find(st[ts], cnt[ts], 0) >= 0:
            fails += 1
            if fails > max_fail:
                break
        else:
            evicted += 1
    return evicted, st, cnt


MATCH, SUBSTITUTE, DELETE, INSERT = 0, 1, 2, 3


@njit(cache=True)
def edit_script(a, b):
    """Levenshtein script for int8 arrays ``a`` -> ``b``, left to right.

    Uses the suffix-distance table so the walk from the front is greedy;
    ties prefer delete, then insert, then match/substitute, so the
    edit that fixes a position comes after the indels around it.  Returns
    (distance, kinds, positions in ``a``, values).
    """
    n = len(a)
    m = len(b)
    s = np.empty((n + 1, m + 1), dtype=np.int32)
    for j in range(m + 1):
        s[n, j] = m - j
    for i in range(n - 1, -1, -1):
        s[i, m] = n - i
        ai = a[i]
        for j in range(m - 1, -1, -1):
            v = s[i + 1, j + 1] + (1 if ai != b[j] else 0)
            d = s[i + 1, j] + 1
            if d < v:
                v = d
            d = s[i, j + 1] + 1
            if d < v:
                v = d
            s[i, j] = v
    kinds = np.empty(n + m, dtype=np.int8)
    pos = np.empty(n + m, dtype=np.int64)
    vals = np.empty(n + m, dtype=np.int8)
    k = 0
    i = 0
    j = 0
    while i < n or j < m:
        here = s[i, j]
        if i < n and here == s[i + 1, j] + 1:
            kinds[k] = DELETE
            pos[k] = i
            vals[k] = -1
            i += 1
        elif j < m and here == s[i, j + 1] + 1:
            kinds[k] = INSERT
            pos[k] = i
            vals[k] = b[j]
            j += 1
        else:
            kinds[k] = MATCH if a[i] == b[j] else SUBSTITUTE
            pos[k] = i
            vals[k] = b[j]
            i += 1
            j += 1
        k += 1
    return s[0, 0], kinds[:k].copy(), pos[:k].copy(), vals[:k].copy()
