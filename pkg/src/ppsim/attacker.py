"""Online phase: eviction sets, Prime+Probe, vulnerable-set scan, monitoring."""
from __future__ import annotations

import csv
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._engine import monitor_core
from .address import KB, MB, CacheLocation, cache_location, dram_location
from .cache import CacheState, eviction_order, eviction_rate
from .kernel import ATTACKER, BOTH, VICTIM, Kernel, draw_interrupts
from .victim import Signature, Victim

SET_STRIDE = 256 * KB
ROW_SCAN_RANGE = 4 * MB


class EvictionSetError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackerMemory:
    """Physically contiguous enclave buffer; offsets map 1:1 to physical addresses."""
    base: int
    size: int = 16 * MB

    def __post_init__(self):
        if self.base % (4 * KB):
            raise ValueError("attacker memory must be page aligned")
        if self.size < ROW_SCAN_RANGE + 64:
            raise ValueError("attacker memory smaller than the row scan range")

    @classmethod
    def allocate(cls, seed: int, size: int = 16 * MB, region: tuple[int, int] = (16 * MB, 48 * MB)):
        rng = np.random.default_rng([seed, 23])
        page = int(rng.integers(region[0] // (4 * KB), region[1] // (4 * KB)))
        return cls(page * 4 * KB, size)


@dataclass
class EvictionSet:
    addresses: list[int]
    target_set: CacheLocation
    target: int
    rate: float
    rate_seed: int
    evaluations: int = 0
    removed: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.addresses)


def find_border(kernel: Kernel, mem: AttackerMemory, rounds: int = 16) -> int:
    """Offset of the first address of a 4 MB-aligned DRAM row (row-conflict scan)."""
    best = -1.0
    border_index = 0
    for i in range(0xFC0, ROW_SCAN_RANGE, 4096):
        t = kernel.dram.hammer(mem.base + i, mem.base + i + 64, rounds)
        if t > best:
            best = t
            border_index = i + 64
    return border_index


def _rate_seed(kernel: Kernel, set_index: int, target: int) -> int:
    ss = np.random.SeedSequence([kernel.seed, 29, set_index, target & 0xFFFFFFFF, target >> 32])
    return int(ss.generate_state(1)[0])


def generate_eviction_set(set_index: int, kernel: Kernel, mem: AttackerMemory,
                          border: int | None = None, target: int | None = None,
                          threshold: float = 0.99, trials: int = 100,
                          slice_index: int | None = None) -> EvictionSet:
    """Build a minimal eviction set for ``set_index``.

    1. locate a row start by hammering line pairs (skipped if ``border`` is given),
    2. starting at ``border + set_index * 64`` add candidates 256 KB apart until
       the rate exceeds ``threshold``,
    3. drop every candidate whose removal keeps the rate at or above it.

    ``target`` is the line to evict; by default the first candidate address,
    or the first one in ``slice_index`` when that is given.
    All rate evaluations share one seed, so results are reproducible.
    """
    if border is None:
        border = find_border(kernel, mem)
    addr = mem.base + border + (set_index << 6)
    end = mem.base + mem.size
    cands = [a for a in range(addr, end, SET_STRIDE)]
    if target is None:
        if slice_index is None:
            target = cands[0]
        else:
            same = [a for a in cands if cache_location(a, kernel.geometry).slice == slice_index]
            if not same:
                raise EvictionSetError(f"no candidate for set {set_index} in slice {slice_index}")
            target = same[0]
    cands = [a for a in cands if a != target]
    cache = kernel.cache
    seed = _rate_seed(kernel, set_index, target)
    evals = 0

    def rate(addrs, stop=None):
        nonlocal evals
        evals += 1
        return eviction_rate(cache, addrs, target, trials, seed=seed, stop_below=stop)

    full: list[int] = []
    r = 0.0
    for a in cands:
        full.append(a)
        r = rate(full, stop=threshold)
        if r > threshold:
            break
    else:
        raise EvictionSetError(
            f"eviction rate {r:.2f} for set {set_index} never exceeded {threshold:.2f} with "
            f"{len(full)} candidates inside {mem.size >> 20} MB; check geometry/policy")
    kept = list(full)
    removed = []
    for a in full:
        trial = [x for x in kept if x != a]
        if rate(trial, stop=threshold) >= threshold:
            kept = trial
            removed.append(a)
    final = rate(kept)
    loc = cache_location(target, kernel.geometry)
    return EvictionSet(kept, loc, target, final, seed, evals, removed)


def is_minimal(eset: EvictionSet, cache: CacheState, threshold: float = 0.99, trials: int = 100) -> bool:
    """Re-check with the set's own rate seed that no member is redundant."""
    for a in eset.addresses:
        rest = [x for x in eset.addresses if x != a]
        if eviction_rate(cache, rest, eset.target, trials, seed=eset.rate_seed) >= threshold:
            return False
    return True


class Prober:
    """Times the eviction-strategy walk over one eviction set.

    Pruning may keep a line that shares the set index but sits in another
    slice (it changes the sliding-triple pattern).  Such lines live in a
    set nobody else touches here, so after warm-up they always hit.
    """

    def __init__(self, eset: EvictionSet, kernel: Kernel):
        self.kernel = kernel
        self.addresses = list(eset.addresses)
        self.order = eviction_order(self.addresses)
        cache = kernel.cache
        self.key = cache.locate(eset.target)
        self.single = cache.sets.setdefault(self.key, [])
        self.in_set = [a for a in self.addresses if cache.locate(a) == self.key]
        self.foreign = set(self.addresses) - set(self.in_set)
        t = kernel.timing
        self.hit = t.cache.hit
        self.reuse = t.cache.reuse
        self.overhead = t.probe_overhead
        self.members = set(self.in_set)

    def probe(self) -> tuple[int, int]:
        """One probe (= next prime); returns (cycles, misses)."""
        cache = self.kernel.cache
        dram = self.kernel.dram
        s = self.single
        insert = cache.insert
        key = self.key
        foreign = self.foreign
        lat = self.overhead
        misses = 0
        seen = set()
        for a in self.order:
            if a in foreign:
                out = cache.access(a)
                if out.hit:
                    lat += self.reuse if a in seen else self.hit
                else:
                    lat += out.latency
                    misses += 1
            elif a in s:
                s.remove(a)
                s.append(a)
                lat += self.reuse if a in seen else self.hit
            else:
                insert(key, a)
                lat += dram.access_addr(a)
                misses += 1
            seen.add(a)
        return lat, misses

    def foreign_cost(self) -> int:
        """Per-probe latency of the out-of-set lines when they all hit."""
        cost = 0
        seen = set()
        for a in self.order:
            if a in self.foreign:
                cost += self.reuse if a in seen else self.hit
                seen.add(a)
        return cost

    def clean(self) -> bool:
        """True if exactly the in-set lines are resident (idle probe = all hits)."""
        s = self.single
        return len(s) == len(self.members) and self.members.issuperset(s)

    def warm(self, rounds: int = 4) -> int:
        lat = 0
        for _ in range(rounds):
            lat, _ = self.probe()
        return lat


def prime_probe(eset: EvictionSet, kernel: Kernel) -> int:
    """Walk the eviction set once; returns its duration in counter ticks."""
    if not eset.addresses:
        raise ValueError("empty eviction set")
    before = kernel.read_attacker_clock()
    lat, _ = Prober(eset, kernel).probe()
    kernel.clock.advance(lat)
    return kernel.read_attacker_clock() - before


def miss_threshold(baseline: float, kernel: Kernel) -> float:
    """Midpoint between the all-hit probe and one extra (cheapest) DRAM access."""
    return baseline + kernel.timing.dram.row_hit / 2


@dataclass
class RawTrace:
    """Counter-tick timestamps of probes classified as misses."""
    miss_timestamps: np.ndarray
    probe_latencies: np.ndarray
    start: int
    end: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.miss_timestamps = np.asarray(self.miss_timestamps, dtype=np.int64)
        self.probe_latencies = np.asarray(self.probe_latencies, dtype=np.int64)
        if len(self.miss_timestamps) != len(self.probe_latencies):
            raise ValueError("timestamps and latencies differ in length")

    def __len__(self):
        return len(self.miss_timestamps)

    @property
    def span(self) -> int:
        return self.end - self.start

    def write(self, path: str | Path) -> None:
        """CSV of ``timestamp,probe_latency`` plus a ``.json`` sidecar with metadata."""
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["timestamp", "probe_latency"])
            w.writerows(zip(self.miss_timestamps.tolist(), self.probe_latencies.tolist()))
        side = dict(self.meta, start=self.start, end=self.end)
        path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "RawTrace":
        path = Path(path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0] != ["timestamp", "probe_latency"]:
            raise ValueError(f"{path}: bad trace header")
        data = np.array(rows[1:], dtype=np.int64).reshape(-1, 2)
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        start = meta.pop("start", int(data[0, 0]) if len(data) else 0)
        end = meta.pop("end", int(data[-1, 0]) if len(data) else 0)
        return cls(data[:, 0], data[:, 1], start, end, meta)


class _CounterMap:
    """True cycles -> counting-thread ticks, given suspension intervals."""

    def __init__(self, intervals: list[tuple[float, float]], resolution: float, offset: int):
        iv = sorted(intervals)
        self.starts = [s for s, _ in iv]
        self.ends = [s + d for s, d in iv]
        self.cum = list(np.cumsum([d for _, d in iv])) if iv else []
        self.res = resolution
        self.offset = offset

    def suspended(self, t: float) -> float:
        i = bisect_right(self.starts, t)
        if i == 0:
            return 0.0
        before = self.cum[i - 2] if i >= 2 else 0.0
        return before + min(t, self.ends[i - 1]) - self.starts[i - 1]

    def ticks(self, t: float) -> int:
        return self.offset + int((t - self.suspended(t)) / self.res)


def _shift_for_pauses(times: np.ndarray, pauses: list[tuple[float, int]]) -> np.ndarray:
    """Map victim-progress times to true times given (true start, duration) pauses."""
    if not pauses or not len(times):
        return times
    pauses = sorted(pauses)
    d = np.array([p[1] for p in pauses], dtype=float)
    cum = np.cumsum(d)
    vstart = np.array([p[0] for p in pauses]) - np.concatenate(([0.0], cum[:-1]))
    idx = np.searchsorted(vstart, times, side="right")
    return times + np.concatenate(([0.0], cum))[idx]


def monitor(eset: EvictionSet, kernel: Kernel, victim: Victim | None, signature: int = 0,
            budget: float | None = None, lead: float | None = None, tail: float | None = None,
            trace_id: str = "", compiled: bool = True,
            events: list[tuple[float, int, str]] | None = None) -> RawTrace:
    """Prime+Probe one cache set continuously while the victim signs once.

    Only probes slower than the miss threshold are stored.  Stretches in
    which nothing touches the monitored set are fast-forwarded: an idle
    probe over a clean set is all hits and leaves it in the same order.
    ``budget`` caps the monitored duration in true cycles; by default the
    run ends ``tail`` cycles after the victim finishes.  ``compiled=False``
    runs the same loop interpreted (slow, for cross-checking).  ``events``
    replaces the random interrupts by a fixed list of ``(offset from the
    start, duration, kind)`` tuples.
    """
    noise = kernel.noise
    rng = kernel.noise_rng
    cache = kernel.cache
    prober = Prober(eset, kernel)
    baseline = prober.warm()
    thr_cycles = miss_threshold(baseline, kernel)
    res = kernel.clock.resolution
    t0 = float(kernel.clock.now)

    sig: Signature | None = None
    if victim is not None:
        t_op = victim.op_cycles(attacked=True)
        lead = 2 * t_op if lead is None else lead
        tail = 4 * t_op if tail is None else tail
        sig = victim.sign(signature, start=t0 + lead, jitter=noise.op_jitter, rng=rng)
        horizon = (sig.end - t0 + tail) * 3
    else:
        horizon = budget or 1e6
    if budget is not None:
        horizon = max(horizon, budget)

    if events is None:
        events = draw_interrupts(noise, t0, t0 + horizon, rng)
    else:
        events = sorted((t0 + float(o), int(d), k) for o, d, k in events)
    vpauses = [(s, d) for s, d, k in events if k in (VICTIM, BOTH)]
    apauses = sorted((s, d) for s, d, k in events if k in (ATTACKER, BOTH))
    counter = _CounterMap([(s, d) for s, d, k in events if k == BOTH], res,
                          kernel.clock.ticks() - int(t0 / res))

    # line table: eviction set first, then victim lines in the monitored set
    target_key = cache.locate(eset.target)
    lines = list(prober.in_set)
    vt = np.empty(0)
    vline = np.empty(0, dtype=np.int64)
    if sig is not None:
        parts, ids = [], []
        for li, line in enumerate(sig.layout.lines):
            if cache.locate(line) == target_key:
                tt = victim.touch_times(sig, li)
                parts.append(tt)
                ids.append(np.full(len(tt), len(lines), dtype=np.int64))
                lines.append(line)
        if parts:
            vt = np.concatenate(parts)
            order = np.argsort(vt, kind="stable")
            vt = _shift_for_pauses(vt[order], vpauses)
            vline = np.concatenate(ids)[order]
        v_end = float(_shift_for_pauses(np.array([sig.end]), vpauses)[0])
        t_end = v_end + tail
    else:
        t_end = t0 + horizon
    if budget is not None:
        t_end = t0 + budget

    geo = kernel.geometry
    index = {a: i for i, a in enumerate(lines)}
    n_es = len(prober.in_set)
    # after any all-hit probe the set is ordered by last access
    last = {a: i for i, a in enumerate(prober.order) if a not in prober.foreign}
    canonical = np.array(sorted(range(n_es), key=lambda i: last[lines[i]]), dtype=np.int64)
    set_list = prober.single
    st = np.full(geo.n_ways + 1, -1, dtype=np.int64)
    foreign_tags = {}
    for j, tag in enumerate(set_list):
        if tag not in index:
            foreign_tags[len(lines) + len(foreign_tags)] = tag
            st[j] = len(lines) + len(foreign_tags) - 1
        else:
            st[j] = index[tag]
    if foreign_tags:
        raise ValueError("monitored set holds foreign lines before monitoring")
    bank_ids: dict = {}
    bank = np.empty(len(lines), dtype=np.int64)
    row = np.empty(len(lines), dtype=np.int64)
    for i, a in enumerate(lines):
        loc = dram_location(a, kernel.mapping)
        bank[i] = bank_ids.setdefault(loc.bank_key, len(bank_ids))
        row[i] = loc.row
    open_rows = np.array([kernel.dram.open_rows.get(k, -1) for k in bank_ids], dtype=np.int64)
    dt = kernel.timing.dram
    lat3 = np.array([dt.row_hit, dt.closed_row, dt.row_conflict], dtype=np.int64)
    ct = kernel.timing.cache
    rand_p = cache.lru_prob if cache._random_victim else 1.0
    bip_p = cache.lru_prob if cache._bimodal else 1.0
    order_ids = np.array([index[a] for a in prober.order if a not in prober.foreign], dtype=np.int64)
    seed = int(rng.integers(1, 2 ** 32))

    core = monitor_core if compiled else monitor_core.py_func
    ts, lat, n_probes, lat_sum, t, cnt = core(
        st, len(set_list), geo.n_ways, n_es, order_ids, canonical, bank, row, open_rows, lat3,
        dt.jitter, ct.hit, ct.reuse, kernel.timing.probe_overhead + prober.foreign_cost(), float(baseline), float(thr_cycles),
        rand_p, bip_p, np.ascontiguousarray(vt, dtype=np.float64), vline,
        np.array([s for s, _ in apauses], dtype=np.float64),
        np.array([d for _, d in apauses], dtype=np.float64),
        np.array(counter.starts, dtype=np.float64), np.array(counter.ends, dtype=np.float64),
        np.array(counter.cum, dtype=np.float64), float(res), int(counter.offset),
        float(noise.spurious_miss_rate), t0, float(t_end), seed)

    # write the final state back into the shared models
    set_list[:] = [lines[i] if i < len(lines) else -int(i) for i in st[:cnt].tolist()]
    for key, b in bank_ids.items():
        if open_rows[b] >= 0:
            kernel.dram.open_rows[key] = int(open_rows[b])
    kernel.clock.advance(int(t - t0))
    start_tick = counter.ticks(t0)
    end_tick = counter.ticks(t)
    meta = {
        "trace_id": trace_id,
        "monitored_set": [eset.target_set.set, eset.target_set.slice],
        "seed": kernel.seed,
        "threshold_ticks": thr_cycles / res,
        "baseline_cycles": baseline,
        "mean_probe_cycles": lat_sum / max(n_probes, 1),
        "n_probes": int(n_probes),
        "span_cycles": t - t0,
        "resolution": res,
    }
    if sig is not None:
        meta.update({
            "signature": signature,
            "op_cycles": sig.op_cycles,
            "victim_start_ticks": counter.ticks(float(_shift_for_pauses(np.array([sig.start]), vpauses)[0])),
            "victim_end_ticks": counter.ticks(v_end),
            "n_interrupts": len(events),
        })
    return RawTrace(ts, lat, start_tick, end_tick, meta)


# --- vulnerable-set scan -------------------------------------------------

# nominal core clock used to convert the per-set monitoring budget to cycles
CPU_HZ = 3.0e9
SCAN_BUDGET_SECONDS = 0.21


class NoVulnerableSet(RuntimeError):
    pass


@dataclass
class SetVerdict:
    location: CacheLocation
    matched: bool
    active_bins: int
    n_misses: int


@dataclass
class ScanResult:
    """Outcome of a scan.  ``vulnerable`` excludes the first and last matching set."""
    matches: list[CacheLocation]
    vulnerable: list[CacheLocation]
    trials_to_first: int | None
    trials: int
    simulated_seconds: float
    verdicts: list[SetVerdict] = field(default_factory=list)
    eviction_sets: dict = field(default_factory=dict)

    @property
    def found(self) -> bool:
        return bool(self.vulnerable)


def shows_exponentiation(raw: RawTrace, op_cycles: float, exp_cycles: float,
                         range_factor: float = 1.5, min_misses: int = 8) -> tuple[bool, int]:
    """Rightmost-peak test on one scan trace.

    Misses are binned per operation; bins with at least ``min_misses``
    count as peaks.  The set matches when the rightmost peak has another
    peak before it no further than ``range_factor * exp_cycles`` away and
    the activity covers at least half the expected exponentiation (a lone
    burst from unrelated code does not).  Returns (match, active bins).
    """
    if len(raw) == 0:
        return False, 0
    res = raw.meta.get("resolution", 1.0)
    t = (raw.miss_timestamps - raw.start) * res
    counts = np.bincount((t // op_cycles).astype(np.int64))
    active = np.flatnonzero(counts >= min_misses)
    if len(active) < 2:
        return False, int(len(active))
    r = active[-1]
    lo = r - range_factor * exp_cycles / op_cycles
    inside = active[(active >= lo) & (active < r)]
    if not len(inside):
        return False, int(len(active))
    return bool((r - inside[0]) * op_cycles >= 0.5 * exp_cycles), int(len(inside) + 1)


def scan_vulnerable_sets(kernel: Kernel, mem: AttackerMemory, victim: Victim | None,
                         key_bits: int | None = None, order: str = "random",
                         max_sets: int | None = None, budget_seconds: float = SCAN_BUDGET_SECONDS,
                         range_factor: float = 1.5, min_misses: int = 8,
                         border: int | None = None) -> ScanResult:
    """Search cache sets for the victim's multiplier buffer.

    Candidates are all (set, slice) pairs, visited in a seeded random order
    (``order="sequential"`` walks from set 0).  For each one an eviction set
    is built and monitored for one signature within ``budget_seconds``.
    After the first match the neighbouring set indices are checked until
    the run of matching sets ends on both sides; the run's first and last
    sets are dropped and the rest ranked by visible activity.
    """
    geo = kernel.geometry
    if key_bits is None:
        key_bits = victim.cfg.key_bits if victim is not None else 4096
    from .victim import mult_cycles
    slowdown = victim.cfg.attack_slowdown if victim is not None else 1.0
    op = mult_cycles(key_bits) * slowdown
    exp_cycles = 1.5 * key_bits * op
    budget = budget_seconds * CPU_HZ
    if border is None:
        border = find_border(kernel, mem)

    cands = [(s, sl) for s in range(geo.n_sets) for sl in range(geo.n_slices)]
    if order == "random":
        perm = np.random.default_rng([kernel.seed, 31]).permutation(len(cands))
        cands = [cands[i] for i in perm]
    elif order != "sequential":
        raise ValueError("order must be 'random' or 'sequential'")
    if max_sets is not None:
        cands = cands[:max_sets]

    verdicts: dict[tuple[int, int], SetVerdict] = {}
    esets: dict[tuple[int, int], EvictionSet] = {}
    trials = 0
    sig_counter = 0

    def check(s: int, sl: int) -> bool:
        nonlocal trials, sig_counter
        if (s, sl) in verdicts:
            return verdicts[(s, sl)].matched
        trials += 1
        try:
            es = generate_eviction_set(s, kernel, mem, border=border, slice_index=sl)
        except EvictionSetError:
            verdicts[(s, sl)] = SetVerdict(CacheLocation(s, sl), False, 0, 0)
            return False
        esets[(s, sl)] = es
        raw = monitor(es, kernel, victim, signature=sig_counter, budget=budget,
                      trace_id=f"scan-{s}-{sl}")
        sig_counter += 1
        ok, act = shows_exponentiation(raw, op, exp_cycles, range_factor, min_misses)
        verdicts[(s, sl)] = SetVerdict(es.target_set, ok, act, len(raw))
        return ok

    first = None
    trials_to_first = None
    for s, sl in cands:
        if check(s, sl):
            first = s
            trials_to_first = trials
            break

    matched_sets: list[int] = []
    if first is not None:
        matched_sets.append(first)
        for direction in (-1, 1):
            s = first
            while True:
                s = (s + direction) % geo.n_sets
                if s == first:
                    break
                hit = [check(s, sl) for sl in range(geo.n_slices)]
                if not any(hit):
                    break
                if direction < 0:
                    matched_sets.insert(0, s)
                else:
                    matched_sets.append(s)
        # the hit at ``first`` may be one slice; the other slice is not needed

    def best(s: int) -> SetVerdict:
        vs = [v for (ss, _), v in verdicts.items() if ss == s and v.matched]
        return max(vs, key=lambda v: v.active_bins)

    matches = [best(s).location for s in matched_sets]
    interior = [best(s) for s in matched_sets[1:-1]]
    ranked = sorted(interior, key=lambda v: -v.active_bins)
    ordered = [v.location for v in ranked]
    return ScanResult(matches, ordered, trials_to_first, trials,
                      trials * budget_seconds, list(verdicts.values()),
                      {k: esets[k] for k in esets if verdicts[k].matched})
