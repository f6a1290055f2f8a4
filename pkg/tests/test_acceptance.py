"""Acceptance criteria, one test each, at their stated tolerances.

Every test records a PASS/FAIL line (printed in the terminal summary)
before asserting, so a failing criterion is reported, not hidden.
"""
import filecmp
import time

import numpy as np
import pytest

from ppsim.address import MB, CacheGeometry, DramMapping, find_row_start_pairs
from ppsim.attacker import AttackerMemory, generate_eviction_set, is_minimal
from ppsim.config import ExperimentConfig
from ppsim.harness import (calibrate_noise, collect, make_kernel, run_end_to_end, single_trace_error,
                           with_seed)
from ppsim.kernel import Kernel, NoiseConfig, TimingConfig
from ppsim.recovery import edit_distance, edit_distance_actions, merge_keys
from ppsim.timer import available_cpus, bench, start_timer
from ppsim.victim import allocate_victim

import oracles
from test_recovery import TABLE_III

pytestmark = pytest.mark.slow

DEFAULT = ExperimentConfig()
KNOWN = DEFAULT.replace(**{"attack.scan_mode": "known"})
# seed ranges are fixed in advance and disjoint from the calibration seeds (1, 2)
C1_SEEDS = range(1000, 1020)
C2_SEEDS = range(2000, 2005)  # 10 traces each -> 50 traces
C3_SEEDS = range(3000, 3020)


def test_c1_zero_noise_single_trace(record_criterion):
    quiet = DEFAULT.replace(noise=NoiseConfig(), **{"attack.n_traces": 1})
    errors, times = [], []
    for s in C1_SEEDS:
        t = time.perf_counter()
        rep = run_end_to_end(with_seed(quiet, s))
        times.append(time.perf_counter() - t)
        errors.append(rep.merged_bit_errors)
    ok = all(e == 0 for e in errors) and max(times) < 60
    record_criterion(1, ok, f"errors {errors}; full pipeline incl. scan, max {max(times):.1f} s, "
                            f"mean {np.mean(times):.1f} s per key")
    assert ok


@pytest.fixture(scope="module")
def calibration():
    return calibrate_noise(0.04, budget=200)


def test_c2_single_trace_error(calibration, record_criterion):
    err = single_trace_error(KNOWN, calibration.noise, 10, C2_SEEDS)
    ok = calibration.converged and abs(err - 0.04) <= 0.01
    record_criterion(2, ok, f"calibrated to {calibration.achieved:.4f} in {calibration.runs} runs; "
                            f"mean error over 50 fresh traces {err:.4f} (target 0.04 +/- 0.01)")
    assert ok


@pytest.fixture(scope="module")
def noisy_runs(calibration):
    cfg = KNOWN.replace(noise=calibration.noise)
    return [collect(with_seed(cfg, s), n_traces=11) for s in C3_SEEDS]


def merged_errors(c, n, lookahead):
    usable = [p for p in c.partials[:n] if p is not None]
    if not usable:
        return len(c.key_bits_true)
    return edit_distance(merge_keys(usable, lookahead).bits, c.key_bits_true)


def test_c3_multi_trace(noisy_runs, record_criterion):
    at11 = [merged_errors(c, 11, 20) for c in noisy_runs]
    zero_frac = sum(e == 0 for e in at11) / len(at11)
    means = [float(np.mean([merged_errors(c, n, 20) for c in noisy_runs])) for n in (3, 5, 7, 9, 11)]
    monotone = all(b <= a for a, b in zip(means, means[1:]))
    ok = zero_frac >= 0.9 and monotone
    record_criterion(3, ok, f"0 errors in {zero_frac:.0%} of runs at 11 traces (need >= 90%); "
                            f"errors per run {at11}; means 3/5/7/9/11 = {[round(m, 2) for m in means]}")
    assert ok


def test_c4_lookahead(noisy_runs, record_criterion):
    m = {L: float(np.mean([merged_errors(c, 7, L) for c in noisy_runs])) for L in (10, 20, 30)}
    rel = 0.0 if m[30] == m[20] else abs(m[30] - m[20]) / m[20] if m[20] else float("inf")
    ok = m[10] >= 3 * m[20] and rel < 0.25
    record_criterion(4, ok, f"means at 7 traces L10/L20/L30 = {m[10]:.2f}/{m[20]:.2f}/{m[30]:.2f}; "
                            f"L30 vs L20 differs by {rel:.0%}")
    assert ok


def test_c5_row_start_pairs(record_criterion):
    expected = [(0x3FFFC0, 0x400000), (0x7FFFC0, 0x800000), (0xBFFFC0, 0xC00000), (0xFFFFC0, 0x1000000)]
    got = find_row_start_pairs(DramMapping(), 16 * MB)
    brute = oracles.brute_force_pairs(16 * MB)
    ok = got == expected == brute
    record_criterion(5, ok, f"pairs {[(hex(a), hex(b)) for a, b in got]}; brute force agrees: {got == brute}")
    assert ok


def test_c6_eviction_sets(record_criterion):
    k = Kernel(seed=6)
    mem = AttackerMemory.allocate(6)
    rng = np.random.default_rng(66)
    targets = [(int(s), int(sl)) for s, sl in zip(rng.integers(0, k.geometry.n_sets, 100),
                                                   rng.integers(0, k.geometry.n_slices, 100))]
    bad = []
    sizes = []
    for s, sl in targets:
        es = generate_eviction_set(s, k, mem, slice_index=sl)
        sizes.append(len(es))
        if es.rate < 0.99 or not is_minimal(es, k.cache):
            bad.append((s, sl, es.rate))
    geo = CacheGeometry(n_slices=1)
    lru = Kernel(geometry=geo, timing=TimingConfig(policy="lru"), seed=6)
    lru_sizes = {len(generate_eviction_set(int(s), lru, mem)) for s in rng.integers(0, geo.n_sets, 10)}
    ok = not bad and lru_sizes == {geo.n_ways}
    record_criterion(6, ok, f"{100 - len(bad)}/100 sets reach 0.99 and are minimal (sizes {min(sizes)}-"
                            f"{max(sizes)}); LRU single-slice sizes {sorted(lru_sizes)} vs {geo.n_ways} ways")
    assert ok


def test_c7_edit_distance(record_criterion):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        a = rng.integers(0, 2, rng.integers(0, 13)).tolist()
        b = rng.integers(0, 2, rng.integers(0, 13)).tolist()
        ref = oracles.levenshtein_recursive(a, b)
        mismatches += edit_distance(a, b) != ref or edit_distance_actions(a, b)[0] != ref
    rec = merge_keys([[int(c) for c in s] for s in TABLE_III], 20)
    at6 = [(w, kind) for pos, w, kind in rec.applied if pos == 5]
    ok = mismatches == 0 and rec.bits[5] == 1 and at6 == [(1, "delete")]
    record_criterion(7, ok, f"{mismatches} oracle mismatches in 1000 pairs; bit 6 = {rec.bits[5]}, "
                            f"edits there {at6}")
    assert ok


def test_c8_buffer_geometry(record_criterion):
    rows = {1024: (136, 3), 2048: (264, 5), 4096: (520, 9), 8192: (1032, 17)}
    got = {}
    for bits in rows:
        lays = [allocate_victim(bits, seed=s) for s in range(20)]
        got[bits] = {(lay.buffer_size, len(lay.spanned_sets)) for lay in lays}
    ok = all(got[b] == {rows[b]} for b in rows)
    record_criterion(8, ok, f"{ {b: sorted(v) for b, v in got.items()} }")
    assert ok


def test_c9_timer_bench(record_criterion):
    if len(available_cpus()) < 2:
        record_criterion(9, None, f"skipped: {len(available_cpus())} hardware thread(s), needs 2")
        pytest.skip("needs at least 2 hardware threads")
    rows = {r.variant: r.rate for r in bench(0.3)}
    mono = True
    for v in rows:
        with start_timer(v) as h:
            vals = [h.read() for _ in range(100_000)]
            mono &= all(b >= a for a, b in zip(vals, vals[1:]))
    ok = rows["shadow_register"] > rows["memory_inc"] and mono
    record_criterion(9, ok, f"increments/s {rows}; monotone {mono}")
    assert ok


def test_c10_determinism(tmp_path, record_criterion):
    cfg = with_seed(DEFAULT, 10).replace(**{"attack.n_traces": 3})
    run_end_to_end(cfg, tmp_path / "a")
    run_end_to_end(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files = [f for f in files if f.name != "timing.json"]  # wall-clock durations
    differ = [str(f) for f in files if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
    ok = not differ and len(files) >= 8
    record_criterion(10, ok, f"{len(files)} files compared (traces, config, report, csv); differing: {differ}")
    assert ok
