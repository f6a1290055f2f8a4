import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppsim.attacker import RawTrace
from ppsim.recovery import (PartialKey, ResampledTrace, TraceTooShort, apply_actions, detect_peaks,
                            edit_distance, edit_distance_actions, estimate_mult_time, extract_partial_key,
                            merge_keys, resample)

import oracles

bitlists = st.lists(st.integers(0, 1), max_size=12)

# five partial keys from the worked merge example, first five bits already recovered
TABLE_III = [
    "10111" "1" "10001100110010111101010000100",
    "10111" "0" "11000111001100101101101010000",
    "10111" "1" "10001110011001011110101000010",
    "10111" "1" "10001110001100101111010100001",
    "10111" "1" "10001110011001011100010100001",
]


def raw(ts, lat, start=0, end=100_000, baseline=None):
    meta = {"resolution": 1.0}
    if baseline is not None:
        meta["baseline_cycles"] = baseline
    return RawTrace(ts, lat, start, end, meta)


# ---------------------------------------------------------------- resampling

def test_no_misses_zero_signal():
    rt = resample(raw([], []))
    assert len(rt.values) == 100 and not rt.values.any()


def test_single_miss_plateau():
    L = 800
    rt = resample(raw([50_000], [L], baseline=700))
    hot = np.flatnonzero(rt.values)
    assert np.allclose(rt.values[hot], L ** 2 / 10_000)
    assert rt.times[hot].min() > 45_000 and rt.times[hot].max() <= 55_000
    assert len(hot) == 10
    assert rt.times[hot].mean() == pytest.approx(50_000, abs=1000)


def test_burst_beats_background():
    burst = list(range(40_000, 50_000, 700))
    background = [5_000, 20_000, 75_000, 90_000]
    ts = sorted(burst + background)
    rt = resample(raw(ts, [800] * len(ts), baseline=700))
    assert rt.values.max() > 5 * rt.values[(rt.times < 30_000)].max()


def test_outlier_interpolated():
    ts = [20_000, 50_000, 80_000]
    rt = resample(raw(ts, [800, 100_000, 800], baseline=700))
    assert rt.n_interpolated > 0
    assert rt.values.max() < 100_000 ** 2 / 10_000
    # without a baseline the median latency is the reference
    assert resample(raw(ts, [800, 100_000, 800])).n_interpolated == rt.n_interpolated


def test_too_short():
    with pytest.raises(TraceTooShort):
        resample(raw([], [], 0, 5000))


# ---------------------------------------------------------------- peaks

def signal_with(peaks_at, heights, n=2000, width=1):
    v = np.zeros(n)
    for p, h in zip(peaks_at, heights):
        v[p:p + width] = h
    return ResampledTrace(v, 0.0, 1000)


def test_flat_signal_no_peaks():
    assert len(detect_peaks(ResampledTrace(np.full(500, 3.0), 0.0), 10_000)) == 0
    assert len(detect_peaks(ResampledTrace(np.zeros(500), 0.0), 10_000)) == 0


@pytest.mark.parametrize("smooth", [False, True])
def test_overlapping_maxima_merge(smooth):
    rt = signal_with([100, 105], [10.0, 9.0])
    assert len(detect_peaks(rt, 10_000, smooth=smooth)) == 1


@pytest.mark.parametrize("smooth", [False, True])
def test_adaptive_threshold(smooth):
    pos = [100 + 30 * i for i in range(12)]
    low = signal_with(pos, [10.0] * 11 + [8.5])
    assert len(detect_peaks(low, 10_000, smooth=smooth)) == 11
    ok = signal_with(pos, [10.0] * 11 + [9.5])
    assert len(detect_peaks(ok, 10_000, smooth=smooth)) == 12


@given(st.lists(st.floats(0, 50), min_size=200, max_size=400), st.floats(0.01, 1000))
def test_peaks_scale_invariant(values, c):
    v = np.asarray(values)
    a = detect_peaks(ResampledTrace(v, 0.0), 5000)
    b = detect_peaks(ResampledTrace(v * c, 0.0), 5000)
    assert np.array_equal(a, b)


def test_mult_time_validation():
    with pytest.raises(ValueError):
        detect_peaks(signal_with([1], [1.0]), 0)


# ---------------------------------------------------------------- decoding

@pytest.mark.parametrize("gaps,bits", [([2, 2], [1, 1, 1]), ([3], [1, 0, 1]), ([2, 5, 2], [1, 1, 0, 0, 0, 1, 1])])
def test_gap_decoding(gaps, bits):
    T = 1000.0
    peaks = np.concatenate(([0.0], np.cumsum(gaps) * T))
    assert extract_partial_key(peaks, T).bits == bits == oracles.decode_gaps(gaps)


@given(st.lists(st.integers(0, 1), max_size=80), st.floats(0.95, 1.05))
def test_framed_roundtrip(tail, scale):
    bits = [1] + tail
    last = max(i for i, b in enumerate(bits) if b)
    T = 35_000.0
    # set-up burst one step before, clean-up burst after the exponent
    peaks = oracles.encode_peaks([1] + bits[:last + 1] + [1], T)
    est = estimate_mult_time(peaks, initial=T * scale)
    assert est == pytest.approx(T)
    assert extract_partial_key(peaks, est, framed=True).bits == bits[:last + 1]


def test_decoding_errors():
    with pytest.raises(ValueError):
        extract_partial_key([1.0], 10.0)
    with pytest.raises(ValueError):
        extract_partial_key([0.0, 10.0], 0)
    with pytest.raises(ValueError):
        estimate_mult_time([5.0])
    with pytest.raises(ValueError):
        PartialKey([0, 1])


# ---------------------------------------------------------------- edit distance

def test_edit_distance_examples():
    assert edit_distance([1, 0, 1, 1, 1], [1, 0, 1, 1, 1]) == 0
    d, acts = edit_distance_actions([1, 0, 1, 1, 1], [1, 0, 1, 1])
    assert d == 1 and [a.kind for a in acts if a.kind != "match"] == ["delete"]
    assert edit_distance([], [1, 1]) == 2 and edit_distance([1], []) == 1


@given(bitlists, bitlists)
def test_edit_distance_oracle(a, b):
    d = oracles.levenshtein_recursive(a, b)
    assert edit_distance(a, b) == d
    dist, acts = edit_distance_actions(a, b)
    assert dist == d
    assert sum(x.kind != "match" for x in acts) == d
    assert apply_actions(a, acts) == list(b)


@given(st.lists(st.integers(0, 1), max_size=200), st.lists(st.integers(0, 1), max_size=200))
def test_edit_distance_long_symmetric(a, b):
    assert edit_distance(a, b) == edit_distance(b, a) == edit_distance_actions(a, b)[0]


# ---------------------------------------------------------------- merge

def test_worked_merge_example():
    parts = [[int(c) for c in s] for s in TABLE_III]
    rec = merge_keys(parts, lookahead=20)
    assert rec.bits[5] == 1
    at6 = [(pos, w, kind) for pos, w, kind in rec.applied if pos == 5]
    assert at6 == [(5, 1, "delete")]


def test_single_partial_identity():
    bits = [1, 0, 1, 1, 0, 0, 1]
    assert merge_keys([PartialKey(bits)]).bits == bits


@given(st.lists(st.integers(0, 1), min_size=30, max_size=120), st.data())
def test_merge_corrects_one_error_per_key(tail, data):
    truth = [1] + tail
    parts = []
    for i in range(5):
        k = list(truth)
        pos = data.draw(st.integers(5 + 5 * i, len(k) - 1))
        kind = data.draw(st.sampled_from(["flip", "drop", "add"]))
        if kind == "flip":
            k[pos] ^= 1
        elif kind == "drop":
            del k[pos]
        else:
            k.insert(pos, 1 - k[pos])
        parts.append(k)
    rec = merge_keys(parts, 20)
    # the end of the key can lose the last bits when most keys run out first
    assert edit_distance(rec.bits, truth) <= 1


def test_merge_validation_and_report(tmp_path):
    with pytest.raises(ValueError):
        merge_keys([])
    with pytest.raises(ValueError):
        merge_keys([[1]], lookahead=0)
    rec = merge_keys([[1, 0, 1], [1, 0, 1], [1, 1, 1]])
    assert rec.hex() == "5"
    rep = rec.report([PartialKey([1, 1, 1])], [1, 0, 1])
    assert rep["bit_errors"] == 0 and rep["partial_edit_distances"] == [1]
    rec.write(tmp_path / "r.json", reference=[1, 0, 1])
    assert (tmp_path / "r.json").read_text().startswith("{")
