"""End-to-end runs, parameter sweeps and noise calibration."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacker import (AttackerMemory, RawTrace, find_border, generate_eviction_set,
                       monitor, scan_vulnerable_sets)
from .address import cache_location
from .config import ExperimentConfig
from .kernel import Kernel, NoiseConfig
from .recovery import PartialKey, edit_distance, merge_keys, partial_key_from_trace
from .victim import Victim

log = logging.getLogger(__name__)

SWEEP_PARAMETERS = ("n_traces", "lookahead", "noise_scale")


class StageError(RuntimeError):
    """A pipeline stage failed; carries what is needed to replay it."""

    def __init__(self, stage: str, seed: int, cause: Exception):
        super().__init__(f"stage '{stage}' failed (seed {seed}): {cause}")
        self.stage = stage
        self.seed = seed
        self.cause = cause


@dataclass
class ExperimentReport:
    config_digest: str
    seed: int
    key_bits: int
    n_traces: int
    lookahead: int
    scan_mode: str
    monitored_set: list[int]
    eviction_set_size: int
    trials_to_find_set: int | None
    scan_simulated_seconds: float | None
    partial_error_rates: list[float]
    mean_partial_error_rate: float
    merged_bit_errors: int
    errors_vs_traces: list[int]
    recovered_key_hex: str
    true_key_hex: str
    mean_trace_span_cycles: float
    mean_mult_cycles: float | None  # spacing between consecutive multiplications
    mean_op_cycles: float | None  # one square or multiply
    mean_probe_cycles: float
    n_vulnerable_sets: int | None = None
    failed_traces: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def read(cls, path: str | Path) -> "ExperimentReport":
        return cls(**json.loads(Path(path).read_text()))


def make_kernel(cfg: ExperimentConfig) -> Kernel:
    return Kernel(cfg.geometry, cfg.dram_mapping, cfg.timing, cfg.noise, cfg.seed, cfg.resolution)


def make_victim(cfg: ExperimentConfig) -> Victim:
    return Victim(cfg.victim, cfg.geometry)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same experiment with a new run seed; the victim key follows it."""
    return cfg.replace(seed=seed, **{"victim.seed": seed})


@dataclass
class _Collected:
    """Traces and partial keys for one seeded run."""
    traces: list[RawTrace]
    partials: list[PartialKey | None]
    key_bits_true: list[int]
    # exponent actually used by each signature (differs only with blinding)
    per_trace_truth: list[list[int]]
    monitored: tuple[int, int]
    eviction_set_size: int
    trials: int | None
    scan_seconds: float | None
    n_vulnerable: int | None


def _stage(name, seed, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except Exception as e:  # noqa: BLE001 - re-raised with context
        raise StageError(name, seed, e) from e


def collect(cfg: ExperimentConfig, n_traces: int | None = None,
            timings: dict | None = None) -> _Collected:
    """Locate the target set and monitor ``n_traces`` signatures."""
    n = cfg.attack.n_traces if n_traces is None else n_traces
    timings = timings if timings is not None else {}
    seed = cfg.seed
    kernel = make_kernel(cfg)
    victim = make_victim(cfg)
    mem = AttackerMemory.allocate(seed, cfg.attack.memory_size)

    t = time.perf_counter()
    border = _stage("border", seed, find_border, kernel, mem)
    trials = scan_s = n_vuln = None
    if cfg.attack.scan_mode == "scan":
        res = _stage("scan", seed, scan_vulnerable_sets, kernel, mem, victim,
                     max_sets=cfg.attack.max_scan_sets, border=border)
        if not res.found:
            raise StageError("scan", seed, RuntimeError("no vulnerable set found"))
        loc = res.vulnerable[0]
        eset = res.eviction_sets[(loc.set, loc.slice)]
        trials, scan_s, n_vuln = res.trials_to_first, res.simulated_seconds, len(res.vulnerable)
    else:
        lines = victim.layout.lines
        interior = lines[1:-1] or lines
        line = interior[cfg.attack.known_line % len(interior)]
        loc = cache_location(line, kernel.geometry)
        eset = _stage("eviction_set", seed, generate_eviction_set, loc.set, kernel, mem,
                      border=border, slice_index=loc.slice)
    timings["locate_s"] = time.perf_counter() - t

    t = time.perf_counter()
    traces = [_stage("monitor", seed, monitor, eset, kernel, victim, signature=i, trace_id=f"trace-{i:03d}")
              for i in range(n)]
    timings["monitor_s"] = time.perf_counter() - t
    digest = cfg.digest()
    for tr in traces:
        tr.meta["config_digest"] = digest

    t = time.perf_counter()
    partials: list[PartialKey | None] = []
    for tr in traces:
        try:
            partials.append(partial_key_from_trace(tr, cfg.attack.mult_time, cfg.victim.key_bits))
        except ValueError as e:
            log.warning("seed %d %s: no key decoded (%s)", seed, tr.meta.get("trace_id"), e)
            partials.append(None)
    timings["decode_s"] = time.perf_counter() - t
    truth = victim.key.exponent_bits
    per = [victim.exponent_for(i).exponent_bits for i in range(n)]
    return _Collected(traces, partials, truth, per, (loc.set, loc.slice), len(eset), trials, scan_s, n_vuln)


def _errors(bits: Sequence[int], truth: Sequence[int]) -> int:
    return edit_distance(list(bits), list(truth))


def _merged_errors(partials: Sequence[PartialKey | None], truth, lookahead: int) -> int:
    usable = [p for p in partials if p is not None]
    if not usable:
        return len(truth)
    return _errors(merge_keys(usable, lookahead).bits, truth)


def run_end_to_end(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   lookaheads: Sequence[int] = (5, 10, 15, 20, 25, 30)) -> ExperimentReport:
    """Locate, monitor ``n_traces`` signatures, decode and merge.

    With ``out_dir`` the traces, ``report.json``, ``errors_vs_traces.csv``,
    ``errors_vs_lookahead.csv`` and ``timing.json`` (wall clock, kept out of
    the report so reports stay reproducible) are written there.
    """
    timings: dict = {}
    t_all = time.perf_counter()
    c = collect(cfg, timings=timings)
    truth = c.key_bits_true
    seed = cfg.seed
    rates = [(_errors(p.bits, t) / len(t)) if p is not None else 1.0
             for p, t in zip(c.partials, c.per_trace_truth)]
    t = time.perf_counter()
    L = cfg.attack.lookahead
    usable = [p for p in c.partials if p is not None]
    if not usable:
        raise StageError("recover", seed, RuntimeError("no trace could be decoded"))
    merged = _stage("recover", seed, merge_keys, usable, L)
    timings["recover_s"] = time.perf_counter() - t
    merged_err = _errors(merged.bits, truth)
    vs_traces = [_merged_errors(c.partials[:k], truth, L) for k in range(1, len(c.partials))] + [merged_err]
    ops = [p.mult_time for p in usable if p.mult_time]
    # a key with w ones and n bits runs n + w operations, w of them multiplies
    mults = [p.mult_time * (len(p.bits) + sum(p.bits)) / sum(p.bits) for p in usable if p.mult_time]
    report = ExperimentReport(
        config_digest=cfg.digest(),
        seed=seed,
        key_bits=cfg.victim.key_bits,
        n_traces=len(c.traces),
        lookahead=L,
        scan_mode=cfg.attack.scan_mode,
        monitored_set=list(c.monitored),
        eviction_set_size=c.eviction_set_size,
        trials_to_find_set=c.trials,
        scan_simulated_seconds=c.scan_seconds,
        partial_error_rates=rates,
        mean_partial_error_rate=float(np.mean(rates)),
        merged_bit_errors=merged_err,
        errors_vs_traces=vs_traces,
        recovered_key_hex=merged.hex(),
        true_key_hex=format(int("".join(map(str, truth)), 2), "x"),
        mean_trace_span_cycles=float(np.mean([tr.meta["span_cycles"] for tr in c.traces])),
        mean_mult_cycles=float(np.mean(mults)) if mults else None,
        mean_op_cycles=float(np.mean(ops)) if ops else None,
        mean_probe_cycles=float(np.mean([tr.meta["mean_probe_cycles"] for tr in c.traces])),
        n_vulnerable_sets=c.n_vulnerable,
        failed_traces=[i for i, p in enumerate(c.partials) if p is None],
    )
    timings["total_s"] = time.perf_counter() - t_all
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if cfg.output.write_traces:
            tdir = out / "traces"
            tdir.mkdir(exist_ok=True)
            for tr in c.traces:
                tr.write(tdir / f"{tr.meta['trace_id']}.csv")
        cfg.save(out / "config.json")
        report.write(out / "report.json")
        _write_csv(out / "errors_vs_traces.csv", ["n_traces", "bit_errors"],
                   [(k + 1, e) for k, e in enumerate(vs_traces)])
        _write_csv(out / "errors_vs_lookahead.csv", ["lookahead", "bit_errors"],
                   [(la, _merged_errors(c.partials, truth, la)) for la in lookaheads])
        (out / "timing.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return report


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepRow:
    value: float
    errors: list[int]
    partial_error: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def std(self) -> float:
        return float(np.std(self.errors))


@dataclass
class SweepResult:
    parameter: str
    seeds: list[int]
    rows: list[SweepRow]

    def table(self) -> str:
        lines = [f"{self.parameter:>12} {'mean':>10} {'std':>10} {'partial err':>12}"]
        for r in self.rows:
            lines.append(f"{r.value:>12g} {r.mean:>10.2f} {r.std:>10.2f} {np.mean(r.partial_error):>12.4f}")
        return "\n".join(lines)

    def write_csv(self, path: str | Path) -> None:
        rows = []
        for r in self.rows:
            for s, e, pe in zip(self.seeds, r.errors, r.partial_error):
                rows.append((r.value, s, e, pe))
        _write_csv(Path(path), [self.parameter, "seed", "bit_errors", "mean_partial_error"], rows)

    def to_dict(self) -> dict:
        return {"parameter": self.parameter, "seeds": self.seeds,
                "rows": [{"value": r.value, "errors": r.errors, "partial_error": r.partial_error,
                          "mean": r.mean, "std": r.std} for r in self.rows]}


def _sweep_one(args):
    cfg, parameter, values = args
    out = []
    if parameter == "noise_scale":
        base = cfg.noise
        for v in values:
            c = collect(cfg.replace(noise=base.scaled(v)))
            truth = c.key_bits_true
            out.append((_merged_errors(c.partials, truth, cfg.attack.lookahead),
                        _mean_partial(c.partials, c.per_trace_truth)))
        return out
    n_max = max(values) if parameter == "n_traces" else cfg.attack.n_traces
    c = collect(cfg, n_traces=int(n_max))
    truth = c.key_bits_true
    pe = _mean_partial(c.partials, c.per_trace_truth)
    for v in values:
        if parameter == "n_traces":
            e = _merged_errors(c.partials[:int(v)], truth, cfg.attack.lookahead)
        else:
            e = _merged_errors(c.partials, truth, int(v))
        out.append((e, pe))
    return out


def _mean_partial(partials, truths) -> float:
    return float(np.mean([_errors(p.bits, t) / len(t) if p is not None else 1.0
                          for p, t in zip(partials, truths)]))


def sweep(cfg: ExperimentConfig, parameter: str, values: Sequence[float], seeds: Sequence[int],
          workers: int = 1) -> SweepResult:
    """Seeded repetitions of the pipeline for each parameter value.

    ``n_traces`` and ``lookahead`` reuse one set of traces per seed (prefixes
    resp. different merges); ``noise_scale`` multiplies every noise rate and
    re-monitors.  Seeds run in separate processes when ``workers > 1``;
    results are placed by seed so the order of completion does not matter.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")
    values = list(values)
    if not values:
        raise ValueError("no sweep values")
    if parameter in ("n_traces", "lookahead") and any(v < 1 or v != int(v) for v in values):
        raise ValueError(f"{parameter} values must be positive integers")
    seeds = list(seeds)
    jobs = [(with_seed(cfg, s), parameter, values) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    rows = [SweepRow(float(v), [results[si][vi][0] for si in range(len(seeds))],
                     [results[si][vi][1] for si in range(len(seeds))]) for vi, v in enumerate(values)]
    return SweepResult(parameter, seeds, rows)


# ---------------------------------------------------------------- calibration

@dataclass
class NoiseCalibration:
    noise: NoiseConfig
    target: float
    achieved: float
    converged: bool
    runs: int
    history: list[tuple[float, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"noise": dataclasses.asdict(self.noise), "target": self.target, "achieved": self.achieved,
                "converged": self.converged, "runs": self.runs, "history": [list(h) for h in self.history]}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NoiseCalibration":
        d = json.loads(Path(path).read_text())
        return cls(NoiseConfig(**d["noise"]), d["target"], d["achieved"], d["converged"], d["runs"],
                   [tuple(h) for h in d["history"]])


def single_trace_error(cfg: ExperimentConfig, noise: NoiseConfig, n_traces: int, seeds: Sequence[int]) -> float:
    """Mean partial-key error rate over ``n_traces`` traces for each seed."""
    errs = []
    for s in seeds:
        c = collect(with_seed(cfg, s).replace(noise=noise), n_traces=n_traces)
        errs.append(_mean_partial(c.partials, c.per_trace_truth))
    return float(np.mean(errs))


def calibrate_noise(target: float, budget: int = 200, cfg: ExperimentConfig | None = None,
                    shape: NoiseConfig | None = None, traces_per_eval: int = 10, seeds: Sequence[int] = (1, 2),
                    tolerance: float = 0.01, grid_step: float = 2 ** 0.25,
                    path: str | Path | None = None) -> NoiseCalibration:
    """Fit the interrupt and spurious-miss rates to a single-trace error target.

    Coordinate descent over a log-spaced grid (ratio ``grid_step``): each
    coordinate is moved up or down the grid while that brings the measured
    error closer to ``target``.  The mix of descheduling kinds and the
    interrupt durations come from ``shape``.  Every evaluation monitors
    ``traces_per_eval`` traces for each seed (one run = one trace).  If the
    error is not within ``tolerance`` when ``budget`` runs are used up, the
    closest configuration is returned flagged unconverged.
    """
    if not 0 <= target < 0.5:
        raise ValueError("target must be in [0, 0.5)")
    from .config import CALIBRATED_NOISE

    cfg = cfg or ExperimentConfig()
    cfg = cfg.replace(**{"attack.scan_mode": "known"})
    if target == 0:
        res = NoiseCalibration(NoiseConfig(), 0.0, 0.0, True, 0)
        if path:
            res.save(path)
        return res
    shape = shape or CALIBRATED_NOISE
    per_eval = traces_per_eval * len(seeds)
    coords = ["interrupt_rate", "spurious_miss_rate"]
    # log2 offsets of each coordinate relative to ``shape``
    pos = {c: 0 for c in coords}
    cache: dict[tuple, float] = {}
    runs = 0
    history = []

    def noise_at(p) -> NoiseConfig:
        k = {c: getattr(shape, c) * grid_step ** p[c] for c in coords}
        k["spurious_miss_rate"] = min(k["spurious_miss_rate"], 1.0)
        return dataclasses.replace(shape, **k)

    def evaluate(p) -> float | None:
        nonlocal runs
        key = tuple(p[c] for c in coords)
        if key in cache:
            return cache[key]
        if runs + per_eval > budget:
            return None
        nz = noise_at(p)
        err = single_trace_error(cfg, nz, traces_per_eval, seeds)
        runs += per_eval
        cache[key] = err
        history.append((nz.interrupt_rate, nz.spurious_miss_rate, err))
        log.info("calibrate: rate=%.4g spurious=%.3g -> %.4f", nz.interrupt_rate, nz.spurious_miss_rate, err)
        return err

    best = dict(pos)
    best_err = evaluate(pos)
    if best_err is None:
        raise ValueError(f"budget {budget} smaller than one evaluation ({per_eval} runs)")
    improved = True
    while abs(best_err - target) > tolerance and improved:
        improved = False
        for c in coords:
            direction = 1 if best_err < target else -1
            while abs(best_err - target) > tolerance:
                cand = dict(best)
                cand[c] += direction
                err = evaluate(cand)
                if err is None or abs(err - target) >= abs(best_err - target):
                    break
                best, best_err, improved = cand, err, True
            if abs(best_err - target) <= tolerance:
                break
    res = NoiseCalibration(noise_at(best), target, best_err, abs(best_err - target) <= tolerance, runs, history)
    if path:
        res.save(path)
    return res


__all__ = ["ExperimentReport", "NoiseCalibration", "StageError", "SweepResult", "SWEEP_PARAMETERS",
           "calibrate_noise", "collect", "make_kernel", "make_victim", "run_end_to_end",
           "single_trace_error", "sweep", "with_seed"]
