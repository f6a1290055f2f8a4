"""Command-line entry point (``ppsim``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig

EXIT_OK = 0
EXIT_ASSERT = 1
EXIT_USAGE = 2


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes.update({"seed": args.seed, "victim.seed": args.seed})
    if args.out_dir is not None:
        changes["output.out_dir"] = args.out_dir
    if getattr(args, "traces", None) is not None:
        changes["attack.n_traces"] = args.traces
    if getattr(args, "scan_mode", None) is not None:
        changes["attack.scan_mode"] = args.scan_mode
    if getattr(args, "lookahead", None) is not None:
        changes["attack.lookahead"] = args.lookahead
    if getattr(args, "zero_noise", False):
        from .kernel import NoiseConfig
        changes["noise"] = NoiseConfig()
    return cfg.replace(**changes) if changes else cfg


def _check(name: str, ok: bool, detail: str) -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


def cmd_e2e(args) -> int:
    from .harness import run_end_to_end

    cfg = _config(args)
    rep = run_end_to_end(cfg, cfg.output.out_dir)
    print(f"seed {rep.seed}: monitored set {rep.monitored_set}, "
          f"partial error {rep.mean_partial_error_rate:.4f}, merged bit errors {rep.merged_bit_errors}")
    ok = True
    if args.max_errors is not None:
        ok &= _check("merged errors", rep.merged_bit_errors <= args.max_errors,
                     f"{rep.merged_bit_errors} <= {args.max_errors}")
    if args.max_partial_error is not None:
        ok &= _check("partial error", rep.mean_partial_error_rate <= args.max_partial_error,
                     f"{rep.mean_partial_error_rate:.4f} <= {args.max_partial_error}")
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_sweep(args) -> int:
    from .harness import sweep

    cfg = _config(args)
    values = [float(v) for v in args.values.split(",")]
    if args.param in ("n_traces", "lookahead"):
        values = [int(v) for v in values]
    base = cfg.seed
    res = sweep(cfg, args.param, values, range(base, base + args.runs), workers=args.workers)
    print(res.table())
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / f"sweep_{args.param}.csv")
    (out / f"sweep_{args.param}.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
    ok = True
    if args.expect_nonincreasing:
        means = [r.mean for r in res.rows]
        ok &= _check("nonincreasing", all(b <= a for a, b in zip(means, means[1:])), str(means))
    return EXIT_OK if ok else EXIT_ASSERT


def cmd_calibrate(args) -> int:
    from .harness import calibrate_noise

    cfg = _config(args)
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = calibrate_noise(args.target, args.budget, cfg, traces_per_eval=args.traces_per_eval,
                          path=out / "noise_calibration.json")
    print(json.dumps(res.to_dict()["noise"], indent=2, sort_keys=True))
    return EXIT_OK if _check("converged", res.converged,
                             f"error {res.achieved:.4f} vs target {res.target} after {res.runs} runs") \
        else EXIT_ASSERT


def cmd_scan(args) -> int:
    from .attacker import AttackerMemory, scan_vulnerable_sets
    from .harness import make_kernel, make_victim

    cfg = _config(args)
    kernel = make_kernel(cfg)
    victim = None if args.no_victim else make_victim(cfg)
    mem = AttackerMemory.allocate(cfg.seed, cfg.attack.memory_size)
    res = scan_vulnerable_sets(kernel, mem, victim, key_bits=cfg.victim.key_bits, order=args.order,
                               max_sets=args.max_sets)
    summary = {
        "matches": [[loc.set, loc.slice] for loc in res.matches],
        "vulnerable": [[loc.set, loc.slice] for loc in res.vulnerable],
        "trials_to_first": res.trials_to_first,
        "trials": res.trials,
        "simulated_seconds": res.simulated_seconds,
    }
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scan.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    if not res.found:
        print("no vulnerable set found")
        return EXIT_ASSERT
    return EXIT_OK


def cmd_monitor(args) -> int:
    from .attacker import AttackerMemory, generate_eviction_set, monitor
    from .address import cache_location
    from .harness import make_kernel, make_victim

    cfg = _config(args)
    kernel = make_kernel(cfg)
    victim = make_victim(cfg)
    mem = AttackerMemory.allocate(cfg.seed, cfg.attack.memory_size)
    if args.set is not None:
        set_index, slice_index = args.set, args.slice
    else:
        loc = cache_location(victim.layout.lines[args.line], kernel.geometry)
        set_index, slice_index = loc.set, loc.slice
    eset = generate_eviction_set(set_index, kernel, mem, slice_index=slice_index)
    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(cfg.attack.n_traces):
        tr = monitor(eset, kernel, victim, signature=i, trace_id=f"trace-{i:03d}")
        tr.write(out / f"trace-{i:03d}.csv")
        print(f"trace-{i:03d}: {len(tr)} misses, span {tr.meta['span_cycles']:.0f} cycles")
    return EXIT_OK


def cmd_recover(args) -> int:
    from .attacker import RawTrace
    from .recovery import edit_distance, merge_keys, partial_key_from_trace

    partials = []
    for p in args.traces:
        try:
            partials.append(partial_key_from_trace(RawTrace.read(p), args.mult_time, args.key_bits))
        except ValueError as e:
            print(f"{p}: skipped ({e})", file=sys.stderr)
    if not partials:
        print("no trace could be decoded", file=sys.stderr)
        return EXIT_ASSERT
    key = merge_keys(partials, args.lookahead)
    ref = None
    if args.key_hex:
        ref = [int(c) for c in bin(int(args.key_hex, 16))[2:]]
    rep = key.report(partials, ref)
    if args.out:
        Path(args.out).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(key.hex())
    if ref is not None:
        err = edit_distance(key.bits, ref)
        if args.max_errors is not None:
            return EXIT_OK if _check("bit errors", err <= args.max_errors, f"{err} <= {args.max_errors}") \
                else EXIT_ASSERT
        print(f"bit errors: {err}")
    return EXIT_OK


def cmd_timer_bench(args) -> int:
    from .timer import TimerUnavailable, available_cpus, bench, format_table

    if len(available_cpus()) < 2 and not args.force:
        print("timer bench skipped: needs at least 2 hardware threads")
        return EXIT_ASSERT if args.require else EXIT_OK
    try:
        rows = bench(args.duration, force=args.force)
    except TimerUnavailable as e:
        print(f"timer bench unavailable: {e}")
        return EXIT_ASSERT if args.require else EXIT_OK
    print(format_table(rows))
    if args.require:
        rate = {r.variant: r.rate for r in rows}
        return EXIT_OK if _check("shadow faster", rate["shadow_register"] > rate["memory_inc"],
                                 f"{rate['shadow_register']:.4g} vs {rate['memory_inc']:.4g}") \
            else EXIT_ASSERT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="run seed (also selects the victim key)")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ppsim", description="Simulated Prime+Probe RSA key recovery.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("e2e", parents=[common], help="locate, monitor, decode and merge")
    e.add_argument("--traces", type=int)
    e.add_argument("--lookahead", type=int)
    e.add_argument("--scan-mode", choices=("scan", "known"))
    e.add_argument("--zero-noise", action="store_true")
    e.add_argument("--max-errors", type=int, help="assert merged bit errors <= N")
    e.add_argument("--max-partial-error", type=float, help="assert mean partial error rate <= X")
    e.set_defaults(func=cmd_e2e)

    s = sub.add_parser("sweep", parents=[common], help="repeat runs over a parameter")
    s.add_argument("--param", required=True, choices=("n_traces", "lookahead", "noise_scale"))
    s.add_argument("--values", required=True, help="comma separated values")
    s.add_argument("--runs", type=int, default=5, help="seeds per value, starting at --seed")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--traces", type=int)
    s.add_argument("--lookahead", type=int)
    s.add_argument("--scan-mode", choices=("scan", "known"), default="known")
    s.add_argument("--zero-noise", action="store_true")
    s.add_argument("--expect-nonincreasing", action="store_true")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("calibrate", parents=[common], help="fit noise rates to a single-trace error")
    c.add_argument("--target", type=float, default=0.04)
    c.add_argument("--budget", type=int, default=200)
    c.add_argument("--traces-per-eval", type=int, default=10)
    c.set_defaults(func=cmd_calibrate)

    sc = sub.add_parser("scan", parents=[common], help="search for vulnerable cache sets")
    sc.add_argument("--order", choices=("random", "sequential"), default="random")
    sc.add_argument("--max-sets", type=int)
    sc.add_argument("--no-victim", action="store_true", help="scan without a signing victim")
    sc.set_defaults(func=cmd_scan)

    m = sub.add_parser("monitor", parents=[common], help="record traces of one cache set")
    m.add_argument("--traces", type=int)
    m.add_argument("--set", type=int, help="cache set index (default: a victim buffer line)")
    m.add_argument("--slice", type=int, default=0)
    m.add_argument("--line", type=int, default=4, help="victim buffer line to target without --set")
    m.add_argument("--zero-noise", action="store_true")
    m.set_defaults(func=cmd_monitor)

    r = sub.add_parser("recover", help="decode and merge recorded traces")
    r.add_argument("traces", nargs="+", help="trace CSV files")
    r.add_argument("--lookahead", type=int, default=20)
    r.add_argument("--mult-time", type=float)
    r.add_argument("--key-bits", type=int)
    r.add_argument("--key-hex", help="true exponent for error counting")
    r.add_argument("--max-errors", type=int)
    r.add_argument("--out", help="write the recovery report (JSON)")
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_recover)

    t = sub.add_parser("timer-bench", help="counting-thread timer on this machine")
    t.add_argument("--duration", type=float, default=0.2)
    t.add_argument("--force", action="store_true", help="run even with a single hardware thread")
    t.add_argument("--require", action="store_true", help="fail unless the shadow variant is faster")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_timer_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
