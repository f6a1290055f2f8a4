#!/usr/bin/env python3
"""One end-to-end attack: locate the buffer, monitor, decode, merge."""
import argparse
import json

from ppsim.config import ExperimentConfig
from ppsim.harness import run_end_to_end, with_seed
from ppsim.kernel import NoiseConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--traces", type=int, default=11)
    ap.add_argument("--scan-mode", choices=("scan", "known"), default="scan")
    ap.add_argument("--zero-noise", action="store_true")
    ap.add_argument("--out", default="scripts/results/e2e")
    a = ap.parse_args()
    cfg = with_seed(ExperimentConfig(), a.seed).replace(
        **{"attack.n_traces": a.traces, "attack.scan_mode": a.scan_mode})
    if a.zero_noise:
        cfg = cfg.replace(noise=NoiseConfig())
    rep = run_end_to_end(cfg, a.out)
    keep = ("monitored_set", "trials_to_find_set", "mean_partial_error_rate", "merged_bit_errors",
            "errors_vs_traces", "mean_trace_span_cycles", "mean_mult_cycles", "mean_probe_cycles")
    print(json.dumps({k: getattr(rep, k) for k in keep}, indent=2))


if __name__ == "__main__":
    main()
