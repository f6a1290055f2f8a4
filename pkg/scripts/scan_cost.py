#!/usr/bin/env python3
"""Cost of finding the victim's buffer: trials and simulated time per seed."""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from ppsim.attacker import AttackerMemory, scan_vulnerable_sets
from ppsim.config import ExperimentConfig
from ppsim.harness import make_kernel, make_victim, with_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=4000)
    ap.add_argument("--out", default="scripts/results/scan_cost.json")
    a = ap.parse_args()
    rows = []
    for s in range(a.first_seed, a.first_seed + a.seeds):
        cfg = with_seed(ExperimentConfig(), s)
        k, v = make_kernel(cfg), make_victim(cfg)
        t = time.perf_counter()
        res = scan_vulnerable_sets(k, AttackerMemory.allocate(s), v)
        truth = {(loc.set, loc.slice) for loc in v.layout.spanned_sets}
        rows.append({
            "seed": s, "trials_to_first": res.trials_to_first, "trials": res.trials,
            "simulated_seconds": res.simulated_seconds, "wall_seconds": time.perf_counter() - t,
            "matches": len(res.matches), "vulnerable": len(res.vulnerable),
            "vulnerable_in_buffer": sum((m.set, m.slice) in truth for m in res.vulnerable),
        })
        print(rows[-1], flush=True)
    first = [r["trials_to_first"] for r in rows if r["trials_to_first"] is not None]
    summary = {"runs": rows, "mean_trials_to_first": float(np.mean(first)) if first else None,
               "mean_simulated_minutes": float(np.mean([r["simulated_seconds"] for r in rows]) / 60)}
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Path(a.out).write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}, indent=2))


if __name__ == "__main__":
    main()
