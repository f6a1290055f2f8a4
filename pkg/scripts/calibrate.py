#!/usr/bin/env python3
"""Fit the interrupt and spurious-miss rates to a target single-trace error."""
import argparse
import logging

from ppsim.harness import calibrate_noise


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", type=float, default=0.04)
    ap.add_argument("--budget", type=int, default=400)
    ap.add_argument("--tolerance", type=float, default=0.0025)
    ap.add_argument("--seeds", default="101,102,103,104")
    ap.add_argument("--out", default="scripts/results/noise_calibration.json")
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    res = calibrate_noise(a.target, a.budget, seeds=tuple(int(s) for s in a.seeds.split(",")),
                          tolerance=a.tolerance, grid_step=2 ** 0.125, path=a.out)
    print(f"converged={res.converged} error={res.achieved:.4f} runs={res.runs}")
    print(res.noise)


if __name__ == "__main__":
    main()
