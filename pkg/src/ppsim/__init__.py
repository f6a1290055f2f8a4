"""Simulated Prime+Probe attack on square-and-multiply RSA inside an enclave.

A deterministic, seeded model of a sliced last-level cache, DRAM row
buffers and an interrupt-driven scheduler, plus the attacker's online
phase (eviction sets, vulnerable-set scan, monitoring) and offline phase
(resampling, peak detection, multi-trace key merge).
"""
from .address import (CacheGeometry, CacheLocation, DramLocation, DramMapping, cache_location,
                      dram_location, find_row_start_pairs)
from .attacker import (AttackerMemory, EvictionSet, RawTrace, ScanResult, generate_eviction_set,
                       monitor, prime_probe, scan_vulnerable_sets)
from .cache import CacheState, eviction_rate
from .config import CALIBRATED_NOISE, ConfigError, ExperimentConfig
from .dram import BankState
from .harness import (ExperimentReport, calibrate_noise, collect, run_end_to_end, single_trace_error,
                      sweep)
from .kernel import Kernel, NoiseConfig, VirtualClock
from .recovery import (PartialKey, RecoveredKey, detect_peaks, edit_distance, edit_distance_actions,
                       extract_partial_key, merge_keys, partial_key_from_trace, resample)
from .victim import RsaKey, Victim, VictimConfig, allocate_victim, mod_exp

__version__ = "0.1.0"

__all__ = [
    "AttackerMemory", "BankState", "CALIBRATED_NOISE", "CacheGeometry", "CacheLocation", "CacheState",
    "ConfigError", "DramLocation", "DramMapping", "EvictionSet", "ExperimentConfig", "ExperimentReport",
    "Kernel", "NoiseConfig", "PartialKey", "RawTrace", "RecoveredKey", "RsaKey", "ScanResult", "Victim",
    "VictimConfig", "VirtualClock", "allocate_victim", "cache_location", "calibrate_noise", "collect",
    "detect_peaks", "dram_location", "edit_distance", "edit_distance_actions", "eviction_rate",
    "extract_partial_key", "find_row_start_pairs", "generate_eviction_set", "merge_keys", "mod_exp",
    "monitor", "partial_key_from_trace", "prime_probe", "resample", "run_end_to_end", "scan_vulnerable_sets",
    "single_trace_error", "sweep",
]
