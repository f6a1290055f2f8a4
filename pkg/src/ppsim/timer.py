"""Software counting-thread timer on real hardware.

A C helper increments a shared 64-bit counter in a tight loop on its own
thread.  Two loop bodies are provided:

* ``memory_inc``: increments the counter in memory each iteration.
* ``shadow_register``: increments a register and stores it each iteration.

The helper is compiled on first use with the system C compiler and loaded
through ctypes; the loop runs with the GIL released.
"""
from __future__ import annotations

import ctypes
import hashlib
import os
import shutil
import statistics
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

VARIANTS = ("memory_inc", "shadow_register")

_C_SOURCE = r"""
#include <stdint.h>
#include <stdatomic.h>

/* Loops stop when *stop becomes nonzero. Reads of *stop are relaxed so the
   loop body stays one increment + one store. */

void memory_inc(volatile uint64_t *counter, volatile int *stop) {
    while (!*stop) {
        (*counter)++;
    }
}

void shadow_register(volatile uint64_t *counter, volatile int *stop) {
    uint64_t r = *counter;
    while (!*stop) {
        r++;
        __atomic_store_n((uint64_t *)counter, r, __ATOMIC_RELEASE);
    }
}

uint64_t read_counter(volatile uint64_t *counter) {
    return __atomic_load_n((uint64_t *)counter, __ATOMIC_ACQUIRE);
}
"""


class TimerUnavailable(RuntimeError):
    pass


def _cache_dir() -> Path:
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "ppsim"


_lib = None
_lib_lock = threading.Lock()


def _load_library() -> ctypes.CDLL:
    global _lib
    with _lib_lock:
        if _lib is not None:
            return _lib
        cc = os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc") or shutil.which("clang")
        if cc is None:
            raise TimerUnavailable("no C compiler found (set CC)")
        digest = hashlib.sha256(_C_SOURCE.encode()).hexdigest()[:12]
        out_dir = _cache_dir()
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError:
            out_dir = Path(tempfile.gettempdir())
        so = out_dir / f"counting_{digest}.so"
        if not so.exists():
            with tempfile.TemporaryDirectory() as tmp:
                src = Path(tmp) / "counting.c"
                src.write_text(_C_SOURCE)
                tmp_so = Path(tmp) / so.name
                r = subprocess.run([cc, "-O2", "-shared", "-fPIC", str(src), "-o", str(tmp_so)],
                                   capture_output=True, text=True)
                if r.returncode != 0:
                    raise TimerUnavailable(f"compiling counting thread failed:\n{r.stderr}")
                shutil.move(str(tmp_so), so)
        lib = ctypes.CDLL(str(so))
        ptr64 = ctypes.POINTER(ctypes.c_uint64)
        ptri = ctypes.POINTER(ctypes.c_int)
        for name in VARIANTS:
            fn = getattr(lib, name)
            fn.argtypes = [ptr64, ptri]
            fn.restype = None
        lib.read_counter.argtypes = [ptr64]
        lib.read_counter.restype = ctypes.c_uint64
        _lib = lib
        return lib


def available_cpus() -> list[int]:
    if hasattr(os, "sched_getaffinity"):
        return sorted(os.sched_getaffinity(0))
    return list(range(os.cpu_count() or 1))


class TimerHandle:
    """One counter thread and its shared counter."""

    def __init__(self, variant: str, cpu: int | None = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        self.variant = variant
        self.cpu = cpu
        self.pinned = False
        self._lib = _load_library()
        self._counter = ctypes.c_uint64(0)
        self._stop = ctypes.c_int(0)
        self._thread: threading.Thread | None = None

    def _run(self):
        if self.cpu is not None and hasattr(os, "sched_setaffinity"):
            try:
                os.sched_setaffinity(0, {self.cpu})  # 0 = calling thread on Linux
                self.pinned = True
            except OSError:
                self.pinned = False
        getattr(self._lib, self.variant)(ctypes.byref(self._counter), ctypes.byref(self._stop))

    def start(self) -> "TimerHandle":
        self._thread = threading.Thread(target=self._run, name=f"counter-{self.variant}", daemon=True)
        self._thread.start()
        return self

    def read(self) -> int:
        return int(self._lib.read_counter(ctypes.byref(self._counter)))

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def stop(self, timeout: float = 1.0) -> None:
        self._stop.value = 1
        if self._thread is not None:
            self._thread.join(timeout)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_timer(variant: str = "shadow_register", force: bool = False) -> TimerHandle:
    """Spawn a counter thread, pinned to a different CPU than the caller if possible.

    Needs two hardware threads: on one CPU the counter only advances while
    the reader is descheduled, so it is useless as a clock.  ``force``
    starts it anyway (for functional tests).
    """
    cpus = available_cpus()
    if len(cpus) < 2 and not force:
        raise TimerUnavailable(
            "counting thread needs at least 2 hardware threads; only "
            f"{len(cpus)} available. Use the simulator's virtual clock instead.")
    cpu = cpus[-1] if len(cpus) >= 2 else None
    if len(cpus) >= 2 and hasattr(os, "sched_setaffinity"):
        try:
            os.sched_setaffinity(0, set(cpus[:-1]))
        except OSError:
            pass
    return TimerHandle(variant, cpu).start()


@dataclass
class Calibration:
    variant: str
    rate: float  # increments per reference-clock second
    stddev: float
    samples: int
    unstable: bool

    def increments_per_tick(self, tick_hz: float = 1e9) -> float:
        return self.rate / tick_hz


def calibrate(handle: TimerHandle, duration: float = 0.1, samples: int = 5,
              reference=time.perf_counter_ns) -> Calibration:
    """Increment rate against ``reference`` (ns clock) over ``samples`` windows.

    The total measured time is at least ``duration`` seconds.  A relative
    standard deviation above 20 % flags the result unstable.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    window = max(duration / samples, 1e-3)
    rates = []
    for _ in range(samples):
        c0, t0 = handle.read(), reference()
        time.sleep(window)
        c1, t1 = handle.read(), reference()
        rates.append((c1 - c0) / max(t1 - t0, 1) * 1e9)
    mean = statistics.fmean(rates)
    sd = statistics.pstdev(rates) if len(rates) > 1 else 0.0
    unstable = mean > 0 and sd > 0.2 * mean
    return Calibration(handle.variant, mean, sd, len(rates), unstable)


def bench(duration: float = 0.2, force: bool = False) -> list[Calibration]:
    """Calibrate both variants back to back."""
    out = []
    for v in VARIANTS:
        with start_timer(v, force=force) as h:
            time.sleep(0.01)
            out.append(calibrate(h, duration))
    return out


def format_table(rows: list[Calibration]) -> str:
    ref = {r.variant: r.rate for r in rows}
    lines = [f"{'variant':<16}{'increments/s':>16}{'stddev':>14}{'vs memory_inc':>15}{'  flag'}"]
    for r in rows:
        ratio = r.rate / ref["memory_inc"] if ref.get("memory_inc") else float("nan")
        lines.append(f"{r.variant:<16}{r.rate:>16.4g}{r.stddev:>14.3g}{ratio:>15.3f}"
                     f"  {'unstable' if r.unstable else ''}")
    return "\n".join(lines)


if __name__ == "__main__":  # pragma: no cover
    print(format_table(bench(force="--force" in sys.argv)))
