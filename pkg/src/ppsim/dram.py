"""Row-buffer timing per DRAM bank."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .address import DramLocation, DramMapping, dram_location


@dataclass(frozen=True)
class DramTiming:
    row_hit: int = 200
    closed_row: int = 250
    row_conflict: int = 350
    jitter: int = 5

    def __post_init__(self):
        if not self.row_conflict > self.closed_row > self.row_hit > 0:
            raise ValueError("need row_conflict > closed_row > row_hit > 0")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")


class BankState:
    """Open row per (channel, rank, bank_group, bank).

    ``jitter`` cycles of uniform integer noise are added to every access,
    drawn from ``rng`` so runs are reproducible.
    """

    def __init__(self, mapping: DramMapping | None = None, timing: DramTiming | None = None,
                 rng: np.random.Generator | None = None):
        self.mapping = mapping or DramMapping()
        self.timing = timing or DramTiming()
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.open_rows: dict[tuple, int] = {}
        # pre-drawn jitter, refilled in blocks (scalar rng calls are slow)
        self._jit = np.empty(0, dtype=np.int64)
        self._jpos = 0

    def _jitter(self) -> int:
        j = self.timing.jitter
        if j == 0:
            return 0
        if self._jpos >= len(self._jit):
            self._jit = self.rng.integers(-j, j + 1, size=4096)
            self._jpos = 0
        v = int(self._jit[self._jpos])
        self._jpos += 1
        return v

    def dram_access(self, loc: DramLocation) -> int:
        key = loc.bank_key
        open_row = self.open_rows.get(key)
        t = self.timing
        if open_row is None:
            lat = t.closed_row
        elif open_row == loc.row:
            lat = t.row_hit
        else:
            lat = t.row_conflict
        self.open_rows[key] = loc.row
        return lat + self._jitter()

    def access_addr(self, addr: int) -> int:
        return self.dram_access(dram_location(addr, self.mapping))

    def hammer(self, a: int, b: int, rounds: int = 16) -> float:
        """Mean latency of alternating uncached accesses to ``a`` and ``b``.

        The cache is bypassed: alternation through DRAM is what matters here.
        """
        if rounds < 1:
            raise ValueError("rounds must be >= 1")
        la = dram_location(a, self.mapping)
        lb = dram_location(b, self.mapping)
        total = 0
        for _ in range(rounds):
            total += self.dram_access(la)
            total += self.dram_access(lb)
        return total / (2 * rounds)
