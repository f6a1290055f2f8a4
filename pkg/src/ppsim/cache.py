"""Set-associative, sliced last-level cache with a cycle-cost model."""
from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .address import CacheGeometry, cache_location
from .dram import BankState

POLICIES = ("lru", "lru_random", "lru_bip")


@dataclass(frozen=True)
class CacheTiming:
    hit: int = 28
    # a line touched earlier in the same probe is served from L1
    reuse: int = 4

    def __post_init__(self):
        if not 0 < self.reuse <= self.hit:
            raise ValueError("need 0 < reuse <= hit")


class AccessOutcome(NamedTuple):
    hit: bool
    latency: int


class CacheState:
    """Resident tags per (slice, set), each list ordered LRU first.

    Policies:

    * ``"lru"``: evict the least recently used line, insert as MRU.
    * ``"lru_random"``: evict the LRU line with probability ``lru_prob``,
      otherwise a uniformly random way.
    * ``"lru_bip"``: evict the LRU line; insert as MRU with probability
      ``lru_prob``, otherwise at the LRU position (bimodal insertion).
    """

    def __init__(self, geometry: CacheGeometry | None = None, dram: BankState | None = None,
                 timing: CacheTiming | None = None, policy: str = "lru_bip",
                 lru_prob: float = 0.97, seed: int = 0):
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}, expected one of {POLICIES}")
        self.geo = geometry or CacheGeometry()
        self.dram = dram if dram is not None else BankState()
        self.timing = timing or CacheTiming()
        self.policy = policy
        if not 0.0 <= lru_prob <= 1.0:
            raise ValueError("lru_prob must be in [0, 1]")
        self.lru_prob = 1.0 if policy == "lru" else lru_prob
        self._random_victim = policy == "lru_random" and self.lru_prob < 1.0
        self._bimodal = policy == "lru_bip" and self.lru_prob < 1.0
        self.seed = seed
        # one stream per set, so traffic elsewhere never shifts a set's draws
        self.rngs: dict[tuple[int, int], random.Random] = {}
        self.sets: dict[tuple[int, int], list[int]] = {}
        self._loc_cache: dict[int, tuple[int, int]] = {}

    def locate(self, line: int) -> tuple[int, int]:
        key = self._loc_cache.get(line)
        if key is None:
            loc = cache_location(line, self.geo)
            key = (loc.slice, loc.set)
            self._loc_cache[line] = key
        return key

    def set_for(self, addr: int) -> list[int]:
        key = self.locate(addr & ~(self.geo.line_size - 1))
        s = self.sets.get(key)
        if s is None:
            s = self.sets[key] = []
        return s

    def rng_for(self, key: tuple[int, int]) -> random.Random:
        r = self.rngs.get(key)
        if r is None:
            r = self.rngs[key] = random.Random(f"{self.seed}:{key[0]}:{key[1]}")
        return r

    def reseed(self, key: tuple[int, int], seed: int) -> None:
        self.rngs[key] = random.Random(f"{seed}:{key[0]}:{key[1]}")

    def contains(self, addr: int) -> bool:
        line = addr & ~(self.geo.line_size - 1)
        return line in self.set_for(line)

    def insert(self, key: tuple[int, int], tag: int) -> None:
        """Miss handling for set ``key``: evict per policy, then place ``tag``."""
        s = self.sets.setdefault(key, [])
        rng = self.rng_for(key)
        if len(s) >= self.geo.n_ways:
            if self._random_victim and rng.random() >= self.lru_prob:
                del s[rng.randrange(len(s))]
            else:
                del s[0]
        if self._bimodal and rng.random() >= self.lru_prob:
            s.insert(0, tag)
        else:
            s.append(tag)

    def touch(self, addr: int) -> bool:
        """Access without timing; returns True on hit."""
        line = addr & ~(self.geo.line_size - 1)
        key = self.locate(line)
        s = self.sets.get(key)
        if s is not None and line in s:
            s.remove(line)
            s.append(line)
            return True
        self.insert(key, line)
        return False

    def access(self, addr: int) -> AccessOutcome:
        if self.touch(addr):
            return AccessOutcome(True, self.timing.hit)
        return AccessOutcome(False, self.dram.access_addr(addr))

    def flush(self, addr: int) -> None:
        line = addr & ~(self.geo.line_size - 1)
        s = self.set_for(line)
        if line in s:
            s.remove(line)

    def occupancy(self, addr: int) -> int:
        return len(self.set_for(addr))


def eviction_order(addrs: list[int]) -> list[int]:
    """Access sequence of the sliding-triple eviction strategy.

    For i in 0..n-3 the lines i, i+1, i+2 are accessed twice in a row.
    Sets shorter than three lines are simply walked twice.
    """
    n = len(addrs)
    if n < 3:
        return list(addrs) * 2
    out = []
    for i in range(n - 2):
        a, b, c = addrs[i], addrs[i + 1], addrs[i + 2]
        out += (a, b, c, a, b, c)
    return out


def eviction_rate(state: CacheState, eviction_set: list[int], target: int, trials: int = 100,
                  seed: int | None = None, stop_below: float | None = None) -> float:
    """Fraction of trials in which walking ``eviction_set`` evicts ``target``.

    Passing ``seed`` makes the estimate a pure function of its inputs: the
    involved sets start empty and replacement draws come from a stream
    derived from the seed (compiled; the live per-set RNGs are reseeded
    afterwards and the sets hold the final contents).
    With ``stop_below`` set, evaluation stops once the rate can no longer
    reach that value; the returned (partial) rate is then below it.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not eviction_set:
        return 0.0
    max_fail = trials if stop_below is None else math.floor(trials * (1 - stop_below) + 1e-9)
    if seed is not None:
        return _seeded_rate(state, eviction_set, target, trials, seed, max_fail)
    order = eviction_order(eviction_set)
    touch = state.touch
    evicted = fails = 0
    for _ in range(trials):
        touch(target)
        for a in order:
            touch(a)
        if state.contains(target):
            fails += 1
            if fails > max_fail:
                return evicted / trials
        else:
            evicted += 1
    return evicted / trials


def _seeded_rate(state: CacheState, eviction_set: list[int], target: int, trials: int, seed: int,
                 max_fail: int) -> float:
    from ._engine import rate_core

    mask = ~(state.geo.line_size - 1)
    lines = [target & mask]
    ids = {lines[0]: 0}
    for a in eviction_set:
        a &= mask
        if a not in ids:
            ids[a] = len(lines)
            lines.append(a)
    keys: list[tuple[int, int]] = []
    local: dict[tuple[int, int], int] = {}
    line_set = np.empty(len(lines), dtype=np.int64)
    for i, a in enumerate(lines):
        key = state.locate(a)
        if key not in local:
            local[key] = len(keys)
            keys.append(key)
        line_set[i] = local[key]
    seeds = np.array([int(np.random.SeedSequence([seed, sl, st]).generate_state(1)[0]) | 1
                      for sl, st in keys], dtype=np.int64)
    order = np.array([ids[a & mask] for a in eviction_order(eviction_set)], dtype=np.int64)
    rand_p = state.lru_prob if state._random_victim else 1.0
    bip_p = state.lru_prob if state._bimodal else 1.0
    evicted, st, cnt = rate_core(line_set, order, len(keys), state.geo.n_ways, trials, rand_p, bip_p,
                                 seeds, max_fail)
    for k, key in enumerate(keys):
        state.sets[key] = [lines[j] for j in st[k, :cnt[k]].tolist()]
        state.reseed(key, seed)
    return evicted / trials
