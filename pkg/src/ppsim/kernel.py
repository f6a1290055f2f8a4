"""Virtual clock, entity scheduling and noise injection."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .address import CacheGeometry, DramMapping
from .cache import CacheState, CacheTiming
from .dram import BankState, DramTiming

VICTIM = "victim"
ATTACKER = "attacker"
BOTH = "both"


@dataclass(frozen=True)
class NoiseConfig:
    """Noise sources seen by one monitored trace.

    ``interrupt_rate`` is in events per million cycles; each event is a
    victim-only, attacker-only or joint descheduling with the given
    probabilities (any remainder is a harmless interrupt).
    ``spurious_miss_rate`` is the per-probe probability that unrelated code
    touches the monitored set.  ``op_jitter`` is the relative standard
    deviation of the victim's per-operation duration.
    """
    interrupt_rate: float = 0.0
    interrupt_min: int = 20_000
    interrupt_max: int = 200_000
    victim_desched_prob: float = 0.0
    attacker_desched_prob: float = 0.0
    both_desched_prob: float = 0.0
    spurious_miss_rate: float = 0.0
    op_jitter: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("victim_desched_prob", "attacker_desched_prob", "both_desched_prob",
                     "spurious_miss_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.victim_desched_prob + self.attacker_desched_prob + self.both_desched_prob > 1.0 + 1e-12:
            raise ValueError("descheduling probabilities sum to more than 1")
        if self.interrupt_rate < 0 or self.op_jitter < 0:
            raise ValueError("rates must be >= 0")
        if not 0 <= self.interrupt_min <= self.interrupt_max:
            raise ValueError("need 0 <= interrupt_min <= interrupt_max")

    @property
    def is_zero(self) -> bool:
        return (self.interrupt_rate == 0 or self.victim_desched_prob + self.attacker_desched_prob
                + self.both_desched_prob == 0) and self.spurious_miss_rate == 0 and self.op_jitter == 0

    def scaled(self, factor: float) -> "NoiseConfig":
        """Multiply every rate (not durations or type mix) by ``factor``."""
        return replace(self, interrupt_rate=self.interrupt_rate * factor,
                       spurious_miss_rate=min(1.0, self.spurious_miss_rate * factor),
                       op_jitter=self.op_jitter * factor)


ZERO_NOISE = NoiseConfig()


def draw_interrupts(noise: NoiseConfig, t0: float, t1: float, rng: np.random.Generator):
    """Interrupt events in ``[t0, t1)`` as ``(start, duration, kind)`` tuples.

    Arrivals are Poisson with ``noise.interrupt_rate`` per million cycles;
    kinds are drawn from the descheduling mix and harmless events dropped.
    """
    rate = noise.interrupt_rate / 1e6
    if rate <= 0 or t1 <= t0:
        return []
    n = rng.poisson(rate * (t1 - t0))
    starts = np.sort(rng.uniform(t0, t1, size=n))
    durs = rng.integers(noise.interrupt_min, noise.interrupt_max + 1, size=n)
    u = rng.random(size=n)
    pv, pa, pb = noise.victim_desched_prob, noise.attacker_desched_prob, noise.both_desched_prob
    out = []
    for s, d, x in zip(starts.tolist(), durs.tolist(), u.tolist()):
        if x < pv:
            kind = VICTIM
        elif x < pv + pa:
            kind = ATTACKER
        elif x < pv + pa + pb:
            kind = BOTH
        else:
            continue
        out.append((s, int(d), kind))
    return out


class VirtualClock:
    """True cycle count plus the counting-thread view of it.

    The counting thread stops whenever it is suspended, so its reading lags
    true time by the total suspended duration.
    """

    def __init__(self, resolution: float = 0.87):
        if resolution <= 0:
            raise ValueError("resolution must be > 0")
        self.now = 0
        self.resolution = resolution
        self.counter_suspended = False
        self.suspended_total = 0
        self._suspended_since = 0

    def advance(self, cycles: int) -> None:
        if cycles < 0:
            raise ValueError("clock cannot go backwards")
        self.now += cycles

    def suspend_counter(self) -> None:
        if not self.counter_suspended:
            self.counter_suspended = True
            self._suspended_since = self.now

    def resume_counter(self) -> None:
        if self.counter_suspended:
            self.suspended_total += self.now - self._suspended_since
            self.counter_suspended = False

    def counter_cycles(self) -> int:
        lag = self.suspended_total
        if self.counter_suspended:
            lag += self.now - self._suspended_since
        return self.now - lag

    def ticks(self) -> int:
        return int(self.counter_cycles() / self.resolution)


@dataclass(frozen=True)
class TimingConfig:
    cache: CacheTiming = CacheTiming()
    dram: DramTiming = DramTiming()
    policy: str = "lru_bip"
    lru_prob: float = 0.97
    # fixed bookkeeping cost of one probe iteration (timestamp read, loop)
    probe_overhead: int = 20


class Kernel:
    """One simulation instance: clock, cache, DRAM and seeded noise.

    Single-threaded by contract; run many kernels for parallel experiments.
    """

    def __init__(self, geometry: CacheGeometry | None = None, mapping: DramMapping | None = None,
                 timing: TimingConfig | None = None, noise: NoiseConfig | None = None,
                 seed: int = 0, resolution: float = 0.87):
        self.geometry = geometry or CacheGeometry()
        self.mapping = mapping or DramMapping()
        self.timing = timing or TimingConfig()
        self.noise = noise or ZERO_NOISE
        self.seed = seed
        self.rng = np.random.default_rng([seed, 1])
        self.noise_rng = np.random.default_rng([seed, 2, self.noise.rng_seed])
        self.dram = BankState(self.mapping, self.timing.dram, np.random.default_rng([seed, 3]))
        self.cache = CacheState(self.geometry, self.dram, self.timing.cache, self.timing.policy,
                                self.timing.lru_prob, seed=seed)
        self.clock = VirtualClock(resolution)
        self.entities = {VICTIM, ATTACKER}
        self._pending: list[tuple[str, int]] = []

    def schedule_desched(self, kind: str, duration: int) -> None:
        """Script a descheduling event applied on the next ``step``."""
        if kind not in (VICTIM, ATTACKER, BOTH):
            raise ValueError(f"unknown descheduling kind {kind!r}")
        self._pending.append((kind, int(duration)))

    def _draw_event(self, latency: int):
        if self._pending:
            return self._pending.pop(0)
        n = self.noise
        p = n.interrupt_rate * latency / 1e6
        if p <= 0 or self.noise_rng.random() >= p:
            return None
        x = self.noise_rng.random()
        pv, pa, pb = n.victim_desched_prob, n.attacker_desched_prob, n.both_desched_prob
        d = int(self.noise_rng.integers(n.interrupt_min, n.interrupt_max + 1))
        if x < pv:
            return VICTIM, d
        if x < pv + pa:
            return ATTACKER, d
        if x < pv + pa + pb:
            return BOTH, d
        return None

    def step(self, entity: str, addr: int) -> tuple[int, int]:
        """Perform one memory access for ``entity``.

        Returns ``(latency, descheduled_for)``; the clock advances by both.
        A joint descheduling suspends the counting thread for its duration.
        """
        if entity not in self.entities:
            raise ValueError(f"entity {entity!r} not registered")
        latency = self.cache.access(addr).latency
        self.clock.advance(latency)
        ev = self._draw_event(latency)
        if ev is None:
            return latency, 0
        kind, d = ev
        if kind == BOTH:
            self.clock.suspend_counter()
            self.clock.advance(d)
            self.clock.resume_counter()
            return latency, d
        self.clock.advance(d)
        return latency, d if kind == entity else 0

    def read_attacker_clock(self) -> int:
        return self.clock.ticks()
