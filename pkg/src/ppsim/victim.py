"""Victim model: heap layout, key material and square-and-multiply timing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .address import KB, MB, CacheGeometry, CacheLocation, cache_location

# key bits -> (buffer bytes, cache sets spanned, cycles per multiplication)
KEY_TABLE = {
    1024: (136, 3, 1764),
    2048: (264, 5, 6624),
    4096: (520, 9, 25462),
    8192: (1032, 17, 100440),
}
SUPPORTED_KEY_BITS = tuple(KEY_TABLE)

# malloc chunk header in front of the limb array
HEAP_OFFSET = 16


class UnsupportedKeySize(ValueError):
    pass


def buffer_size(key_bits: int, allow_extrapolation: bool = False) -> tuple[int, bool]:
    """Multiplier buffer bytes for ``key_bits`` and whether it was extrapolated."""
    if key_bits in KEY_TABLE:
        return KEY_TABLE[key_bits][0], False
    if not allow_extrapolation:
        raise UnsupportedKeySize(
            f"key size {key_bits} not in table; supported sizes are {SUPPORTED_KEY_BITS}")
    if key_bits < 8:
        raise UnsupportedKeySize("key size must be >= 8 bits")
    return key_bits // 8 + 8, True


def mult_cycles(key_bits: int) -> float:
    """Unattacked cost of one modular multiplication.

    Table sizes are exact; other sizes follow a power law fitted through
    the table in log-log space.
    """
    if key_bits in KEY_TABLE:
        return float(KEY_TABLE[key_bits][2])
    x = np.log([k for k in KEY_TABLE])
    y = np.log([v[2] for v in KEY_TABLE.values()])
    slope, icpt = np.polyfit(x, y, 1)
    return float(np.exp(icpt + slope * math.log(key_bits)))


@dataclass(frozen=True)
class VictimLayout:
    multiplier_buffer_base: int
    buffer_size: int
    spanned_sets: tuple[CacheLocation, ...]
    extrapolated: bool = False

    @property
    def lines(self) -> list[int]:
        first = self.multiplier_buffer_base & ~63
        return [first + 64 * i for i in range(len(self.spanned_sets))]


def n_spanned_lines(base: int, size: int) -> int:
    return math.ceil(((base % 64) + size) / 64)


def allocate_victim(key_bits: int, randomize: bool = False, seed: int = 0, signature: int = 0,
                    geometry: CacheGeometry | None = None, region: tuple[int, int] = (64 * MB, 1024 * MB),
                    allow_extrapolation: bool = False) -> VictimLayout:
    """Place the multiplier buffer in physical memory.

    Without ``randomize`` the placement depends only on ``seed``, so every
    signature reuses the same buffer.  With it, each ``signature`` index gets
    a fresh placement.
    """
    geo = geometry or CacheGeometry()
    size, extra = buffer_size(key_bits, allow_extrapolation)
    rng = np.random.default_rng([seed, 7, signature if randomize else 0])
    lo, hi = region
    page = int(rng.integers(lo // (4 * KB), hi // (4 * KB)))
    # line-aligned chunk somewhere in the page, data after the chunk header
    chunk = int(rng.integers(0, (4 * KB - 2 * size) // 64)) * 64
    base = page * 4 * KB + chunk + HEAP_OFFSET
    n = n_spanned_lines(base, size)
    first = base & ~63
    sets = tuple(cache_location(first + 64 * i, geo) for i in range(n))
    return VictimLayout(base, size, sets, extra)


@dataclass
class RsaKey:
    exponent_bits: list[int]
    modulus: int | None = None
    base: int | None = None

    def __post_init__(self):
        if not self.exponent_bits or self.exponent_bits[0] != 1:
            raise ValueError("exponent must be nonempty with a leading 1 bit")

    @property
    def bit_length(self) -> int:
        return len(self.exponent_bits)

    @property
    def exponent(self) -> int:
        return int("".join(map(str, self.exponent_bits)), 2)

    @property
    def hamming_weight(self) -> int:
        return sum(self.exponent_bits)

    @classmethod
    def from_int(cls, e: int, modulus: int | None = None, base: int | None = None) -> "RsaKey":
        if e < 1:
            raise ValueError("exponent must be >= 1")
        return cls([int(c) for c in bin(e)[2:]], modulus, base)

    @classmethod
    def random(cls, bits: int, seed: int = 0) -> "RsaKey":
        """Pattern-only key: a uniformly random exponent with its top bit set."""
        rng = np.random.default_rng([seed, 11])
        b = rng.integers(0, 2, size=bits).tolist()
        b[0] = 1
        return cls(b)

    def hex(self) -> str:
        return format(self.exponent, "x")


def blind_exponent(key: RsaKey, seed: int, signature: int, blind_bits: int = 32) -> RsaKey:
    """Exponent blinding ``d + r * phi`` with a per-signature random ``r``.

    For pattern-only keys (no modulus) a random odd stand-in for ``phi`` of
    the same size is used; only the resulting bit pattern matters.
    """
    rng = np.random.default_rng([seed, 13, signature])
    r = int(rng.integers(1, 2 ** blind_bits))
    phi_rng = np.random.default_rng([seed, 17])
    phi = int("1" + "".join(map(str, phi_rng.integers(0, 2, key.bit_length - 1).tolist())), 2)
    return RsaKey.from_int(key.exponent + r * phi, key.modulus, key.base)


@dataclass
class AccessLog:
    """Victim operations in victim-progress cycles (descheduling excluded)."""
    kinds: np.ndarray  # 0 = square, 1 = multiply
    starts: np.ndarray
    durations: np.ndarray

    @property
    def n_squares(self) -> int:
        return int(np.sum(self.kinds == 0))

    @property
    def n_multiplies(self) -> int:
        return int(np.sum(self.kinds == 1))

    @property
    def end(self) -> float:
        return float(self.starts[-1] + self.durations[-1]) if len(self.starts) else 0.0


def mod_exp(key: RsaKey, base: int | None = None, modulus: int | None = None,
            op_cycles: float = 1.0, jitter: float = 0.0, rng: np.random.Generator | None = None,
            start: float = 0.0) -> tuple[int | None, AccessLog]:
    """Left-to-right square-and-multiply.

    Every exponent bit costs one squaring; each 1-bit adds a multiplication
    by the base.  Both use the same routine and the same duration
    ``op_cycles`` (optionally jittered), so only the multiplier buffer
    accesses distinguish them.  The numeric result is computed only when a
    modulus is available.
    """
    base = key.base if base is None else base
    modulus = key.modulus if modulus is None else modulus
    bits = key.exponent_bits
    kinds = []
    for b in bits:
        kinds.append(0)
        if b:
            kinds.append(1)
    kinds = np.array(kinds, dtype=np.int8)
    n = len(kinds)
    if jitter > 0:
        rng = rng if rng is not None else np.random.default_rng()
        dur = op_cycles * np.clip(1.0 + jitter * rng.standard_normal(n), 0.5, 1.5)
    else:
        dur = np.full(n, float(op_cycles))
    starts = start + np.concatenate(([0.0], np.cumsum(dur)[:-1]))
    result = None
    if modulus is not None:
        if modulus < 1:
            raise ValueError("modulus must be positive")
        x = 1 % modulus
        b = base % modulus
        for bit in bits:
            x = x * x % modulus
            if bit:
                x = x * b % modulus
        result = x
    return result, AccessLog(kinds, starts, dur)


def generate_rsa(bits: int, seed: int = 0) -> RsaKey:
    """Small textbook RSA key pair (functional checks only)."""
    import sympy

    rng = np.random.default_rng([seed, 19])
    half = max(bits // 2, 4)
    while True:
        p = sympy.nextprime(int(rng.integers(2 ** (half - 1), 2 ** half - 2 ** (half - 3))))
        q = sympy.nextprime(int(rng.integers(2 ** (half - 1), 2 ** half - 2 ** (half - 3))))
        if p == q:
            continue
        phi = (p - 1) * (q - 1)
        e = 65537 if phi > 65537 else 3
        if math.gcd(e, phi) != 1:
            continue
        d = pow(e, -1, phi)
        n = p * q
        b = int(rng.integers(2, min(n - 1, 2 ** 62)))
        return RsaKey.from_int(d, n, b)


@dataclass(frozen=True)
class VictimConfig:
    key_bits: int = 4096
    seed: int = 1
    randomize: bool = False
    blinding: bool = False
    # touches of every buffer line per multiplication
    k_touches: int = 16
    # per-operation slowdown while the attacker keeps evicting the buffer
    attack_slowdown: float = 1.41
    # the first and last buffer lines share cache lines with neighbouring
    # heap objects that are used by every operation
    shared_edge_lines: bool = True
    allow_extrapolation: bool = False

    def __post_init__(self):
        if self.k_touches < 1:
            raise ValueError("k_touches must be >= 1")
        if self.attack_slowdown < 1.0:
            raise ValueError("attack_slowdown must be >= 1")


@dataclass
class Signature:
    """One signing run: operation log plus placement, in victim-progress cycles."""
    key: RsaKey
    layout: VictimLayout
    log: AccessLog
    op_cycles: float
    start: float
    end: float


class Victim:
    """The signing enclave: a fixed key, its heap layout and touch schedule."""

    def __init__(self, cfg: VictimConfig | None = None, geometry: CacheGeometry | None = None,
                 key: RsaKey | None = None):
        self.cfg = cfg or VictimConfig()
        self.geometry = geometry or CacheGeometry()
        self.key = key if key is not None else RsaKey.random(self.cfg.key_bits, self.cfg.seed)
        self.layout = self.layout_for(0)

    def layout_for(self, signature: int) -> VictimLayout:
        return allocate_victim(self.cfg.key_bits, self.cfg.randomize, self.cfg.seed, signature,
                               self.geometry, allow_extrapolation=self.cfg.allow_extrapolation)

    def exponent_for(self, signature: int) -> RsaKey:
        if self.cfg.blinding:
            return blind_exponent(self.key, self.cfg.seed, signature)
        return self.key

    def op_cycles(self, attacked: bool = True) -> float:
        c = mult_cycles(self.cfg.key_bits)
        return c * self.cfg.attack_slowdown if attacked else c

    def sign(self, signature: int = 0, start: float = 0.0, jitter: float = 0.0,
             rng: np.random.Generator | None = None, attacked: bool = True) -> Signature:
        """Lay out one exponentiation starting at ``start``.

        The exponentiation is framed by an initialisation burst before and a
        clearing burst after it, each lasting one operation.  The clearing
        burst follows a final reduction that leaves the buffer alone.
        """
        key = self.exponent_for(signature)
        t_op = self.op_cycles(attacked)
        _, log = mod_exp(key, op_cycles=t_op, jitter=jitter, rng=rng, start=start + t_op)
        return Signature(key, self.layout_for(signature), log, t_op, start, log.end + 2 * t_op)

    def touch_times(self, sig: Signature, line_index: int) -> np.ndarray:
        """Victim-progress times at which buffer line ``line_index`` is accessed."""
        k = self.cfg.k_touches
        n_lines = len(sig.layout.spanned_sets)
        if not 0 <= line_index < n_lines:
            raise IndexError(line_index)
        phase = (line_index + 0.5) / n_lines
        frac = (np.arange(k) + phase) / k
        log = sig.log
        edge = self.cfg.shared_edge_lines and line_index in (0, n_lines - 1)
        sel = np.ones(len(log.kinds), dtype=bool) if edge else log.kinds == 1
        t = (log.starts[sel, None] + frac[None, :] * log.durations[sel, None]).ravel()
        burst = (np.arange(2 * k) + phase) / (2 * k) * sig.op_cycles
        return np.sort(np.concatenate([sig.start + burst, t, log.end + sig.op_cycles + burst]))
