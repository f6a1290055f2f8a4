"""Physical address arithmetic: cache set / slice indexing and DRAM mapping.

Addresses are plain Python ints holding byte addresses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

LINE_BITS = 6
KB = 1024
MB = 1024 * KB


def _mask(bits) -> int:
    m = 0
    for b in bits:
        m |= 1 << int(b)
    return m


def _bits(mask: int) -> list[int]:
    return [b for b in range(mask.bit_length()) if (mask >> b) & 1]


@dataclass(frozen=True)
class CacheGeometry:
    line_size: int = 64
    n_sets: int = 2048
    n_ways: int = 12
    n_slices: int = 2
    set_index_low_bit: int = LINE_BITS

    def __post_init__(self):
        if self.line_size != 1 << self.set_index_low_bit:
            raise ValueError("line_size must equal 2**set_index_low_bit")
        for name in ("n_sets", "n_slices"):
            v = getattr(self, name)
            if v < 1 or v & (v - 1):
                raise ValueError(f"{name} must be a power of two, got {v}")
        if self.n_ways < 1:
            raise ValueError("n_ways must be >= 1")

    @property
    def set_bits(self) -> int:
        return self.n_sets.bit_length() - 1

    @property
    def set_stride(self) -> int:
        """Distance between consecutive addresses with the same set index."""
        return self.n_sets * self.line_size


class CacheLocation(NamedTuple):
    set: int
    slice: int


class DramLocation(NamedTuple):
    channel: int
    bank_group: int
    bank: int
    rank: int
    row: int

    @property
    def bank_key(self) -> tuple[int, int, int, int]:
        return (self.channel, self.rank, self.bank_group, self.bank)


# Table I of the 2-DIMM Skylake configuration, as bit positions.
DEFAULT_MAPPING_BITS = {
    "channel": [19, 18, 13, 12, 9, 8],
    "bg0": [14, 7],
    "bg1": [22, 18],
    "ba0": [19, 15],
    "ba1": [21, 17],
    "rank": [20, 16],
}


@dataclass(frozen=True)
class DramMapping:
    channel_mask: int = _mask(DEFAULT_MAPPING_BITS["channel"])
    bg0_mask: int = _mask(DEFAULT_MAPPING_BITS["bg0"])
    bg1_mask: int = _mask(DEFAULT_MAPPING_BITS["bg1"])
    ba0_mask: int = _mask(DEFAULT_MAPPING_BITS["ba0"])
    ba1_mask: int = _mask(DEFAULT_MAPPING_BITS["ba1"])
    rank_mask: int = _mask(DEFAULT_MAPPING_BITS["rank"])
    row_low_bit: int = 18

    MASK_FIELDS = ("channel_mask", "bg0_mask", "bg1_mask", "ba0_mask", "ba1_mask", "rank_mask")

    def __post_init__(self):
        allowed = _mask(range(6, 23))
        for name in self.MASK_FIELDS:
            m = getattr(self, name)
            if m < 0 or m & ~allowed:
                raise ValueError(f"{name} has bits outside 6..22: {_bits(m)}")
        if self.row_low_bit < 18:
            raise ValueError("row_low_bit must be >= 18")

    @classmethod
    def from_bits(cls, spec: dict) -> "DramMapping":
        """Build from ``{"channel": [19, 18, ...], "bg0": [...], ..., "row_low_bit": 18}``."""
        spec = dict(spec)
        kwargs = {}
        row = spec.pop("row_low_bit", 18)
        for key, bits in spec.items():
            name = f"{key}_mask"
            if name not in cls.MASK_FIELDS:
                raise ValueError(f"unknown DRAM mapping function {key!r}")
            kwargs[name] = _mask(bits)
        return cls(row_low_bit=int(row), **kwargs)

    def to_bits(self) -> dict:
        out = {name[: -len("_mask")]: sorted(_bits(getattr(self, name)), reverse=True) for name in self.MASK_FIELDS}
        out["row_low_bit"] = self.row_low_bit
        return out


def _parity(x: int) -> int:
    return x.bit_count() & 1


def slice_hash(addr: int, n_slices: int) -> int:
    """XOR-fold of the line address (bits >= 6) down to log2(n_slices) bits."""
    if n_slices == 1:
        return 0
    width = n_slices.bit_length() - 1
    x = addr >> LINE_BITS
    h = 0
    m = n_slices - 1
    while x:
        h ^= x & m
        x >>= width
    return h


def cache_location(addr: int, geo: CacheGeometry) -> CacheLocation:
    if addr < 0:
        raise ValueError("negative address")
    s = (addr >> geo.set_index_low_bit) & (geo.n_sets - 1)
    return CacheLocation(s, slice_hash(addr, geo.n_slices))


def dram_location(addr: int, mapping: DramMapping) -> DramLocation:
    m = mapping
    return DramLocation(
        channel=_parity(addr & m.channel_mask),
        bank_group=_parity(addr & m.bg0_mask) | (_parity(addr & m.bg1_mask) << 1),
        bank=_parity(addr & m.ba0_mask) | (_parity(addr & m.ba1_mask) << 1),
        rank=_parity(addr & m.rank_mask),
        row=addr >> m.row_low_bit,
    )


def _np_bank_key(addrs: np.ndarray, mapping: DramMapping) -> np.ndarray:
    # packs (channel, bg0, bg1, ba0, ba1, rank) into one small int per address
    key = np.zeros(addrs.shape, dtype=np.uint8)
    for i, name in enumerate(DramMapping.MASK_FIELDS):
        par = np.bitwise_count(addrs & np.uint64(getattr(mapping, name))) & 1
        key |= (par.astype(np.uint8) << i)
    return key


def find_row_start_pairs(mapping: DramMapping, block_size: int = 16 * MB,
                         max_distance: int = 4 * KB) -> list[tuple[int, int]]:
    """All (low, high) line pairs in ``[0, block_size]`` that start a new DRAM row.

    A pair qualifies when both addresses map to the same channel/rank/bank
    group/bank, the rows differ, they are 64 B..``max_distance`` apart, and
    bits 6..21 are all ones in ``low`` and all zeros in ``high``. The search
    is exhaustive over cache-line granularity.
    """
    if block_size < 4 * MB:
        raise ValueError("block_size must be at least 4 MB")
    low_field = _mask(range(6, 22))
    lows = np.arange(0, block_size, 64, dtype=np.uint64)
    lows = lows[(lows & np.uint64(low_field)) == np.uint64(low_field)]
    pairs = []
    for d in range(64, max_distance + 1, 64):
        highs = lows + np.uint64(d)
        ok = (highs <= np.uint64(block_size)) & ((highs & np.uint64(low_field)) == 0)
        ok &= (lows >> np.uint64(mapping.row_low_bit)) != (highs >> np.uint64(mapping.row_low_bit))
        ok &= _np_bank_key(lows, mapping) == _np_bank_key(highs, mapping)
        pairs.extend(zip(lows[ok].tolist(), highs[ok].tolist()))
    return sorted(pairs, key=lambda p: (p[1], p[0]))
