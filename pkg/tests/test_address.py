from hypothesis import given
from hypothesis import strategies as st
import pytest

from ppsim.address import (KB, MB, CacheGeometry, CacheLocation, DramMapping, cache_location, dram_location,
                           find_row_start_pairs, slice_hash)

import oracles

GEO = CacheGeometry()
addrs = st.integers(min_value=0, max_value=(1 << 34) - 1)


def test_set_index_examples():
    assert cache_location(0x400000, GEO).set == 0
    assert cache_location(0x0, GEO) == CacheLocation(0, 0)
    # bits 6..16 of 0x3fffc0, extracted directly
    assert cache_location(0x3FFFC0, GEO).set == (0x3FFFC0 >> 6) & 0x7FF == 2047


@given(addrs)
def test_set_index_is_bits_6_to_16(a):
    assert cache_location(a, GEO).set == sum(((a >> (6 + k)) & 1) << k for k in range(11))


@given(addrs, st.integers(0, 63))
def test_same_line_same_location(a, off):
    base = a & ~63
    assert cache_location(base, GEO) == cache_location(base + off, GEO)


@given(addrs, st.integers(1, 64))
def test_stride_above_set_bits_keeps_set(a, k):
    assert GEO.set_stride == 1 << 17
    assert cache_location(a, GEO).set == cache_location(a + k * (1 << 17), GEO).set


@given(addrs)
def test_slice_in_range(a):
    for n in (1, 2, 4, 8):
        assert 0 <= slice_hash(a, n) < n


def test_geometry_validation():
    with pytest.raises(ValueError):
        CacheGeometry(n_sets=1000)
    with pytest.raises(ValueError):
        CacheGeometry(n_slices=3)
    with pytest.raises(ValueError):
        CacheGeometry(n_ways=0)


def test_dram_examples():
    m = DramMapping()
    z = dram_location(0, m)
    assert (z.channel, z.bank_group, z.bank, z.rank, z.row) == (0, 0, 0, 0, 0)
    d = dram_location(0x400000, m)
    assert d.channel == 0 and d.bank_group == 0b10 and d.bank == 0 and d.rank == 0 and d.row == 16
    lo, hi = dram_location(0x3FFFC0, m), dram_location(0x400000, m)
    assert lo.bank_key == hi.bank_key and lo.row != hi.row


@given(addrs)
def test_dram_matches_table_oracle(a):
    d = dram_location(a, DramMapping())
    ch, bg0, bg1, ba0, ba1, rk = oracles.bank_coords(a)
    assert (d.channel, d.bank_group, d.bank, d.rank) == (ch, bg0 | bg1 << 1, ba0 | ba1 << 1, rk)
    assert d.row == a >> 18
    assert d == dram_location(a, DramMapping())


def test_mapping_validation_and_roundtrip():
    with pytest.raises(ValueError):
        DramMapping(channel_mask=1 << 30)
    with pytest.raises(ValueError):
        DramMapping(row_low_bit=17)
    m = DramMapping()
    assert DramMapping.from_bits(m.to_bits()) == m
    assert m.to_bits()["channel"] == [19, 18, 13, 12, 9, 8]
    with pytest.raises(ValueError):
        DramMapping.from_bits({"bogus": [7]})


@pytest.mark.parametrize("block", [4 * MB, 16 * MB, 32 * MB])
def test_row_start_pairs_match_brute_force(block):
    pairs = find_row_start_pairs(DramMapping(), block)
    assert pairs == oracles.brute_force_pairs(block)
    assert all(oracles.satisfies_row_start(lo, hi) for lo, hi in pairs)


def test_row_start_pairs_zero_masks():
    zero = DramMapping(0, 0, 0, 0, 0, 0)
    table = {k: () for k in oracles.TABLE_I}
    assert find_row_start_pairs(zero, 16 * MB) == oracles.brute_force_pairs(16 * MB, table)


def test_row_start_block_too_small():
    with pytest.raises(ValueError):
        find_row_start_pairs(DramMapping(), 2 * MB)
