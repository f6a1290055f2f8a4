import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppsim.address import DramMapping, dram_location
from ppsim.dram import BankState, DramTiming

T = DramTiming(jitter=0)


def test_same_row_hits():
    b = BankState(timing=T)
    assert b.access_addr(0x1000) == T.closed_row
    assert b.access_addr(0x1040) == T.row_hit


def test_alternating_rows_conflict():
    b = BankState(timing=T)
    lo, hi = 0x3FFFC0, 0x400000
    b.access_addr(lo)
    lats = [b.access_addr(a) for a in [hi, lo] * 5]
    assert lats == [T.row_conflict] * 10


def test_different_banks_no_interference():
    b = BankState(timing=T)
    m = DramMapping()
    a, c = 0x0, 0x100  # bit 8 flips the channel
    assert dram_location(a, m).bank_key != dram_location(c, m).bank_key
    lats = [b.access_addr(x) for x in [a, c] * 4]
    assert max(lats) <= T.closed_row


def test_hammer_categories():
    b = BankState(timing=T)
    assert b.hammer(0x1000, 0x1040) == pytest.approx((T.closed_row + 31 * T.row_hit) / 32)
    conflict = b.hammer(0x3FFFC0, 0x400000)
    assert conflict >= T.row_conflict - 5
    assert b.hammer(0x0, 0x100) < conflict


def test_row_start_pair_is_max_of_scan():
    b = BankState(timing=T)
    best = max(range(0xFC0, 0x800000, 0x1000), key=lambda i: b.hammer(i, i + 64, 4))
    assert (best, best + 64) == (0x3FFFC0, 0x400000)


@given(st.integers(0, 2 ** 32))
def test_jitter_bounded(seed):
    import numpy as np
    t = DramTiming(jitter=5)
    b = BankState(timing=t, rng=np.random.default_rng(seed))
    for a in (0, 0x40, 0x400000):
        lat = b.access_addr(a)
        assert T.row_hit - 5 <= lat <= T.row_conflict + 5


def test_timing_validation():
    with pytest.raises(ValueError):
        DramTiming(row_hit=300)
    with pytest.raises(ValueError):
        DramTiming(jitter=-1)
    with pytest.raises(ValueError):
        BankState().hammer(0, 64, 0)
