import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppsim.address import CacheGeometry, cache_location
from ppsim.cache import CacheState, CacheTiming, eviction_order, eviction_rate

import oracles

TOY = CacheGeometry(n_sets=64, n_ways=4, n_slices=1)


def lines_in_set(geo, set_index, count, slice_index=None, start=0):
    """Addresses mapping to (set_index, slice_index), found by direct enumeration."""
    out = []
    a = start + (set_index << 6)
    while len(out) < count:
        loc = cache_location(a, geo)
        if loc.set == set_index and (slice_index is None or loc.slice == slice_index):
            out.append(a)
        a += geo.set_stride
    return out


def test_cold_miss_then_hit():
    c = CacheState(policy="lru")
    first, second = c.access(0x1000), c.access(0x1000)
    assert not first.hit and second.hit
    assert second.latency == c.timing.hit
    assert first.latency > second.latency


def test_lru_capacity_eviction():
    geo = CacheGeometry()
    c = CacheState(geo, policy="lru")
    addrs = lines_in_set(geo, 5, geo.n_ways + 1, slice_index=0)
    for a in addrs:
        c.access(a)
    assert not c.access(addrs[0]).hit


@given(st.lists(st.integers(0, 9), min_size=1, max_size=200))
def test_lru_matches_reference(seq):
    addrs = lines_in_set(TOY, 3, 10)
    c = CacheState(TOY, policy="lru")
    ref = oracles.LruSet(TOY.n_ways)
    for i in seq:
        assert c.touch(addrs[i]) == ref.access(addrs[i])
    assert c.set_for(addrs[0]) == ref.lines


def test_sets_do_not_interfere():
    c = CacheState(TOY, policy="lru")
    a = lines_in_set(TOY, 1, 1)[0]
    c.access(a)
    for b in lines_in_set(TOY, 2, 20):
        c.access(b)
    assert c.contains(a)


def test_flush_and_occupancy():
    c = CacheState(TOY, policy="lru")
    addrs = lines_in_set(TOY, 7, 3)
    for a in addrs:
        c.access(a)
    assert c.occupancy(addrs[0]) == 3
    c.flush(addrs[1])
    assert not c.contains(addrs[1]) and c.occupancy(addrs[0]) == 2


def test_validation():
    with pytest.raises(ValueError):
        CacheState(policy="fifo")
    with pytest.raises(ValueError):
        CacheState(lru_prob=1.5)
    with pytest.raises(ValueError):
        CacheTiming(hit=10, reuse=20)


def test_eviction_order_sliding_triples():
    assert eviction_order([1, 2, 3, 4]) == [1, 2, 3, 1, 2, 3, 2, 3, 4, 2, 3, 4]
    assert eviction_order([1, 2]) == [1, 2, 1, 2]


def test_eviction_rate_examples():
    geo = CacheGeometry()
    c = CacheState(geo, policy="lru")
    target, *es = lines_in_set(geo, 9, geo.n_ways + 1, slice_index=0)
    assert eviction_rate(c, es, target, 50) == 1.0
    assert eviction_rate(c, [], target) == 0.0
    other = lines_in_set(geo, 10, geo.n_ways, slice_index=0)
    assert eviction_rate(c, other, target, 50) == 0.0
    with pytest.raises(ValueError):
        eviction_rate(c, es, target, 0)


@pytest.mark.parametrize("policy", ["lru_random", "lru_bip"])
def test_seeded_rate_is_reproducible(policy):
    geo = CacheGeometry()
    c = CacheState(geo, policy=policy, lru_prob=0.9, seed=3)
    target, *es = lines_in_set(geo, 9, geo.n_ways + 2, slice_index=0)
    r1 = eviction_rate(c, es, target, 100, seed=42)
    c.access(es[0])  # unrelated state changes are wiped by the seed
    assert eviction_rate(c, es, target, 100, seed=42) == r1
    assert 0.0 <= r1 <= 1.0


def test_per_set_streams_independent():
    geo = CacheGeometry()
    a = CacheState(geo, policy="lru_random", lru_prob=0.5, seed=1)
    b = CacheState(geo, policy="lru_random", lru_prob=0.5, seed=1)
    s1 = lines_in_set(geo, 4, 30, slice_index=0)
    noise = lines_in_set(geo, 100, 30)
    for x in noise:
        b.access(x)
    for x in s1:
        a.access(x)
        b.access(x)
    assert a.set_for(s1[0]) == b.set_for(s1[0])


@given(st.lists(st.integers(0, 19), min_size=1, max_size=30), st.integers(0, 19), st.integers(0, 99))
def test_compiled_rate_matches_interpreted_under_lru(es_ids, target_id, seed):
    geo = CacheGeometry()
    pool = lines_in_set(geo, 11, 20)
    es = list(dict.fromkeys(pool[i] for i in es_ids if i != target_id))
    target = pool[target_id]
    fast = CacheState(geo, policy="lru")
    slow = CacheState(geo, policy="lru")
    r_fast = eviction_rate(fast, es, target, 20, seed=seed)
    for a in (target, *es):
        slow.set_for(a).clear()
    assert r_fast == eviction_rate(slow, es, target, 20)
    assert fast.sets == {k: v for k, v in slow.sets.items() if v or k in fast.sets}
