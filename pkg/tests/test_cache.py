import random

import pytest

from disagg_nvm.bench.workload import ZipfKeys
from disagg_nvm.cache import PageCache, TreeCachePolicy, simulate_policy


def test_lru_evicts_least_recent():
    c = PageCache(2, policy="lru")
    c.put("a", b"1")
    c.put("b", b"2")
    assert c.get("a") is not None
    assert c.put("c", b"3") == "b"
    assert "a" in c and "c" in c and "b" not in c
    assert c.stats.evictions == 1


def test_full_sample_hybrid_is_exact_lru():
    trace = [random.Random(1).randrange(50) for _ in range(2000)]
    trace = ZipfKeys(200, 0.9, seed=2).take(5000)
    assert simulate_policy(trace, 20, "hybrid", rr_set_size=20) == simulate_policy(trace, 20, "lru")


def test_rr_is_seeded_and_single_sample():
    c = PageCache(4, policy="rr", rr_set_size=32)
    assert c.rr_set_size == 1
    trace = ZipfKeys(100, 0.99, seed=3).take(3000)
    assert simulate_policy(trace, 10, "rr", seed=4) == simulate_policy(trace, 10, "rr", seed=4)


def test_zero_capacity_and_purge():
    c = PageCache(0)
    assert c.put(1, b"x") is None and len(c) == 0
    c = PageCache(3)
    for k in range(3):
        c.put(k, b"x")
    c.discard(1)
    assert 1 not in c
    c.purge()
    assert len(c) == 0


def test_bad_policy_and_sizes():
    with pytest.raises(ValueError):
        PageCache(4, policy="mru")
    with pytest.raises(ValueError):
        PageCache(-1)
    with pytest.raises(ValueError):
        PageCache(4, rr_set_size=0)


def test_hit_ratio_grows_with_capacity():
    trace = ZipfKeys(2000, 0.99, seed=5).take(20_000)
    ratios = [simulate_policy(trace, cap, "hybrid") for cap in (10, 100, 1000)]
    assert ratios[0] > ratios[1] > ratios[2]


def test_tree_policy_adapts_level():
    p = TreeCachePolicy(level=4, window=10)
    assert p.cacheable(4) and not p.cacheable(5)
    for _ in range(10):
        p.record(False)
    assert p.level == 3
    for _ in range(10):
        p.record(True)
    assert p.level == 4
    assert p.adapt(0.3) == 4
    for _ in range(10):
        p.adapt(1.0)
    assert p.level == 1
    with pytest.raises(ValueError):
        TreeCachePolicy(level=0)
