import pytest
from hypothesis import given
from hypothesis import strategies as st

from disagg_nvm.errors import ConfigError, DoubleFree
from disagg_nvm.slab import SlabAllocator

BLOCK = 256


class FakeBackend:
    def __init__(self):
        self.next = 0
        self.allocated: set[int] = set()
        self.grabs = 0

    def grab(self, n):
        base = self.next
        self.next += n * BLOCK
        self.allocated.update(base + i * BLOCK for i in range(n))
        self.grabs += 1
        return base

    def release(self, blocks):
        assert set(blocks) <= self.allocated
        self.allocated.difference_update(blocks)


def _alloc(slab_blocks=4, threshold=4):
    be = FakeBackend()
    return be, SlabAllocator(slab_blocks * BLOCK, BLOCK, be.grab, be.release, threshold)


ops = st.lists(st.tuples(st.booleans(), st.integers(1, 3 * 4 * BLOCK), st.integers(0, 10**6)), max_size=200)


@given(ops)
def test_extents_never_overlap_and_stay_on_owned_blocks(script):
    be, sa = _alloc()
    live = {}
    for is_alloc, size, pick in script:
        if is_alloc or not live:
            addr = sa.alloc(size)
            assert addr % 8 == 0
            live[addr] = size
        else:
            addr = sorted(live)[pick % len(live)]
            del live[addr]
            sa.free(addr)
        spans = sorted(live.items())
        for (a, n), (b, _) in zip(spans, spans[1:]):
            assert a + n <= b
        owned = sa.owned_blocks()
        assert owned <= be.allocated
        for a, n in spans:
            assert all((a + off) // BLOCK * BLOCK in owned for off in (0, n - 1))
    for addr in list(live):
        sa.free(addr)
    # everything beyond the reclaim threshold went back to the back-end
    assert sa.free_blocks() <= 4 + sa.slab_blocks


def test_double_free_and_bad_sizes():
    _, sa = _alloc()
    a = sa.alloc(40)
    sa.free(a)
    with pytest.raises(DoubleFree):
        sa.free(a)
    with pytest.raises(ValueError):
        sa.alloc(0)
    with pytest.raises(ConfigError):
        SlabAllocator(1000, BLOCK, None, None)


def test_best_fit_and_coalescing():
    _, sa = _alloc(slab_blocks=1)
    a, b, c = sa.alloc(64), sa.alloc(64), sa.alloc(64)
    sa.free(b)
    assert sa.alloc(64) == b  # the hole is the best fit
    sa.free(a)
    sa.free(b)
    assert sa.alloc(128) == a  # neighbours merged
    assert sa.size_of(a) == 128 and sa.size_of(c) == 64


def test_large_extents_bypass_slabs():
    be, sa = _alloc(slab_blocks=1)
    addr = sa.alloc(3 * BLOCK + 1)
    assert sa.size_of(addr) == 4 * BLOCK
    assert {addr + i * BLOCK for i in range(4)} <= sa.owned_blocks()
    sa.free(addr)
    assert not ({addr + i * BLOCK for i in range(4)} & be.allocated)


def test_forget_drops_volatile_state():
    _, sa = _alloc()
    sa.alloc(10)
    sa.forget()
    assert not sa.owned_blocks() and sa.size_of(0) is None
