import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from northcape.allocator import (
    HEADER_SIZE,
    MIN_CHUNK,
    ArenaFull,
    FreeWhileShared,
    Heap,
    LocalArena,
    OutOfMemory,
    TooLarge,
    UnknownToken,
)
from northcape.cmt import Perm, Restriction
from northcape.errors import BusError, FaultKind, OpError, OpErrorKind, TableFull

from .conftest import carve, small_machine

HEAP_PERMS = Perm.R | Perm.W | Perm.L | Perm.I | Perm.CD | Perm.CT
RW = Perm.R | Perm.W


def new_heap(size=1 << 16, slots=1024, memory=1 << 22):
    m = small_machine(memory_size=memory, cmt_slots=slots)
    m.add_cpu("cpu0")
    return m, Heap(m, "cpu0", carve(m, size, HEAP_PERMS))


def spans(heap):
    return [(c.base, c.length) for c in heap.free_chunks()]


class TestInit:
    def test_one_mebibyte(self):
        m, heap = new_heap(1 << 20)
        assert spans(heap) == [(0, 1 << 20)]
        assert "heap_free_bytes=1048576" in heap.stats_lines()

    def test_indirect_refused(self):
        m = small_machine()
        m.add_cpu("cpu0")
        child = m.derive("cpu0", carve(m, 4096), 1024, 0, RW)
        with pytest.raises(OpError) as info:
            Heap(m, "cpu0", child)
        assert info.value.kind is OpErrorKind.NOT_DIRECT


class TestMalloc:
    def test_exact_length(self):
        m, heap = new_heap()
        h = heap.malloc(17)
        assert m.inspect("cpu0", h).length == 17
        m.mem_write("cpu0", h, b"x" * 17)
        with pytest.raises(BusError) as info:
            m.mem_write("cpu0", h, b"x" * 18)
        assert info.value.kind is FaultKind.OUT_OF_BOUNDS

    def test_layout(self):
        m, heap = new_heap()
        h = heap.malloc(17)
        rec = heap.allocated[h]
        assert (rec.header.base, rec.header.length) == (0, HEADER_SIZE)
        assert (rec.payload.base, rec.payload.length) == (HEADER_SIZE, MIN_CHUNK)
        assert m.inspect("cpu0", h).base == HEADER_SIZE
        assert spans(heap) == [(HEADER_SIZE + MIN_CHUNK, (1 << 16) - HEADER_SIZE - MIN_CHUNK)]

    def test_header_record_is_in_segment(self):
        m, heap = new_heap()
        h = heap.malloc(100)
        rec = heap.allocated[h]
        assert heap.header_record(h) == (h, rec.payload.token, 100, 104)

    def test_too_big_leaves_heap_alone(self):
        m, heap = new_heap()
        before = spans(heap)
        with pytest.raises(OutOfMemory):
            heap.malloc(1 << 16)
        assert spans(heap) == before

    def test_small_remainder_absorbed(self):
        m, heap = new_heap(size=HEADER_SIZE + MIN_CHUNK + 32)
        h = heap.malloc(8)
        assert spans(heap) == []
        assert heap.allocated[h].payload.length == MIN_CHUNK + 32
        assert heap.check() == []

    def test_best_fit_lowest_base(self):
        m, heap = new_heap()
        hs = [heap.malloc(64) for _ in range(6)]
        heap.free(hs[1])
        heap.free(hs[4])
        # both 128-byte holes fit; the lower one wins
        h = heap.malloc(60)
        assert heap.allocated[h].base == heap.allocated.get(hs[0]).base + 128

    def test_zeroed_and_lockable(self):
        m, heap = new_heap()
        h = heap.malloc(32, lockable=True, zeroed=True)
        assert m.mem_read("cpu0", h, 32) == bytes(32)
        holder = m.lock("cpu0", h, RW)
        m.mem_write("cpu0", holder, b"z")

    def test_not_lockable_by_default(self):
        m, heap = new_heap()
        h = heap.malloc(32)
        with pytest.raises(OpError) as info:
            m.lock("cpu0", h, RW)
        assert info.value.kind is OpErrorKind.NOT_LOCKABLE

    def test_table_pressure(self):
        m, heap = new_heap(slots=64, memory=1 << 20)
        with pytest.raises(TableFull):
            while True:
                heap.malloc(8)
        assert heap.check() == []

    def test_thousand_allocations_disjoint(self):
        m, heap = new_heap(1 << 20, slots=4096)
        windows = []
        for i in range(1000):
            h = heap.malloc(1 + i % 200)
            info = m.inspect("cpu0", h)
            windows.append((info.base, info.base + info.length))
        windows.sort()
        assert all(a[1] <= b[0] for a, b in zip(windows, windows[1:]))
        assert heap.check() == []


class TestFree:
    def test_coalesce_both_orders(self):
        for order in ((0, 1), (1, 0)):
            m, heap = new_heap()
            hs = [heap.malloc(100), heap.malloc(100)]
            for i in order:
                heap.free(hs[i])
            assert spans(heap) == [(0, 1 << 16)]

    def test_unknown(self):
        m, heap = new_heap()
        with pytest.raises(UnknownToken):
            heap.free(0x1234)

    def test_shared_refused(self):
        m, heap = new_heap()
        h = heap.malloc(64)
        m.derive("cpu0", h, 8, 0, RW)
        with pytest.raises(FreeWhileShared):
            heap.free(h)
        assert h in heap.allocated

    def test_freed_memory_is_scrubbed(self):
        m, heap = new_heap()
        h = heap.malloc(64)
        m.mem_write("cpu0", h, b"\xaa" * 64)
        heap.free(h)
        h2 = heap.malloc(64)
        assert m.mem_read("cpu0", h2, 64) == bytes(64)
        assert heap.allocated[h2].base == 0

    def test_header_scrubbed(self):
        m, heap = new_heap()
        h = heap.malloc(64)
        heap.free(h)
        assert m.memory.read(0, HEADER_SIZE) == bytes(HEADER_SIZE)

    def test_stale_handle_faults(self):
        m, heap = new_heap()
        h = heap.malloc(64)
        heap.free(h)
        with pytest.raises(BusError):
            m.mem_read("cpu0", h, 1)


class TestReclaim:
    def test_crashed_client(self):
        m, heap = new_heap()
        h = heap.malloc(256)
        payload = heap.allocated[h].payload.token
        kids = [m.derive("cpu0", h, 16, 16 * i, RW) for i in range(3)]
        m.mem_write("cpu0", kids[0], b"secret")
        heap.reclaim(payload)
        for k in kids + [h]:
            with pytest.raises(BusError):
                m.mem_read("cpu0", k, 1)
        assert spans(heap) == [(0, 1 << 16)]
        assert m.memory.read(HEADER_SIZE, 6) == bytes(6)

    def test_locked_allocation(self):
        m, heap = new_heap()
        h = heap.malloc(64, lockable=True)
        m.lock("cpu0", h, RW)
        heap.reclaim(heap.allocated[h].payload.token)
        assert heap.allocated == {}
        assert heap.check() == []

    def test_double_reclaim(self):
        m, heap = new_heap()
        h = heap.malloc(64)
        payload = heap.allocated[h].payload.token
        heap.reclaim(payload)
        with pytest.raises(UnknownToken):
            heap.reclaim(payload)


class TestAddRegion:
    def test_adjacent_region_grows_heap(self):
        m = small_machine()
        m.add_cpu("cpu0")
        low = carve(m, 4096, HEAP_PERMS)
        high = carve(m, 4096, HEAP_PERMS)
        heap = Heap(m, "cpu0", high)
        heap.add_region(low)
        assert heap.initial == (0, 8192)
        assert spans(heap) == [(0, 8192)]

    def test_gap_refused(self):
        m = small_machine()
        m.add_cpu("cpu0")
        a = carve(m, 4096, HEAP_PERMS)
        carve(m, 64)
        c = carve(m, 4096, HEAP_PERMS)
        heap = Heap(m, "cpu0", a)
        with pytest.raises(ValueError):
            heap.add_region(c)


def test_bound_heap_hands_out_bound_pieces():
    m = small_machine()
    m.add_cpu("cpu0")
    d = carve(m, 4096, HEAP_PERMS)
    m.restrict("cpu0", d, HEAP_PERMS, Restriction.bound(0, 0))
    heap = Heap(m, "cpu0", d)
    h = heap.malloc(32)
    assert m.inspect("cpu0", h).restriction == Restriction.bound(0, 0)
    assert m.inspect("cpu0", heap.allocated[h].payload.token).restriction == Restriction.bound(0, 0)


class TestLocalArena:
    @pytest.fixture
    def arena(self):
        m = small_machine()
        m.add_cpu("cpu0")
        return m, LocalArena(m, "cpu0", carve(m, 256, RW), 64)

    def test_reuse_first_chunk(self, arena):
        m, a = arena
        t = a.alloc(10)
        assert m.inspect("cpu0", t).base == 0
        a.free(t)
        assert m.inspect("cpu0", a.alloc(20)).base == 0

    def test_lowest_free(self, arena):
        m, a = arena
        ts = [a.alloc(8) for _ in range(3)]
        a.free(ts[1])
        assert m.inspect("cpu0", a.alloc(8)).base == 64

    def test_too_large(self, arena):
        with pytest.raises(TooLarge):
            arena[1].alloc(65)

    def test_full(self, arena):
        _, a = arena
        for _ in range(4):
            a.alloc(64)
        with pytest.raises(ArenaFull):
            a.alloc(1)

    def test_unknown(self, arena):
        m, a = arena
        t = a.alloc(8)
        other = m.derive("cpu0", a.arena, 8, 4, RW)
        with pytest.raises(UnknownToken):
            a.free(other)
        a.free(t)
        with pytest.raises(Exception):
            a.free(t)

    def test_no_zeroing(self, arena):
        m, a = arena
        t = a.alloc(8)
        m.mem_write("cpu0", t, b"leftover")
        a.free(t)
        assert m.mem_read("cpu0", a.alloc(8), 8) == b"leftover"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(1, 700), st.integers(0, 10**6)), max_size=120))
def test_shadow_model(script):
    m, heap = new_heap(1 << 16, slots=2048)
    live = []
    shadow_alloc = 0
    for do_free, size, pick in script:
        if do_free and live:
            h = live.pop(pick % len(live))
            shadow_alloc -= heap.allocated[h].length
            heap.free(h)
        else:
            try:
                h = heap.malloc(size)
            except OutOfMemory:
                continue
            live.append(h)
            need = HEADER_SIZE + max(-(-size // 8) * 8, MIN_CHUNK)
            assert heap.allocated[h].length - need < MIN_CHUNK
            shadow_alloc += heap.allocated[h].length
        assert f"heap_free_bytes={(1 << 16) - shadow_alloc}" in heap.stats_lines()
        assert heap.check() == []
    for h in live:
        heap.free(h)
    assert spans(heap) == [(0, 1 << 16)]
    assert m.audit() == []


def test_drain_after_random_workload():
    rng = random.Random(4)
    m, heap = new_heap(1 << 18, slots=4096)
    live = []
    for _ in range(2000):
        if live and rng.random() < 0.45:
            heap.free(live.pop(rng.randrange(len(live))))
        else:
            try:
                live.append(heap.malloc(rng.randint(1, 2000)))
            except OutOfMemory:
                pass
    assert heap.check() == []
    for h in live:
        heap.free(h)
    assert spans(heap) == [(0, 1 << 18)]
