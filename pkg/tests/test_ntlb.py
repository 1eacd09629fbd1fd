import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from northcape.cmt import Perm
from northcape.errors import BusError, NorthcapeError, outcome_of
from northcape.token import decode_token

from .conftest import carve, small_machine

RW = Perm.R | Perm.W
CACHED = RW | Perm.CT | Perm.CD


def ident(tok: int) -> int:
    return decode_token(tok).cap_id


def l1_ids(m, dev=0) -> set[int]:
    instr, data = m.ntlb.l1[dev]
    return {k[0] for k in instr.keys() + data.keys()}


def test_fresh_machine_counters_are_zero(machine):
    assert all(v == 0 for v in vars(machine.ntlb.stats).values())


def test_distinct_first_accesses_all_miss(machine):
    toks = [carve(machine, 64, CACHED) for _ in range(5)]
    for t in toks:
        machine.mem_read("cpu0", t, 8)
    assert machine.ntlb.stats.l1_misses == 5
    assert machine.ntlb.stats.l1_hits == 0


@pytest.mark.parametrize("k", [1, 2, 10, 100])
def test_repeated_access_hits(machine, k):
    tok = carve(machine, 64, CACHED)
    for _ in range(k):
        machine.mem_read("cpu0", tok, 8)
    assert machine.ntlb.stats.l1_hits == k - 1
    assert machine.ntlb.stats.l1_misses == 1


def test_unrelated_lock_forces_revalidation(machine):
    m = machine
    tok = carve(m, 64, CACHED)
    other = carve(m, 64, CACHED | Perm.L)
    m.mem_write("cpu0", tok, b"\x11" * 8)
    m.lock("cpu0", other, RW)
    assert len(m.ntlb.l1[0][1]) == 0
    assert m.mem_read("cpu0", tok, 8) == b"\x11" * 8
    assert m.ntlb.stats.stale_revalidations >= 1
    # the revalidated line is trusted again
    before = m.ntlb.stats.stale_revalidations
    m.ntlb.l1[0][1].flush()
    m.mem_read("cpu0", tok, 8)
    assert m.ntlb.stats.stale_revalidations == before


def test_non_cacheable_entries_stay_out_of_l2(machine):
    m = machine
    parent = carve(m, 256, CACHED)
    child = m.derive("cpu0", parent, 64, 0, RW)
    loner = carve(m, 64, RW)
    m.mem_read("cpu0", child, 8)
    m.mem_read("cpu0", loner, 8)
    ids = m.ntlb.l2_ids()
    assert ident(child) not in ids and ident(loner) not in ids
    # the cacheable ancestor on the walk is still filled
    assert ident(parent) in ids


def test_ops_never_fill_l2(machine):
    m = machine
    tok = carve(m, 256, CACHED)
    m.derive("cpu0", tok, 64, 0, CACHED)
    m.inspect("cpu0", tok)
    assert m.ntlb.l2_ids() == set()


def test_restrict_evicts_only_its_own_lines(machine):
    m = machine
    a = m.derive("cpu0", carve(m, 256, CACHED), 64, 0, CACHED)
    b = m.derive("cpu0", carve(m, 256, CACHED), 64, 0, CACHED)
    for t in (a, b):
        m.mem_read("cpu0", t, 8)
    epoch = m.ntlb.l2.epoch
    m.restrict("cpu0", a, Perm.R | Perm.CT)
    assert ident(a) not in l1_ids(m) and ident(a) not in m.ntlb.l2_ids()
    assert ident(b) in l1_ids(m) and ident(b) in m.ntlb.l2_ids()
    assert m.ntlb.l2.epoch == epoch
    with pytest.raises(BusError):
        m.mem_write("cpu0", a, b"x")


def test_lock_flushes_l1_and_taints_l2(machine):
    m = machine
    toks = [carve(m, 64, CACHED | Perm.L) for _ in range(3)]
    for t in toks:
        m.mem_read("cpu0", t, 8)
    m.lock("cpu0", toks[0], RW)
    assert l1_ids(m) == set()
    assert all(m.ntlb.l2.is_stale(line) for line in m.ntlb.l2.lines())


def test_drop_indirect_evicts_child_and_parent_only(machine):
    m = machine
    d = carve(m, 256, CACHED)
    child = m.derive("cpu0", d, 64, 0, CACHED)
    bystander = carve(m, 64, CACHED)
    for t in (d, child, bystander):
        m.mem_read("cpu0", t, 8)
    epoch = m.ntlb.l2.epoch
    assert m.drop("cpu0", child)
    ids = m.ntlb.l2_ids()
    assert ident(child) not in ids and ident(d) not in ids and ident(bystander) in ids
    assert m.ntlb.l2.epoch == epoch


def test_dropping_lock_holder_taints(machine):
    m = machine
    d = carve(m, 64, CACHED | Perm.L)
    holder = m.lock("cpu0", d, CACHED)
    m.mem_read("cpu0", holder, 8)
    epoch = m.ntlb.l2.epoch
    m.drop("cpu0", holder)
    assert m.ntlb.l2.epoch == epoch + 1
    assert m.mem_read("cpu0", d, 8) == bytes(8)


def test_warm_cache_cannot_outlive_lock(machine):
    m = machine
    d = carve(m, 256, CACHED | Perm.L)
    sibling = m.derive("cpu0", d, 64, 0, CACHED)
    m.mem_read("cpu0", sibling, 8)
    m.lock("cpu0", d, RW)
    with pytest.raises(BusError) as info:
        m.mem_read("cpu0", sibling, 8)
    assert str(info.value.kind) == "Locked"


def test_warm_cache_cannot_outlive_revoke(machine):
    m = machine
    d = carve(m, 256, CACHED)
    child = m.derive("cpu0", d, 64, 0, CACHED)
    m.mem_read("cpu0", child, 8)
    m.mem_read("cpu0", d, 8)
    m.revoke("cpu0", d, CACHED)
    for t in (child, d):
        with pytest.raises(BusError):
            m.mem_read("cpu0", t, 8)


def test_failed_walk_leaves_no_speculative_lines(machine):
    m = machine
    d = carve(m, 256, CACHED | Perm.L)
    m.lock("cpu0", d, RW)
    sibling_parent = carve(m, 64, CACHED)
    with pytest.raises(BusError):
        m.mem_read("cpu0", d, 8)
    assert all(not line.speculative for line in m.ntlb.l2.lines())
    assert ident(d) not in m.ntlb.l2_ids()
    m.mem_read("cpu0", sibling_parent, 8)
    assert m.audit() == []


def test_skipping_global_invalidation_is_caught():
    """Mutation check: a cache that ignores the lock taint must disagree with the oracle."""
    results = {}
    for inject in (None, "skip_global_invalidation"):
        m = small_machine(fault_injection=inject)
        m.add_cpu("cpu0")
        d = carve(m, 256, CACHED | Perm.L)
        sibling = m.derive("cpu0", d, 64, 0, CACHED)
        m.mem_read("cpu0", sibling, 8)
        m.lock("cpu0", d, RW)
        try:
            m.mem_read("cpu0", sibling, 8)
            results[inject] = "ok"
        except BusError as exc:
            results[inject] = str(exc.kind)
    assert results[None] == "Locked"
    assert results["skip_global_invalidation"] == "ok"


def test_unknown_injection_is_refused():
    with pytest.raises(ValueError):
        small_machine(fault_injection="bogus")


def test_dma_bypasses_l1(machine):
    m = machine
    tok = carve(m, 64, CACHED)
    m.mem_read("dma0", tok, 8)
    m.mem_read("dma0", tok, 8)
    assert m.ntlb.stats.l1_hits == m.ntlb.stats.l1_misses == 0
    assert m.ntlb.stats.l2_hits == 1


# -- equivalence against the uncached path --------------------------------

actions = st.lists(
    st.tuples(
        st.sampled_from(["derive", "lock", "drop", "revoke", "restrict", "read", "write", "create"]),
        st.integers(0, 1000),
        st.integers(1, 128),
        st.integers(0, 127),
        st.booleans(),
    ),
    max_size=60,
)

geometries = st.sampled_from([(1, 1, 1, 1), (2, 4, 8, 2), (16, 32, 512, 8), (4, 4, 16, 16), (3, 5, 6, 3)])


def _step(m, toks, action):
    name, pick, length, offset, flag = action
    tok = toks[pick % len(toks)]
    perms = CACHED | Perm.L if flag else CACHED
    if name == "derive":
        toks.append(m.derive("cpu0", tok, length, offset, perms))
    elif name == "lock":
        toks.append(m.lock("cpu0", tok, CACHED))
    elif name == "drop":
        return m.drop("cpu0", tok)
    elif name == "revoke":
        toks.append(m.revoke("cpu0", tok, perms))
    elif name == "restrict":
        return m.restrict("cpu0", tok, Perm.ALL if flag else CACHED, offset_add=offset % 4, length_sub=length % 4)
    elif name == "create":
        toks.extend(t for t in m.create("cpu0", tok, length, perms) if t is not None)
    elif name == "read":
        return m.mem_read("cpu0" if flag else "dma0", tok, 1 + offset % 8).hex()
    else:
        m.mem_write("cpu0", tok, bytes([length]) * (1 + offset % 8))


@settings(max_examples=80, deadline=None)
@given(geometries, actions)
def test_cache_matches_oracle(geo, script):
    l1i, l1d, l2, assoc = geo
    machines = []
    for cache in (True, False):
        m = small_machine(cache=cache, l1_instr=l1i, l1_data=l1d, l2_size=l2, l2_assoc=assoc)
        m.add_cpu("cpu0")
        m.add_dma("dma0", 0)
        machines.append((m, [carve(m, 1024, CACHED | Perm.L), carve(m, 512, CACHED)]))
    for action in script:
        outs = []
        for m, toks in machines:
            try:
                outs.append(("ok", _step(m, toks, action)))
            except NorthcapeError as exc:
                outs.append(("err", outcome_of(exc)))
        assert outs[0] == outs[1], action
    assert machines[0][0].audit() == []
