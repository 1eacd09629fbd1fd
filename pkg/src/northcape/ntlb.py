"""Two-level capability TLB.

L1: per CPU, one instruction and one data buffer, fully associative, keyed on
(id, nonce), holding finished resolutions. L2: shared, set-associative, keyed
on id, holding copies of CMT entries plus the window validated for them.

Lines whose content changed are evicted by id after each operation. Lock,
revoke and unlock flush every L1 and mark all L2 lines stale; a stale hit
forces a full walk before the line is trusted again. Staleness is tracked with
an epoch counter so tainting is O(1).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from . import _kernels
from .cmt import CmtEntry, Perm
from .errors import Fault, FaultKind
from .resolver import (
    AccessContext,
    Resolution,
    Resolver,
    access_gate,
    restriction_gate,
    summarize_chain,
)

FAULT_INJECTIONS = ("skip_global_invalidation",)


@dataclass
class CacheStats:
    l1_hits: int = 0
    l1_misses: int = 0
    l2_hits: int = 0
    l2_misses: int = 0
    stale_revalidations: int = 0
    invalidations: int = 0

    def lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]


class L1Buffer:
    """Fully associative, round-robin replacement; empty ways are used first."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("L1 capacity must be at least 1")
        self.capacity = capacity
        self._map: dict[tuple[int, int], Resolution] = {}
        self._ways: list[tuple[int, int] | None] = [None] * capacity
        self._slot: dict[tuple[int, int], int] = {}
        self._rr = 0

    def __len__(self) -> int:
        return len(self._map)

    def get(self, key: tuple[int, int]) -> Resolution | None:
        return self._map.get(key)

    def insert(self, key: tuple[int, int], res: Resolution) -> None:
        if key in self._map:
            self._map[key] = res
            return
        if len(self._map) < self.capacity:
            way = self._ways.index(None)
        else:
            way = self._rr
            self._rr = (self._rr + 1) % self.capacity
            victim = self._ways[way]
            del self._map[victim]  # type: ignore[arg-type]
            del self._slot[victim]  # type: ignore[arg-type]
        self._ways[way] = key
        self._slot[key] = way
        self._map[key] = res

    def evict_id(self, cap_id: int) -> int:
        doomed = [k for k in self._map if k[0] == cap_id]
        for key in doomed:
            self._ways[self._slot.pop(key)] = None
            del self._map[key]
        return len(doomed)

    def flush(self) -> None:
        self._map.clear()
        self._slot.clear()
        self._ways = [None] * self.capacity

    def keys(self) -> list[tuple[int, int]]:
        return list(self._map)


@dataclass(slots=True)
class L2Line:
    cap_id: int
    entry: CmtEntry
    origin: int
    window_base: int
    window_end: int
    chain: tuple[int, ...]
    epoch: int
    speculative: bool = True


class L2Buffer:
    def __init__(self, size: int, assoc: int) -> None:
        if size < 1 or assoc < 1 or size % assoc:
            raise ValueError("L2 size must be a positive multiple of the associativity")
        self.size = size
        self.assoc = assoc
        self.n_sets = size // assoc
        self._sets: list[list[L2Line | None]] = [[None] * assoc for _ in range(self.n_sets)]
        self._rr = [0] * self.n_sets
        self.epoch = 0

    def lookup(self, cap_id: int) -> L2Line | None:
        for line in self._sets[cap_id % self.n_sets]:
            if line is not None and line.cap_id == cap_id:
                return line
        return None

    def is_stale(self, line: L2Line) -> bool:
        return line.epoch != self.epoch

    def insert(self, line: L2Line) -> None:
        index = line.cap_id % self.n_sets
        ways = self._sets[index]
        for i, old in enumerate(ways):
            if old is not None and old.cap_id == line.cap_id:
                ways[i] = line
                return
        for i, old in enumerate(ways):
            if old is None:
                ways[i] = line
                return
        victim = self._rr[index]
        self._rr[index] = (victim + 1) % self.assoc
        ways[victim] = line

    def evict(self, cap_id: int) -> int:
        ways = self._sets[cap_id % self.n_sets]
        for i, line in enumerate(ways):
            if line is not None and line.cap_id == cap_id:
                ways[i] = None
                return 1
        return 0

    def taint_all(self) -> None:
        self.epoch += 1

    def lines(self) -> list[L2Line]:
        return [line for ways in self._sets for line in ways if line is not None]


class Ntlb:
    def __init__(
        self,
        resolver: Resolver,
        l1_instr: int = 16,
        l1_data: int = 32,
        l2_size: int = 512,
        l2_assoc: int = 8,
        fault_injection: str | None = None,
    ) -> None:
        if fault_injection is not None and fault_injection not in FAULT_INJECTIONS:
            raise ValueError(f"unknown fault injection {fault_injection!r}")
        self.resolver = resolver
        self.l1_sizes = (l1_instr, l1_data)
        self.l1: dict[int, tuple[L1Buffer, L1Buffer]] = {}
        self.l2 = L2Buffer(l2_size, l2_assoc)
        self.stats = CacheStats()
        self.fault_injection = fault_injection

    def attach_cpu(self, device: int) -> None:
        self.l1[device] = (L1Buffer(self.l1_sizes[0]), L1Buffer(self.l1_sizes[1]))

    # -- lookups ---------------------------------------------------------

    def cached_resolve(self, raw: int, ctx: AccessContext) -> Resolution:
        _, nonce, cap_id, _ = _kernels.unpack_token(raw)
        if cap_id < 0:
            raise Fault(FaultKind.MALFORMED)
        buffers = self.l1.get(ctx.device) if ctx.is_cpu else None
        l1 = None
        if buffers is not None:
            l1 = buffers[0] if ctx.is_fetch else buffers[1]
            res = l1.get((cap_id, nonce))
            if res is not None:
                self.stats.l1_hits += 1
                restriction_gate(res.restriction, ctx)
                access_gate(res.perms, ctx)
                return res
            self.stats.l1_misses += 1
        res = self._l2_path(raw, cap_id, nonce, ctx)
        if l1 is not None:
            l1.insert((cap_id, nonce), res)
        return res

    def _l2_path(self, raw: int, cap_id: int, nonce: int, ctx: AccessContext) -> Resolution:
        line = self.l2.lookup(cap_id)
        if line is None or line.speculative:
            self.stats.l2_misses += 1
            return self._walk_and_fill(raw, ctx)
        self.stats.l2_hits += 1
        if self.l2.is_stale(line):
            return self._revalidate(raw, ctx, line)
        entry = line.entry
        if entry.nonce != nonce:
            raise Fault(FaultKind.INVALID_TOKEN)
        restriction_gate(entry.restriction, ctx)
        access_gate(entry.perms, ctx)
        return Resolution(
            cap_id,
            nonce,
            line.origin,
            line.window_base,
            line.window_end - line.window_base,
            entry.perms,
            entry.restriction,
            line.chain,
        )

    def _walk_and_fill(self, raw: int, ctx: AccessContext) -> Resolution:
        resolver = self.resolver
        entry, _ = resolver.entered(raw, ctx)
        chain = resolver.parents(entry)
        ids = tuple(e.cap_id for e in chain)
        inserted = []
        for i, e in enumerate(chain):
            if not e.perms & Perm.CT:
                continue
            origin, lo, hi, lock_fault = summarize_chain(chain, i)
            # An ancestor whose own access would fail the lock gate is not validated.
            if lock_fault is not None or hi <= lo:
                continue
            line = L2Line(e.cap_id, e.copy(), origin, lo, hi, ids[i:], self.l2.epoch)
            self.l2.insert(line)
            inserted.append(line)
        try:
            origin, lo, hi, lock_fault = summarize_chain(chain)
            if lock_fault is not None:
                raise Fault(lock_fault)
            access_gate(entry.perms, ctx)
            if hi <= lo:
                raise Fault(FaultKind.OUT_OF_BOUNDS)
        except Fault:
            for line in inserted:
                if self.l2.lookup(line.cap_id) is line:
                    self.l2.evict(line.cap_id)
            raise
        for line in inserted:
            line.speculative = False
        return Resolution(
            entry.cap_id, entry.nonce, origin, lo, hi - lo, entry.perms, entry.restriction, ids
        )

    def _revalidate(self, raw: int, ctx: AccessContext, stale: L2Line) -> Resolution:
        try:
            res = self._walk_and_fill(raw, ctx)
        except Fault:
            if self.l2.lookup(stale.cap_id) is stale:
                self.l2.evict(stale.cap_id)
            raise
        fresh = self.l2.lookup(stale.cap_id)
        if fresh is not None and fresh is not stale and fresh.entry == stale.entry:
            self.stats.stale_revalidations += 1
        elif fresh is stale:
            self.l2.evict(stale.cap_id)
        return res

    # -- invalidation ----------------------------------------------------

    def notify_op_commit(self, op_kind: str, touched_ids: list[int] | tuple[int, ...], global_taint: bool) -> None:
        removed = 0
        for cap_id in touched_ids:
            for instr, data in self.l1.values():
                removed += instr.evict_id(cap_id) + data.evict_id(cap_id)
            removed += self.l2.evict(cap_id)
        if removed:
            self.stats.invalidations += 1
        if global_taint and self.fault_injection != "skip_global_invalidation":
            for instr, data in self.l1.values():
                instr.flush()
                data.flush()
            self.l2.taint_all()
            self.stats.invalidations += 1

    # -- audits ----------------------------------------------------------

    def audit(self) -> list[str]:
        """Re-walk every trusted L2 line and report any that disagree with the table."""
        problems = []
        for line in self.l2.lines():
            if line.speculative or self.l2.is_stale(line):
                continue
            try:
                walk = self.resolver.walk(line.entry.token, None)
            except Fault as exc:
                problems.append(f"id {line.cap_id}: cached line but walk faults {exc.kind}")
                continue
            ids = tuple(e.cap_id for e in walk.chain)
            if (
                walk.chain[0] != line.entry
                or ids != line.chain
                or (walk.origin, walk.window_base, walk.window_end)
                != (line.origin, line.window_base, line.window_end)
                or walk.lock_fault is not None
            ):
                problems.append(f"id {line.cap_id}: cached line differs from table walk")
        return problems

    def l2_ids(self) -> set[int]:
        return {line.cap_id for line in self.l2.lines()}
