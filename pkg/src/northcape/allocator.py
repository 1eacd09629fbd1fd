"""Heap allocator built only from capability operations, plus a bitmap arena.

The heap runs as an ordinary principal: it holds Direct capabilities, splits
them with create, glues them back with merge and hands out exact-size
Indirect views. Nothing here reaches into the metadata table directly except
to ask whether a token names a Direct entry.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass

from . import _kernels
from .cmt import NO_RESTRICTION, EntryKind, Perm, Restriction
from .errors import NorthcapeError, OpError, OpErrorKind, TableFull
from .machine import Device, Machine

HEADER_SIZE = 64
MIN_CHUNK = 64
WORD = 8
# create, derive and the header split each need a slot
SLOTS_PER_MALLOC = 3


class AllocatorError(NorthcapeError):
    kind = "AllocatorError"


class OutOfMemory(AllocatorError):
    kind = "OutOfMemory"


class UnknownToken(AllocatorError):
    kind = "UnknownToken"


class FreeWhileShared(AllocatorError):
    kind = "FreeWhileShared"


class ArenaFull(AllocatorError):
    kind = "ArenaFull"


class TooLarge(AllocatorError):
    kind = "TooLarge"


@dataclass
class Chunk:
    base: int
    length: int
    token: int

    @property
    def end(self) -> int:
        return self.base + self.length


@dataclass
class Allocation:
    handle: int
    size: int
    header: Chunk
    payload: Chunk

    @property
    def base(self) -> int:
        return self.header.base

    @property
    def length(self) -> int:
        return self.header.length + self.payload.length


def _round_up(n: int, to: int) -> int:
    return -(-n // to) * to


class Heap:
    """Best-fit allocator with lowest-base tiebreak and eager coalescing."""

    def __init__(self, machine: Machine, dev: Device | str | int, direct: int, perms: Perm | None = None) -> None:
        self.machine = machine
        self.dev = machine.device(dev)
        entry, _ = machine.resolver.entered(direct, machine.context(self.dev, None))
        if entry.kind is not EntryKind.DIRECT:
            raise OpError(OpErrorKind.NOT_DIRECT, "heap needs a Direct capability")
        if entry.refcount:
            raise OpError(OpErrorKind.HAS_CHILDREN, "heap capability has children")
        info = machine.inspect(self.dev, direct)
        self.perms = perms if perms is not None else info.perms
        # pieces keep the heap's own restriction so a bound heap stays bound
        self.restriction = info.restriction
        self.initial = (info.base, info.length)
        self._by_size: list[tuple[int, int]] = []
        self._bases: list[int] = []
        self._free: dict[int, Chunk] = {}
        self.allocated: dict[int, Allocation] = {}
        self._by_payload: dict[int, int] = {}
        self._insert(Chunk(info.base, info.length, direct))

    # -- free views ------------------------------------------------------

    def _insert(self, chunk: Chunk) -> None:
        bisect.insort(self._by_size, (chunk.length, chunk.base))
        bisect.insort(self._bases, chunk.base)
        self._free[chunk.base] = chunk

    def _remove(self, chunk: Chunk) -> None:
        self._by_size.pop(bisect.bisect_left(self._by_size, (chunk.length, chunk.base)))
        self._bases.pop(bisect.bisect_left(self._bases, chunk.base))
        del self._free[chunk.base]

    def free_chunks(self) -> list[Chunk]:
        return [self._free[b] for b in self._bases]

    @property
    def free_bytes(self) -> int:
        return sum(c.length for c in self._free.values())

    @property
    def allocated_bytes(self) -> int:
        return sum(a.length for a in self.allocated.values())

    def stats_lines(self) -> list[str]:
        largest = self._by_size[-1][0] if self._by_size else 0
        return [
            f"heap_free_bytes={self.free_bytes}",
            f"heap_free_chunks={len(self._free)}",
            f"heap_largest_free={largest}",
            f"heap_allocations={len(self.allocated)}",
        ]

    # -- allocation ------------------------------------------------------

    def malloc(
        self,
        size: int,
        lockable: bool = False,
        zeroed: bool = False,
        restriction: Restriction | None = None,
    ) -> int:
        if size < 1:
            raise ValueError("malloc size must be at least 1")
        m, dev = self.machine, self.dev
        payload_len = max(_round_up(size, WORD), MIN_CHUNK)
        need = HEADER_SIZE + payload_len
        i = bisect.bisect_left(self._by_size, (need, -1))
        if i == len(self._by_size):
            raise OutOfMemory(f"no free chunk of {need} bytes")
        if m.table.free_count < SLOTS_PER_MALLOC:
            raise TableFull("allocator needs three free table slots")
        chunk = self._free[self._by_size[i][1]]
        self._remove(chunk)
        spare = chunk.length - need
        if spare < MIN_CHUNK:
            payload_len += spare
            spare = 0
        data_perms = (self.perms & ~Perm.L) | (Perm.L if lockable else Perm.NONE)
        r = self.restriction
        rest, header_tok = m.create(dev, chunk.token, HEADER_SIZE, Perm.R | Perm.W, r)
        header = Chunk(chunk.base, HEADER_SIZE, header_tok)
        rest_after, payload_tok = m.create(dev, rest, payload_len, data_perms, r)
        payload = Chunk(header.end, payload_len, payload_tok)
        if spare:
            self._insert(Chunk(payload.end, spare, rest_after))
        if zeroed:
            m.mem_write(dev, payload_tok, bytes(payload_len))
        handle = m.derive(dev, payload_tok, size, 0, data_perms & ~Perm.L, r if restriction is None else restriction)
        record = b"".join(v.to_bytes(8, "little") for v in (handle, payload_tok, size, payload_len))
        m.mem_write(dev, header_tok, record)
        self.allocated[handle] = Allocation(handle, size, header, payload)
        self._by_payload[payload_tok] = handle
        return handle

    def header_record(self, handle: int) -> tuple[int, int, int, int]:
        """The in-segment record for an allocation: (handle, payload token, size, payload length)."""
        rec = self._lookup(handle)
        raw = self.machine.mem_read(self.dev, rec.header.token, 32)
        return tuple(int.from_bytes(raw[i : i + 8], "little") for i in range(0, 32, 8))  # type: ignore[return-value]

    def _lookup(self, handle: int) -> Allocation:
        try:
            return self.allocated[handle]
        except KeyError:
            raise UnknownToken(f"{handle:#x}") from None

    def free(self, handle: int) -> None:
        rec = self._lookup(handle)
        m, dev = self.machine, self.dev
        if not m.drop(dev, handle):
            raise FreeWhileShared(f"{handle:#x} still has derived children")
        m.mem_write(dev, rec.payload.token, bytes(rec.payload.length))
        self._release(rec, rec.payload.token)

    def reclaim(self, payload_direct: int) -> None:
        """Take back an allocation whose client crashed, whatever it derived or locked."""
        handle = self._by_payload.get(payload_direct)
        if handle is None:
            raise UnknownToken(f"{payload_direct:#x}")
        rec = self.allocated[handle]
        fresh = self.machine.revoke(self.dev, payload_direct, self.perms, self.restriction)
        self._release(rec, fresh)

    def _release(self, rec: Allocation, payload_tok: int) -> None:
        m, dev = self.machine, self.dev
        del self.allocated[rec.handle]
        del self._by_payload[rec.payload.token]
        # the header holds live tokens; never hand it out again un-scrubbed
        m.mem_write(dev, rec.header.token, bytes(HEADER_SIZE))
        token = m.merge(dev, rec.header.token, payload_tok, self.perms, self.restriction)
        self._coalesce(Chunk(rec.base, rec.length, token))

    def add_region(self, direct: int) -> None:
        """Grow the heap with a Direct capability adjacent to its current span."""
        info = self.machine.inspect(self.dev, direct)
        lo, length = self.initial
        if info.base + info.length == lo:
            self.initial = (info.base, length + info.length)
        elif info.base == lo + length:
            self.initial = (lo, length + info.length)
        else:
            raise ValueError("region is not adjacent to the heap")
        self._coalesce(Chunk(info.base, info.length, direct))

    def _coalesce(self, chunk: Chunk) -> None:
        m, dev = self.machine, self.dev
        j = bisect.bisect_left(self._bases, chunk.base)
        if j > 0:
            left = self._free[self._bases[j - 1]]
            if left.end == chunk.base:
                self._remove(left)
                chunk = Chunk(left.base, left.length + chunk.length, m.merge(dev, left.token, chunk.token, self.perms, self.restriction))
        right = self._free.get(chunk.end)
        if right is not None:
            self._remove(right)
            chunk = Chunk(chunk.base, chunk.length + right.length, m.merge(dev, chunk.token, right.token, self.perms, self.restriction))
        self._insert(chunk)

    # -- audits ----------------------------------------------------------

    def check(self) -> list[str]:
        """Overlap sweep, byte conservation and free-view agreement."""
        problems = []
        spans = [(c.base, c.end, "free") for c in self._free.values()]
        spans += [(a.base, a.base + a.length, "alloc") for a in self.allocated.values()]
        spans.sort()
        for (lo_a, hi_a, ka), (lo_b, hi_b, kb) in zip(spans, spans[1:]):
            if lo_b < hi_a:
                problems.append(f"{ka} [{lo_a:#x},{hi_a:#x}) overlaps {kb} [{lo_b:#x},{hi_b:#x})")
        if self.free_bytes + self.allocated_bytes != self.initial[1]:
            problems.append("heap bytes not conserved")
        if sorted((c.length, c.base) for c in self._free.values()) != self._by_size:
            problems.append("free views disagree")
        return problems


class LocalArena:
    """Fixed-size chunks over one capability, tracked by an occupancy bitmap."""

    def __init__(self, machine: Machine, dev: Device | str | int, arena: int, chunk_size: int) -> None:
        self.machine = machine
        self.dev = machine.device(dev)
        self.arena = arena
        self.chunk_size = chunk_size
        info = machine.inspect(self.dev, arena)
        if info.length is None or chunk_size < 1:
            raise ValueError("arena needs a fully inspectable capability and a positive chunk size")
        self.base = info.base
        self.chunks = info.length // chunk_size
        if self.chunks < 1:
            raise ValueError("arena smaller than one chunk")
        self.perms = info.perms & ~Perm.L
        self.bitmap = 0

    def alloc(self, size: int, restriction: Restriction = NO_RESTRICTION) -> int:
        if size > self.chunk_size:
            raise TooLarge(f"{size} > chunk size {self.chunk_size}")
        if size < 1:
            raise ValueError("size must be at least 1")
        free = ~self.bitmap & ((1 << self.chunks) - 1)
        if not free:
            raise ArenaFull()
        # bitmaps wider than one word are scanned a word at a time
        index = 0
        while not (free >> index) & 0xFFFFFFFFFFFFFFFF:
            index += 64
        index += _kernels.ctz64((free >> index) & 0xFFFFFFFFFFFFFFFF)
        token = self.machine.derive(self.dev, self.arena, size, index * self.chunk_size, self.perms, restriction)
        self.bitmap |= 1 << index
        return token

    def free(self, token: int) -> None:
        info = self.machine.inspect(self.dev, token)
        if info.base is None:
            raise UnknownToken(f"{token:#x}")
        index, rem = divmod(info.base - self.base, self.chunk_size)
        if rem or not 0 <= index < self.chunks or not self.bitmap >> index & 1:
            raise UnknownToken(f"{token:#x}")
        if not self.machine.drop(self.dev, token):
            raise FreeWhileShared(f"{token:#x}")
        self.bitmap &= ~(1 << index)
