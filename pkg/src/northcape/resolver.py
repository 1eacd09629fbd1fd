"""Uncached token resolution.

This is the reference path: it keeps no state between calls and is the oracle
the caching layer is compared against. Checks run in a fixed order and the
first failing one determines the fault:

1. decode (Malformed)
2. id lookup and nonce (InvalidToken)
3. restriction gate (RestrictionViolation)
4. parent walk to the Direct entry (InvalidParent)
5. lock gate (Locked, InvalidParent)
6. Irq regime needs the I permission (IrqInaccessible)
7. requested access in the entered entry's permissions (PermissionDenied)

``translate`` adds OutOfBounds and CmtOverlap on top.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import _kernels
from .cmt import CapabilityTable, CmtEntry, EntryKind, Perm, Restriction, RestrictionKind
from .errors import Fault, FaultKind

MAX_CHAIN_DEPTH = 32


class Regime(str, enum.Enum):
    NORMAL = "Normal"
    IRQ = "Irq"
    NMI = "Nmi"

    def __str__(self) -> str:
        return self.value


class Access(str, enum.Enum):
    READ = "Read"
    WRITE = "Write"
    EXECUTE = "Execute"

    def __str__(self) -> str:
        return self.value


_NEEDED = {Access.READ: Perm.R, Access.WRITE: Perm.W, Access.EXECUTE: Perm.X}


@dataclass(frozen=True, slots=True)
class AccessContext:
    device: int
    subsystem: int
    regime: Regime = Regime.NORMAL
    access: Access | None = Access.READ
    is_fetch: bool = False
    is_cpu: bool = True


@dataclass(frozen=True, slots=True)
class Resolution:
    cap_id: int
    nonce: int
    origin: int
    window_base: int
    window_len: int
    perms: Perm
    restriction: Restriction
    chain: tuple[int, ...]

    @property
    def phys_base(self) -> int:
        return self.window_base

    @property
    def window_end(self) -> int:
        return self.window_base + self.window_len

    @property
    def chain_depth(self) -> int:
        return len(self.chain) - 1

    @property
    def device_payload(self) -> int | None:
        if self.restriction.kind is RestrictionKind.DEVICE:
            return self.restriction.payload
        return None


@dataclass(frozen=True, slots=True)
class EntryOutcome:
    """Result of checking a fetch target: a subsystem call or a plain fetch."""

    is_call: bool
    subsystem: int | None = None


PLAIN_FETCH = EntryOutcome(False)


@dataclass(slots=True)
class Walk:
    """Everything learned from steps 1 to 5 of a resolution."""

    chain: list[CmtEntry]
    offset: int
    origin: int
    window_base: int
    window_end: int
    lock_fault: FaultKind | None


def restriction_gate(restriction: Restriction, ctx: AccessContext) -> None:
    kind = restriction.kind
    if kind is RestrictionKind.BOUND:
        if ctx.device != restriction.device_id or ctx.subsystem != restriction.subsystem_id:
            raise Fault(FaultKind.RESTRICTION_VIOLATION)
    elif kind is RestrictionKind.SET and not ctx.is_fetch:
        if ctx.subsystem != restriction.subsystem_id:
            raise Fault(FaultKind.RESTRICTION_VIOLATION)


def access_gate(perms: Perm, ctx: AccessContext) -> None:
    if ctx.regime is not Regime.NORMAL and ctx.is_cpu and not perms & Perm.I:
        raise Fault(FaultKind.IRQ_INACCESSIBLE)
    if ctx.access is not None and not perms & _NEEDED[ctx.access]:
        raise Fault(FaultKind.PERMISSION_DENIED)


def summarize_chain(chain: list[CmtEntry], start: int = 0) -> tuple[int, int, int, FaultKind | None]:
    """Origin, window and lock-gate verdict for the sub-chain beginning at ``start``.

    Lock-holders carry no bounds of their own, so they contribute nothing to
    the intersection and the origin comes from the next entry up.
    """
    origin = -1
    lo = 0
    hi = 1 << 64
    holders = []
    for e in chain[start:]:
        if e.kind is EntryKind.LOCK_HOLDER:
            holders.append(e.cap_id)
            continue
        if origin < 0:
            origin = e.base
        if e.base > lo:
            lo = e.base
        if e.base + e.length < hi:
            hi = e.base + e.length
    locked_by = chain[-1].locked_by
    fault = None
    if locked_by is not None and locked_by not in holders:
        fault = FaultKind.LOCKED
    elif any(h != locked_by for h in holders):
        fault = FaultKind.INVALID_PARENT
    return origin, lo, max(lo, hi), fault


def entry_point_outcome(res: Resolution, offset: int, ctx: AccessContext) -> EntryOutcome:
    r = res.restriction
    if r.kind is RestrictionKind.SET and r.subsystem_id != ctx.subsystem:
        if offset != 0:
            raise Fault(FaultKind.NOT_ENTRY_POINT)
        return EntryOutcome(True, r.subsystem_id)
    return PLAIN_FETCH


def bounds_check(res: Resolution, offset: int, length: int, cmt_region: tuple[int, int]) -> int:
    """Physical start of ``[origin+offset, +length)`` after window and CMT checks."""
    phys = res.origin + offset
    if phys < res.window_base or phys + length > res.window_base + res.window_len:
        raise Fault(FaultKind.OUT_OF_BOUNDS)
    if phys < cmt_region[1] and cmt_region[0] < phys + length:
        raise Fault(FaultKind.CMT_OVERLAP)
    return phys


class Resolver:
    def __init__(self, table: CapabilityTable, cmt_region: tuple[int, int]) -> None:
        self.table = table
        self.cmt_region = cmt_region

    def entered(self, raw: int, ctx: AccessContext | None) -> tuple[CmtEntry, int]:
        """Steps 1 to 3: the entered entry and the token offset."""
        _, nonce, cap_id, offset = _kernels.unpack_token(raw)
        if cap_id < 0:
            raise Fault(FaultKind.MALFORMED)
        entry = self.table.lookup(cap_id)
        if entry is None or entry.nonce != nonce:
            raise Fault(FaultKind.INVALID_TOKEN)
        if ctx is not None:
            restriction_gate(entry.restriction, ctx)
        return entry, offset

    def parents(self, entry: CmtEntry) -> list[CmtEntry]:
        """Step 4: the chain from ``entry`` up to its Direct entry."""
        lookup = self.table.lookup
        chain = [entry]
        cur = entry
        while cur.kind is not EntryKind.DIRECT:
            if len(chain) > MAX_CHAIN_DEPTH or cur.parent is None:
                raise Fault(FaultKind.INVALID_PARENT)
            _, pnonce, pid, _ = _kernels.unpack_token(cur.parent)
            if pid < 0:
                raise Fault(FaultKind.INVALID_PARENT)
            parent = lookup(pid)
            if parent is None or parent.nonce != pnonce:
                raise Fault(FaultKind.INVALID_PARENT)
            chain.append(parent)
            cur = parent
        return chain

    def walk(self, raw: int, ctx: AccessContext | None) -> Walk:
        entry, offset = self.entered(raw, ctx)
        chain = self.parents(entry)
        origin, lo, hi, lock_fault = summarize_chain(chain)
        return Walk(chain, offset, origin, lo, hi, lock_fault)

    def resolve(self, raw: int, ctx: AccessContext) -> Resolution:
        w = self.walk(raw, ctx)
        if w.lock_fault is not None:
            raise Fault(w.lock_fault)
        entry = w.chain[0]
        access_gate(entry.perms, ctx)
        if w.window_end <= w.window_base:
            raise Fault(FaultKind.OUT_OF_BOUNDS)
        return Resolution(
            entry.cap_id,
            entry.nonce,
            w.origin,
            w.window_base,
            w.window_end - w.window_base,
            entry.perms,
            entry.restriction,
            tuple(e.cap_id for e in w.chain),
        )

    def translate(self, raw: int, ctx: AccessContext, length: int) -> tuple[int, Resolution]:
        if length < 1:
            raise ValueError("access length must be at least 1")
        res = self.resolve(raw, ctx)
        return bounds_check(res, _kernels.unpack_token(raw)[3], length, self.cmt_region), res

    def check_entry_point(self, raw: int, ctx: AccessContext) -> EntryOutcome:
        res = self.resolve(raw, ctx)
        return entry_point_outcome(res, _kernels.unpack_token(raw)[3], ctx)
