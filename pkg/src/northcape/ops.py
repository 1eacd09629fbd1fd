"""Capability operations and the register port through which devices issue them.

Every committed operation reports the ids it touched to a commit hook (the
cache layer). Lock, revoke and unlock additionally request a global taint.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Protocol

from . import _kernels
from .cmt import (
    ACCESS_PERMS,
    NO_RESTRICTION,
    CapabilityTable,
    CmtEntry,
    EntryKind,
    NonceSource,
    Perm,
    Restriction,
    RestrictionKind,
)
from .errors import Fault, FaultKind, NorthcapeError, OpError, OpErrorKind
from .resolver import AccessContext, Regime, Resolver, Walk, summarize_chain
from .token import smallest_offset_type


class Opcode(enum.IntEnum):
    CREATE = 1
    MERGE = 2
    DERIVE = 3
    CLONE = 4
    LOCK = 5
    DROP = 6
    REVOKE = 7
    INSPECT = 8
    RESTRICT = 9

    @property
    def label(self) -> str:
        return self.name.lower()


class ZeroFill(Protocol):
    def zero(self, base: int, length: int) -> None: ...


CommitHook = Callable[[str, tuple, bool], None]


@dataclass(frozen=True, slots=True)
class Principal:
    device: int
    subsystem: int
    regime: Regime = Regime.NORMAL
    is_cpu: bool = True

    def context(self) -> AccessContext:
        regime = Regime.NORMAL if self.regime is Regime.NORMAL else Regime.IRQ
        return AccessContext(self.device, self.subsystem, regime, None, False, self.is_cpu)

    @property
    def key(self) -> tuple[int, int]:
        return (self.device, self.subsystem)


@dataclass(frozen=True, slots=True)
class Inspection:
    """Metadata returned by inspect; ``base``/``length`` are None for partial results."""

    base: int | None
    length: int | None
    restriction: Restriction
    perms: Perm

    @property
    def full(self) -> bool:
        return self.base is not None


@dataclass(frozen=True)
class OpRequest:
    opcode: Opcode
    c_a: int = 0
    c_b: int = 0
    length: int = 0
    offset: int = 0
    restriction: Restriction = NO_RESTRICTION
    perms: Perm = Perm.NONE
    offset_add: int = 0
    length_sub: int = 0


@dataclass(frozen=True)
class OpResult:
    opcode: Opcode | None
    status: str
    tokens: tuple[int | None, ...] = ()
    value: object = None
    cmt_accesses: int = 0
    error: NorthcapeError | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


ZERO_RESULT = OpResult(None, str(OpErrorKind.FOREIGN_READ))


def _forge_check(caller: Principal, new: Restriction) -> None:
    if new.kind is RestrictionKind.SET and caller.subsystem != 0 and new.subsystem_id != caller.subsystem:
        raise OpError(OpErrorKind.RESTRICTION_FORGERY, "SubsystemIdSet names a foreign subsystem")


def _strictness_check(caller: Principal, new: Restriction, base: Restriction) -> None:
    _forge_check(caller, new)
    # Subsystem 0 is the loader; it may hand out any restriction.
    if caller.subsystem != 0 and new.strictness < base.strictness:
        raise OpError(OpErrorKind.RESTRICTION_FORGERY, "restriction weaker than the input's")


class CapabilityOps:
    def __init__(
        self,
        table: CapabilityTable,
        resolver: Resolver,
        memory: ZeroFill,
        on_commit: CommitHook | None = None,
        seed: int = 0,
    ) -> None:
        self.table = table
        self.resolver = resolver
        self.memory = memory
        self.on_commit = on_commit or (lambda kind, ids, taint: None)
        self.trng = NonceSource(seed, b"trng")
        self.counts = {op: 0 for op in Opcode}
        self.last_cmt_accesses = 0

    # -- helpers ---------------------------------------------------------

    def _walk(self, caller: Principal, raw: int, check_lock: bool) -> Walk:
        w = self.resolver.walk(raw, caller.context())
        if w.lock_fault is FaultKind.INVALID_PARENT or (check_lock and w.lock_fault is not None):
            raise Fault(w.lock_fault)  # type: ignore[arg-type]
        return w

    @staticmethod
    def _require_access(entry: CmtEntry) -> None:
        if not entry.perms & ACCESS_PERMS:
            raise Fault(FaultKind.PERMISSION_DENIED, "input grants no access")

    def _allocate(self, entry: CmtEntry, span: int) -> int:
        self.table.allocate(smallest_offset_type(max(span, 1)), entry)
        return entry.token

    def _commit(self, op: Opcode, touched: tuple, global_taint: bool = False) -> None:
        self.counts[op] += 1
        self.on_commit(op.label, touched, global_taint)

    def _accesses(self) -> int:
        c = self.table.counters
        return c.reads + c.writes

    # -- operations ------------------------------------------------------

    def create(
        self, caller: Principal, c_a: int, length: int, restriction: Restriction, perms: Perm
    ) -> tuple[int | None, int]:
        """Slice ``length`` bytes off the low end of a Direct capability."""
        d = self._walk(caller, c_a, check_lock=False).chain[0]
        if d.kind is not EntryKind.DIRECT:
            raise OpError(OpErrorKind.NOT_DIRECT)
        if d.locked_by is not None:
            raise OpError(OpErrorKind.LOCKED_INPUT)
        if d.refcount:
            raise OpError(OpErrorKind.HAS_CHILDREN)
        self._require_access(d)
        if not 0 < length <= d.length:
            raise OpError(OpErrorKind.BAD_LENGTH)
        if perms & ~d.perms:
            raise OpError(OpErrorKind.PERMISSION_ESCALATION)
        _strictness_check(caller, restriction, d.restriction)
        piece = CmtEntry(EntryKind.DIRECT, d.base, length, perms, restriction)
        if length == d.length:
            self.table.remove(d.cap_id)
            token = self._allocate(piece, length)
            self._commit(Opcode.CREATE, (d.cap_id, piece.cap_id))
            return None, token
        token = self._allocate(piece, length)
        d.base += length
        d.length -= length
        self.table.update(d.cap_id, d)
        self._commit(Opcode.CREATE, (d.cap_id, piece.cap_id))
        return d.token, token

    def merge(self, caller: Principal, c_a: int, c_b: int, restriction: Restriction, perms: Perm) -> int:
        a = self._walk(caller, c_a, check_lock=False).chain[0]
        b = self._walk(caller, c_b, check_lock=False).chain[0]
        for e in (a, b):
            if e.kind is not EntryKind.DIRECT:
                raise OpError(OpErrorKind.NOT_DIRECT)
        for e in (a, b):
            if e.locked_by is not None:
                raise OpError(OpErrorKind.LOCKED_INPUT)
        for e in (a, b):
            if e.refcount:
                raise OpError(OpErrorKind.HAS_CHILDREN)
        for e in (a, b):
            self._require_access(e)
        if a.cap_id == b.cap_id or (a.end != b.base and b.end != a.base):
            raise OpError(OpErrorKind.NOT_ADJACENT)
        _forge_check(caller, restriction)
        merged = CmtEntry(EntryKind.DIRECT, min(a.base, b.base), a.length + b.length, perms, restriction)
        self.table.remove(a.cap_id)
        self.table.remove(b.cap_id)
        token = self._allocate(merged, merged.length)
        self._commit(Opcode.MERGE, (a.cap_id, b.cap_id, merged.cap_id))
        return token

    def derive(
        self,
        caller: Principal,
        c_a: int,
        length: int | None,
        offset: int,
        restriction: Restriction,
        perms: Perm,
        opcode: Opcode = Opcode.DERIVE,
    ) -> int:
        """Indirect child over ``[offset, offset+length)`` of the input's window; ``None`` means all."""
        w = self._walk(caller, c_a, check_lock=True)
        e = w.chain[0]
        self._require_access(e)
        span = w.window_end - w.window_base
        if length is None:
            length = span
        if length < 1 or offset < 0 or offset + length > span:
            raise OpError(OpErrorKind.BAD_BOUNDS)
        if perms & ~e.perms:
            raise OpError(OpErrorKind.PERMISSION_ESCALATION)
        _strictness_check(caller, restriction, e.restriction)
        child = CmtEntry(
            EntryKind.INDIRECT, w.window_base + offset, length, perms, restriction, parent=e.token
        )
        token = self._allocate(child, length)
        e.refcount += 1
        self.table.update(e.cap_id, e)
        self._commit(opcode, (e.cap_id, child.cap_id))
        return token

    def clone(self, caller: Principal, c_a: int, restriction: Restriction, perms: Perm) -> int:
        return self.derive(caller, c_a, None, 0, restriction, perms, opcode=Opcode.CLONE)

    def lock(self, caller: Principal, c_a: int, restriction: Restriction, perms: Perm) -> int:
        w = self._walk(caller, c_a, check_lock=False)
        e = w.chain[0]
        d = w.chain[-1]
        self._require_access(e)
        if not d.perms & Perm.L:
            raise OpError(OpErrorKind.NOT_LOCKABLE)
        if d.locked_by is not None:
            raise OpError(OpErrorKind.ALREADY_LOCKED)
        if perms & ~e.perms:
            raise OpError(OpErrorKind.PERMISSION_ESCALATION)
        _strictness_check(caller, restriction, e.restriction)
        holder = CmtEntry(EntryKind.LOCK_HOLDER, 0, 0, perms, restriction, parent=e.token)
        token = self._allocate(holder, w.window_end - w.window_base)
        e.refcount += 1
        self.table.update(e.cap_id, e)
        d.locked_by = holder.cap_id
        self.table.update(d.cap_id, d)
        self._commit(Opcode.LOCK, (e.cap_id, d.cap_id, holder.cap_id), global_taint=True)
        return token

    def drop(self, caller: Principal, c_a: int) -> bool:
        e, _ = self.resolver.entered(c_a, caller.context())
        if e.kind is EntryKind.DIRECT:
            raise OpError(OpErrorKind.NOT_DROPPABLE)
        if e.refcount:
            self._commit(Opcode.DROP, ())
            return False
        touched = [e.cap_id]
        _, pnonce, pid, _ = _kernels.unpack_token(e.parent)
        parent = self.table.lookup(pid) if pid >= 0 else None
        if parent is not None and parent.nonce == pnonce:
            parent.refcount -= 1
            self.table.update(parent.cap_id, parent)
            touched.append(parent.cap_id)
            if e.kind is EntryKind.LOCK_HOLDER:
                try:
                    d = self.resolver.parents(parent)[-1]
                except Fault:
                    d = None
                if d is not None and d.locked_by == e.cap_id:
                    d.locked_by = None
                    self.table.update(d.cap_id, d)
                    touched.append(d.cap_id)
        self.table.remove(e.cap_id)
        self._commit(Opcode.DROP, tuple(touched), global_taint=e.kind is EntryKind.LOCK_HOLDER)
        return True

    def revoke(self, caller: Principal, c_a: int, restriction: Restriction, perms: Perm) -> int:
        d = self._walk(caller, c_a, check_lock=False).chain[0]
        if d.kind is not EntryKind.DIRECT:
            raise OpError(OpErrorKind.NOT_DIRECT)
        self._require_access(d)
        _forge_check(caller, restriction)
        self.memory.zero(d.base, d.length)
        self.table.remove(d.cap_id)
        fresh = CmtEntry(EntryKind.DIRECT, d.base, d.length, perms, restriction)
        token = self._allocate(fresh, d.length)
        self._commit(Opcode.REVOKE, (d.cap_id, fresh.cap_id), global_taint=True)
        return token

    def inspect(self, caller: Principal, c_a: int) -> Inspection:
        _, nonce, cap_id, _ = _kernels.unpack_token(c_a)
        if cap_id < 0:
            raise Fault(FaultKind.MALFORMED)
        e = self.table.lookup(cap_id)
        if e is None or e.nonce != nonce:
            raise Fault(FaultKind.INVALID_TOKEN)
        r = e.restriction
        if r.kind is RestrictionKind.BOUND and (caller.device, caller.subsystem) != (r.device_id, r.subsystem_id):
            raise Fault(FaultKind.RESTRICTION_VIOLATION)
        if r.kind is RestrictionKind.SET and r.subsystem_id != caller.subsystem:
            result = Inspection(None, None, r, e.perms & (ACCESS_PERMS | Perm.I))
        elif e.kind is EntryKind.LOCK_HOLDER:
            chain = self.resolver.parents(e)
            _, lo, hi, _ = summarize_chain(chain)
            perms = (e.perms & ~Perm.L) | (chain[-1].perms & Perm.L)
            result = Inspection(lo, hi - lo, r, perms)
        else:
            result = Inspection(e.base, e.length, r, e.perms)
        self._commit(Opcode.INSPECT, ())
        return result

    def restrict(
        self,
        caller: Principal,
        c_a: int,
        restriction: Restriction,
        perms: Perm,
        offset_add: int = 0,
        length_sub: int = 0,
    ) -> bool:
        e = self._walk(caller, c_a, check_lock=True).chain[0]
        keep = perms if e.kind is EntryKind.DIRECT else perms | Perm.L
        new_perms = e.perms & keep
        new_base, new_len = e.base, e.length
        reshaped = False
        if e.kind is EntryKind.INDIRECT and (offset_add or length_sub):
            if offset_add < 0 or length_sub < 0 or e.length - offset_add - length_sub < 1:
                raise OpError(OpErrorKind.BAD_BOUNDS)
            new_base = e.base + offset_add
            new_len = e.length - offset_add - length_sub
            reshaped = True
        new_restriction = e.restriction
        if restriction.kind is not RestrictionKind.NONE and e.restriction.kind is RestrictionKind.NONE:
            if restriction.kind is RestrictionKind.SET and caller.subsystem != 0:
                raise OpError(OpErrorKind.RESTRICTION_FORGERY, "SubsystemIdSet is set at creation only")
            new_restriction = restriction
        changed = reshaped or new_perms != e.perms or new_restriction != e.restriction
        if changed:
            e.perms = new_perms
            e.base, e.length = new_base, new_len
            e.restriction = new_restriction
            self.table.update(e.cap_id, e)
        # Shrinking a parent changes every descendant's effective window.
        self._commit(Opcode.RESTRICT, (e.cap_id,) if changed else (), global_taint=reshaped and e.refcount > 0)
        return changed

    def read_random(self) -> int:
        return self.trng.next64()

    # -- request dispatch ------------------------------------------------

    def execute(self, caller: Principal, req: OpRequest) -> OpResult:
        """Run one request, folding any error into the result status."""
        before = self._accesses()
        try:
            tokens, value = self._dispatch(caller, req)
        except NorthcapeError as exc:
            self.last_cmt_accesses = self._accesses() - before
            return OpResult(req.opcode, str(exc.kind), cmt_accesses=self.last_cmt_accesses, error=exc)
        self.last_cmt_accesses = self._accesses() - before
        return OpResult(req.opcode, "ok", tokens, value, self.last_cmt_accesses)

    def _dispatch(self, caller: Principal, req: OpRequest) -> tuple[tuple[int | None, ...], object]:
        op = req.opcode
        if op is Opcode.CREATE:
            return self.create(caller, req.c_a, req.length, req.restriction, req.perms), None
        if op is Opcode.MERGE:
            return (self.merge(caller, req.c_a, req.c_b, req.restriction, req.perms),), None
        if op is Opcode.DERIVE:
            return (self.derive(caller, req.c_a, req.length, req.offset, req.restriction, req.perms),), None
        if op is Opcode.CLONE:
            return (self.clone(caller, req.c_a, req.restriction, req.perms),), None
        if op is Opcode.LOCK:
            return (self.lock(caller, req.c_a, req.restriction, req.perms),), None
        if op is Opcode.DROP:
            return (), self.drop(caller, req.c_a)
        if op is Opcode.REVOKE:
            return (self.revoke(caller, req.c_a, req.restriction, req.perms),), None
        if op is Opcode.INSPECT:
            return (), self.inspect(caller, req.c_a)
        if op is Opcode.RESTRICT:
            return (), self.restrict(
                caller, req.c_a, req.restriction, req.perms, req.offset_add, req.length_sub
            )
        raise OpError(OpErrorKind.BAD_OPCODE, repr(op))


@dataclass
class Bank:
    owner: tuple[int, int] | None = None
    request: OpRequest | None = None
    result: OpResult | None = None
    queued: Principal | None = None


class OpsPort:
    """Two register banks, one per regime, each lockable by a (device, subsystem).

    Operations complete atomically within one machine step. An Irq-bank request
    other than inspect that arrives while the Normal bank is held is queued and
    runs once the Normal bank is released or its owner reads the result.
    """

    def __init__(self, ops: CapabilityOps) -> None:
        self.ops = ops
        self.banks = {Regime.NORMAL: Bank(), Regime.IRQ: Bank()}

    @staticmethod
    def _regime(principal: Principal) -> Regime:
        return Regime.NORMAL if principal.regime is Regime.NORMAL else Regime.IRQ

    def begin(self, principal: Principal) -> None:
        bank = self.banks[self._regime(principal)]
        if bank.owner is not None and bank.owner != principal.key:
            raise OpError(OpErrorKind.PORT_LOCKED)
        bank.owner = principal.key

    def submit(self, principal: Principal, req: OpRequest) -> None:
        regime = self._regime(principal)
        bank = self.banks[regime]
        if bank.owner != principal.key:
            raise OpError(OpErrorKind.PORT_LOCKED)
        bank.request = req
        bank.result = None
        normal_busy = self.banks[Regime.NORMAL].owner is not None
        if regime is Regime.IRQ and req.opcode is not Opcode.INSPECT and normal_busy:
            bank.queued = principal
            return
        bank.result = self.ops.execute(principal, req)

    def pending(self, regime: Regime) -> bool:
        return self.banks[regime].queued is not None

    def read_result(self, principal: Principal) -> OpResult:
        regime = self._regime(principal)
        bank = self.banks[regime]
        if bank.owner != principal.key:
            return ZERO_RESULT
        if bank.queued is not None:
            self._drain()
        result = bank.result or OpResult(None, "ok")
        bank.owner = None
        bank.request = None
        bank.result = None
        if regime is Regime.NORMAL:
            self._drain()
        return result

    def _drain(self) -> None:
        irq = self.banks[Regime.IRQ]
        if irq.queued is not None and irq.request is not None:
            principal = irq.queued
            irq.queued = None
            irq.result = self.ops.execute(principal, irq.request)

    def execute(self, principal: Principal, req: OpRequest) -> OpResult:
        self.begin(principal)
        self.submit(principal, req)
        return self.read_result(principal)
