"""System model: memory, devices, bus checks, subsystem calls and interrupts.

There is no instruction interpreter. Callers drive the machine with explicit
events (read, write, fetch, op, interrupt, mret) and every event leaves one
line in the trace: ``seq kind principal token outcome``.
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from typing import Iterable

from . import _kernels
from .cmt import NO_RESTRICTION, CapabilityTable, EntryKind, Perm, Restriction, TableCounters
from .errors import BusError, Fault, FaultKind, NorthcapeError
from .ntlb import CacheStats, Ntlb
from .ops import CapabilityOps, Inspection, Opcode, OpRequest, OpResult, OpsPort, Principal
from .resolver import (
    Access,
    AccessContext,
    EntryOutcome,
    Regime,
    Resolution,
    Resolver,
    bounds_check,
    entry_point_outcome,
)
from .token import format_token

PAGE = 4096
CMT_ENTRY_BYTES = 32
FETCH_WIDTH = 4
REGISTER_SLOTS = 64


class MachineError(NorthcapeError):
    kind = "MachineError"


class NotInIrq(MachineError):
    kind = "NotInIrq"


class VectorFault(MachineError):
    kind = "VectorFault"

    def __init__(self, cause: int, fault: Fault) -> None:
        self.cause = cause
        self.fault = fault
        super().__init__(f"cause {cause}: {fault.kind}")


class Halted(MachineError):
    kind = "Halted"


class WriteOnce(MachineError):
    kind = "WriteOnce"


class PhysicalMemory:
    """Sparse byte-addressed memory; untouched pages read as zero."""

    def __init__(self, size: int) -> None:
        self.size = size
        self._pages: dict[int, bytearray] = {}

    def _check(self, addr: int, length: int) -> None:
        if addr < 0 or length < 0 or addr + length > self.size:
            raise ValueError(f"physical range [{addr:#x}, +{length:#x}) outside memory")

    def read(self, addr: int, length: int) -> bytes:
        self._check(addr, length)
        out = bytearray(length)
        pos = 0
        while pos < length:
            page, off = divmod(addr + pos, PAGE)
            n = min(PAGE - off, length - pos)
            data = self._pages.get(page)
            if data is not None:
                out[pos : pos + n] = data[off : off + n]
            pos += n
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        self._check(addr, len(data))
        pos = 0
        while pos < len(data):
            page, off = divmod(addr + pos, PAGE)
            n = min(PAGE - off, len(data) - pos)
            buf = self._pages.get(page)
            if buf is None:
                buf = self._pages[page] = bytearray(PAGE)
            buf[off : off + n] = data[pos : pos + n]
            pos += n

    def zero(self, base: int, length: int) -> None:
        self._check(base, length)
        end = base + length
        first, last = base // PAGE, (end - 1) // PAGE if length else base // PAGE - 1
        if last - first > len(self._pages):
            pages = [p for p in self._pages if first <= p <= last]
        else:
            pages = [p for p in range(first, last + 1) if p in self._pages]
        for page in pages:
            lo = max(base, page * PAGE)
            hi = min(end, (page + 1) * PAGE)
            if lo == page * PAGE and hi == (page + 1) * PAGE:
                del self._pages[page]
            else:
                self._pages[page][lo - page * PAGE : hi - page * PAGE] = bytes(hi - lo)

    def nonzero_pages(self) -> int:
        return sum(1 for buf in self._pages.values() if any(buf))


class RegisterFile:
    """32 integer plus 32 floating-point slots with an uninitialized mask."""

    def __init__(self) -> None:
        self.values = [0] * REGISTER_SLOTS
        self.uninit_mask = 0

    def read(self, index: int) -> int:
        if self.uninit_mask >> index & 1:
            return 0
        return self.values[index]

    def write(self, index: int, value: int) -> None:
        self.values[index] = value & 0xFFFFFFFFFFFFFFFF
        self.uninit_mask &= ~(1 << index)

    def zero(self, mask: int) -> None:
        mask &= (1 << REGISTER_SLOTS) - 1
        self.uninit_mask |= mask
        for i in range(REGISTER_SLOTS):
            if mask >> i & 1:
                self.values[i] = 0


@dataclass
class Device:
    name: str
    port: int

    @property
    def is_cpu(self) -> bool:
        return isinstance(self, Cpu)


@dataclass
class Dma(Device):
    subsystem: int = 0

    def label(self) -> str:
        return f"{self.name}/{Regime.NORMAL}:{self.subsystem}"


@dataclass
class Cpu(Device):
    regime: Regime = Regime.NORMAL
    subsystem: dict[Regime, int] = field(default_factory=lambda: {r: 0 for r in Regime})
    registers: dict[Regime, RegisterFile] = field(
        default_factory=lambda: {r: RegisterFile() for r in Regime}
    )
    pc: dict[Regime, int] = field(default_factory=lambda: {r: 0 for r in Regime})
    mepc: dict[Regime, int] = field(default_factory=lambda: {r: 0 for r in Regime})
    irq_enable: dict[Regime, bool] = field(default_factory=lambda: {r: False for r in Regime})
    nmi_mask: int = 0
    vector_base: int | None = None
    saved: list[tuple[Regime, int]] = field(default_factory=list)
    halted: bool = False

    @property
    def active_subsystem(self) -> int:
        return self.subsystem[self.regime]

    @property
    def regs(self) -> RegisterFile:
        return self.registers[self.regime]

    def label(self) -> str:
        return f"{self.name}/{self.regime}:{self.active_subsystem}"


@dataclass
class MachineConfig:
    memory_size: int = 1 << 32
    cmt_slots: int = 1 << 13
    cmt_row_width: int = 64
    l1_instr: int = 16
    l1_data: int = 32
    l2_size: int = 512
    l2_assoc: int = 8
    seed: int = 0
    cache: bool = True
    interrupt_causes: int = 32
    timer_cause: int = 7
    fault_injection: str | None = None
    trace_limit: int | None = None


def _fmt_tokens(tokens: Iterable[int | None]) -> str:
    parts = [format_token(t) if t is not None else "-" for t in tokens]
    return ",".join(parts) if parts else "-"


def _fmt_data(data: bytes) -> str:
    if len(data) <= 16:
        return data.hex()
    return f"{data[:16].hex()}+{len(data) - 16}"


class Machine:
    def __init__(self, config: MachineConfig | None = None, **overrides) -> None:
        cfg = config or MachineConfig()
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise TypeError(f"unknown machine option {key!r}")
            setattr(cfg, key, value)
        self.config = cfg
        self.memory = PhysicalMemory(cfg.memory_size)
        cmt_bytes = cfg.cmt_slots * CMT_ENTRY_BYTES
        if cmt_bytes >= cfg.memory_size:
            raise ValueError("memory too small to hold the metadata table")
        self.cmt_region = (cfg.memory_size - cmt_bytes, cfg.memory_size)
        self.table = CapabilityTable(cfg.cmt_slots, cfg.cmt_row_width, cfg.seed)
        self.table.install_root(cfg.memory_size)
        self.table.counters = TableCounters()
        self.resolver = Resolver(self.table, self.cmt_region)
        self.ntlb: Ntlb | None = None
        if cfg.cache:
            self.ntlb = Ntlb(
                self.resolver, cfg.l1_instr, cfg.l1_data, cfg.l2_size, cfg.l2_assoc, cfg.fault_injection
            )
        self.ops = CapabilityOps(self.table, self.resolver, self.memory, self._on_commit, cfg.seed)
        self.port = OpsPort(self.ops)
        self.devices: list[Device] = []
        self._by_name: dict[str, Device] = {}
        self.trace: list[str] | collections.deque[str] = (
            collections.deque(maxlen=cfg.trace_limit) if cfg.trace_limit else []
        )
        self.seq = 0
        self.access_counts = {"read": 0, "write": 0, "fetch": 0}

    # -- devices ---------------------------------------------------------

    def add_cpu(self, name: str | None = None) -> Cpu:
        cpu = Cpu(name or f"cpu{len(self.devices)}", len(self.devices))
        self._register(cpu)
        if self.ntlb is not None:
            self.ntlb.attach_cpu(cpu.port)
        return cpu

    def add_dma(self, name: str | None = None, subsystem: int = 0) -> Dma:
        dma = Dma(name or f"dma{len(self.devices)}", len(self.devices), subsystem)
        self._register(dma)
        return dma

    def _register(self, dev: Device) -> None:
        if dev.name in self._by_name:
            raise ValueError(f"duplicate device name {dev.name!r}")
        if dev.port >= 1 << 16:
            raise ValueError("device ids are 16 bits")
        self.devices.append(dev)
        self._by_name[dev.name] = dev

    def device(self, ref: Device | str | int) -> Device:
        if isinstance(ref, Device):
            return ref
        if isinstance(ref, int):
            return self.devices[ref]
        try:
            return self._by_name[ref]
        except KeyError:
            raise KeyError(f"unknown device {ref!r}") from None

    def cpu(self, ref: Device | str | int) -> Cpu:
        dev = self.device(ref)
        if not isinstance(dev, Cpu):
            raise MachineError(f"{dev.name} is not a CPU")
        return dev

    def principal(self, ref: Device | str | int) -> Principal:
        dev = self.device(ref)
        if isinstance(dev, Cpu):
            return Principal(dev.port, dev.active_subsystem, dev.regime, True)
        return Principal(dev.port, dev.subsystem, Regime.NORMAL, False)  # type: ignore[attr-defined]

    def context(self, ref: Device | str | int, access: Access | None, is_fetch: bool = False) -> AccessContext:
        dev = self.device(ref)
        if isinstance(dev, Cpu):
            regime = Regime.NORMAL if dev.regime is Regime.NORMAL else Regime.IRQ
            return AccessContext(dev.port, dev.active_subsystem, regime, access, is_fetch, True)
        return AccessContext(dev.port, dev.subsystem, Regime.NORMAL, access, is_fetch, False)  # type: ignore[attr-defined]

    # -- trace -----------------------------------------------------------

    def _emit(self, kind: str, dev: Device | None, tokens: Iterable[int | None], outcome: str) -> None:
        who = dev.label() if dev is not None else "-"  # type: ignore[attr-defined]
        self.trace.append(f"{self.seq} {kind} {who} {_fmt_tokens(tokens)} {outcome}")
        self.seq += 1

    def note(self, kind: str, outcome: str = "ok") -> None:
        """Record a harness-level event (boot, trapdoor, allocator calls)."""
        self._emit(kind, None, (), outcome)

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)

    # -- bus -------------------------------------------------------------

    def _resolve(self, raw: int, ctx: AccessContext) -> Resolution:
        if self.ntlb is not None:
            return self.ntlb.cached_resolve(raw, ctx)
        return self.resolver.resolve(raw, ctx)

    def _translate(self, dev: Device, raw: int, access: Access, length: int) -> int:
        if length < 1:
            raise ValueError("access length must be at least 1")
        if not 0 <= raw < 1 << 64:
            raise ValueError("token must be a 64-bit word")
        ctx = self.context(dev, access)
        res = self._resolve(raw, ctx)
        return bounds_check(res, _kernels.unpack_token(raw)[3], length, self.cmt_region)

    def _live(self, dev: Device) -> None:
        if isinstance(dev, Cpu) and dev.halted:
            raise Halted(dev.name)

    def mem_read(self, ref: Device | str | int, raw: int, length: int) -> bytes:
        dev = self.device(ref)
        self._live(dev)
        self.access_counts["read"] += 1
        try:
            phys = self._translate(dev, raw, Access.READ, length)
        except Fault as exc:
            self._emit("read", dev, (raw,), str(exc.kind))
            raise BusError(exc.kind) from None
        data = self.memory.read(phys, length)
        self._emit("read", dev, (raw,), f"ok:{_fmt_data(data)}")
        return data

    def mem_write(self, ref: Device | str | int, raw: int, data: bytes) -> None:
        dev = self.device(ref)
        self._live(dev)
        self.access_counts["write"] += 1
        try:
            phys = self._translate(dev, raw, Access.WRITE, len(data))
        except Fault as exc:
            self._emit("write", dev, (raw,), str(exc.kind))
            raise BusError(exc.kind) from None
        self.memory.write(phys, bytes(data))
        self._emit("write", dev, (raw,), f"ok:{len(data)}")

    def fetch(self, ref: Device | str | int, raw: int, expect_call: bool = False) -> EntryOutcome:
        cpu = self.cpu(ref)
        self._live(cpu)
        self.access_counts["fetch"] += 1
        try:
            outcome = self._fetch_target(cpu, raw, expect_call)
        except Fault as exc:
            self._emit("fetch", cpu, (raw,), str(exc.kind))
            raise BusError(exc.kind) from None
        self._enter(cpu, raw, outcome)
        self._emit("fetch", cpu, (raw,), f"call:{outcome.subsystem}" if outcome.is_call else "plain")
        return outcome

    def _fetch_target(self, cpu: Cpu, raw: int, expect_call: bool) -> EntryOutcome:
        if not 0 <= raw < 1 << 64:
            raise ValueError("token must be a 64-bit word")
        ctx = self.context(cpu, Access.EXECUTE, is_fetch=True)
        res = self._resolve(raw, ctx)
        offset = _kernels.unpack_token(raw)[3]
        outcome = entry_point_outcome(res, offset, ctx)
        if expect_call and not (res.restriction.kind.value == "SubsystemIdSet" and offset == 0):
            raise Fault(FaultKind.NOT_ENTRY_POINT)
        bounds_check(res, offset, FETCH_WIDTH, self.cmt_region)
        return outcome

    @staticmethod
    def _enter(cpu: Cpu, raw: int, outcome: EntryOutcome) -> None:
        if outcome.is_call:
            cpu.subsystem[cpu.regime] = outcome.subsystem  # type: ignore[assignment]
        cpu.pc[cpu.regime] = raw

    # -- registers and control state -------------------------------------

    def read_reg(self, ref: Device | str | int, index: int) -> int:
        return self.cpu(ref).regs.read(index)

    def write_reg(self, ref: Device | str | int, index: int, value: int) -> None:
        self.cpu(ref).regs.write(index, value)

    def zero_registers(self, ref: Device | str | int, mask: int) -> None:
        cpu = self.cpu(ref)
        cpu.regs.zero(mask)
        self._emit("zero_regs", cpu, (), f"mask:{mask & ((1 << REGISTER_SLOTS) - 1):#x}")

    def write_mepc(self, ref: Device | str | int, value: int) -> None:
        """Write the active regime's own exception-pc register; saved return state is untouched."""
        cpu = self.cpu(ref)
        cpu.mepc[cpu.regime] = value

    def set_vector_base(self, ref: Device | str | int, addr: int) -> None:
        cpu = self.cpu(ref)
        if cpu.vector_base is not None:
            raise WriteOnce("vector base already set")
        end = addr + 8 * self.config.interrupt_causes
        if addr < 0 or end > self.cmt_region[0]:
            raise MachineError("vector table must lie below the metadata table")
        cpu.vector_base = addr

    def set_nmi(self, ref: Device | str | int, cause: int) -> None:
        self._cause(cause)
        self.cpu(ref).nmi_mask |= 1 << cause

    def set_irq_enable(self, ref: Device | str | int, enabled: bool) -> None:
        cpu = self.cpu(ref)
        cpu.irq_enable[cpu.regime] = bool(enabled)

    def _cause(self, cause: int) -> None:
        if not 0 <= cause < self.config.interrupt_causes:
            raise ValueError(f"interrupt cause {cause} out of range")

    # -- interrupts ------------------------------------------------------

    def raise_interrupt(self, ref: Device | str | int, cause: int) -> str:
        cpu = self.cpu(ref)
        self._live(cpu)
        self._cause(cause)
        if cpu.vector_base is None:
            raise MachineError("vector table not configured")
        nmi = bool(cpu.nmi_mask >> cause & 1)
        if cpu.regime is Regime.NMI:
            taken = False
        elif cpu.regime is Regime.IRQ:
            taken = nmi
        else:
            taken = nmi or cpu.irq_enable[Regime.NORMAL]
        if not taken:
            self._emit("interrupt", cpu, (), f"Masked:{cause}")
            return "Masked"
        raw = int.from_bytes(self.memory.read(cpu.vector_base + 8 * cause, 8), "little")
        if cause == self.config.timer_cause:
            # Timer stub runs in place: no register stacking, no regime change.
            previous = None
        else:
            previous = cpu.regime
            cpu.saved.append((cpu.regime, cpu.pc[cpu.regime]))
            cpu.regime = Regime.NMI if nmi else Regime.IRQ
        try:
            outcome = self._fetch_target(cpu, raw, expect_call=False)
        except Fault as exc:
            if previous is not None:
                cpu.saved.pop()
                cpu.regime = previous
            cpu.halted = True
            self._emit("interrupt", cpu, (raw,), f"VectorFault:{cause}:{exc.kind}")
            raise VectorFault(cause, exc) from None
        if previous is None:
            cpu.mepc[cpu.regime] = cpu.pc[cpu.regime]
        self._enter(cpu, raw, outcome)
        self._emit("interrupt", cpu, (raw,), f"Taken:{cause}")
        return "Taken"

    def mret(self, ref: Device | str | int) -> None:
        cpu = self.cpu(ref)
        self._live(cpu)
        if cpu.regime is Regime.NORMAL or not cpu.saved:
            self._emit("mret", cpu, (), "NotInIrq")
            raise NotInIrq(cpu.name)
        regime, pc = cpu.saved.pop()
        cpu.regime = regime
        cpu.pc[regime] = pc
        self._emit("mret", cpu, (), "ok")

    # -- operations ------------------------------------------------------

    def _on_commit(self, kind: str, touched: tuple, global_taint: bool) -> None:
        if self.ntlb is not None:
            self.ntlb.notify_op_commit(kind, touched, global_taint)

    def submit(self, ref: Device | str | int, req: OpRequest) -> OpResult:
        """Run a request through the port on behalf of a device; errors are raised."""
        dev = self.device(ref)
        self._live(dev)
        principal = self.principal(dev)
        try:
            result = self.port.execute(principal, req)
        except NorthcapeError as exc:
            self._emit(f"op:{req.opcode.label}", dev, _inputs(req), str(exc.kind))
            raise
        if result.error is not None:
            self._emit(f"op:{req.opcode.label}", dev, _inputs(req), result.status)
            raise result.error
        self._emit(f"op:{req.opcode.label}", dev, _inputs(req), _fmt_result(result))
        return result

    def create(self, dev, c_a: int, length: int, perms: Perm, restriction: Restriction = NO_RESTRICTION):
        return self.submit(dev, OpRequest(Opcode.CREATE, c_a, length=length, perms=perms, restriction=restriction)).tokens

    def merge(self, dev, c_a: int, c_b: int, perms: Perm, restriction: Restriction = NO_RESTRICTION) -> int:
        return self.submit(dev, OpRequest(Opcode.MERGE, c_a, c_b, perms=perms, restriction=restriction)).tokens[0]

    def derive(self, dev, c_a: int, length: int, offset: int, perms: Perm, restriction: Restriction = NO_RESTRICTION) -> int:
        req = OpRequest(Opcode.DERIVE, c_a, length=length, offset=offset, perms=perms, restriction=restriction)
        return self.submit(dev, req).tokens[0]

    def clone(self, dev, c_a: int, perms: Perm, restriction: Restriction = NO_RESTRICTION) -> int:
        return self.submit(dev, OpRequest(Opcode.CLONE, c_a, perms=perms, restriction=restriction)).tokens[0]

    def lock(self, dev, c_a: int, perms: Perm, restriction: Restriction = NO_RESTRICTION) -> int:
        return self.submit(dev, OpRequest(Opcode.LOCK, c_a, perms=perms, restriction=restriction)).tokens[0]

    def drop(self, dev, c_a: int) -> bool:
        return bool(self.submit(dev, OpRequest(Opcode.DROP, c_a)).value)

    def revoke(self, dev, c_a: int, perms: Perm, restriction: Restriction = NO_RESTRICTION) -> int:
        return self.submit(dev, OpRequest(Opcode.REVOKE, c_a, perms=perms, restriction=restriction)).tokens[0]

    def inspect(self, dev, c_a: int) -> Inspection:
        return self.submit(dev, OpRequest(Opcode.INSPECT, c_a)).value  # type: ignore[return-value]

    def restrict(
        self,
        dev,
        c_a: int,
        perms: Perm = Perm.ALL,
        restriction: Restriction = NO_RESTRICTION,
        offset_add: int = 0,
        length_sub: int = 0,
    ) -> bool:
        req = OpRequest(
            Opcode.RESTRICT, c_a, perms=perms, restriction=restriction, offset_add=offset_add, length_sub=length_sub
        )
        return bool(self.submit(dev, req).value)

    def read_random(self, ref: Device | str | int) -> int:
        value = self.ops.read_random()
        self._emit("random", self.device(ref), (), "ok")
        return value

    # -- reporting -------------------------------------------------------

    def stats_lines(self) -> list[str]:
        lines = [f"op_{op.label}={self.ops.counts[op]}" for op in Opcode]
        lines += [f"bus_{k}={v}" for k, v in self.access_counts.items()]
        lines += self.table.stats_lines()
        # uncached runs report zeros so scripts can assert the same keys
        lines += (self.ntlb.stats if self.ntlb is not None else CacheStats()).lines()
        lines.append(f"trace_events={self.seq}")
        return lines

    def audit(self) -> list[str]:
        """Structural invariants: disjoint Direct ranges, exact refcounts, cache integrity."""
        problems = []
        ranges = self.table.direct_ranges()
        for (lo_a, hi_a), (lo_b, hi_b) in zip(ranges, ranges[1:]):
            if lo_b < hi_a:
                problems.append(f"direct ranges overlap: [{lo_a:#x},{hi_a:#x}) [{lo_b:#x},{hi_b:#x})")
        children: dict[int, int] = collections.Counter()
        for e in self.table.entries():
            if e.parent is None:
                continue
            _, pnonce, pid, _ = _kernels.unpack_token(e.parent)
            p = self.table.peek(pid) if pid >= 0 else None
            if p is not None and p.nonce == pnonce:
                children[pid] += 1
        for e in self.table.entries():
            if e.refcount != children.get(e.cap_id, 0):
                problems.append(f"id {e.cap_id}: refcount {e.refcount} != {children.get(e.cap_id, 0)} children")
            if e.kind is EntryKind.DIRECT and e.locked_by is not None:
                h = self.table.peek(e.locked_by)
                if h is None or h.kind is not EntryKind.LOCK_HOLDER:
                    problems.append(f"id {e.cap_id}: locked by dead holder {e.locked_by}")
        if self.ntlb is not None:
            problems += self.ntlb.audit()
        return problems


def _inputs(req: OpRequest) -> tuple[int, ...]:
    return (req.c_a, req.c_b) if req.opcode is Opcode.MERGE else (req.c_a,)


def _fmt_result(result: OpResult) -> str:
    if result.tokens:
        return "ok->" + _fmt_tokens(result.tokens)
    if isinstance(result.value, Inspection):
        v = result.value
        where = f"{v.base:#x}+{v.length:#x}" if v.full else "partial"
        return f"ok:{where}:{v.perms.label()}:{v.restriction}"
    if isinstance(result.value, bool):
        return f"ok:{str(result.value).lower()}"
    return "ok"
