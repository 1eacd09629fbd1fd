import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from northcape.cmt import Perm, Restriction
from northcape.errors import BusError, FaultKind
from northcape.machine import Halted, NotInIrq, VectorFault, WriteOnce
from northcape.resolver import Regime
from northcape.token import with_offset

from .conftest import carve, small_machine

RW = Perm.R | Perm.W
VECTORS = 0x8000
DEVICE, NMI, SPARE, TIMER = 3, 2, 4, 7
HANDLER_SUB, NMI_SUB, STUB_SUB = 5, 6, 9


def install_vector(m, cause: int, token: int) -> None:
    # carving moves the root's base up, so address the slot relative to it
    slot = VECTORS + 8 * cause - m.inspect("cpu0", 0).base
    m.mem_write("cpu0", with_offset(0, slot), token.to_bytes(8, "little"))


@pytest.fixture
def irq():
    m = small_machine()
    cpu = m.add_cpu("cpu0")
    m.add_dma("dma0", 0)
    code = carve(m, 0x1000, Perm.R | Perm.X | Perm.I)
    handlers = {}
    for cause, sub, off in ((DEVICE, HANDLER_SUB, 0), (NMI, NMI_SUB, 0x100), (TIMER, STUB_SUB, 0x200)):
        handlers[cause] = m.derive("cpu0", code, 0x100, off, Perm.R | Perm.X | Perm.I, Restriction.set(0, sub))
        install_vector(m, cause, handlers[cause])
    m.set_vector_base("cpu0", VECTORS)
    m.set_nmi("cpu0", NMI)
    m.set_irq_enable("cpu0", True)
    return m, cpu, handlers


class TestBus:
    def test_dma_byte_granular(self, machine):
        m = machine
        dma = m.add_dma("dma1", 2)
        d = carve(m, 256)
        buf = m.derive("cpu0", d, 64, 64, RW, Restriction.bound(dma.port, 2))
        m.mem_write("dma1", buf, b"\x5a" * 64)
        shadow = m.mem_read("cpu0", d, 256)
        with pytest.raises(BusError) as info:
            m.mem_write("dma1", buf, b"\xff" * 65)
        assert info.value.kind is FaultKind.OUT_OF_BOUNDS
        assert m.mem_read("cpu0", d, 256) == shadow
        assert shadow[64:128] == b"\x5a" * 64

    def test_dma_cannot_use_cpu_bound_cap(self, machine):
        m = machine
        buf = m.derive("cpu0", carve(m, 64), 64, 0, RW, Restriction.bound(0, 0))
        with pytest.raises(BusError) as info:
            m.mem_read("dma0", buf, 1)
        assert info.value.kind is FaultKind.RESTRICTION_VIOLATION

    def test_irq_needs_i_permission(self, irq):
        m, cpu, _ = irq
        plain = carve(m, 64, RW)
        marked = carve(m, 64, RW | Perm.I)
        m.raise_interrupt("cpu0", DEVICE)
        cpu.subsystem[Regime.IRQ] = 0
        with pytest.raises(BusError) as info:
            m.mem_read("cpu0", plain, 8)
        assert info.value.kind is FaultKind.IRQ_INACCESSIBLE
        assert m.mem_read("cpu0", marked, 8) == bytes(8)

    def test_root_without_permissions(self, machine):
        machine.restrict("cpu0", 0, Perm.NONE)
        with pytest.raises(BusError) as info:
            machine.mem_read("cpu0", 0x100, 1)
        assert info.value.kind is FaultKind.PERMISSION_DENIED

    def test_fault_leaves_trace_line(self, machine):
        with pytest.raises(BusError):
            machine.mem_read("cpu0", 0x1234 << 46, 1)
        assert machine.trace[-1].endswith("InvalidToken")
        assert " read cpu0/Normal:0 " in machine.trace[-1]

    def test_sparse_memory(self, machine):
        machine.mem_write("cpu0", 0x10, b"\0" * 8)
        machine.mem_write("cpu0", 0x3000, b"\1")
        assert machine.memory.nonzero_pages() == 1


class TestFetch:
    @pytest.fixture
    def gate(self, machine):
        code = carve(machine, 0x100, Perm.R | Perm.X)
        return machine, machine.derive("cpu0", code, 0x80, 0, Perm.R | Perm.X, Restriction.set(0, 4))

    def test_call_switches_subsystem(self, gate):
        m, tok = gate
        cpu = m.cpu("cpu0")
        cpu.subsystem[Regime.NORMAL] = 1
        out = m.fetch("cpu0", tok)
        assert m.trace[-1].endswith("call:4")
        assert out.is_call and cpu.active_subsystem == 4
        assert m.mem_read("cpu0", with_offset(tok, 0x10), 4) == bytes(4)

    def test_mid_segment_entry_refused(self, gate):
        m, tok = gate
        cpu = m.cpu("cpu0")
        cpu.subsystem[Regime.NORMAL] = 1
        with pytest.raises(BusError) as info:
            m.fetch("cpu0", with_offset(tok, 8))
        assert info.value.kind is FaultKind.NOT_ENTRY_POINT
        assert cpu.active_subsystem == 1

    def test_call_instruction_needs_entry(self, machine):
        plain = carve(machine, 0x40, Perm.X)
        with pytest.raises(BusError) as info:
            machine.fetch("cpu0", plain, expect_call=True)
        assert info.value.kind is FaultKind.NOT_ENTRY_POINT
        assert machine.fetch("cpu0", plain).is_call is False

    def test_fetch_needs_x(self, machine):
        with pytest.raises(BusError) as info:
            machine.fetch("cpu0", carve(machine, 0x40, RW))
        assert info.value.kind is FaultKind.PERMISSION_DENIED

    def test_dma_cannot_fetch(self, machine):
        with pytest.raises(Exception):
            machine.fetch("dma0", carve(machine, 0x40, Perm.X))


class TestInterrupts:
    def test_nmi_taken_with_interrupts_disabled(self, irq):
        m, cpu, _ = irq
        m.set_irq_enable("cpu0", False)
        assert m.raise_interrupt("cpu0", DEVICE) == "Masked"
        assert m.raise_interrupt("cpu0", NMI) == "Taken"
        assert cpu.regime is Regime.NMI and cpu.active_subsystem == NMI_SUB

    def test_nmi_during_nmi_masked(self, irq):
        m, cpu, _ = irq
        m.raise_interrupt("cpu0", NMI)
        assert m.raise_interrupt("cpu0", NMI) == "Masked"

    def test_nested_irq_only_accepts_nmi(self, irq):
        m, cpu, _ = irq
        m.raise_interrupt("cpu0", DEVICE)
        assert cpu.regime is Regime.IRQ
        assert m.raise_interrupt("cpu0", DEVICE) == "Masked"
        assert m.raise_interrupt("cpu0", NMI) == "Taken"
        m.mret("cpu0")
        assert cpu.regime is Regime.IRQ
        m.mret("cpu0")
        assert cpu.regime is Regime.NORMAL

    def test_timer_stays_in_normal_regime(self, irq):
        m, cpu, handlers = irq
        cpu.subsystem[Regime.NORMAL] = 1
        m.write_reg("cpu0", 5, 0x55)
        assert m.raise_interrupt("cpu0", TIMER) == "Taken"
        assert cpu.regime is Regime.NORMAL
        assert cpu.active_subsystem == STUB_SUB
        assert m.read_reg("cpu0", 5) == 0x55
        assert cpu.saved == []

    def test_device_irq_switches_subsystem_and_returns(self, irq):
        m, cpu, _ = irq
        cpu.subsystem[Regime.NORMAL] = 1
        m.raise_interrupt("cpu0", DEVICE)
        assert (cpu.regime, cpu.active_subsystem) == (Regime.IRQ, HANDLER_SUB)
        m.mret("cpu0")
        assert (cpu.regime, cpu.active_subsystem) == (Regime.NORMAL, 1)

    def test_register_stacking(self, irq):
        m, cpu, _ = irq
        m.write_reg("cpu0", 5, 111)
        m.raise_interrupt("cpu0", DEVICE)
        assert m.read_reg("cpu0", 5) == 0
        m.write_reg("cpu0", 5, 999)
        m.mret("cpu0")
        assert m.read_reg("cpu0", 5) == 111

    def test_isr_cannot_move_return_address(self, irq):
        m, cpu, handlers = irq
        code = carve(m, 0x40, Perm.X)
        m.fetch("cpu0", code)
        m.raise_interrupt("cpu0", DEVICE)
        m.write_mepc("cpu0", 0xDEAD)
        assert cpu.mepc[Regime.NORMAL] != 0xDEAD
        m.mret("cpu0")
        assert cpu.pc[Regime.NORMAL] == code

    def test_mret_outside_irq(self, irq):
        m, _, _ = irq
        with pytest.raises(NotInIrq):
            m.mret("cpu0")

    def test_vector_fault_halts(self, irq):
        m, cpu, _ = irq
        install_vector(m, SPARE, 0x0BAD << 46)
        with pytest.raises(VectorFault) as info:
            m.raise_interrupt("cpu0", SPARE)
        assert info.value.fault.kind is FaultKind.INVALID_TOKEN
        assert cpu.halted and cpu.regime is Regime.NORMAL
        assert m.trace[-1].endswith(f"VectorFault:{SPARE}:InvalidToken")
        with pytest.raises(Halted):
            m.raise_interrupt("cpu0", DEVICE)
        with pytest.raises(Halted):
            m.mem_read("cpu0", 0, 1)

    def test_vector_base_write_once(self, irq):
        m, _, _ = irq
        with pytest.raises(WriteOnce):
            m.set_vector_base("cpu0", 0)

    def test_vector_table_below_metadata(self, machine):
        from northcape.machine import MachineError

        with pytest.raises(MachineError):
            machine.set_vector_base("cpu0", machine.cmt_region[0] - 8)

    def test_nmi_bits_only_set(self, irq):
        m, cpu, _ = irq
        m.set_nmi("cpu0", NMI)
        m.set_nmi("cpu0", DEVICE)
        assert cpu.nmi_mask == (1 << NMI) | (1 << DEVICE)

    def test_handler_without_i_faults(self, irq):
        m, cpu, _ = irq
        code = carve(m, 0x100, Perm.R | Perm.X)
        install_vector(m, SPARE, m.derive("cpu0", code, 0x40, 0, Perm.R | Perm.X, Restriction.set(0, 8)))
        with pytest.raises(VectorFault) as info:
            m.raise_interrupt("cpu0", SPARE)
        assert info.value.fault.kind is FaultKind.IRQ_INACCESSIBLE


class TestRegisters:
    def test_zero_all(self, machine):
        machine.write_reg("cpu0", 10, 42)
        machine.zero_registers("cpu0", (1 << 64) - 1)
        assert machine.read_reg("cpu0", 10) == 0

    def test_write_after_zero(self, machine):
        machine.zero_registers("cpu0", 1 << 10)
        machine.write_reg("cpu0", 10, 7)
        assert machine.read_reg("cpu0", 10) == 7

    def test_masks_per_regime(self, irq):
        m, cpu, _ = irq
        m.write_reg("cpu0", 3, 33)
        m.raise_interrupt("cpu0", DEVICE)
        m.write_reg("cpu0", 3, 44)
        m.zero_registers("cpu0", 1 << 3)
        assert m.read_reg("cpu0", 3) == 0
        m.mret("cpu0")
        assert cpu.regs.uninit_mask == 0
        assert m.read_reg("cpu0", 3) == 33

    def test_only_masked_slots_cleared(self, machine):
        for i in range(64):
            machine.write_reg("cpu0", i, i + 1)
        machine.zero_registers("cpu0", 0b1010)
        assert [machine.read_reg("cpu0", i) for i in range(5)] == [1, 0, 3, 0, 5]


# -- properties ------------------------------------------------------------

events = st.lists(
    st.tuples(st.sampled_from(["irq", "nmi", "timer", "mret", "enable", "disable", "write"]), st.integers(0, 63)),
    max_size=40,
)


@settings(max_examples=100, deadline=None)
@given(events)
def test_availability_and_isolation(script):
    m = small_machine()
    cpu = m.add_cpu("cpu0")
    code = carve(m, 0x1000, Perm.R | Perm.X | Perm.I)
    for cause, sub in ((DEVICE, 5), (NMI, 6), (TIMER, 9)):
        install_vector(m, cause, m.derive("cpu0", code, 0x100, 0x100 * cause, Perm.R | Perm.X | Perm.I, Restriction.set(0, sub)))
    m.set_vector_base("cpu0", VECTORS)
    m.set_nmi("cpu0", NMI)
    shadow = {r: [0] * 64 for r in Regime}
    for kind, n in script:
        if kind == "nmi":
            expected = "Masked" if cpu.regime is Regime.NMI else "Taken"
            assert m.raise_interrupt("cpu0", NMI) == expected
        elif kind == "irq":
            m.raise_interrupt("cpu0", DEVICE)
        elif kind == "timer":
            regime = cpu.regime
            m.raise_interrupt("cpu0", TIMER)
            assert cpu.regime is regime
        elif kind == "mret":
            try:
                m.mret("cpu0")
            except NotInIrq:
                assert cpu.regime is Regime.NORMAL
        elif kind in ("enable", "disable"):
            m.set_irq_enable("cpu0", kind == "enable")
        else:
            m.write_reg("cpu0", n, n * 1000 + len(cpu.saved))
            shadow[cpu.regime][n] = n * 1000 + len(cpu.saved)
        for r in Regime:
            assert cpu.registers[r].values == shadow[r]


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 3), st.integers(1, 64), st.integers(0, 192)), min_size=1, max_size=6),
    st.lists(st.tuples(st.integers(0, 9), st.integers(0, 80), st.integers(1, 80)), max_size=30),
)
def test_dma_writes_stay_in_delegated_windows(grants, writes):
    m = small_machine()
    m.add_cpu("cpu0")
    dma = m.add_dma("dma1", 1)
    regions = [carve(m, 256) for _ in range(4)]
    delegated = []
    allowed = set()
    for which, length, offset in grants:
        if offset + length > 256:
            continue
        tok = m.derive("cpu0", regions[which], length, offset, RW, Restriction.bound(dma.port, 1))
        delegated.append(tok)
        base = m.inspect("cpu0", regions[which]).base + offset
        allowed.update(range(base, base + length))
    # a capability that is not delegated: bound to the CPU
    delegated.append(m.derive("cpu0", regions[0], 16, 0, RW, Restriction.bound(0, 0)))
    delegated.append(m.derive("cpu0", regions[1], 16, 0, RW, Restriction.bound(dma.port, 2)))
    before = m.memory.read(0, 1024)
    for pick, offset, length in writes:
        tok = delegated[pick % len(delegated)]
        try:
            m.mem_write("dma1", with_offset(tok, min(offset, 255)), b"\xee" * length)
        except BusError:
            pass
    after = m.memory.read(0, 1024)
    changed = {i for i in range(1024) if before[i] != after[i]}
    assert changed <= allowed
