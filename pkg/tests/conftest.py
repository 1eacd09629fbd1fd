import pytest

from northcape.cmt import Perm
from northcape.machine import Machine, MachineConfig

SMALL = dict(memory_size=1 << 20, cmt_slots=256, seed=3)


def small_machine(**overrides) -> Machine:
    cfg = {**SMALL, **overrides}
    return Machine(MachineConfig(**cfg))


@pytest.fixture
def machine() -> Machine:
    m = small_machine()
    m.add_cpu("cpu0")
    m.add_dma("dma0", 0)
    return m


@pytest.fixture
def plain_machine() -> Machine:
    m = small_machine(cache=False)
    m.add_cpu("cpu0")
    m.add_dma("dma0", 0)
    return m


def carve(m: Machine, length: int, perms: Perm = Perm.ALL, dev: str = "cpu0") -> int:
    """A fresh Direct of ``length`` bytes cut from the root."""
    _, tok = m.create(dev, 0, length, perms)
    return tok


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
