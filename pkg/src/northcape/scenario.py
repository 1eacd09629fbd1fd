"""JSON scenario scripts: declarative event lists driven against one machine.

A script has ``config``, ``devices``, optional ``images``/``boot`` and a list
of ``steps``. Each step names an action in ``"do"``. Errors raised by a step
do not stop the script; they become the step's outcome, which later
``assert`` steps can check.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .allocator import Heap
from .cmt import NO_RESTRICTION, Perm, Restriction
from .errors import NorthcapeError
from .loader import SubsystemImage, SystemHandle, boot, trapdoor
from .machine import Cpu, Machine, MachineConfig
from .ops import Inspection
from .token import parse_token, with_offset


class ParseError(Exception):
    """The script is malformed or refers to something it never declared."""


class AssertFailed(Exception):
    def __init__(self, step: int, message: str) -> None:
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class Outcome:
    status: str = "ok"
    data: bytes | None = None
    value: Any = None


@dataclass
class RunResult:
    exit_code: int
    machine: Machine | None
    system: SystemHandle | None = None
    failures: list[str] = field(default_factory=list)
    stats: list[str] = field(default_factory=list)

    @property
    def trace(self) -> str:
        return self.machine.trace_text() if self.machine else ""


_REF = re.compile(r"^([A-Za-z_][\w.:\-]*)(?:\+(0x[0-9a-fA-F]+|\d+))?$")

CONFIG_KEYS = {
    "memory_size", "cmt_slots", "cmt_row_width", "l1_instr", "l1_data", "l2_size", "l2_assoc", "seed",
    "cache", "interrupt_causes", "timer_cause", "fault_injection",
}


def _int(v: Any) -> int:
    if isinstance(v, bool):
        raise ParseError(f"expected a number, got {v!r}")
    if isinstance(v, int):
        return v
    if isinstance(v, str):
        try:
            return int(v, 0)
        except ValueError:
            pass
    raise ParseError(f"expected a number, got {v!r}")


class ScenarioRunner:
    def __init__(self, script: dict[str, Any], base_dir: Path | None = None, overrides: dict[str, Any] | None = None,
                 spin_limit: int | None = None) -> None:
        if not isinstance(script, dict) or not isinstance(script.get("steps", []), list):
            raise ParseError("a scenario is an object with a list of steps")
        self.script = script
        self.base_dir = base_dir
        cfg = dict(script.get("config", {}))
        unknown = set(cfg) - CONFIG_KEYS
        if unknown:
            raise ParseError(f"unknown config keys: {sorted(unknown)}")
        cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
        try:
            self.machine = Machine(MachineConfig(**cfg))
        except (TypeError, ValueError) as exc:
            raise ParseError(str(exc)) from None
        self.spin_limit = spin_limit
        for d in script.get("devices", [{"name": "cpu0", "kind": "cpu"}]):
            kind = d.get("kind", "cpu")
            if kind == "cpu":
                self.machine.add_cpu(d.get("name"))
            elif kind == "dma":
                self.machine.add_dma(d.get("name"), _int(d.get("subsystem", 0)))
            else:
                raise ParseError(f"unknown device kind {kind!r}")
        if not self.machine.devices:
            raise ParseError("scenario declares no devices")
        self.tokens: dict[str, int] = {"root": 0}
        self.system: SystemHandle | None = None
        self.heap: Heap | None = None
        self.last = Outcome()

    # -- references ------------------------------------------------------

    def token(self, ref: Any) -> int:
        if isinstance(ref, int) and not isinstance(ref, bool):
            return ref
        if not isinstance(ref, str):
            raise ParseError(f"bad token reference {ref!r}")
        if ref.lower().startswith("0x"):
            try:
                return parse_token(ref)
            except ValueError as exc:
                raise ParseError(str(exc)) from None
        m = _REF.match(ref)
        if not m or m.group(1) not in self.tokens:
            raise ParseError(f"unknown token {ref!r}")
        tok = self.tokens[m.group(1)]
        return with_offset(tok, int(m.group(2), 0)) if m.group(2) else tok

    def device(self, step: dict[str, Any]):
        name = step.get("dev")
        if name is None:
            return self.machine.devices[0]
        try:
            return self.machine.device(name)
        except (KeyError, IndexError):
            raise ParseError(f"unknown device {name!r}") from None

    def restriction(self, spec: Any) -> Restriction:
        if spec is None or spec == "None":
            return NO_RESTRICTION
        if not isinstance(spec, dict):
            raise ParseError(f"bad restriction {spec!r}")
        kind = spec.get("kind", "").lower()
        if kind == "device":
            return Restriction.device_interpreted(_int(spec.get("payload", 0)))
        if kind not in ("bound", "set"):
            raise ParseError(f"bad restriction kind {kind!r}")
        dev = spec.get("device", 0)
        port = dev if isinstance(dev, int) else self.machine.device(dev).port
        sid = _int(spec.get("subsystem", 0))
        return Restriction.bound(port, sid) if kind == "bound" else Restriction.set(port, sid)

    def bind(self, names: Any, values: tuple) -> None:
        if names is None:
            return
        if isinstance(names, str):
            names = [names]
        for name, value in zip(names, values):
            if name and value is not None:
                self.tokens[name] = value

    # -- execution -------------------------------------------------------

    def run(self) -> RunResult:
        failures = []
        for index, step in enumerate(self.script.get("steps", [])):
            if not isinstance(step, dict) or "do" not in step:
                raise ParseError(f"step {index}: missing 'do'")
            action = step["do"]
            if action == "assert":
                try:
                    self.check(index, step)
                except AssertFailed as exc:
                    failures.append(str(exc))
                    return self._result(1, failures)
                continue
            handler = getattr(self, f"do_{action}", None)
            if handler is None:
                raise ParseError(f"step {index}: unknown action {action!r}")
            try:
                self.last = handler(step) or Outcome()
            except (NorthcapeError, ValueError) as exc:
                self.last = Outcome(str(getattr(exc, "kind", type(exc).__name__)))
            if "expect" in step and self.last.status != step["expect"]:
                failures.append(f"step {index}: expected {step['expect']}, got {self.last.status}")
                return self._result(1, failures)
        return self._result(0, failures)

    def _result(self, code: int, failures: list[str]) -> RunResult:
        return RunResult(code, self.machine, self.system, failures, self.stats_lines())

    def do_read(self, step: dict[str, Any]) -> Outcome:
        data = self.machine.mem_read(self.device(step), self.token(step["token"]), _int(step.get("length", 8)))
        if len(data) == 8:
            self.bind(step.get("as"), (int.from_bytes(data, "little"),))
        return Outcome("ok", data)

    def do_write(self, step: dict[str, Any]) -> Outcome:
        if "value" in step:
            data = self.token(step["value"]).to_bytes(8, "little")
        else:
            data = bytes.fromhex(step.get("data", ""))
        self.machine.mem_write(self.device(step), self.token(step["token"]), data)
        return Outcome()

    def do_fetch(self, step: dict[str, Any]) -> Outcome:
        out = self.machine.fetch(self.device(step), self.token(step["token"]), bool(step.get("expect_call", False)))
        return Outcome("ok", value=out.subsystem if out.is_call else None)

    def do_op(self, step: dict[str, Any]) -> Outcome:
        m, dev = self.machine, self.device(step)
        name = step.get("op", "")
        perms = Perm.parse(step.get("perms", "ALL"))
        r = self.restriction(step.get("restriction"))
        c_a = self.token(step["c_a"]) if "c_a" in step else 0
        if name == "create":
            out = m.create(dev, c_a, _int(step["length"]), perms, r)
        elif name == "merge":
            out = (m.merge(dev, c_a, self.token(step["c_b"]), perms, r),)
        elif name == "derive":
            out = (m.derive(dev, c_a, _int(step["length"]), _int(step.get("offset", 0)), perms, r),)
        elif name == "clone":
            out = (m.clone(dev, c_a, perms, r),)
        elif name == "lock":
            out = (m.lock(dev, c_a, perms, r),)
        elif name == "revoke":
            out = (m.revoke(dev, c_a, perms, r),)
        elif name == "drop":
            return Outcome("ok", value=m.drop(dev, c_a))
        elif name == "inspect":
            return Outcome("ok", value=m.inspect(dev, c_a))
        elif name == "restrict":
            changed = m.restrict(dev, c_a, perms, r, _int(step.get("offset_add", 0)), _int(step.get("length_sub", 0)))
            return Outcome("ok", value=changed)
        else:
            raise ParseError(f"unknown op {name!r}")
        self.bind(step.get("as"), tuple(out))
        return Outcome("ok", value=tuple(out))

    def do_interrupt(self, step: dict[str, Any]) -> Outcome:
        return Outcome(self.machine.raise_interrupt(self.device(step), _int(step["cause"])))

    def do_mret(self, step: dict[str, Any]) -> None:
        self.machine.mret(self.device(step))

    def do_zero_regs(self, step: dict[str, Any]) -> None:
        self.machine.zero_registers(self.device(step), _int(step["mask"]))

    def do_reg(self, step: dict[str, Any]) -> Outcome:
        dev, index = self.device(step), _int(step["index"])
        if "value" in step:
            self.machine.write_reg(dev, index, _int(step["value"]))
            return Outcome()
        return Outcome("ok", value=self.machine.read_reg(dev, index))

    def do_set_irq(self, step: dict[str, Any]) -> None:
        self.machine.set_irq_enable(self.device(step), bool(step.get("enabled", True)))

    def do_set_nmi(self, step: dict[str, Any]) -> None:
        self.machine.set_nmi(self.device(step), _int(step["cause"]))

    def do_set_vector_base(self, step: dict[str, Any]) -> None:
        self.machine.set_vector_base(self.device(step), _int(step["addr"]))

    def do_boot(self, step: dict[str, Any]) -> None:
        try:
            images = [SubsystemImage.from_dict(raw, self.base_dir) for raw in self.script.get("images", [])]
        except NorthcapeError as exc:
            raise ParseError(str(exc)) from None
        opts = dict(self.script.get("boot", {}))
        opts.update({k: v for k, v in step.items() if k in ("heap_size", "stack_frames", "stack_size", "regset_size")})
        dev = self.device(step)
        if not isinstance(dev, Cpu):
            raise ParseError("boot runs on a CPU")
        self.system = boot(self.machine, images, dev, spin_limit=self.spin_limit, **opts)
        self.heap = self.system.heap
        self.tokens.update(self.system.symbols)

    def do_trapdoor(self, step: dict[str, Any]) -> None:
        if self.system is None:
            raise ParseError("trapdoor before boot")
        then = self.token(step["then_call"]) if "then_call" in step else None
        trapdoor(self.system, then)

    def _heap(self) -> Heap:
        if self.heap is None:
            raise ParseError("allocator steps need a booted system")
        return self.heap

    def do_malloc(self, step: dict[str, Any]) -> Outcome:
        heap = self._heap()
        r = self.restriction(step["restriction"]) if "restriction" in step else None
        handle = heap.malloc(_int(step["size"]), bool(step.get("lockable")), bool(step.get("zeroed")), r)
        name = step.get("as")
        if name:
            self.tokens[name] = handle
            self.tokens[f"{name}.payload"] = heap.allocated[handle].payload.token
        self.machine.note("malloc", f"ok:{_int(step['size'])}")
        return Outcome("ok", value=handle)

    def do_free(self, step: dict[str, Any]) -> None:
        self._heap().free(self.token(step["token"]))
        self.machine.note("free")

    def do_reclaim(self, step: dict[str, Any]) -> None:
        self._heap().reclaim(self.token(step["token"]))
        self.machine.note("reclaim")

    # -- assertions ------------------------------------------------------

    def check(self, index: int, step: dict[str, Any]) -> None:
        last = self.last
        if "outcome" in step and last.status != step["outcome"]:
            raise AssertFailed(index, f"outcome {last.status}, expected {step['outcome']}")
        if "data" in step:
            got = last.data.hex() if last.data is not None else None
            if got != step["data"].lower():
                raise AssertFailed(index, f"data {got}, expected {step['data']}")
        if "value" in step:
            want = step["value"]
            got = last.value
            if isinstance(got, Inspection):
                got = {"base": got.base, "length": got.length, "perms": got.perms.label(), "restriction": str(got.restriction)}
                want = {k: (_int(v) if k in ("base", "length") and v is not None else v) for k, v in want.items()}
                got = {k: got[k] for k in want}
            elif isinstance(got, int) and not isinstance(got, bool) and not isinstance(want, bool):
                want = _int(want)
            if got != want:
                raise AssertFailed(index, f"value {got!r}, expected {want!r}")
        if "stat" in step:
            stats = dict(line.split("=", 1) for line in self.stats_lines())
            if step["stat"] not in stats:
                raise ParseError(f"step {index}: unknown stat {step['stat']!r}")
            got_n = int(stats[step["stat"]])
            if "equals" in step and got_n != _int(step["equals"]):
                raise AssertFailed(index, f"{step['stat']}={got_n}, expected {step['equals']}")
            if "at_least" in step and got_n < _int(step["at_least"]):
                raise AssertFailed(index, f"{step['stat']}={got_n}, expected at least {step['at_least']}")
        if "memory" in step:
            spec = step["memory"]
            got = self.machine.memory.read(_int(spec["addr"]), _int(spec["length"])).hex()
            if got != spec["equals"].lower():
                raise AssertFailed(index, f"memory {got}, expected {spec['equals']}")
        if "subsystem" in step:
            cpu = self.machine.cpu(step.get("dev", 0))
            if cpu.active_subsystem != _int(step["subsystem"]):
                raise AssertFailed(index, f"subsystem {cpu.active_subsystem}, expected {step['subsystem']}")
        if "regime" in step:
            cpu = self.machine.cpu(step.get("dev", 0))
            if str(cpu.regime) != step["regime"]:
                raise AssertFailed(index, f"regime {cpu.regime}, expected {step['regime']}")
        if "invariants" in step:
            problems = self.machine.audit() + (self.heap.check() if self.heap else [])
            if problems:
                raise AssertFailed(index, "; ".join(problems))

    def stats_lines(self) -> list[str]:
        lines = self.machine.stats_lines()
        if self.heap is not None:
            lines += self.heap.stats_lines()
        return lines


def load_script(path: str | Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(str(exc)) from None


def run_scenario(path: str | Path, **overrides: Any) -> RunResult:
    spin = overrides.pop("spin_limit", None)
    runner = ScenarioRunner(load_script(path), Path(path).parent, overrides, spin)
    return runner.run()
