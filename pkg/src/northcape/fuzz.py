"""Differential fuzzer: a cached machine against an uncached twin.

Both machines start from the same seed and receive the same event stream.
Nothing in the table or memory depends on the cache, so every trace line must
match; any mismatch is a cache bug. Cache audits run periodically as well.
"""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field

from .cmt import NO_RESTRICTION, Perm, Restriction
from .errors import NorthcapeError
from .machine import Machine, MachineConfig
from .ops import Opcode, OpRequest
from ._kernels import unpack_token
from .token import with_offset

DEFAULT_WEIGHTS = {"ops": 40, "access": 40, "lock_revoke": 10, "interrupt": 10}
POOL_LIMIT = 48
_DESTRUCTIVE = {Opcode.CREATE, Opcode.MERGE, Opcode.DROP, Opcode.REVOKE}
ARENA = 1 << 20
MIN_OPEN = 6
REFILL = 256
AUDIT_EVERY = 1000
TIMER_CAUSE = 7
NMI_CAUSE = 2
CAUSES = (0, 1, NMI_CAUSE, 3, TIMER_CAUSE)


@dataclass
class FuzzReport:
    seed: int
    steps: int
    divergences: int = 0
    audit_failures: int = 0
    outcomes: Counter = field(default_factory=Counter)
    stats: list[str] = field(default_factory=list)
    first_divergence: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.divergences and not self.audit_failures

    def lines(self) -> list[str]:
        out = [
            f"seed={self.seed}",
            f"steps={self.steps}",
            f"divergences={self.divergences}",
            f"audit_failures={self.audit_failures}",
        ]
        out += [f"outcome_{k}={v}" for k, v in sorted(self.outcomes.items())]
        out += self.stats
        out += self.first_divergence
        return out

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines())


def _setup(m: Machine) -> dict:
    """Identical starting world for both twins; returns the handles the fuzzer draws from."""
    cpu0 = m.add_cpu("cpu0")
    m.add_cpu("cpu1")
    m.add_dma("dma0", 0)
    m.add_dma("dma1", 1)
    _, vec = m.create(cpu0, 0, 256, Perm.R | Perm.W)
    _, code = m.create(cpu0, 0, 4096, Perm.R | Perm.X | Perm.I | Perm.CT)
    root_rest, arena = m.create(cpu0, 0, ARENA, Perm.ALL)
    entries = [
        m.derive(cpu0, code, 512, 512 * sid, Perm.R | Perm.X | Perm.I | Perm.CT, Restriction.set(cpu0.port, sid))
        for sid in range(4)
    ]
    m.set_vector_base(cpu0, m.inspect(cpu0, vec).base)
    for i, cause in enumerate(CAUSES):
        handler = entries[1 + i % 3]
        m.mem_write(cpu0, with_offset(vec, 8 * cause), handler.to_bytes(8, "little"))
    m.set_nmi(cpu0, NMI_CAUSE)
    reserve, pool = arena, []
    for size in (4096, 4096, 1024, 1024, 256, 256, 64):
        reserve, piece = m.create(cpu0, reserve, size, Perm.ALL)
        pool.append(piece)
    return {"entries": entries, "pool": pool, "reserve": reserve}


class Fuzzer:
    def __init__(
        self,
        seed: int = 0,
        weights: dict[str, int] | None = None,
        config: MachineConfig | None = None,
        fault_injection: str | None = None,
    ) -> None:
        base = config or MachineConfig(memory_size=1 << 22, cmt_slots=1024, trace_limit=64)
        base.seed = seed
        base.timer_cause = TIMER_CAUSE
        cfg_cached = MachineConfig(**{**base.__dict__, "cache": True, "fault_injection": fault_injection})
        cfg_plain = MachineConfig(**{**base.__dict__, "cache": False, "fault_injection": None})
        self.cached = Machine(cfg_cached)
        self.plain = Machine(cfg_plain)
        self.rng = random.Random(seed)
        self.seed = seed
        self.weights = dict(weights or DEFAULT_WEIGHTS)
        world = _setup(self.cached)
        if _setup(self.plain) != world:
            raise RuntimeError("twin machines diverged during setup")
        self.entries: list[int] = world["entries"]
        self.pool: list[int] = world["pool"]
        # Restrictions only ever tighten, so fresh unrestricted pieces are cut from here.
        self.reserve: int | None = world["reserve"]

    # -- random parameters ---------------------------------------------

    def _token(self) -> int:
        rng = self.rng
        if rng.random() < 0.6:
            tok = rng.choice(self.pool[-12:])
        else:
            tok = rng.choice(self.pool)
        if rng.random() < 0.05:
            # a forged nonce
            tok ^= rng.randrange(1, 1 << 16) << 46
        return tok

    def _perms(self) -> Perm:
        rng = self.rng
        p = Perm.CT | Perm.CD
        for flag, chance in ((Perm.R, 0.85), (Perm.W, 0.7), (Perm.X, 0.15), (Perm.L, 0.5), (Perm.I, 0.4)):
            if rng.random() < chance:
                p |= flag
        if rng.random() < 0.15:
            p &= ~Perm.CT
        return p

    def _restriction(self, dev: str) -> Restriction:
        rng = self.rng
        roll = rng.random()
        if roll < 0.8:
            return NO_RESTRICTION
        if roll < 0.93:
            if rng.random() < 0.75:
                me = self.cached.principal(dev)
                return Restriction.bound(me.device, me.subsystem)
            return Restriction.bound(rng.randrange(4), rng.randrange(4))
        if roll < 0.97:
            return Restriction.device_interpreted(rng.getrandbits(64))
        return Restriction.set(0, rng.randrange(4))

    def _device(self, cpu_only: bool = False) -> str:
        if cpu_only or self.rng.random() < 0.7:
            return "cpu0" if self.rng.random() < 0.85 else "cpu1"
        return self.rng.choice(("dma0", "dma1"))

    def _length(self) -> int:
        return self.rng.choice((1, 4, 8, 16, 32, 64, 100, 256, 512, 1024))

    # -- events ----------------------------------------------------------

    def _event(self):
        rng = self.rng
        total = sum(self.weights.values())
        roll = rng.randrange(total)
        for kind, weight in self.weights.items():
            if roll < weight:
                break
            roll -= weight
        if kind == "ops":
            op = rng.choice((Opcode.CREATE, Opcode.MERGE, Opcode.DERIVE, Opcode.DERIVE, Opcode.CLONE,
                             Opcode.DROP, Opcode.INSPECT, Opcode.RESTRICT))
        elif kind == "lock_revoke":
            op = rng.choice((Opcode.LOCK, Opcode.LOCK, Opcode.REVOKE, Opcode.DROP))
        elif kind == "access":
            roll = rng.random()
            if roll < 0.45:
                return ("read", self._device(), self._access_token(), self._length())
            if roll < 0.85:
                return ("write", self._device(), self._access_token(), rng.randbytes(min(self._length(), 64)))
            if rng.random() < 0.5:
                tok = self.entries[0] if rng.random() < 0.5 else rng.choice(self.entries)
            else:
                tok = self._access_token()
            return ("fetch", self._device(True), tok, rng.random() < 0.3)
        else:
            roll = rng.random()
            if roll < 0.6:
                return ("interrupt", "cpu0", rng.choice(CAUSES + (5,)))
            if roll < 0.9:
                return ("mret", "cpu0")
            return ("set_irq", "cpu0", rng.random() < 0.5)
        dev = self._device()
        req = OpRequest(
            op,
            self._token(),
            self._token(),
            length=self._length(),
            offset=rng.choice((0, 0, 8, 64, 128)),
            restriction=self._restriction(dev),
            perms=self._perms(),
            offset_add=rng.choice((0, 0, 8)),
            length_sub=rng.choice((0, 0, 8)),
        )
        return ("op", dev, req)

    def _access_token(self) -> int:
        tok = self._token()
        if self.rng.random() < 0.3:
            try:
                tok = with_offset(tok, self.rng.choice((8, 60, 200, 1000, 4000)))
            except ValueError:
                pass
        return tok

    @staticmethod
    def _apply(m: Machine, event) -> tuple[str, object]:
        kind, dev = event[0], event[1]
        try:
            if kind == "read":
                return "ok", m.mem_read(dev, event[2], event[3])
            if kind == "write":
                m.mem_write(dev, event[2], event[3])
                return "ok", None
            if kind == "fetch":
                out = m.fetch(dev, event[2], event[3])
                return "ok", out.subsystem
            if kind == "op":
                res = m.submit(dev, event[2])
                return "ok", (res.tokens, res.value)
            if kind == "interrupt":
                return m.raise_interrupt(dev, event[2]), None
            if kind == "mret":
                m.mret(dev)
                return "ok", None
            m.set_irq_enable(dev, event[2])
            return "ok", None
        except (NorthcapeError, ValueError) as exc:
            return str(getattr(exc, "kind", type(exc).__name__)), None

    def step(self) -> tuple[bool, str]:
        event = self._event()
        a = self._apply(self.cached, event)
        b = self._apply(self.plain, event)
        line_a = self.cached.trace[-1] if self.cached.trace else ""
        line_b = self.plain.trace[-1] if self.plain.trace else ""
        if a[0] == "ok" and event[0] == "op":
            for tok in a[1][0]:  # type: ignore[index]
                if tok is not None:
                    self.pool.append(tok)
            if len(self.pool) > POOL_LIMIT:
                del self.pool[self.rng.randrange(len(self.pool) - 12)]
        if event[0] == "op" and event[2].opcode in _DESTRUCTIVE:
            self._prune()
        same = same_a = (a == b and line_a == line_b)
        if self.reserve is not None and self._open_count() < MIN_OPEN:
            same = self._refill() and same_a
        # Halted CPUs would end the run early; the fuzzer restarts them.
        for m in (self.cached, self.plain):
            m.cpu("cpu0").halted = False
        return same, a[0]

    def _open_count(self) -> int:
        table = self.cached.table
        count = 0
        for tok in self.pool:
            _, nonce, cap_id, _ = unpack_token(tok)
            e = table.peek(cap_id) if cap_id >= 0 else None
            if e is not None and e.nonce == nonce and e.restriction == NO_RESTRICTION:
                count += 1
        return count

    def _refill(self) -> bool:
        req = OpRequest(Opcode.CREATE, self.reserve, length=REFILL, perms=Perm.ALL)  # type: ignore[arg-type]
        a = self._apply(self.cached, ("op", "cpu0", req))
        b = self._apply(self.plain, ("op", "cpu0", req))
        if a[0] == "ok":
            rest, piece = a[1][0]  # type: ignore[index]
            self.reserve = rest
            self.pool.append(piece)
        elif a[0] not in ("Locked", "LockedInput", "IrqInaccessible", "PortLocked"):
            self.reserve = None
        return a == b and self.cached.trace[-1] == self.plain.trace[-1]

    def _prune(self) -> None:
        # Dead tokens mostly produce InvalidToken; keep a few for coverage.
        table = self.cached.table
        alive = []
        for tok in self.pool:
            _, nonce, cap_id, _ = unpack_token(tok)
            entry = table.peek(cap_id) if cap_id >= 0 else None
            if (entry is not None and entry.nonce == nonce) or self.rng.random() < 0.05:
                alive.append(tok)
        self.pool = alive or [self.entries[0]]

    def run(self, steps: int) -> FuzzReport:
        report = FuzzReport(self.seed, steps)
        for i in range(steps):
            same, outcome = self.step()
            report.outcomes[outcome] += 1
            if not same:
                report.divergences += 1
                if not report.first_divergence:
                    report.first_divergence = self._dump(i)
            if (i + 1) % AUDIT_EVERY == 0 and self.cached.ntlb is not None:
                problems = self.cached.ntlb.audit()
                report.audit_failures += len(problems)
        report.stats = [line for line in self.cached.stats_lines() if not line.startswith("trace_")]
        return report

    def _dump(self, step: int) -> list[str]:
        out = [f"divergence_step={step}", "cached_trace:"]
        out += [f"  {line}" for line in self.cached.trace]
        out.append("oracle_trace:")
        out += [f"  {line}" for line in self.plain.trace]
        return out


def fuzz(seed: int = 0, steps: int = 10_000, fault_injection: str | None = None,
         config: MachineConfig | None = None, weights: dict[str, int] | None = None) -> FuzzReport:
    return Fuzzer(seed, weights, config, fault_injection).run(steps)
