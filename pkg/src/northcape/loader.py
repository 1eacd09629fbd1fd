"""Boot-time loader: the only phase that runs with subsystem-0 authority.

It relocates subsystem images into capabilities, resolves imports into
tokens written at fixup slots, mints entry points and stack pools, runs each
image's init once, and finally destroys its own authority with the trapdoor.
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from . import _kernels
from .allocator import Heap
from .cmt import NO_RESTRICTION, Perm, Restriction
from .errors import NorthcapeError, OpError, OpErrorKind
from .machine import Cpu, Machine
from .token import format_token, with_offset

LOADER_REGION = 4096
ALIGN = 64
DEFAULT_HEAP = 1 << 20
HEAP_PERMS = Perm.R | Perm.W | Perm.L | Perm.I | Perm.CD | Perm.CT
MMIO_NAME = re.compile(r"mmio_(?:(\d+)_)?(\d+)_(\d+)$")
TIMER_SLOT = "timer_slot"
SEGMENT_KINDS = ("text", "data", "rodata", "bss")


class LoaderError(NorthcapeError):
    kind = "LoaderError"


class ImportUnresolved(LoaderError):
    kind = "ImportUnresolved"


class ImportCycle(LoaderError):
    kind = "ImportCycle"


class BadImage(LoaderError):
    kind = "BadImage"


class OutOfMemory(LoaderError):
    kind = "OutOfMemory"


class PoolExhausted(LoaderError):
    kind = "PoolExhausted"


class DoubleRelease(LoaderError):
    kind = "DoubleRelease"


class NotAtSubsystemZero(LoaderError):
    kind = "NotAtSubsystemZero"


def _align(n: int) -> int:
    return -(-max(n, 1) // ALIGN) * ALIGN


# -- image manifest ------------------------------------------------------


@dataclass
class Segment:
    name: str
    kind: str
    size: int
    perms: Perm
    data: bytes = b""


@dataclass
class Export:
    symbol: str
    segment: str
    offset: int = 0
    kind: str = "call"
    length: int | None = None


@dataclass
class Fixup:
    segment: str
    offset: int
    symbol: str


@dataclass
class SubsystemImage:
    name: str
    segments: list[Segment]
    exports: list[Export] = field(default_factory=list)
    imports: list[str] = field(default_factory=list)
    fixups: list[Fixup] = field(default_factory=list)
    init_priority: int = 0
    irq: bool = False
    vectors: dict[int, str] = field(default_factory=dict)
    nmi: list[int] = field(default_factory=list)
    init: bool = True

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: Path | None = None) -> "SubsystemImage":
        try:
            segments = []
            for s in raw["segments"]:
                if "file" in s:
                    data = ((base_dir or Path.cwd()) / s["file"]).read_bytes()
                else:
                    data = bytes.fromhex(s.get("data", ""))
                size = int(s.get("size", len(data)))
                perms = Perm.parse(s.get("perms", _default_perms(s.get("kind", "data"))))
                segments.append(Segment(s["name"], s.get("kind", "data"), size, perms, data))
            image = cls(
                name=raw["name"],
                segments=segments,
                exports=[Export(**e) for e in raw.get("exports", [])],
                imports=list(raw.get("imports", [])),
                fixups=[Fixup(**f) for f in raw.get("fixups", [])],
                init_priority=int(raw.get("init_priority", 0)),
                irq=bool(raw.get("irq", False)),
                vectors={int(k): v for k, v in raw.get("vectors", {}).items()},
                nmi=[int(c) for c in raw.get("nmi", [])],
                init=bool(raw.get("init", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BadImage(f"{raw.get('name', '?')}: {exc}") from None
        image.validate()
        return image

    def segment(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise BadImage(f"{self.name}: no segment {name!r}")

    def validate(self) -> None:
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise BadImage(f"{self.name}: duplicate segment names")
        for s in self.segments:
            if s.kind not in SEGMENT_KINDS:
                raise BadImage(f"{self.name}.{s.name}: unknown kind {s.kind!r}")
            if s.size < 1 or len(s.data) > s.size:
                raise BadImage(f"{self.name}.{s.name}: initial bytes exceed size")
        for e in self.exports:
            seg = self.segment(e.segment)
            if e.kind not in ("call", "data"):
                raise BadImage(f"{self.name}: export {e.symbol} has kind {e.kind!r}")
            if e.kind == "call" and not seg.perms & Perm.X:
                raise BadImage(f"{self.name}: call export {e.symbol} in non-executable segment")
            length = e.length if e.kind == "data" else seg.size - e.offset
            if e.kind == "data" and e.length is None:
                raise BadImage(f"{self.name}: data export {e.symbol} needs a length")
            if e.offset < 0 or length is None or length < 1 or e.offset + length > seg.size:
                raise BadImage(f"{self.name}: export {e.symbol} out of bounds")
        for f in self.fixups:
            seg = self.segment(f.segment)
            if f.offset % 8 or f.offset < 0 or f.offset + 8 > seg.size:
                raise BadImage(f"{self.name}: fixup at {f.segment}+{f.offset} misaligned or out of bounds")
            if f.symbol not in self.imports:
                raise BadImage(f"{self.name}: fixup names {f.symbol!r} which is not imported")
        for cause, sym in self.vectors.items():
            if not any(e.symbol == sym and e.kind == "call" for e in self.exports):
                raise BadImage(f"{self.name}: vector {cause} names unknown call export {sym!r}")
        if not any(s.perms & Perm.X for s in self.segments) and (self.vectors or self.init):
            if self.vectors:
                raise BadImage(f"{self.name}: vectors need an executable segment")
            self.init = False


def _default_perms(kind: str) -> str:
    return {"text": "RX", "rodata": "R"}.get(kind, "RW")


def load_manifest(path: str | Path) -> list[SubsystemImage]:
    """Read a manifest: either a list of images or ``{"images": [...]}``."""
    path = Path(path)
    raw = json.loads(path.read_text())
    items = raw["images"] if isinstance(raw, dict) else raw
    return [SubsystemImage.from_dict(item, path.parent) for item in items]


def boot_options(path: str | Path) -> dict[str, Any]:
    raw = json.loads(Path(path).read_text())
    return dict(raw.get("boot", {})) if isinstance(raw, dict) else {}


# -- pools ---------------------------------------------------------------


class StackPool:
    """Stack frames and register-set buffers handed out by lowest free index."""

    def __init__(self, frames: list[int], regsets: list[int], spin_limit: int | None = None) -> None:
        if len(frames) != len(regsets):
            raise ValueError("one register set per frame")
        self.frames = frames
        self.regsets = regsets
        self.bitmap = 0
        self.spin_limit = spin_limit
        self.spins = 0

    def __len__(self) -> int:
        return len(self.frames)

    def claim(self) -> int:
        free = ~self.bitmap & ((1 << len(self.frames)) - 1)
        if not free:
            # nothing else runs during a claim here, so spinning cannot succeed
            self.spins += self.spin_limit or 0
            raise PoolExhausted(f"all {len(self.frames)} frames in use")
        index = _kernels.ctz64(free)
        self.bitmap |= 1 << index
        return index

    def release(self, index: int) -> None:
        if not 0 <= index < len(self.frames) or not self.bitmap >> index & 1:
            raise DoubleRelease(f"frame {index} is not claimed")
        self.bitmap &= ~(1 << index)


# -- boot ----------------------------------------------------------------


@dataclass
class LoadedSubsystem:
    name: str
    subsystem_id: int
    segments: dict[str, int]
    segment_ranges: dict[str, tuple[int, int]]
    entries: dict[str, int]
    trampoline: int | None
    pool: StackPool
    delegated: list[int] = field(default_factory=list)


@dataclass
class SystemHandle:
    machine: Machine
    cpu: Cpu
    order: list[str]
    subsystems: dict[str, LoadedSubsystem]
    symbols: dict[str, int]
    boot_tokens: list[int]
    root: int
    loader_region: int
    loader_entry: int
    loader_return: int
    vector_region: int
    heap_token: int
    heap: Heap | None = None
    trapdoor_done: bool = False

    def symbol_map_lines(self) -> list[str]:
        return [f"{name} {format_token(tok)}" for name, tok in sorted(self.symbols.items())]

    def by_id(self, subsystem_id: int) -> LoadedSubsystem:
        for s in self.subsystems.values():
            if s.subsystem_id == subsystem_id:
                return s
        raise KeyError(subsystem_id)


def topo_order(images: list[SubsystemImage]) -> list[SubsystemImage]:
    """Exporters before importers; ties broken by init priority, then manifest order."""
    exporter: dict[str, int] = {}
    for i, img in enumerate(images):
        for e in img.exports:
            if e.symbol in exporter:
                raise BadImage(f"symbol {e.symbol!r} exported twice")
            exporter[e.symbol] = i
    names = [img.name for img in images]
    if len(set(names)) != len(names):
        raise BadImage("duplicate image names")
    deps: list[set[int]] = [set() for _ in images]
    users: list[set[int]] = [set() for _ in images]
    for i, img in enumerate(images):
        for sym in img.imports:
            if MMIO_NAME.search(sym) or sym == TIMER_SLOT:
                continue
            if sym not in exporter:
                raise ImportUnresolved(f"{img.name} imports {sym!r}")
            j = exporter[sym]
            if j != i:
                deps[i].add(j)
                users[j].add(i)
    waiting = [len(d) for d in deps]
    ready = [(images[i].init_priority, i) for i in range(len(images)) if not waiting[i]]
    heapq.heapify(ready)
    out = []
    while ready:
        _, i = heapq.heappop(ready)
        out.append(images[i])
        for u in sorted(users[i]):
            waiting[u] -= 1
            if not waiting[u]:
                heapq.heappush(ready, (images[u].init_priority, u))
    if len(out) != len(images):
        stuck = sorted(images[i].name for i in range(len(images)) if waiting[i])
        raise ImportCycle(", ".join(stuck))
    return out


class _Loader:
    def __init__(self, machine: Machine, cpu: Cpu, heap_size: int, stack_frames: int, stack_size: int,
                 regset_size: int, spin_limit: int | None) -> None:
        self.m = machine
        self.cpu = cpu
        self.heap_size = heap_size
        self.stack_frames = stack_frames
        self.stack_size = stack_size
        self.regset_size = regset_size
        self.spin_limit = spin_limit
        self.root = 0
        self.boot_tokens: list[int] = []
        self.symbols: dict[str, int] = {}

    def bound(self, sid: int) -> Restriction:
        return Restriction.bound(self.cpu.port, sid)

    def carve(self, length: int, perms: Perm, restriction: Restriction = NO_RESTRICTION) -> int:
        try:
            rest, tok = self.m.create(self.cpu, self.root, length, perms, restriction)
        except OpError as exc:
            if exc.kind is OpErrorKind.BAD_LENGTH:
                raise OutOfMemory(f"root cannot supply {length} bytes") from None
            raise
        if rest is None:
            raise OutOfMemory("root exhausted")
        self.root = rest
        return tok

    def run(self, images: list[SubsystemImage]) -> SystemHandle:
        m, cpu = self.m, self.cpu
        if cpu.active_subsystem != 0:
            raise NotAtSubsystemZero(cpu.name)
        m.note("boot", f"images:{len(images)}")
        ordered = topo_order(images)
        m.restrict(cpu, self.root, Perm.ALL, self.bound(0))
        self.boot_tokens.append(self.root)

        # Fixed regions, lowest addresses first: loader, heap, vector table.
        loader_region = self.carve(LOADER_REGION, Perm.ALL, self.bound(0))
        entry_set = Restriction.set(cpu.port, 0)
        half = LOADER_REGION // 2
        loader_entry = m.derive(cpu, loader_region, half, 0, Perm.R | Perm.X, entry_set)
        loader_return = m.derive(cpu, loader_region, half, half, Perm.R | Perm.X, entry_set)
        heap_token = self.carve(_align(self.heap_size), HEAP_PERMS)
        n_vec = m.config.interrupt_causes
        vector_region = self.carve(_align(8 * n_vec), Perm.R | Perm.W, self.bound(0))
        vector_base = m.inspect(cpu, vector_region).base
        m.set_vector_base(cpu, vector_base)
        self.boot_tokens += [loader_region, loader_entry, loader_return, vector_region]
        self.symbols.update(loader_entry=loader_entry, loader_return=loader_return)

        exported: dict[str, tuple[SubsystemImage, Export]] = {
            e.symbol: (img, e) for img in ordered for e in img.exports
        }
        loaded: dict[str, LoadedSubsystem] = {}

        # Segments and pools for every image; bytes go in while still writable.
        for sid, img in enumerate(ordered, start=1):
            segs, ranges = {}, {}
            irq = Perm.I if img.irq else Perm.NONE
            for s in img.segments:
                tok = self.carve(_align(s.size), s.perms | irq | Perm.W | Perm.CT | Perm.CD)
                if s.data:
                    m.mem_write(cpu, tok, s.data)
                segs[s.name] = tok
                ranges[s.name] = (m.inspect(cpu, tok).base, _align(s.size))
                self.boot_tokens.append(tok)
            frames, regsets = [], []
            for _ in range(self.stack_frames):
                frames.append(self.carve(_align(self.stack_size), Perm.R | Perm.W | Perm.CT | Perm.CD, self.bound(sid)))
                regsets.append(self.carve(_align(self.regset_size), Perm.R | Perm.W | Perm.CT, self.bound(sid)))
            pool = StackPool(frames, regsets, self.spin_limit)
            loaded[img.name] = LoadedSubsystem(img.name, sid, segs, ranges, {}, None, pool, frames + regsets)

        # Entry points: a call window per export and a trampoline over the first text segment.
        for img in ordered:
            ls = loaded[img.name]
            sid = ls.subsystem_id
            irq = Perm.I if img.irq else Perm.NONE
            enter = Restriction.set(cpu.port, sid)
            text = next((s for s in img.segments if s.perms & Perm.X), None)
            if text is not None:
                ls.trampoline = m.derive(cpu, ls.segments[text.name], None, 0, Perm.R | Perm.X | irq | Perm.CT, enter)
                self.symbols[f"{img.name}.entry"] = ls.trampoline
            for e in img.exports:
                if e.kind == "call":
                    seg = img.segment(e.segment)
                    tok = m.derive(cpu, ls.segments[e.segment], seg.size - e.offset, e.offset,
                                   Perm.R | Perm.X | irq | Perm.CT, enter)
                    ls.entries[e.symbol] = tok
                    self.symbols[e.symbol] = tok

        # Imports: data windows are minted per importer, calls share the entry token.
        mmio: list[tuple[LoadedSubsystem, Fixup | None, str]] = []
        resolved: dict[tuple[str, str], int] = {}
        for img in ordered:
            ls = loaded[img.name]
            for sym in img.imports:
                if MMIO_NAME.search(sym):
                    mmio.append((ls, None, sym))
                    continue
                if sym == TIMER_SLOT:
                    tok = m.derive(cpu, vector_region, 8, 8 * m.config.timer_cause, Perm.W, self.bound(ls.subsystem_id))
                else:
                    owner, e = exported[sym]
                    if e.kind == "call":
                        tok = loaded[owner.name].entries[sym]
                    else:
                        src = owner.segment(e.segment)
                        perms = (src.perms & (Perm.R | Perm.W)) | Perm.CT | Perm.CD
                        tok = m.derive(cpu, loaded[owner.name].segments[e.segment], e.length, e.offset,
                                       perms, self.bound(ls.subsystem_id))
                        ls.delegated.append(tok)
                resolved[(img.name, sym)] = tok
                self.symbols[f"{img.name}:{sym}"] = tok
        # MMIO windows come from what is left of the root, after all carving.
        for ls, _, sym in mmio:
            match = MMIO_NAME.search(sym)
            base, length = int(match.group(2)), int(match.group(3))  # type: ignore[union-attr]
            window = m.inspect(cpu, self.root)
            offset = base - window.base  # type: ignore[operator]
            if offset < 0 or length < 1 or base + length > window.base + window.length:  # type: ignore[operator]
                raise ImportUnresolved(f"{ls.name}: {sym} outside the unclaimed address space")
            tok = m.derive(cpu, self.root, length, offset, Perm.R | Perm.W | Perm.I, self.bound(ls.subsystem_id))
            resolved[(ls.name, sym)] = tok
            ls.delegated.append(tok)
            self.symbols[f"{ls.name}:{sym}"] = tok

        for img in ordered:
            ls = loaded[img.name]
            for f in img.fixups:
                m.mem_write(cpu, with_offset(ls.segments[f.segment], f.offset),
                            resolved[(img.name, f.symbol)].to_bytes(8, "little"))
            for cause, sym in sorted(img.vectors.items()):
                m.mem_write(cpu, with_offset(vector_region, 8 * cause), ls.entries[sym].to_bytes(8, "little"))
            for cause in img.nmi:
                m.set_nmi(cpu, cause)

        # Bind every segment to its subsystem with its declared permissions.
        for img in ordered:
            ls = loaded[img.name]
            # interrupt handlers must reach their own segments from the Irq regime
            irq = Perm.I if img.irq else Perm.NONE
            for s in img.segments:
                keep = s.perms | irq | Perm.CT | Perm.CD
                m.restrict(cpu, ls.segments[s.name], keep, self.bound(ls.subsystem_id))
                self.symbols[f"{img.name}.{s.name}"] = ls.segments[s.name]
                ls.delegated.append(ls.segments[s.name])

        # Init: call each trampoline once, then return through the loader's own entry.
        for img in sorted(ordered, key=lambda i: (i.init_priority, ordered.index(i))):
            ls = loaded[img.name]
            if img.init and ls.trampoline is not None:
                m.fetch(cpu, ls.trampoline, expect_call=True)
                m.fetch(cpu, loader_return, expect_call=True)

        handle = SystemHandle(
            m, cpu, [img.name for img in ordered], loaded, self.symbols, self.boot_tokens, self.root,
            loader_region, loader_entry, loader_return, vector_region, heap_token,
        )
        handle.heap = Heap(m, cpu, heap_token, HEAP_PERMS)
        self.symbols["heap"] = heap_token
        m.note("boot", f"loaded:{','.join(handle.order) or '-'}")
        return handle


def boot(
    machine: Machine,
    images: Iterable[SubsystemImage],
    cpu: Cpu | str | int | None = None,
    heap_size: int = DEFAULT_HEAP,
    stack_frames: int = 2,
    stack_size: int = 4096,
    regset_size: int = 512,
    spin_limit: int | None = None,
) -> SystemHandle:
    if cpu is None:
        cpu = next((d for d in machine.devices if isinstance(d, Cpu)), None) or machine.add_cpu()
    loader = _Loader(machine, machine.cpu(cpu), heap_size, stack_frames, stack_size, regset_size, spin_limit)
    return loader.run(list(images))


def trapdoor(sys: SystemHandle, then_call: int | None = None) -> None:
    """Destroy the loader's authority; a second call does nothing."""
    if sys.trapdoor_done:
        return
    m, cpu = sys.machine, sys.cpu
    if cpu.active_subsystem != 0:
        raise NotAtSubsystemZero(cpu.name)
    m.restrict(cpu, sys.vector_region, Perm.NONE)
    heap = sys.heap
    restriction = heap.restriction if heap is not None else NO_RESTRICTION
    fresh = m.revoke(cpu, sys.loader_region, HEAP_PERMS, restriction)
    if heap is not None:
        heap.add_region(fresh)
    m.restrict(cpu, sys.root, Perm.NONE)
    sys.trapdoor_done = True
    m.note("trapdoor")
    if then_call is not None:
        m.fetch(cpu, then_call, expect_call=True)
