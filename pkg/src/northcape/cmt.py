"""Capability metadata table: entries, id allocation and nonce generation."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, replace
from typing import Iterator

from . import _kernels
from .errors import NotLive, TableFull
from .token import OFFSET_TYPES, OffsetType, encode_token, offset_type_of_id


class Perm(enum.IntFlag):
    NONE = 0
    R = 1
    W = 2
    X = 4
    L = 8
    I = 16  # noqa: E741
    CD = 32
    CT = 64
    ALL = 127

    @classmethod
    def parse(cls, text: str | int | "Perm") -> "Perm":
        """Parse letters such as ``"RWX"`` or ``"RW,L,CT"``; ``"ALL"`` and ``"-"`` are accepted."""
        if isinstance(text, int):
            return cls(text & cls.ALL)
        s = text.upper().replace(",", "").replace("|", "").replace(" ", "")
        if s in ("", "-", "NONE"):
            return cls.NONE
        if s == "ALL":
            return cls.ALL
        out = cls.NONE
        i = 0
        while i < len(s):
            two = s[i : i + 2]
            if two in ("CD", "CT"):
                out |= cls[two]
                i += 2
            elif s[i] in "RWXLI":
                out |= cls[s[i]]
                i += 1
            else:
                raise ValueError(f"unknown permission letter in {text!r}")
        return out

    def label(self) -> str:
        if not self:
            return "-"
        return "".join(name for name in ("R", "W", "X", "L", "I", "CD", "CT") if self & Perm[name])


ACCESS_PERMS = Perm.R | Perm.W | Perm.X


class RestrictionKind(str, enum.Enum):
    NONE = "None"
    BOUND = "SubsystemIdBound"
    SET = "SubsystemIdSet"
    DEVICE = "DeviceInterpreted"

    def __str__(self) -> str:
        return self.value


# None < DeviceInterpreted < SubsystemIdBound; Set implies Bound for data access.
_STRICTNESS = {
    RestrictionKind.NONE: 0,
    RestrictionKind.DEVICE: 1,
    RestrictionKind.BOUND: 2,
    RestrictionKind.SET: 2,
}


@dataclass(frozen=True, slots=True)
class Restriction:
    kind: RestrictionKind = RestrictionKind.NONE
    payload: int = 0

    @staticmethod
    def pack(device: int, subsystem: int) -> int:
        if not 0 <= device < 1 << 16 or not 0 <= subsystem < 1 << 32:
            raise ValueError("device id is 16 bits, subsystem id is 32 bits")
        return (device << 48) | (subsystem << 16)

    @classmethod
    def bound(cls, device: int, subsystem: int) -> "Restriction":
        return cls(RestrictionKind.BOUND, cls.pack(device, subsystem))

    @classmethod
    def set(cls, device: int, subsystem: int) -> "Restriction":
        return cls(RestrictionKind.SET, cls.pack(device, subsystem))

    @classmethod
    def device_interpreted(cls, payload: int) -> "Restriction":
        return cls(RestrictionKind.DEVICE, payload & 0xFFFFFFFFFFFFFFFF)

    @property
    def device_id(self) -> int:
        return self.payload >> 48

    @property
    def subsystem_id(self) -> int:
        return (self.payload >> 16) & 0xFFFFFFFF

    @property
    def strictness(self) -> int:
        return _STRICTNESS[self.kind]

    def __str__(self) -> str:
        if self.kind is RestrictionKind.NONE:
            return "None"
        if self.kind is RestrictionKind.DEVICE:
            return f"Device({self.payload:#x})"
        short = "Bound" if self.kind is RestrictionKind.BOUND else "Set"
        return f"{short}({self.device_id}:{self.subsystem_id})"


NO_RESTRICTION = Restriction()


class EntryKind(str, enum.Enum):
    DIRECT = "Direct"
    INDIRECT = "Indirect"
    LOCK_HOLDER = "LockHolder"

    def __str__(self) -> str:
        return self.value


@dataclass(slots=True)
class CmtEntry:
    kind: EntryKind
    base: int
    length: int
    perms: Perm
    restriction: Restriction = NO_RESTRICTION
    parent: int | None = None
    cap_id: int = -1
    nonce: int = 0
    refcount: int = 0
    locked_by: int | None = None

    @property
    def otype(self) -> OffsetType:
        return offset_type_of_id(self.cap_id)

    @property
    def token(self) -> int:
        return encode_token(self.otype, self.nonce, self.cap_id, 0)

    @property
    def end(self) -> int:
        return self.base + self.length

    def copy(self) -> "CmtEntry":
        return replace(self)


class NonceSource:
    """Counter mode over a keyed 64-bit permutation.

    ``domain`` separates independent streams drawn from the same seed.
    """

    def __init__(self, seed: int, domain: bytes) -> None:
        digest = hashlib.blake2b(
            int(seed).to_bytes(16, "little", signed=True), digest_size=16, person=domain[:16]
        ).digest()
        words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
        self._cipher = _kernels.Speck64(*words)
        self.counter = 0

    def next64(self) -> int:
        value = self._cipher.encrypt(self.counter)
        self.counter += 1
        return value

    def next16(self) -> int:
        return self.next64() & 0xFFFF

    def block16(self, count: int) -> list[int]:
        out = self._cipher.low16_stream(self.counter, count)
        self.counter += count
        return out


@dataclass
class TableCounters:
    reads: int = 0
    writes: int = 0
    row_reads: int = 0


def _partition_base(cap_id: int) -> int:
    if cap_id < 1 << 14:
        return 0
    if cap_id < 1 << 22:
        return 1 << 14
    if cap_id < 1 << 30:
        return 1 << 22
    return 1 << 30


class CapabilityTable:
    """Direct-access table with a row bitmap of free slots.

    Global id = partition base of the offset type + slot index, so lookup
    touches exactly one slot.
    """

    def __init__(self, slot_count: int = 1 << 13, row_width: int = 64, seed: int = 0) -> None:
        if not 1 <= row_width <= 64:
            raise ValueError("row width must be within 1..64")
        if not 1 <= slot_count <= 1 << 14:
            raise ValueError("slot count must be within 1..2^14")
        self.slot_count = slot_count
        self.row_width = row_width
        self.row_count = -(-slot_count // row_width)
        self._rows = [0] * self.row_count
        self._slots: list[CmtEntry | None] = [None] * slot_count
        self._row_masks = [
            (1 << min(row_width, slot_count - r * row_width)) - 1 for r in range(self.row_count)
        ]
        self.cursor = {ot: (ot.id_base % slot_count) // row_width for ot in OFFSET_TYPES}
        self.nonces = NonceSource(seed, b"cmt-nonce")
        self.counters = TableCounters()
        self._live_by_type = {ot: 0 for ot in OFFSET_TYPES}
        self.high_water = {ot: 0 for ot in OFFSET_TYPES}

    # -- setup -------------------------------------------------------------

    def install_root(self, length: int) -> CmtEntry:
        """Slot 0 holds the root: id 0, nonce 0, covering ``[0, length)``."""
        root = CmtEntry(EntryKind.DIRECT, 0, length, Perm.ALL, cap_id=0, nonce=0)
        if self._rows[0] & 1:
            raise ValueError("root already installed")
        self._place(0, root, OffsetType.O32)
        return root

    # -- core operations -------------------------------------------------

    def allocate(self, otype: OffsetType, entry: CmtEntry) -> tuple[int, int]:
        rows = self._rows
        start = self.cursor[otype]
        for step in range(self.row_count):
            r = (start + step) % self.row_count
            self.counters.row_reads += 1
            free = ~rows[r] & self._row_masks[r]
            if free:
                slot = r * self.row_width + _kernels.ctz64(free)
                cap_id = otype.id_base + slot
                if cap_id >= otype.id_end:
                    break
                self.cursor[otype] = r
                entry.cap_id = cap_id
                entry.nonce = self.nonces.next16()
                self._place(slot, entry, otype)
                return cap_id, entry.nonce
        raise TableFull(f"no free slot for {otype.name}")

    def lookup(self, cap_id: int) -> CmtEntry | None:
        self.counters.reads += 1
        slot = cap_id - _partition_base(cap_id)
        if slot >= self.slot_count or cap_id < 0:
            return None
        entry = self._slots[slot]
        if entry is None or entry.cap_id != cap_id:
            return None
        return entry

    def update(self, cap_id: int, entry: CmtEntry) -> None:
        slot = self._live_slot(cap_id)
        entry.cap_id = cap_id
        self._slots[slot] = entry
        self.counters.writes += 1

    def remove(self, cap_id: int) -> None:
        slot = self._live_slot(cap_id)
        self._rows[slot // self.row_width] &= ~(1 << (slot % self.row_width))
        self._slots[slot] = None
        self._live_by_type[offset_type_of_id(cap_id)] -= 1
        self.counters.writes += 1

    # -- introspection ---------------------------------------------------

    @property
    def occupancy(self) -> int:
        return sum(bin(row).count("1") for row in self._rows)

    @property
    def free_count(self) -> int:
        return self.slot_count - self.occupancy

    def is_live(self, cap_id: int) -> bool:
        slot = cap_id - _partition_base(cap_id)
        if not 0 <= slot < self.slot_count:
            return False
        entry = self._slots[slot]
        return entry is not None and entry.cap_id == cap_id

    def peek(self, cap_id: int) -> CmtEntry | None:
        """Lookup without touching the read counter (for audits)."""
        return self._slots[cap_id - _partition_base(cap_id)] if self.is_live(cap_id) else None

    def entries(self) -> Iterator[CmtEntry]:
        for entry in self._slots:
            if entry is not None:
                yield entry

    def direct_ranges(self) -> list[tuple[int, int]]:
        return sorted((e.base, e.end) for e in self.entries() if e.kind is EntryKind.DIRECT)

    def stats_lines(self) -> list[str]:
        lines = [
            f"cmt_slots={self.slot_count}",
            f"cmt_occupancy={self.occupancy}",
            f"cmt_reads={self.counters.reads}",
            f"cmt_writes={self.counters.writes}",
            f"cmt_row_reads={self.counters.row_reads}",
        ]
        for ot in OFFSET_TYPES:
            lines.append(f"cmt_high_water_{ot.name.lower()}={self.high_water[ot]}")
        return lines

    # -- internals -------------------------------------------------------

    def _place(self, slot: int, entry: CmtEntry, otype: OffsetType) -> None:
        self._rows[slot // self.row_width] |= 1 << (slot % self.row_width)
        self._slots[slot] = entry
        self.counters.writes += 1
        live = self._live_by_type[otype] + 1
        self._live_by_type[otype] = live
        if live > self.high_water[otype]:
            self.high_water[otype] = live

    def _live_slot(self, cap_id: int) -> int:
        if not self.is_live(cap_id):
            raise NotLive(f"id {cap_id} is not live")
        return cap_id - _partition_base(cap_id)


__all__ = [
    "ACCESS_PERMS",
    "CapabilityTable",
    "CmtEntry",
    "EntryKind",
    "NO_RESTRICTION",
    "NonceSource",
    "Perm",
    "Restriction",
    "RestrictionKind",
    "TableCounters",
]
