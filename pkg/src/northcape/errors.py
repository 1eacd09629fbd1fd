"""Exception types shared across the emulator.

Every exception carries a ``kind`` string; traces and scenario asserts compare
on it.
"""

from __future__ import annotations

import enum


class NorthcapeError(Exception):
    kind: str = "Error"

    def __init__(self, detail: str = "") -> None:
        super().__init__(f"{self.kind}: {detail}" if detail else str(self.kind))
        self.detail = detail


class FaultKind(str, enum.Enum):
    MALFORMED = "Malformed"
    INVALID_TOKEN = "InvalidToken"
    INVALID_PARENT = "InvalidParent"
    RESTRICTION_VIOLATION = "RestrictionViolation"
    LOCKED = "Locked"
    PERMISSION_DENIED = "PermissionDenied"
    OUT_OF_BOUNDS = "OutOfBounds"
    CMT_OVERLAP = "CmtOverlap"
    IRQ_INACCESSIBLE = "IrqInaccessible"
    NOT_ENTRY_POINT = "NotEntryPoint"

    def __str__(self) -> str:
        return self.value


class Fault(NorthcapeError):
    """A resolution failure."""

    def __init__(self, kind: FaultKind, detail: str = "") -> None:
        self.kind = kind  # type: ignore[assignment]
        super().__init__(detail)


class BusError(Fault):
    """A fault surfaced on the bus by a device access."""


class OpErrorKind(str, enum.Enum):
    PORT_LOCKED = "PortLocked"
    FOREIGN_READ = "ForeignRead"
    NOT_DIRECT = "NotDirect"
    LOCKED_INPUT = "LockedInput"
    HAS_CHILDREN = "HasChildren"
    BAD_LENGTH = "BadLength"
    PERMISSION_ESCALATION = "PermissionEscalation"
    RESTRICTION_FORGERY = "RestrictionForgery"
    NOT_ADJACENT = "NotAdjacent"
    BAD_BOUNDS = "BadBounds"
    NOT_LOCKABLE = "NotLockable"
    ALREADY_LOCKED = "AlreadyLocked"
    NOT_DROPPABLE = "NotDroppable"
    BAD_OPCODE = "BadOpcode"

    def __str__(self) -> str:
        return self.value


class OpError(NorthcapeError):
    def __init__(self, kind: OpErrorKind, detail: str = "") -> None:
        self.kind = kind  # type: ignore[assignment]
        super().__init__(detail)


class TableFull(NorthcapeError):
    kind = "TableFull"


class NotLive(NorthcapeError):
    kind = "NotLive"


def outcome_of(exc: BaseException) -> str:
    """Stable outcome label for traces."""
    kind = getattr(exc, "kind", None)
    return str(kind) if kind is not None else type(exc).__name__
