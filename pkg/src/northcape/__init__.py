"""Functional emulator of a token-based capability memory-protection architecture."""

from ._kernels import BACKEND
from .allocator import Heap, LocalArena
from .cmt import NO_RESTRICTION, CapabilityTable, CmtEntry, EntryKind, Perm, Restriction, RestrictionKind
from .errors import BusError, Fault, FaultKind, OpError, OpErrorKind
from .loader import SubsystemImage, boot, load_manifest, trapdoor
from .machine import Machine, MachineConfig
from .resolver import Access, AccessContext, Regime, Resolver
from .token import OffsetType, decode_token, encode_token, format_token, parse_token, with_offset

__version__ = "0.1.0"

__all__ = [
    "Access",
    "AccessContext",
    "BACKEND",
    "BusError",
    "CapabilityTable",
    "CmtEntry",
    "EntryKind",
    "Fault",
    "FaultKind",
    "Heap",
    "LocalArena",
    "Machine",
    "MachineConfig",
    "NO_RESTRICTION",
    "OffsetType",
    "OpError",
    "OpErrorKind",
    "Perm",
    "Regime",
    "Resolver",
    "Restriction",
    "RestrictionKind",
    "SubsystemImage",
    "boot",
    "decode_token",
    "encode_token",
    "format_token",
    "load_manifest",
    "parse_token",
    "trapdoor",
    "with_offset",
]
