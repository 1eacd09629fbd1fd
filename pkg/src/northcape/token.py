"""64-bit capability tokens.

Layout from the most significant bit: 2-bit offset-type header, 16-bit nonce,
capability id (width depends on the type), offset (8/16/24/32 bits). Header 00
is the 32-bit type, so the root token (nonce 0, id 0) is a plain physical
address.
"""

from __future__ import annotations

import enum
from typing import NamedTuple

from . import _kernels
from ._kernels_py import ID_BASE, ID_BITS, ID_END, OFFSET_BITS


class TokenError(ValueError):
    kind = "TokenError"


class IdOutOfPartition(TokenError):
    kind = "IdOutOfPartition"


class OffsetOverflow(TokenError):
    kind = "OffsetOverflow"


class MalformedToken(TokenError):
    kind = "Malformed"


class OffsetType(enum.Enum):
    """Offset width class; value is the 2-bit header code."""

    O32 = 0
    O24 = 1
    O16 = 2
    O8 = 3

    @property
    def code(self) -> int:
        return self.value

    @property
    def offset_bits(self) -> int:
        return OFFSET_BITS[self.value]

    @property
    def id_bits(self) -> int:
        return ID_BITS[self.value]

    @property
    def id_base(self) -> int:
        return ID_BASE[self.value]

    @property
    def id_end(self) -> int:
        """One past the last id of this type's partition."""
        return ID_END[self.value]

    @property
    def offset_limit(self) -> int:
        return 1 << self.offset_bits

    def contains_id(self, cap_id: int) -> bool:
        return self.id_base <= cap_id < self.id_end


OFFSET_TYPES = (OffsetType.O32, OffsetType.O24, OffsetType.O16, OffsetType.O8)
ROOT_TOKEN = 0
NONCE_LIMIT = 1 << 16


class DecodedToken(NamedTuple):
    otype: OffsetType
    nonce: int
    cap_id: int
    offset: int


def encode_token(otype: OffsetType, nonce: int, cap_id: int, offset: int) -> int:
    if not otype.contains_id(cap_id):
        raise IdOutOfPartition(f"id {cap_id} not in {otype.name} partition")
    if not 0 <= offset < otype.offset_limit:
        raise OffsetOverflow(f"offset {offset:#x} exceeds {otype.offset_bits} bits")
    if not 0 <= nonce < NONCE_LIMIT:
        raise ValueError(f"nonce {nonce:#x} exceeds 16 bits")
    return _kernels.pack_token(otype.value, nonce, cap_id, offset)


def decode_token(raw: int) -> DecodedToken:
    if not 0 <= raw < (1 << 64):
        raise MalformedToken(f"{raw!r} is not a 64-bit word")
    code, nonce, cap_id, offset = _kernels.unpack_token(raw)
    if cap_id < 0:
        raise MalformedToken(f"id field of {format_token(raw)} outside its partition")
    return DecodedToken(OFFSET_TYPES[code], nonce, cap_id, offset)


def with_offset(raw: int, new_offset: int) -> int:
    d = decode_token(raw)
    if not 0 <= new_offset < d.otype.offset_limit:
        raise OffsetOverflow(f"offset {new_offset:#x} exceeds {d.otype.offset_bits} bits")
    return _kernels.pack_token(d.otype.value, d.nonce, d.cap_id, new_offset)


def base_token(raw: int) -> int:
    """The same token with offset 0."""
    ob = OFFSET_BITS[raw >> 62]
    return (raw >> ob) << ob


def offset_type_of_id(cap_id: int) -> OffsetType:
    for ot in OFFSET_TYPES:
        if ot.contains_id(cap_id):
            return ot
    raise IdOutOfPartition(f"id {cap_id} outside every partition")


def smallest_offset_type(length: int) -> OffsetType:
    """Narrowest type whose offsets can address every byte of ``length``."""
    for ot in reversed(OFFSET_TYPES):
        if length <= ot.offset_limit:
            return ot
    raise OffsetOverflow(f"length {length:#x} exceeds the 32-bit offset range")


def format_token(raw: int) -> str:
    return f"0x{raw:016x}"


def parse_token(text: str) -> int:
    if not text.startswith(("0x", "0X")):
        raise MalformedToken(f"token literal {text!r} lacks 0x prefix")
    raw = int(text, 16)
    if raw >= 1 << 64:
        raise MalformedToken(f"token literal {text!r} wider than 64 bits")
    return raw
