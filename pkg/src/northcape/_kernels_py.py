"""Pure-Python versions of the hot kernels.

Must stay bit-for-bit identical to ``_speedups.pyx``; the parity tests run both.
"""

MASK32 = 0xFFFFFFFF
MASK64 = 0xFFFFFFFFFFFFFFFF

OFFSET_BITS = (32, 24, 16, 8)
ID_BITS = (14, 22, 30, 38)
ID_BASE = (0, 1 << 14, 1 << 22, 1 << 30)
ID_END = (1 << 14, 1 << 22, 1 << 30, 1 << 38)

SPECK_ROUNDS = 27


def pack_token(code: int, nonce: int, cap_id: int, offset: int) -> int:
    ob = OFFSET_BITS[code]
    field = (cap_id - ID_BASE[code]) & ((1 << ID_BITS[code]) - 1)
    return (code << 62) | (nonce << 46) | (field << ob) | offset


def unpack_token(raw: int) -> tuple[int, int, int, int]:
    """Split a raw token into (code, nonce, id, offset); id is -1 when outside its partition."""
    code = raw >> 62
    ob = OFFSET_BITS[code]
    nonce = (raw >> 46) & 0xFFFF
    cap_id = ((raw >> ob) & ((1 << ID_BITS[code]) - 1)) + ID_BASE[code]
    if cap_id >= ID_END[code]:
        cap_id = -1
    return code, nonce, cap_id, raw & ((1 << ob) - 1)


def ctz64(x: int) -> int:
    x &= MASK64
    if x == 0:
        return 64
    return (x & -x).bit_length() - 1


def _ror(x: int, r: int) -> int:
    return ((x >> r) | (x << (32 - r))) & MASK32


def _rol(x: int, r: int) -> int:
    return ((x << r) | (x >> (32 - r))) & MASK32


class Speck64:
    """Speck64/128 block cipher, used as a keyed 64-bit permutation."""

    def __init__(self, k0: int, l0: int, l1: int, l2: int) -> None:
        keys = [k0 & MASK32]
        ell = [l0 & MASK32, l1 & MASK32, l2 & MASK32]
        for i in range(SPECK_ROUNDS - 1):
            nxt = ((keys[i] + _ror(ell[i], 8)) & MASK32) ^ i
            ell.append(nxt)
            keys.append(_rol(keys[i], 3) ^ nxt)
        self.round_keys = tuple(keys)

    def encrypt(self, block: int) -> int:
        x = (block >> 32) & MASK32
        y = block & MASK32
        for k in self.round_keys:
            x = ((((x >> 8) | (x << 24)) & MASK32) + y & MASK32) ^ k
            y = (((y << 3) | (y >> 29)) & MASK32) ^ x
        return (x << 32) | y

    def low16_stream(self, start: int, count: int) -> list[int]:
        enc = self.encrypt
        return [enc((start + i) & MASK64) & 0xFFFF for i in range(count)]
