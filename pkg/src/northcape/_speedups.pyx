# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: token packing, Speck64 permutation, trailing-zero count."""

from libc.stdint cimport uint32_t, uint64_t, int64_t

cdef int SPECK_ROUNDS = 27
cdef int OFFSET_BITS[4]
cdef int ID_BITS[4]
cdef uint64_t ID_BASE[4]
cdef uint64_t ID_END[4]

OFFSET_BITS[:] = [32, 24, 16, 8]
ID_BITS[:] = [14, 22, 30, 38]
ID_BASE[:] = [0, 1 << 14, 1 << 22, 1 << 30]
ID_END[:] = [1 << 14, 1 << 22, 1 << 30, 1ULL << 38]


def pack_token(int code, uint64_t nonce, uint64_t cap_id, uint64_t offset):
    cdef int ob = OFFSET_BITS[code]
    cdef uint64_t field = (cap_id - ID_BASE[code]) & ((1ULL << ID_BITS[code]) - 1)
    return ((<uint64_t>code) << 62) | (nonce << 46) | (field << ob) | offset


def unpack_token(uint64_t raw):
    cdef int code = <int>(raw >> 62)
    cdef int ob = OFFSET_BITS[code]
    cdef uint64_t nonce = (raw >> 46) & 0xFFFF
    cdef uint64_t cid = ((raw >> ob) & ((1ULL << ID_BITS[code]) - 1)) + ID_BASE[code]
    cdef int64_t out_id = <int64_t>cid
    if cid >= ID_END[code]:
        out_id = -1
    return code, nonce, out_id, raw & ((1ULL << ob) - 1)


def ctz64(uint64_t x):
    if x == 0:
        return 64
    cdef int n = 0
    while not (x & 1):
        x >>= 1
        n += 1
    return n


cdef inline uint32_t _ror(uint32_t x, int r):
    return (x >> r) | (x << (32 - r))


cdef inline uint32_t _rol(uint32_t x, int r):
    return (x << r) | (x >> (32 - r))


cdef class Speck64:
    """Speck64/128 block cipher, used as a keyed 64-bit permutation."""

    cdef uint32_t rk[27]

    def __init__(self, uint32_t k0, uint32_t l0, uint32_t l1, uint32_t l2):
        cdef uint32_t ell[29]
        cdef int i
        ell[0] = l0
        ell[1] = l1
        ell[2] = l2
        self.rk[0] = k0
        for i in range(SPECK_ROUNDS - 1):
            ell[i + 3] = (self.rk[i] + _ror(ell[i], 8)) ^ <uint32_t>i
            self.rk[i + 1] = _rol(self.rk[i], 3) ^ ell[i + 3]

    @property
    def round_keys(self):
        return tuple(self.rk[i] for i in range(SPECK_ROUNDS))

    cdef inline uint64_t _enc(self, uint64_t block):
        cdef uint32_t x = <uint32_t>(block >> 32)
        cdef uint32_t y = <uint32_t>block
        cdef int i
        for i in range(SPECK_ROUNDS):
            x = (_ror(x, 8) + y) ^ self.rk[i]
            y = _rol(y, 3) ^ x
        return ((<uint64_t>x) << 32) | y

    def encrypt(self, uint64_t block):
        return self._enc(block)

    def low16_stream(self, uint64_t start, Py_ssize_t count):
        cdef list out = [0] * count
        cdef Py_ssize_t i
        for i in range(count):
            out[i] = <long>(self._enc(start + <uint64_t>i) & 0xFFFF)
        return out
