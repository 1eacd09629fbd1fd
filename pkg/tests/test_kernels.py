"""Compiled and pure-Python kernels must agree bit for bit."""

import importlib
import os
import subprocess
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from northcape import _kernels, _kernels_py

try:
    from northcape import _speedups
except ImportError:  # pragma: no cover - extension not built
    _speedups = None

needs_ext = pytest.mark.skipif(_speedups is None, reason="compiled extension not built")

# Published Speck64/128 vector: key words and plaintext from the cipher's design document.
KEY = (0x03020100, 0x0B0A0908, 0x13121110, 0x1B1A1918)
PLAIN = 0x3B726574_7475432D
CIPHER = 0x8C6FA548_454E028B


def test_python_cipher_vector():
    assert _kernels_py.Speck64(*KEY).encrypt(PLAIN) == CIPHER


@needs_ext
def test_compiled_cipher_vector():
    assert _speedups.Speck64(*KEY).encrypt(PLAIN) == CIPHER


@needs_ext
@given(st.tuples(*[st.integers(0, 2**32 - 1)] * 4), st.integers(0, 2**64 - 1))
def test_cipher_parity(key, block):
    assert _speedups.Speck64(*key).encrypt(block) == _kernels_py.Speck64(*key).encrypt(block)


@needs_ext
def test_stream_parity():
    a = _speedups.Speck64(*KEY).low16_stream(1000, 64)
    b = _kernels_py.Speck64(*KEY).low16_stream(1000, 64)
    assert list(a) == list(b)
    assert b[0] == _kernels_py.Speck64(*KEY).encrypt(1000) & 0xFFFF


@needs_ext
@given(st.integers(0, 3), st.integers(0, 0xFFFF), st.integers(0, 2**14 - 1), st.integers(0, 255))
def test_pack_parity(code, nonce, rel_id, offset):
    cap_id = _kernels_py.ID_BASE[code] + rel_id
    a = _speedups.pack_token(code, nonce, cap_id, offset)
    assert a == _kernels_py.pack_token(code, nonce, cap_id, offset)
    assert tuple(_speedups.unpack_token(a)) == tuple(_kernels_py.unpack_token(a))


@needs_ext
@given(st.integers(0, 2**64 - 1))
def test_unpack_and_ctz_parity(raw):
    assert tuple(_speedups.unpack_token(raw)) == tuple(_kernels_py.unpack_token(raw))
    assert _speedups.ctz64(raw) == _kernels_py.ctz64(raw)


def test_ctz_edges():
    assert _kernels_py.ctz64(0) == 64
    assert _kernels_py.ctz64(1) == 0
    assert _kernels_py.ctz64(1 << 63) == 63


def test_pure_python_selected_by_env():
    code = "import northcape._kernels as k; print(k.BACKEND)"
    env = {**os.environ, "NORTHCAPE_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_backend_reported():
    assert _kernels.BACKEND in ("cython", "python")
    if _speedups is not None:
        assert importlib.import_module("northcape._kernels").BACKEND == "cython" or os.environ.get(
            "NORTHCAPE_PURE_PYTHON"
        )
