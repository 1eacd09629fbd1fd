"""Compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--fuzz-steps N]

Prints per-call times for each kernel under both backends, then the wall time
of the same fuzz run with and without the extension.
"""

from __future__ import annotations

import argparse
import os
import random
import subprocess
import sys
import timeit

from northcape import _kernels_py

try:
    from northcape import _speedups
except ImportError:  # pragma: no cover
    _speedups = None

SPECK_KEY = (0x03020100, 0x0B0A0908, 0x13121110, 0x1B1A1918)


def cases(mod):
    rng = random.Random(0)
    tokens = [mod.pack_token(rng.randrange(4), rng.getrandbits(16), rng.randrange(1 << 14), rng.getrandbits(8))
              for _ in range(1000)]
    words = [rng.getrandbits(64) | 1 << 63 for _ in range(1000)]
    cipher = mod.Speck64(*SPECK_KEY)
    pack, unpack, ctz = mod.pack_token, mod.unpack_token, mod.ctz64
    return {
        "pack_token": (lambda: [pack(2, 77, 12345, 9) for _ in range(1000)], 1000),
        "unpack_token": (lambda: [unpack(t) for t in tokens], 1000),
        "ctz64": (lambda: [ctz(w) for w in words], 1000),
        "speck64 encrypt": (lambda: [cipher.encrypt(w) for w in words], 1000),
        "nonce block (4096)": (lambda: cipher.low16_stream(0, 4096), 4096),
    }


def per_call(fn, calls: int, repeat: int) -> float:
    best = min(timeit.repeat(fn, number=1, repeat=repeat))
    return best / calls * 1e9


def fuzz_seconds(steps: int, pure: bool) -> float:
    env = dict(os.environ)
    env.pop("NORTHCAPE_PURE_PYTHON", None)
    if pure:
        env["NORTHCAPE_PURE_PYTHON"] = "1"
    code = (
        "import time; from northcape.fuzz import fuzz; from northcape.machine import MachineConfig;"
        "t=time.perf_counter();"
        f"fuzz(0, {steps}, config=MachineConfig(memory_size=1<<22, cmt_slots=1024, trace_limit=64));"
        "print(time.perf_counter()-t)"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7)
    parser.add_argument("--fuzz-steps", type=int, default=20_000)
    args = parser.parse_args()
    if _speedups is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

    python_cases, cython_cases = cases(_kernels_py), cases(_speedups)
    print(f"{'kernel':<22}{'python ns':>12}{'cython ns':>12}{'speedup':>10}")
    for name, (fn, calls) in python_cases.items():
        slow = per_call(fn, calls, args.repeat)
        fast = per_call(cython_cases[name][0], calls, args.repeat)
        print(f"{name:<22}{slow:>12.1f}{fast:>12.1f}{slow / fast:>9.1f}x")

    slow = fuzz_seconds(args.fuzz_steps, pure=True)
    fast = fuzz_seconds(args.fuzz_steps, pure=False)
    print(f"\nfuzz {args.fuzz_steps} steps: python {slow:.2f}s, cython {fast:.2f}s ({slow / fast:.2f}x)")


if __name__ == "__main__":
    main()
