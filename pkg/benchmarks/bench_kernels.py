"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--end-to-end]

Kernel shapes match one attribution batch of the default model: 256 path
points, 14 tokens, width 32, 4 heads, ffn width 64.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from conductor import kernels

B, T, D, H, F = 256, 14, 32, 4, 64


def cases(rng):
    x = rng.normal(size=(B, T, D))
    y, rstd = kernels.reference.layernorm_fwd(x, 1e-12)
    s = rng.normal(size=(B, H, T, T))
    p = kernels.reference.softmax_fwd(s)
    u = rng.normal(size=(B, T, F))
    return {
        "layernorm_fwd": lambda k: k.layernorm_fwd(x, 1e-12),
        "layernorm_bwd": lambda k: k.layernorm_bwd(x, y, rstd),
        "softmax_fwd": lambda k: k.softmax_fwd(s),
        "softmax_bwd": lambda k: k.softmax_bwd(s, p),
        "gelu_fwd": lambda k: k.gelu_fwd(u),
        "gelu_bwd": lambda k: k.gelu_bwd(u, u),
    }


END_TO_END = """
import time
from conductor import BACKEND
from conductor.conductance import PathSpec, nig_attribute
from conductor.data import RELEVANT, SyntheticSpec, TokenizedPair
from conductor.model import CrossEncoder, init_params
from conductor.train import config_for
spec = SyntheticSpec()
cfg = config_for(spec, seed=0)
m = CrossEncoder(cfg, init_params(cfg), spec.vocab())
p = TokenizedPair.build([5, 6, 7], [8, 9, 10, 11, 12, 13, 14, 15])
nig_attribute(m, p, "all_pad", RELEVANT, PathSpec(16))
t = time.perf_counter()
nig_attribute(m, p, "all_pad", RELEVANT, PathSpec(1000))
print(BACKEND, time.perf_counter() - t)
"""


def end_to_end():
    out = {}
    for pure in ("0", "1"):
        env = dict(os.environ, CONDUCTOR_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true", help="also time one 1000-step pair attribution")
    args = ap.parse_args()
    if kernels.compiled is None:
        print("compiled kernels not built; only the numpy fallback is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for name, fn in cases(rng).items():
        ref = min(timeit.repeat(lambda: fn(kernels.reference), number=1, repeat=args.repeat)) * 1e3
        cy = min(timeit.repeat(lambda: fn(kernels.compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{ref:>10.3f}{cy:>11.3f}{ref / cy:>8.2f}x")
    if args.end_to_end:
        t = end_to_end()
        print(f"pair attribution, 1000 steps: numpy {t['numpy']:.2f}s, cython {t['cython']:.2f}s "
              f"({t['numpy'] / t['cython']:.2f}x)")


if __name__ == "__main__":
    main()
