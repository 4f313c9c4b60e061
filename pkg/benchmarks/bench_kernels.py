"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times im2col, col2im and max-pool forward/backward on the shapes the tiny
network sees at 64x64, then one full training step per backend (each in a
fresh interpreter so backend selection happens at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from calibra import _kernels_py as py

try:
    from calibra import _kernels_c as cy
except ImportError:
    sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")

STEP = """
import time, numpy as np
from calibra import BACKEND, tensor as T
from calibra.model import Network, NetConfig
net = Network(NetConfig.tiny(dtype="float32"))
x = np.random.default_rng(0).random((8, 1, 64, 64)).astype(np.float32)
def step():
    b = net.forward(x)
    T.backward(T.log(b.probs[:, 0]).mean() + b.decoder.mean())
step()
best = min(timeit.repeat(step, number=1, repeat={repeat}))
print(BACKEND, best)
""".replace("import time", "import time, timeit")

SHAPES = [(8, 1, 64, 64), (8, 8, 32, 32), (8, 16, 16, 16), (8, 64, 4, 4)]


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'shape':<20}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for shape in SHAPES:
        x = rng.random(shape).astype(np.float32)
        cols = py.im2col(x, 3, 1, 1)
        out, idx = py.maxpool_forward(x, 2)
        g = rng.random(out.shape).astype(np.float32)
        cases = {
            "im2col": (lambda m: m.im2col(x, 3, 1, 1)),
            "col2im": (lambda m: m.col2im(cols, x.shape, 3, 1, 1)),
            "maxpool_forward": (lambda m: m.maxpool_forward(x, 2)),
            "maxpool_backward": (lambda m: m.maxpool_backward(g, idx, 2)),
        }
        for name, call in cases.items():
            t_py = bench(lambda: call(py), args.repeat) * 1e3
            t_cy = bench(lambda: call(cy), args.repeat) * 1e3
            print(f"{name:<18}{str(shape):<20}{t_py:>10.3f}{t_cy:>11.3f}{t_py / t_cy:>8.2f}x")

    print("\nfull train step, batch 8, 64x64, tiny widths")
    times = {}
    for pure in ("1", "0"):
        env = dict(os.environ, CALIBRA_PURE=pure, CALIBRA_THREADS="1")
        res = subprocess.run([sys.executable, "-c", STEP.format(repeat=max(3, args.repeat // 4))],
                             env=env, capture_output=True, text=True, check=True)
        backend, secs = res.stdout.split()
        times[backend] = float(secs)
        print(f"  {backend:<8}{float(secs) * 1e3:9.1f} ms")
    if len(times) == 2:
        print(f"  speedup {times['python'] / times['cython']:.2f}x")


if __name__ == "__main__":
    main()
