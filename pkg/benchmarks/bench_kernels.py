"""Compare the compiled and numpy LSTM kernels.

Kernel timings call each backend directly. The end-to-end timing runs one
assimilation gradient (T_in=14, k=5, u=20, 790 observations) in a fresh
interpreter per backend, selected through ``RVAR_PURE_PYTHON``.

    python benchmarks/bench_kernels.py [--repeat 200]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from rvar.kernels import backends

E2E = r"""
import time, numpy as np
from rvar import assim, kernels, net
from rvar.pod import NormStats, PodBasis
rng = np.random.default_rng(0)
n, k = 40 * 48, 5
q, _ = np.linalg.qr(rng.normal(size=(n, k)))
basis = PodBasis(q, np.ones(k), np.zeros(n), (40, 48))
model = net.init_model(k, 14, 20, seed=0, norm=NormStats(np.zeros(k), np.ones(k)))
obs = assim.observe(rng.normal(size=(20, 40, 48)), 790, 0.0, seed=1)
p = assim.DaProblem(model, basis, rng.normal(size=(14, k)), obs)
z = p.background_z
assim.value_and_gradient(p, z)
reps = {reps}
t = time.perf_counter()
for _ in range(reps):
    assim.value_and_gradient(p, z)
print(kernels.BACKEND, (time.perf_counter() - t) / reps)
"""


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    impls = backends()
    print(f"{'batch':>5} {'op':>8} " + " ".join(f"{name:>12}" for name in impls) + "  speedup")
    for batch in (1, 64):
        d, u = 20, 20
        x, h, c = (rng.normal(size=(batch, s)) for s in (d, u, u))
        w, b = rng.normal(size=(4 * u, d + u)), rng.normal(size=4 * u)
        dh, dc = rng.normal(size=(batch, u)), rng.normal(size=(batch, u))
        times = {"forward": {}, "backward": {}}
        for name, mod in impls.items():
            _, _, gates, tc = mod.lstm_forward(x, h, c, w, b)
            times["forward"][name] = min(timeit.repeat(
                lambda: mod.lstm_forward(x, h, c, w, b), number=repeat, repeat=3)) / repeat
            times["backward"][name] = min(timeit.repeat(
                lambda: mod.lstm_backward(dh, dc, x, h, c, w, gates, tc),
                number=repeat, repeat=3)) / repeat
        for op, row in times.items():
            cells = " ".join(f"{row[name] * 1e6:10.1f}us" for name in impls)
            speed = row["python"] / row["cython"] if "cython" in row else float("nan")
            print(f"{batch:>5} {op:>8} {cells}  {speed:6.2f}x")


def bench_end_to_end(reps: int) -> None:
    results = {}
    for pure in ("0", "1"):
        env = dict(os.environ, RVAR_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", E2E.replace("{reps}", str(reps))], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        results[out[0]] = float(out[1])
    for name, sec in results.items():
        print(f"DA value+gradient [{name}]: {sec * 1e3:.2f} ms")
    if len(results) == 2:
        print(f"end-to-end speedup: {results['python'] / results['cython']:.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--e2e-reps", type=int, default=20)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_end_to_end(args.e2e_reps)
