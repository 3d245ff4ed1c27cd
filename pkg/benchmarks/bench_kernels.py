"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is timed on identical inputs with both backends; the results are
also checked for equality so a speedup never hides a divergence. A full
simulation is timed last, once per backend, in a subprocess (the backend is
chosen at import time).
"""
from __future__ import annotations

import argparse
import os
import random
import subprocess
import sys
import timeit

from lightmesh.kernels import _pykernels as py

try:
    from lightmesh.kernels import _ckernels as cy
except ImportError:  # pragma: no cover
    cy = None


def _inputs(seed: int = 7):
    rng = random.Random(seed)
    n = 70
    xs = [rng.uniform(0, 45) for _ in range(n)]
    ys = [rng.uniform(0, 52) for _ in range(n)]
    floors = [rng.randint(-3, 6) for _ in range(n)]
    blocks = [rng.choice("ABCP") for _ in range(n)]
    t, starts, ends = 0.0, [], []
    for _ in range(20000):
        t += rng.expovariate(1 / 3.0)
        starts.append(t)
        t += rng.uniform(0.03, 0.3)
        ends.append(t)
    return xs, ys, floors, blocks, starts, ends


def cases():
    xs, ys, floors, blocks, starts, ends = _inputs()
    return {
        "hash_normal x10k": lambda k: [k.hash_normal(1, a, a + 1, a * 7) for a in range(10000)],
        "hash_uniform x10k": lambda k: [k.hash_uniform(3, a, 2, a) for a in range(10000)],
        "airtime_ms x10k": lambda k: [k.airtime_ms(7 + a % 6, 125000, 5, 8, True, True, a % 6 >= 4, a % 200)
                                      for a in range(10000)],
        "path_loss_matrix 70 nodes": lambda k: k.path_loss_matrix(xs, ys, floors, blocks, 3.1, 10.0,
                                                                  40.0, 3.0, 5.0, 15.0, 1.0),
        "max_window_airtime 20k tx": lambda k: k.max_window_airtime(starts, ends, 3600.0),
    }


def bench_kernels(repeat: int) -> None:
    print(f"{'kernel':30s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  equal")
    for name, fn in cases().items():
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=repeat)) * 1000
        if cy is None:
            print(f"{name:30s} {t_py:10.2f} {'n/a':>10s} {'n/a':>8s}  n/a")
            continue
        t_cy = min(timeit.repeat(lambda: fn(cy), number=1, repeat=repeat)) * 1000
        equal = fn(py) == fn(cy)
        print(f"{name:30s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.1f}x  {equal}")


SIM_SNIPPET = (
    "import time; from lightmesh.sim import bundled, Simulator; from lightmesh import kernels;"
    "sc = bundled('carlingford-2gw').replace(duration_s=43200.0);"
    "t = time.perf_counter(); r = Simulator(sc).run();"
    "print(kernels.BACKEND, round(time.perf_counter() - t, 2), r['network']['prr'])"
)


def bench_simulation() -> None:
    print("\nend-to-end: carlingford-2gw, 12 simulated hours")
    for pure in (False, True):
        env = dict(os.environ)
        if pure:
            env["LIGHTMESH_PURE_PYTHON"] = "1"
        else:
            env.pop("LIGHTMESH_PURE_PYTHON", None)
        out = subprocess.run([sys.executable, "-c", SIM_SNIPPET], env=env, capture_output=True, text=True,
                             check=True).stdout.split()
        print(f"  backend {out[0]:7s} wall {out[1]:>6s} s  prr {out[2]}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--no-sim", action="store_true", help="skip the end-to-end simulation timing")
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if not args.no_sim:
        bench_simulation()


if __name__ == "__main__":
    main()
