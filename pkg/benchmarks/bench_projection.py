"""Compiled versus numpy projection kernels.

Times ``project_union`` (nearest point on a union of simplicial cones) on
the catalog cones for a range of batch sizes, then times one registration
(``a_m`` on a sampled T-set) under each backend in a fresh interpreter.

Usage::

    python benchmarks/bench_projection.py [--repeat 5] [--sizes 100,1000,10000,100000]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from reifenberg import _fallback
from reifenberg.cone_model import catalog_reference

try:
    from reifenberg import _kernels
except ImportError:  # extension not built
    _kernels = None

REGISTRATION = """
import time, numpy as np
from reifenberg import BACKEND
from reifenberg.cone_model import catalog_reference
from reifenberg.harness import sample_cone
from reifenberg.metric import a_m
E = sample_cone(catalog_reference("T_set"), np.zeros(3), 1.0, 4000.0, seed=0)
t = time.perf_counter()
a_m(E, (np.array([0.05, 0.0, 0.0]), 0.5), 0, budget=8, seed=0)
print(BACKEND, time.perf_counter() - t)
"""


def time_kernel(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--sizes", default="100,1000,10000,100000")
    a = p.parse_args(argv)
    sizes = [int(s) for s in a.sizes.split(",")]
    rng = np.random.default_rng(0)
    print(f"{'cone':<12}{'points':>9}{'numpy [ms]':>13}{'cython [ms]':>13}{'speedup':>9}")
    for name in ("plane(2)", "Y_times(1)", "T_set"):
        W = catalog_reference(name)
        pk = W.base.packed(W.base.pieces)
        for M in sizes:
            X = rng.normal(size=(M, pk.N))
            args = (X, pk.A, pk.G, pk.sub_off, pk.owner, 1e-12)
            t_py = time_kernel(_fallback.project_union, args, a.repeat)
            if _kernels is None:
                print(f"{name:<12}{M:>9}{1e3 * t_py:>13.3f}{'n/a':>13}{'n/a':>9}")
                continue
            t_cy = time_kernel(_kernels.project_union, args, a.repeat)
            print(f"{name:<12}{M:>9}{1e3 * t_py:>13.3f}{1e3 * t_cy:>13.3f}{t_py / t_cy:>9.2f}")
    print("\nregistration of a T-set model (a_0 at one ball, budget 8):")
    for force in ("1", "0"):
        env = dict(os.environ, REIFENBERG_FORCE_PYTHON=force)
        out = subprocess.run([sys.executable, "-c", REGISTRATION], env=env, capture_output=True, text=True)
        if out.returncode:
            print(out.stderr.strip())
            continue
        backend, secs = out.stdout.split()
        print(f"  {backend:<8}{float(secs):8.2f} s")


if __name__ == "__main__":
    main()
