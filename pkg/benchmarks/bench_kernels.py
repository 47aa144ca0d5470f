"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json]
"""
import argparse
import json
import timeit

import numpy as np

from advplan import _kernels_py as fallback
from advplan.kinematics import KinematicChain
from advplan.neuralnet import Discriminator

try:
    from advplan import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def cases(rng):
    chain = KinematicChain.default()
    Q = rng.uniform(chain.lower, chain.upper, size=(512, chain.dof))
    M = fallback.fk_markers(chain.axes, chain.links, chain.markers, Q)
    centers = rng.uniform(-0.5, 0.5, size=(4, 3))
    radii = rng.uniform(0.05, 0.15, size=4)
    n = 400
    parent = np.array([-1] + [int(rng.integers(max(0, i - 20), i)) for i in range(1, n)])
    ids = rng.integers(1, n, size=64)
    d = Discriminator.initialize(0)
    args = (d.params[0:6:2], d.params[1:6:2], d.arch.strides, d.params[6], d.params[7])
    X = rng.normal(size=(64, 30, 6))
    packs = {k: k.pack_discriminator(*args) for k in (fallback, compiled) if k is not None}
    return {
        "fk_markers x512": lambda k: k.fk_markers(chain.axes, chain.links, chain.markers, Q),
        "capsules_hit_spheres x512": lambda k: k.capsules_hit_spheres(M, centers, radii, 0.03),
        "encode_markers 50 frames": lambda k: k.encode_markers(M[:50]),
        "encode_paths x64": lambda k: k.encode_paths(M[:n], parent, ids),
        "disc_forward_packed x64": lambda k: k.disc_forward_packed(X, packs[k]),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", action="store_true", help="print one JSON object per kernel")
    args = parser.parse_args()
    impls = [("numpy", fallback)] + ([("cython", compiled)] if compiled is not None else [])
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {"kernel": name}
        for label, impl in impls:
            number = 3
            best = min(timeit.repeat(lambda: fn(impl), number=number, repeat=args.repeat)) / number
            row[label + "_ms"] = round(best * 1e3, 4)
        if compiled is not None:
            row["speedup"] = round(row["numpy_ms"] / row["cython_ms"], 1)
        if args.json:
            print(json.dumps(row))
        else:
            print("  ".join(f"{k}={v}" for k, v in row.items()))


if __name__ == "__main__":
    main()
