"""Time the compiled and numpy backends on the hot kernels.

Run ``python benchmarks/bench_kernels.py``; pass ``--repeat N`` to change
the number of timed calls. Shapes match a training step with B=100, C=10,
a_k=a_g=50 and s=3.
"""
import argparse
import timeit

import numpy as np

from nonfat import core
from nonfat.quadrature import gauss_laguerre


def cases(rng):
    rule = gauss_laguerre(10)
    X = rng.normal(size=(100, 3))
    Z = rng.normal(size=(50, 3))
    V = rng.normal(size=(100, 6))
    U = rng.normal(size=(50, 6))
    K = np.exp(-((X[:, None] - Z[None]) ** 2).sum(-1))
    G = rng.normal(size=K.shape)
    alpha = rng.normal(size=(300, 10))
    t = rng.uniform(size=300)
    g = rng.normal(size=300)
    return {
        "sq_dist 100x50x3": lambda be: be.sq_dist(X, Z),
        "se_cross 100x50x6": lambda be: be.se_cross(V, U, 1.3),
        "se_cross_grad 100x50x3": lambda be: be.se_cross_grad(X, Z, K, G, 1.3),
        "gl_synth 300x10": lambda be: be.gl_synth(alpha, t, rule.nodes, rule.weights),
        "gl_synth_grad 300x10": lambda be: be.gl_synth_grad(g, t, rule.nodes, rule.weights),
        "laguerre_rule 20": lambda be: be.laguerre_rule(20),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    names = core.available_backends()
    if "cython" not in names:
        print("compiled core not built; timing the numpy backend only")
    table = cases(np.random.default_rng(0))
    print(f"{'kernel':<26}" + "".join(f"{n + ' (us)':>16}" for n in names) + f"{'speedup':>10}")
    for label, fn in table.items():
        times = []
        for name in names:
            be = core.get_backend(name)
            fn(be)
            times.append(timeit.timeit(lambda: fn(be), number=args.repeat) / args.repeat * 1e6)
        speed = f"{times[0] / times[1]:9.1f}x" if len(times) == 2 else ""
        print(f"{label:<26}" + "".join(f"{t:16.1f}" for t in times) + f" {speed}")


if __name__ == "__main__":
    main()
