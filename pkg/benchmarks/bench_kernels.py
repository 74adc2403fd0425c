"""Time the graph-construction kernels on the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--nodes 3073 --k 12 --dim 128 --repeat 5]

The default size is one full-scale graph: a 3072-slot buffer plus one query.
Outputs of the two backends are compared before timing.
"""

import argparse
import statistics
import time

import numpy as np

from slidegcd import _kernels as kern


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times), statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=3073)
    ap.add_argument("--k", type=int, default=12)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    P = rng.normal(size=(args.nodes, args.dim))
    nbrs = kern.knn_indices_numpy(P, args.k)
    edges = np.hstack([np.arange(args.nodes)[:, None], nbrs])

    kernels = {
        "knn": (lambda f: f(P, args.k), "knn_indices"),
        "hypergraph operator": (lambda f: f(edges, args.nodes), "hypergraph_operator"),
        "gcn operator": (lambda f: f(edges, args.nodes), "gcn_operator"),
    }
    print(f"N={args.nodes} k={args.k} D={args.dim} repeat={args.repeat}; numba available: {kern.HAVE_NUMBA}")
    print(f"{'kernel':<22}{'numpy best':>12}{'numba best':>12}{'speedup':>9}")
    for label, (call, name) in kernels.items():
        np_fn = getattr(kern, f"{name}_numpy")
        t_np, _ = best_of(lambda: call(np_fn), args.repeat)
        if not kern.HAVE_NUMBA:
            print(f"{label:<22}{t_np:>11.4f}s{'n/a':>12}{'':>9}")
            continue
        nb_fn = getattr(kern, f"{name}_numba")
        ref, got = call(np_fn), call(nb_fn)  # also triggers compilation
        if not np.allclose(ref, got, rtol=0, atol=1e-12):
            raise SystemExit(f"{label}: backends disagree")
        t_nb, _ = best_of(lambda: call(nb_fn), args.repeat)
        print(f"{label:<22}{t_np:>11.4f}s{t_nb:>11.4f}s{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
