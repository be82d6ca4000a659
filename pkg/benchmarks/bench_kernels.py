"""Time the numba kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N]

Sizes mirror a training minibatch: a stacked batch of window graphs for the
message-passing sums and a few thousand transitions for the advantage pass.
"""
import argparse
import timeit

import numpy as np

from stagedefense import kernels


def cases(rng):
    n_nodes, n_edges, width, n_graphs = 60_000, 150_000, 32, 1_500
    values = rng.standard_normal((n_nodes, width))
    graph_ids = np.sort(rng.integers(0, n_graphs, n_nodes))
    src, dst = rng.integers(0, n_nodes, n_edges), rng.integers(0, n_nodes, n_edges)
    T = 4096
    r, v, nv = rng.standard_normal(T), rng.standard_normal(T), rng.standard_normal(T)
    done = (rng.random(T) < 0.013).astype(float)
    return {
        "segment_sum": lambda nb: kernels.segment_sum(values, graph_ids, n_graphs, use_numba=nb),
        "gather_segment_sum": lambda nb: kernels.gather_segment_sum(values, src, dst, n_nodes,
                                                                    use_numba=nb),
        "gae": lambda nb: kernels.gae(r, v, nv, done, 0.99, 0.95, use_numba=nb),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not kernels.HAS_NUMBA:
        raise SystemExit("numba is unavailable or disabled; nothing to compare")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, fn in cases(np.random.default_rng(0)).items():
        fn(True)    # compile outside the timed region
        assert np.array_equal(fn(True), fn(False))
        t_np = min(timeit.repeat(lambda: fn(False), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: fn(True), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<20} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
