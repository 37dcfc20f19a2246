"""Time each hot kernel under the numpy fallback and the numba path.

Usage: python3 benchmarks/bench_kernels.py [--edges 50000] [--dim 64] [--repeat 5]

Both implementations are run on identical inputs and their outputs are
compared bit for bit before any timing is reported.
"""

import argparse
import timeit

import numpy as np

from hralert._kernels import NUMBA_IMPL, NUMPY_IMPL


def make_inputs(rng, n_edges, n_nodes, d, q_max, n_keys, n_values, n_queries):
    count = rng.integers(0, q_max + 1, size=n_edges)
    pad = np.full((n_edges, q_max, 2), -1, dtype=np.int64)
    for e in range(n_edges):
        pad[e, :count[e], 0] = rng.integers(n_keys, size=count[e])
        pad[e, :count[e], 1] = rng.integers(n_values, size=count[e])
    filt_len = rng.integers(0, 20, size=n_queries)
    return {
        "rows": rng.standard_normal((n_edges, d)),
        "index": rng.integers(n_nodes, size=n_edges),
        "n_nodes": n_nodes,
        "key_table": rng.standard_normal((n_keys, d)),
        "value_table": rng.standard_normal((n_values, d)),
        "pad": pad,
        "count": count,
        "scores": rng.standard_normal((n_queries, n_nodes)),
        "gold": rng.integers(n_nodes, size=n_queries),
        "filt_ptr": np.concatenate([[0], np.cumsum(filt_len)]),
        "filt_idx": rng.integers(n_nodes, size=int(filt_len.sum())),
    }


def calls(impl, x):
    d = x["rows"].shape[1]

    def scatter():
        out = np.zeros((x["n_nodes"], d))
        impl["scatter_add"](out, x["index"], x["rows"])
        return out

    def distmult():
        return impl["distmult_sum"](x["key_table"], x["value_table"], x["pad"], x["count"])

    def distmult_back():
        kg = np.zeros_like(x["key_table"])
        vg = np.zeros_like(x["value_table"])
        impl["distmult_backward"](x["rows"], x["key_table"], x["value_table"], x["pad"],
                                  x["count"], kg, vg)
        return np.concatenate([kg.ravel(), vg.ravel()])

    def ranks():
        return impl["filtered_ranks"](x["scores"], x["gold"], x["filt_ptr"], x["filt_idx"])

    return {"scatter_add": scatter, "distmult_sum": distmult,
            "distmult_backward": distmult_back, "filtered_ranks": ranks}


def best_time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--edges", type=int, default=50_000)
    parser.add_argument("--nodes", type=int, default=5_000)
    parser.add_argument("--dim", type=int, default=64)
    parser.add_argument("--queries", type=int, default=500)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if NUMBA_IMPL is None:
        raise SystemExit("numba is not importable; nothing to compare")

    x = make_inputs(np.random.default_rng(args.seed), args.edges, args.nodes, args.dim,
                    8, 4, 64, args.queries)
    numpy_calls, numba_calls = calls(NUMPY_IMPL, x), calls(NUMBA_IMPL, x)
    print(f"edges={args.edges} nodes={args.nodes} d={args.dim} queries={args.queries} "
          f"(best of {args.repeat}, numba timed after a warm-up call)")
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  identical")
    for name in numpy_calls:
        same = np.array_equal(numpy_calls[name](), numba_calls[name]())  # also JIT warm-up
        t_np = best_time(numpy_calls[name], args.repeat)
        t_nb = best_time(numba_calls[name], args.repeat)
        print(f"{name:<20}{t_np * 1e3:>12.2f}{t_nb * 1e3:>12.2f}{t_np / t_nb:>9.1f}x  {same}")


if __name__ == "__main__":
    main()
