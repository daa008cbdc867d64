"""Time the numba loop kernels against their vectorized numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20] [--scale 1.0]

With ``EXPERTRAG_DISABLE_NUMBA=1`` the loop kernels run as plain Python, which
shows what the compiled path buys.
"""

import argparse
import time

import numpy as np

from expertrag import kernels
from expertrag._accel import HAVE_NUMBA


def _best(fn, args, repeat):
    fn(*args)  # warm-up, includes compilation
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t)
    return best


def bm25_case(rng, n_docs, n_terms, density=0.05):
    starts, ends, doc_idx, tf = [], [], [], []
    for _ in range(n_terms):
        docs = np.flatnonzero(rng.random(n_docs) < density)
        starts.append(len(doc_idx))
        doc_idx.extend(docs)
        tf.extend(rng.integers(1, 6, size=docs.shape[0]))
        ends.append(len(doc_idx))
    lens = rng.integers(5, 200, size=n_docs).astype(float)
    return (np.array(starts, dtype=np.int64), np.array(ends, dtype=np.int64), np.array(doc_idx, dtype=np.int64),
            np.array(tf, dtype=float), rng.random(n_terms) + 0.1, lens, lens.mean(), 1.2, 0.75, n_docs)


def advantage_case(rng, n_groups):
    sizes = rng.integers(2, 17, size=n_groups)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    return rng.random(offsets[-1]), offsets


def choice_case(rng, n_dec, dim):
    sizes = rng.integers(2, 8, size=n_dec)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    chosen = np.array([rng.integers(0, s) for s in sizes], dtype=np.int64)
    return rng.normal(size=(offsets[-1], dim)), offsets, chosen, rng.normal(size=dim), 1.0, rng.normal(size=n_dec)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply problem sizes")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    s = args.scale

    cases = [
        ("bm25 (20k docs, 8 terms)", kernels.bm25_scores_loop, kernels.bm25_scores_numpy,
         bm25_case(rng, int(20_000 * s), 8)),
        ("advantages (10k groups)", kernels.group_advantages_loop, kernels.group_advantages_numpy,
         advantage_case(rng, int(10_000 * s))),
        ("surrogates (100k samples)", kernels.clipped_surrogates_loop, kernels.clipped_surrogates_numpy,
         (np.exp(rng.normal(scale=0.3, size=int(100_000 * s))), rng.normal(size=int(100_000 * s)), 0.2)),
        ("choice grad (5k decisions)", kernels.choice_grad_loop, kernels.choice_grad_numpy,
         choice_case(rng, int(5_000 * s), 64)),
    ]
    print(f"numba {'enabled' if HAVE_NUMBA else 'disabled'}; best of {args.repeat}")
    print(f"{'kernel':30s} {'loop ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, loop, vec, case in cases:
        a, b = _best(loop, case, args.repeat), _best(vec, case, args.repeat)
        print(f"{name:30s} {a * 1e3:10.3f} {b * 1e3:10.3f} {b / a:8.2f}x")


if __name__ == "__main__":
    main()
