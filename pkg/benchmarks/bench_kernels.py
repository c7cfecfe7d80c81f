"""Time the numba kernels against their numpy twins on classifier-sized inputs.

    python benchmarks/bench_kernels.py [--docs N] [--repeat R]
"""

import argparse
import time

import numpy as np

from ftloop import _kernels as K


def make_inputs(n_docs, n_vocab, n_labels, seed=0):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(3, 9, n_docs)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    tokens = rng.integers(0, n_vocab, offsets[-1]).astype(np.int64)
    labels = rng.integers(0, n_labels, n_docs).astype(np.int64)
    weights = np.full(n_docs, 2.0)
    log_probs = np.log(rng.dirichlet(np.ones(n_vocab), size=n_labels))
    lens_a = rng.integers(2, 20, n_docs).astype(np.float64)
    lens_b = rng.integers(2, 20, n_docs // 2).astype(np.float64)
    return tokens, offsets, labels, weights, log_probs, lens_a, lens_b


def best_of(fn, repeat):
    fn()  # warm up (and trigger compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--docs", type=int, default=200_000)
    ap.add_argument("--vocab", type=int, default=400)
    ap.add_argument("--labels", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    tok, off, lab, w, lp, la, lb = make_inputs(args.docs, args.vocab, args.labels)
    cases = {
        "accumulate_counts": (lambda: K._accumulate_counts_nb(tok, off, lab, w, args.labels, args.vocab),
                              lambda: K.accumulate_counts_numpy(tok, off, lab, w, args.labels, args.vocab)),
        "score_batch": (lambda: K._score_batch_nb(lp, tok, off),
                        lambda: K.score_batch_numpy(lp, tok, off)),
        "ks_statistic": (lambda: K._ks_statistic_nb(la, lb),
                         lambda: K.ks_statistic_numpy(la, lb)),
    }
    print(f"{args.docs} docs, vocab {args.vocab}, {args.labels} labels, best of {args.repeat}")
    print(f"{'kernel':<20}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for name, (nb, npy) in cases.items():
        t_nb = best_of(nb, args.repeat)
        t_np = best_of(npy, args.repeat)
        print(f"{name:<20}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
