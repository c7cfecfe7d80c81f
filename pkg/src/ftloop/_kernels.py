"""Numeric inner loops for the count classifier and curation checks.

Every kernel has a numba implementation and a pure-numpy twin. Set
``FTLOOP_PURE_NUMPY=1`` before import to force the numpy path (also used
automatically when numba is not importable). Both paths agree to 1e-12.
"""

import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("FTLOOP_PURE_NUMPY", "") in ("", "0")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def accumulate_counts_numpy(token_ids, offsets, labels, weights, n_labels, n_vocab):
    counts = np.zeros((n_labels, n_vocab), dtype=np.float64)
    lengths = np.diff(offsets)
    row = np.repeat(labels, lengths)
    w = np.repeat(weights, lengths)
    np.add.at(counts, (row, token_ids), w)
    return counts


def score_batch_numpy(log_probs, token_ids, offsets):
    """Per-example argmax label and its posterior under a uniform prior."""
    n = len(offsets) - 1
    n_labels = log_probs.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    gathered = log_probs[:, token_ids]  # (L, T)
    sums = np.zeros((n_labels, n), dtype=np.float64)
    lengths = np.diff(offsets)
    nonempty = lengths > 0
    if token_ids.size:
        starts = offsets[:-1][nonempty]
        sums[:, nonempty] = np.add.reduceat(gathered, starts, axis=1)
    best = np.argmax(sums, axis=0)  # first max wins: lexical tie-break
    shifted = sums - sums[best, np.arange(n)]
    conf = 1.0 / np.exp(shifted).sum(axis=0)
    return best.astype(np.int64), conf


def ks_statistic_numpy(a, b):
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


# ---------------------------------------------------------------- numba path

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _accumulate_counts_nb(token_ids, offsets, labels, weights, n_labels, n_vocab):
        counts = np.zeros((n_labels, n_vocab), dtype=np.float64)
        for i in range(offsets.shape[0] - 1):
            lab = labels[i]
            w = weights[i]
            for j in range(offsets[i], offsets[i + 1]):
                counts[lab, token_ids[j]] += w
        return counts

    @numba.njit(cache=True)
    def _score_batch_nb(log_probs, token_ids, offsets):
        n = offsets.shape[0] - 1
        n_labels = log_probs.shape[0]
        best = np.zeros(n, dtype=np.int64)
        conf = np.zeros(n, dtype=np.float64)
        sums = np.zeros(n_labels, dtype=np.float64)
        for i in range(n):
            for lab in range(n_labels):
                s = 0.0
                for j in range(offsets[i], offsets[i + 1]):
                    s += log_probs[lab, token_ids[j]]
                sums[lab] = s
            arg = 0
            for lab in range(1, n_labels):
                if sums[lab] > sums[arg]:
                    arg = lab
            z = 0.0
            for lab in range(n_labels):
                z += np.exp(sums[lab] - sums[arg])
            best[i] = arg
            conf[i] = 1.0 / z
        return best, conf

    @numba.njit(cache=True)
    def _ks_statistic_nb(a, b):
        a = np.sort(a)
        b = np.sort(b)
        na = a.shape[0]
        nb = b.shape[0]
        i = 0
        j = 0
        d = 0.0
        while i < na and j < nb:
            x = min(a[i], b[j])
            while i < na and a[i] <= x:
                i += 1
            while j < nb and b[j] <= x:
                j += 1
            gap = abs(i / na - j / nb)
            if gap > d:
                d = gap
        return d


def accumulate_counts(token_ids, offsets, labels, weights, n_labels, n_vocab):
    token_ids = np.ascontiguousarray(token_ids, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if USE_NUMBA:
        return _accumulate_counts_nb(token_ids, offsets, labels, weights, n_labels, n_vocab)
    return accumulate_counts_numpy(token_ids, offsets, labels, weights, n_labels, n_vocab)


def score_batch(log_probs, token_ids, offsets):
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    token_ids = np.ascontiguousarray(token_ids, dtype=np.int64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    if USE_NUMBA:
        return _score_batch_nb(log_probs, token_ids, offsets)
    return score_batch_numpy(log_probs, token_ids, offsets)


def ks_statistic(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if USE_NUMBA:
        return float(_ks_statistic_nb(a, b))
    return ks_statistic_numpy(a, b)
