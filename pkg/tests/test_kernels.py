import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ks_2samp

from ftloop import _kernels as K

pytestmark = pytest.mark.skipif(not K._HAVE_NUMBA, reason="numba not importable")


def ragged(draw_lists, n_vocab):
    lengths = [len(x) for x in draw_lists]
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    flat = np.array([t % n_vocab for x in draw_lists for t in x], dtype=np.int64)
    return flat, offsets


docs = st.lists(st.lists(st.integers(0, 50), max_size=8), max_size=25)


@given(docs, st.integers(1, 5), st.integers(0, 2**31))
def test_accumulate_counts_agree(lists, n_labels, seed):
    rng = np.random.default_rng(seed)
    tok, off = ragged(lists, 13)
    labels = rng.integers(0, n_labels, len(lists))
    weights = rng.uniform(0.5, 4.0, len(lists))
    a = K._accumulate_counts_nb(tok, off, labels.astype(np.int64), weights, n_labels, 13)
    b = K.accumulate_counts_numpy(tok, off, labels, weights, n_labels, 13)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@given(docs, st.integers(1, 6), st.integers(0, 2**31))
def test_score_batch_agree(lists, n_labels, seed):
    rng = np.random.default_rng(seed)
    tok, off = ragged(lists, 11)
    lp = np.log(rng.dirichlet(np.ones(11), size=n_labels))
    ba, ca = K._score_batch_nb(lp, tok, off)
    bb, cb = K.score_batch_numpy(lp, tok, off)
    assert ba.tolist() == bb.tolist()
    np.testing.assert_allclose(ca, cb, rtol=0, atol=1e-12)


def test_score_batch_ties_pick_first_label():
    lp = np.zeros((3, 4))
    tok = np.array([0, 1, 2], dtype=np.int64)
    off = np.array([0, 3, 3], dtype=np.int64)
    for fn in (K._score_batch_nb, K.score_batch_numpy):
        best, conf = fn(lp, tok, off)
        assert best.tolist() == [0, 0]
        np.testing.assert_allclose(conf, [1 / 3, 1 / 3], atol=1e-15)


def test_empty_inputs():
    tok = np.zeros(0, dtype=np.int64)
    off = np.zeros(1, dtype=np.int64)
    empty = np.zeros(0, dtype=np.int64)
    assert K._accumulate_counts_nb(tok, off, empty, np.zeros(0), 2, 3).sum() == 0
    assert K.accumulate_counts_numpy(tok, off, empty, np.zeros(0), 2, 3).sum() == 0
    lp = np.zeros((2, 3))
    for fn in (K._score_batch_nb, K.score_batch_numpy):
        best, conf = fn(lp, tok, off)
        assert best.size == 0 and conf.size == 0


samples = st.lists(st.integers(0, 12).map(float), min_size=1, max_size=60)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@given(samples, samples)
def test_ks_agree_and_match_scipy(a, b):
    x, y = np.array(a), np.array(b)
    nb = K._ks_statistic_nb(x, y)
    npy = K.ks_statistic_numpy(x, y)
    assert abs(nb - npy) <= 1e-12
    assert abs(npy - ks_2samp(x, y).statistic) <= 1e-12


def test_pure_numpy_flag_selects_backend():
    code = ("from ftloop import _kernels as K, toy; import random, hashlib;"
            "t = toy.ToyTaskSpec.build(seed=0, unique_per_label=8, shared_per_pair=8, input_length_range=(3, 6));"
            "from ftloop.pipeline import HyperConfig;"
            "m = toy.train(toy.generate_examples(t, 60, random.Random(7)), HyperConfig(learning_rate=0.05), labels=t.labels);"
            "print(K.BACKEND, hashlib.sha256(m.to_json().encode()).hexdigest(),"
            " toy.score(m, toy.generate_examples(t, 200, random.Random(8))))")
    out = {}
    for flag in ("1", "0"):
        env = {**os.environ, "FTLOOP_PURE_NUMPY": flag}
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[flag] = res.stdout.split()
    assert out["1"][0] == "numpy" and out["0"][0] == "numba"
    assert out["1"][1:] == out["0"][1:]
