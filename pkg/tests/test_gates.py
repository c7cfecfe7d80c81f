import json
import os
import random

import pytest
from hypothesis import given, strategies as st
from sklearn.feature_extraction.text import TfidfVectorizer

from ftloop.errors import BadProbability, EmptyRegressionSet, UnknownVersion
from ftloop.gates import (
    GateOverride,
    Ledger,
    TfidfIndex,
    calibrate_confidence,
    converged,
    cosine,
    cross_regressions,
    gate,
    gate_decision,
    label_accuracy_table,
    propagate_correction,
    regression_count,
    rollback,
)
from ftloop.pipeline import DatasetSpec, Example, HyperConfig
from ftloop.toy import ToyTaskSpec, generate_examples, train
from ftloop.traces import InferenceTrace

from oracles import calibrated

unit = st.floats(0.0, 1.0, allow_nan=False)


class Fixed:
    """Stand-in model that answers from a lookup table."""

    def __init__(self, answers):
        self.answers = answers

    def predict_many(self, texts):
        return [(self.answers.get(t, "?"), 1.0) for t in texts]


def items(n, label="a"):
    return [Example(f"item {i}", label) for i in range(n)]


# ---------------------------------------------------------------- regression count


def test_regression_count_examples():
    R = items(10)
    assert regression_count(Fixed({e.input: "a" for e in R}), R) == 0
    assert regression_count(Fixed({}), R) == 10
    R = items(198)
    model = Fixed({e.input: ("a" if i else "b") for i, e in enumerate(R)})
    r = regression_count(model, R)
    assert r == 1 and gate_decision(0.993, r, None, None).accepted
    with pytest.raises(EmptyRegressionSet):
        regression_count(model, [])


def test_regression_count_reads_trace_corrections():
    t = InferenceTrace("t1", "item 0", "a", "a", "pass")
    assert regression_count(Fixed({"item 0": "b"}), [t]) == 1


@pytest.mark.parametrize("size", [50, 100, 200, 400])
def test_epsilon_is_an_absolute_count(size):
    # a model wrong on 1% of R: the verdict flips with the count, not the rate
    R = items(size)
    wrong = size // 100
    model = Fixed({e.input: ("b" if i < wrong else "a") for i, e in enumerate(R)})
    r = regression_count(model, R)
    assert r == wrong
    assert gate_decision(0.99, r, None, None).accepted == (r <= 2)


# ---------------------------------------------------------------- decision rule


def test_epsilon_boundary():
    assert gate_decision(0.99, 2, None, None).accepted
    res = gate_decision(0.99, 3, None, None)
    assert res.decision == "reject_rollback"
    assert not gate_decision(1.0, 3, None, None).accepted


def test_tau_boundary():
    assert gate_decision(0.96, 0, None, None).accepted
    assert not gate_decision(0.9599999, 0, None, None).accepted


def test_cross_checkpoint_boundary():
    assert gate_decision(0.99, 0, 2, None).accepted
    res = gate_decision(0.99, 0, 3, None, best_version=4)
    assert not res.accepted and res.rollback_target == 4


def test_clinc_decision_pattern():
    v1 = gate_decision(0.993, 1, None, None)
    assert v1.accepted
    v2 = gate_decision(0.985, 1, 0, 0.993, best_version=1)
    assert v2.decision == "reject_rollback" and v2.rollback_target == 1


def test_override_needs_justification():
    with pytest.raises(ValueError):
        GateOverride(tau=0.9)
    res = gate_decision(0.92, 0, None, None, override=GateOverride(tau=0.9, justification="plateau over 3 rounds"))
    assert res.accepted and res.justification == "plateau over 3 rounds" and res.tau == 0.9


@given(unit, st.integers(0, 6), st.one_of(st.none(), st.integers(0, 6)), st.one_of(st.none(), unit))
def test_accept_implies_all_conditions(a, r, prev, best):
    res = gate_decision(a, r, prev, best)
    if res.accepted:
        assert a >= 0.96 and r <= 2 and (prev is None or prev <= 2)
        assert res.rollback_target is None


@given(st.lists(st.tuples(unit, st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=30))
def test_deployed_sequence_ratchets(candidates):
    deployed = [0.0]
    for a, r, prev in candidates:
        res = gate_decision(a, r, prev, deployed[-1], tau=0.0)
        if res.accepted:
            deployed.append(a)
    assert deployed == sorted(deployed)


def test_converged():
    assert converged(0.96, None, mode="cold_start")
    assert not converged(0.97, 3, mode="production")
    assert converged(0.97, 2, mode="production")
    assert not converged(0.97, None, mode="production")


# ---------------------------------------------------------------- gate on real models


@pytest.fixture(scope="module")
def models():
    task = ToyTaskSpec.build(seed=0, unique_per_label=8, shared_per_pair=8, input_length_range=(3, 6))
    rng = random.Random(0)
    data = generate_examples(task, 120, rng)
    good = train(data, HyperConfig(learning_rate=0.05), labels=task.labels, model_id="v1")
    flipped = [Example(e.input, "none") if i % 3 == 0 else e for i, e in enumerate(data)]
    bad = train(flipped, HyperConfig(learning_rate=0.05), labels=task.labels, model_id="v2")
    ev = generate_examples(task, 150, random.Random(1))
    prev = generate_examples(task, 150, random.Random(2))
    return task, data, good, bad, ev, prev


def test_gate_uses_both_eval_sets(models):
    task, data, good, bad, ev, prev = models
    R = [e for e, (p, _) in zip(ev, good.predict_many([e.input for e in ev])) if p == e.target]
    res = gate(bad, good, ev, R, prev_eval_set=prev, tau=0.0, epsilon=1000, best_version=1)
    assert res.prev_checkpoint_regressions == cross_regressions(bad, good, prev) > 0
    strict = gate(bad, good, ev, R, prev_eval_set=prev, tau=0.0, epsilon=2, best_version=1)
    assert strict.decision == "reject_rollback" and strict.rollback_target == 1
    same = gate(good, good, ev, R, prev_eval_set=prev, tau=0.0)
    assert same.accepted and same.regression_count == 0 and same.prev_checkpoint_regressions == 0


def test_rollback_restores_byte_equal_snapshot(models, tmp_path):
    task, data, good, bad, ev, prev = models
    ledger = Ledger()
    d1 = DatasetSpec(tuple(data), version=1)
    d2 = DatasetSpec(tuple(Example(e.input, "none") if i % 3 == 0 else e for i, e in enumerate(data)),
                     version=2, parent_version=1)
    ledger.commit(1, d1, HyperConfig(learning_rate=0.05, model_id="v1"), good)
    ledger.deploy(1)
    ledger.commit(2, d2, HyperConfig(learning_rate=0.05, model_id="v2"), bad)
    ledger.deploy(2)
    restored = rollback(ledger, 1)
    assert ledger.deployed == 1
    assert restored.model.to_json() == good.to_json()
    assert rollback(ledger, 1).model.to_json() == good.to_json()
    with pytest.raises(UnknownVersion):
        rollback(ledger, 9)
    ledger.save(str(tmp_path))
    assert (tmp_path / "snapshots" / "v1.json").read_text() == good.to_json()
    kinds = [json.loads(ln)["type"] for ln in (tmp_path / "ledger.jsonl").read_text().splitlines()]
    assert kinds == ["checkpoint", "deploy", "checkpoint", "deploy", "rollback"]


def test_rollback_with_warm_start(models):
    task, data, good, bad, ev, prev = models
    ledger = Ledger()
    d = DatasetSpec(tuple(ev[:40]), version=2)
    h = HyperConfig(learning_rate=0.05, model_id="v2")
    model = train(tuple(data) + d.examples, h, labels=task.labels)
    ledger.commit(2, d, h, model, warm_start=data)
    assert rollback(ledger, 2).model.to_json() == model.to_json()


# ---------------------------------------------------------------- calibration


def test_calibration_examples():
    assert calibrate_confidence(0.9, 0.5, 0.7) == pytest.approx(0.62, abs=1e-12)
    assert calibrate_confidence(0.9, 0.5, 0.0) == 0.9
    assert calibrate_confidence(0.9, 0.5, 1.0) == 0.5
    with pytest.raises(BadProbability):
        calibrate_confidence(1.2, 0.5)
    with pytest.raises(BadProbability):
        calibrate_confidence(0.5, float("nan"))


@given(unit, unit, unit)
def test_calibration_formula(raw, acc, w):
    assert abs(calibrate_confidence(raw, acc, w) - calibrated(raw, acc, w)) <= 1e-12


@given(unit, unit, unit, unit)
def test_calibration_monotone(r1, r2, acc, w):
    lo, hi = sorted((r1, r2))
    assert calibrate_confidence(lo, acc, w) <= calibrate_confidence(hi, acc, w) + 1e-15
    assert calibrate_confidence(acc, lo, w) <= calibrate_confidence(acc, hi, w) + 1e-15


def test_label_accuracy_table():
    assert label_accuracy_table([("a", True), ("a", False), ("b", True)]) == {"a": 0.5, "b": 1.0}


# ---------------------------------------------------------------- TF-IDF propagation


def tr(i, text, corrected=None):
    return InferenceTrace(f"p{i}", text, "x", corrected, "fail" if corrected else "pass")


def test_propagation_examples():
    src = tr(0, "move money to savings now", "transfer")
    pool = [tr(1, "move money to savings now"), tr(2, "what time is it"), tr(3, "move money to savings later")]
    out = {p.id: p for p in propagate_correction(src, pool)}
    assert out["p1"].similarity == pytest.approx(1.0) and out["p1"].correction == "transfer"
    assert "p2" not in out
    assert TfidfIndex(["a b", "c d"]).similarity(0, 1) == 0.0


docs = st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=6).map(" ".join), min_size=2, max_size=8)


@given(docs)
def test_tfidf_matches_sklearn(texts):
    idx = TfidfIndex(texts)
    vec = TfidfVectorizer(token_pattern=r"\S+", lowercase=False, smooth_idf=True, norm="l2")
    m = vec.fit_transform(texts)
    sims = (m @ m.T).toarray()
    for i in range(len(texts)):
        for j in range(len(texts)):
            assert idx.similarity(i, j) == pytest.approx(sims[i, j], abs=1e-12)


@given(docs)
def test_cosine_properties(texts):
    idx = TfidfIndex(texts)
    for i in range(len(texts)):
        assert idx.similarity(i, i) == pytest.approx(1.0, abs=1e-12)
        for j in range(len(texts)):
            s = idx.similarity(i, j)
            assert 0.0 <= s <= 1.0
            assert abs(s - idx.similarity(j, i)) <= 1e-12
    assert cosine({}, {"a": 1.0}) == 0.0
