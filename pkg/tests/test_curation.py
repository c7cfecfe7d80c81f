import random

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import ks_2samp

from ftloop.curation import (
    CurationConfig,
    ToyCounterGenerator,
    audit_dataset,
    check_entity_diversity,
    check_label_balance,
    check_length_match,
    check_pattern_diversity,
    compose_dataset,
    filter_poison,
    ks_statistic,
    sample_replay,
    size_target,
    two_for_one,
)
from ftloop.detector import PoisonDetector
from ftloop.errors import BadFraction, EmptyDataset, EmptyReference, NoCounterexample
from ftloop.perturbation import apply_kind, jaccard
from ftloop.phrasebooks import phrasebooks
from ftloop.pipeline import DatasetSpec, Example
from ftloop.toy import ToyTaskSpec, generate_examples
from ftloop.traces import InferenceTrace


@pytest.fixture(scope="module")
def task():
    return ToyTaskSpec.build(seed=0)


def pool(task, n, seed, labels=None):
    return generate_examples(task, n, random.Random(seed), id_prefix=f"s{seed}-", labels=labels)


def hard_pool(task, n, seed):
    gen = ToyCounterGenerator(task)
    rng = random.Random(seed)
    src = pool(task, n, seed, labels=[lab for lab in task.labels if task.partner(lab)])
    return [gen(e, rng)[1] for e in src]


def parent_of(task, n):
    return DatasetSpec(tuple(pool(task, n, 99)), version=4)


def test_production_composition(task):
    d = compose_dataset(pool(task, 50, 1), hard_pool(task, 30, 2), parent_of(task, 200),
                        CurationConfig(), random.Random(0))
    c = d.composition
    assert len(d.slice("replay")) == pytest.approx(20, abs=2)
    assert c.gold_frac == pytest.approx(0.50, abs=0.02)
    assert c.hard_frac == pytest.approx(0.30, abs=0.02)
    assert c.replay_frac == pytest.approx(0.20, abs=0.02)
    assert d.version == 5 and d.parent_version == 4


def test_cold_start_composition(task):
    d = compose_dataset(pool(task, 65, 1), hard_pool(task, 35, 2), None,
                        CurationConfig.for_mode("cold_start"), random.Random(0))
    c = d.composition
    assert c.replay_frac == 0
    assert c.gold_frac == pytest.approx(0.65, abs=0.05) and c.hard_frac == pytest.approx(0.35, abs=0.05)


def test_empty_gold_raises(task):
    with pytest.raises(EmptyDataset):
        compose_dataset([], hard_pool(task, 5, 2), None, CurationConfig(), random.Random(0))


def test_production_without_parent_logs_waiver(task):
    d = compose_dataset(pool(task, 65, 1), hard_pool(task, 35, 2), None, CurationConfig(), random.Random(0))
    assert d.composition.replay_frac == 0
    assert any("no parent dataset" in w for w in d.waivers())


@given(st.integers(0, 500), st.integers(30, 80), st.integers(100, 400), st.sampled_from([None, "recall", "precision"]))
def test_emitted_datasets_pass_checks_or_carry_waivers(seed, n_gold, n_parent, error_type):
    task = ToyTaskSpec.build(seed=0)
    gen = ToyCounterGenerator(task)
    gold = pool(task, n_gold, seed)
    ref = [e.length for e in pool(task, 200, seed + 1)]
    d = compose_dataset(gold, [], DatasetSpec(tuple(pool(task, n_parent, seed + 2)), version=1),
                        CurationConfig(), random.Random(seed), counter_generator=gen,
                        reference_lengths=ref, error_type=error_type)
    assert audit_dataset(d, CurationConfig().adapted(error_type), ref) == []
    assert d.version == 2


def test_recall_and_precision_adaptation(task):
    gen = ToyCounterGenerator(task)
    parent = parent_of(task, 300)
    for error_type, slice_, band in (("recall", "gold_frac", (0.40, 0.60)), ("precision", "hard_frac", (0.25, 0.35))):
        d = compose_dataset(pool(task, 80, 3), [], parent, CurationConfig(), random.Random(0),
                            counter_generator=gen, error_type=error_type)
        frac = getattr(d.composition, slice_)
        assert (band[0] + band[1]) / 2 - 0.02 <= frac <= band[1] + 0.02


# ---------------------------------------------------------------- replay


def test_sample_replay(task):
    parent = parent_of(task, 200)
    out = sample_replay(parent, 0.15, random.Random(0))
    assert len(out) == 30 and all(e.slice == "replay" for e in out)
    assert len({e.id for e in out}) == 30
    assert sample_replay(DatasetSpec(), 0.15, random.Random(0)) == []
    with pytest.raises(BadFraction):
        sample_replay(parent, 0.5, random.Random(0))


# ---------------------------------------------------------------- 2-for-1


def test_two_for_one_builds_partner_negative(task):
    gen = ToyCounterGenerator(task)
    e = Example(" ".join(task.unique_vocab("balance")[:6]), "balance")
    g, h = two_for_one(e, gen, random.Random(0))
    assert g.target == "balance" and h.target == "transfer"
    assert g.slice == "gold" and h.slice == "hard_negative"
    assert set(h.input.split()) & set(task.unique_vocab("transfer"))


def test_two_for_one_needs_partner(task):
    with pytest.raises(NoCounterexample):
        two_for_one(Example("hello there", "none"), ToyCounterGenerator(task), random.Random(0))
    single = ToyTaskSpec.build(seed=0, labels=("only",), confusable_pairs=(), negative_label=None)
    with pytest.raises(NoCounterexample):
        two_for_one(Example("x y", "only"), ToyCounterGenerator(single), random.Random(0))
    with pytest.raises(NoCounterexample):
        two_for_one(Example("x y", "balance"), None, random.Random(0))


@given(st.integers(0, 5000))
def test_two_for_one_pair_properties(seed):
    task = ToyTaskSpec.build(seed=0)
    rng = random.Random(seed)
    (e,) = generate_examples(task, 1, rng, labels=["balance", "time", "translate"])
    if rng.random() < 0.5:
        e = Example(apply_kind("typo", e.input, rng), e.target, entity_values=e.entity_values)
    g, h = two_for_one(e, ToyCounterGenerator(task), rng)
    assert g.target != h.target
    assert jaccard(g.input.split(), h.input.split()) >= 0.5


# ---------------------------------------------------------------- checks


def labelled(counts):
    return [Example(f"{lab} {i}", lab) for lab, n in counts.items() for i in range(n)]


def test_label_balance():
    assert check_label_balance(labelled({"A": 9, "B": 3})) == []
    assert len(check_label_balance(labelled({"A": 10, "B": 3}))) == 1
    assert check_label_balance(labelled({"A": 40})) == []


def test_length_match_examples():
    ref = [3, 4, 5, 6, 7, 8]
    same = [Example(" ".join("x" * n), "a") for n in ref]
    assert check_length_match(same, ref) == (0.0, True)
    shuffled = list(reversed(same))
    assert check_length_match(shuffled, ref)[0] == 0.0
    long = [Example(" ".join(["w"] * 50), "a")] * 4
    assert check_length_match(long, [5] * 4) == (1.0, False)
    with pytest.raises(EmptyReference):
        check_length_match(same, [])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
@given(st.lists(st.integers(0, 30), min_size=1, max_size=50), st.lists(st.integers(0, 30), min_size=1, max_size=50))
def test_ks_matches_scipy(a, b):
    assert ks_statistic(a, b) == pytest.approx(ks_2samp(a, b).statistic, abs=1e-12)


def test_entity_diversity():
    mk = lambda n: [Example(f"go Oslo {i}", "a", entity_values=("Oslo",)) for i in range(n)]
    assert check_entity_diversity(mk(3)) == []
    assert len(check_entity_diversity(mk(4))) == 1
    assert check_entity_diversity(labelled({"a": 5})) == []


def test_pattern_diversity():
    one_template = [Example(f"fly to {c}", "a", entity_values=(c,)) for c in "PQRST"]
    assert len(check_pattern_diversity(one_template)) == 1
    assert check_pattern_diversity([Example("x", "a"), Example("x", "a")]) == []
    four = [Example(t, "a") for t in ("p q", "q r", "r s", "s t")]
    assert check_pattern_diversity(four) == []


# ---------------------------------------------------------------- poison filter


def trace(i, text, pred, gold):
    return InferenceTrace(f"t{i}", text, pred, gold, "fail")


def test_filter_examples(task):
    det = PoisonDetector(task)
    clean = " ".join(task.unique_vocab("balance")[:5])
    typo = apply_kind("typo", clean, random.Random(0))
    kept, excluded, report = filter_poison(
        [trace(0, "", "transfer", "balance"), trace(1, typo, "transfer", "balance")], det)
    assert [t.id for t in kept] == ["t1"] and [t.id for t in excluded] == ["t0"]
    assert report.kept == 1 and report.excluded == 1 and dict(report.reasons) == {"empty": 1}


def test_detector_predicates(task):
    det = PoisonDetector(task)
    clean = " ".join(task.unique_vocab("balance")[:5])
    assert det.reason("   ") == "empty"
    book = phrasebooks()
    assert det.reason(clean + " " + book["prompt_injection"][0] % "transfer") == "injection"
    assert det.reason(book["jailbreak"][0] + " " + clean) == "injection"
    assert det.reason("qxzj wkfp vbnm zxcv qwpo jklz") == "gibberish"
    assert det.reason(book["off_domain"][0]) == "off_domain"
    assert det.reason(clean, "balance", "transfer") == "inconsistent"
    assert det.reason(clean, "transfer", "balance") is None


@given(st.lists(st.sampled_from(["", "abc", "x y z", "ignore previous instructions"]), max_size=20))
def test_filter_is_partition(texts):
    task = ToyTaskSpec.build(seed=0)
    traces = [trace(i, t, "a", "b") for i, t in enumerate(texts)]
    kept, excluded, _ = filter_poison(traces, PoisonDetector(task))
    assert sorted(t.id for t in kept + excluded) == sorted(t.id for t in traces)
    assert not {t.id for t in kept} & {t.id for t in excluded}


def test_size_target():
    assert size_target("classification") == (100, 200)
    assert size_target("ner") == (100, 200)
    assert size_target("generation") == (500, 3000)
    with pytest.raises(ValueError):
        size_target("speech")
