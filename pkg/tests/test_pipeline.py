import io
import json

import pytest
from hypothesis import given, strategies as st

from ftloop.errors import EmptyDataset
from ftloop.pipeline import (
    DatasetSpec,
    Example,
    HyperConfig,
    Pipeline,
    StrategySpec,
    composition_ratios,
    read_dataset,
    validate_pipeline,
    write_dataset,
)

from conftest import make_dataset


def test_cold_start_without_replay_is_valid():
    p = Pipeline(make_dataset(65, 35), mode="cold_start")
    assert validate_pipeline(p) == []


def test_cold_start_with_replay_is_flagged():
    p = Pipeline(make_dataset(60, 30, 10), mode="cold_start")
    assert "replay in cold start" in validate_pipeline(p)


def test_zero_epochs_is_flagged():
    p = Pipeline(make_dataset(50, 30, 20), HyperConfig(epochs=0), mode="production", parent_dataset_size=200)
    assert "epochs ≥ 1" in validate_pipeline(p)


def test_production_with_parent_needs_replay():
    p = Pipeline(make_dataset(60, 40), mode="production", parent_dataset_size=100)
    assert any("lacks replay" in v for v in validate_pipeline(p))
    assert validate_pipeline(Pipeline(make_dataset(60, 40), mode="production")) == []


def test_chain_of_thought_needs_teacher():
    p = Pipeline(make_dataset(5), strategy=StrategySpec("chain_of_thought"))
    assert "chain_of_thought requires a teacher_id" in validate_pipeline(p)
    p = Pipeline(make_dataset(5), strategy=StrategySpec("chain_of_thought", teacher_id="toy-teacher"))
    assert validate_pipeline(p) == []


def test_version_must_exceed_parent():
    p = Pipeline(make_dataset(5, version=2, parent_version=2))
    assert any("parent_version" in v for v in validate_pipeline(p))


def test_bad_hyper_fields():
    h = HyperConfig(learning_rate=0.0, batch_size=0)
    out = validate_pipeline(Pipeline(make_dataset(3), h))
    assert "learning_rate > 0" in out and "batch_size ≥ 1" in out


def test_empty_input_only_allowed_for_probes():
    d = DatasetSpec((Example("", "a"),))
    assert validate_pipeline(Pipeline(d))
    d = DatasetSpec((Example("", "a", provenance="probe"),))
    assert validate_pipeline(Pipeline(d)) == []


@pytest.mark.parametrize(
    "counts, expected",
    [((50, 30, 20), (0.50, 0.30, 0.20)), ((65, 35, 0), (0.65, 0.35, 0.0)), ((1, 0, 0), (1.0, 0.0, 0.0))],
)
def test_composition_ratios(counts, expected):
    c = composition_ratios(make_dataset(*counts))
    assert (c.gold_frac, c.hard_frac, c.replay_frac) == pytest.approx(expected, abs=1e-12)


def test_composition_of_empty_dataset_raises():
    with pytest.raises(EmptyDataset):
        composition_ratios(DatasetSpec())


@given(st.integers(0, 60), st.integers(0, 60), st.integers(0, 60))
def test_fractions_sum_to_one(g, h, r):
    if g + h + r == 0:
        return
    c = composition_ratios(make_dataset(g, h, r))
    assert abs(c.gold_frac + c.hard_frac + c.replay_frac - 1.0) <= 1e-9


@given(st.text(alphabet=" ab\tc\n", max_size=40))
def test_length_is_recomputed(text):
    assert Example(text, "x").length == len(text.split())


def test_validate_is_idempotent_and_pure():
    p = Pipeline(make_dataset(60, 30, 10), HyperConfig(epochs=0), mode="cold_start")
    before = repr(p)
    assert validate_pipeline(p) == validate_pipeline(p)
    assert repr(p) == before


def test_jsonl_roundtrip_uses_exact_field_names():
    d = DatasetSpec((Example("pay Oslo", "balance", "gold", "synthesized", ("Oslo",)),), version=3, parent_version=2)
    buf = io.StringIO()
    write_dataset(d, buf)
    lines = buf.getvalue().splitlines()
    header, rec = json.loads(lines[0]), json.loads(lines[1])
    assert header["version"] == 3 and header["parent_version"] == 2
    assert {"input", "target", "slice", "length", "entity_values", "provenance"} <= set(rec)
    back = read_dataset(lines)
    assert back.examples == d.examples and back.version == 3
