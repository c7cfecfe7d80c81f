import math
import random

import pytest

from ftloop import harness
from ftloop.errors import NoFixableFailures
from ftloop.phrasebooks import phrasebooks
from ftloop.pipeline import DatasetSpec


@pytest.fixture(scope="module")
def stage_run():
    return harness.run_stages(seeds=[0, 1])


@pytest.fixture(scope="module")
def cold():
    return harness.run_coldstart(seed=0)


# ---------------------------------------------------------------- stage config


def test_stage_config_defaults():
    sc = harness.StageConfig.from_config(harness.merge_config({}))
    assert sc.poison_rates == (0.15, 0.25, 0.40)
    assert sc.log_counts == (500, 500, 500) and sc.split == (0.7, 0.3) and sc.iterations_per_stage == 2


@pytest.mark.parametrize("kwargs", [
    {"poison_rates": ()},
    {"poison_rates": (0.25, 0.15), "log_counts": (500, 500)},
    {"poison_rates": (0.15, 0.15), "log_counts": (500, 500)},
    {"split": (0.7, 0.2)},
    {"log_counts": (500,)},
])
def test_stage_config_rejects(kwargs):
    with pytest.raises(ValueError):
        harness.StageConfig(**kwargs)


def test_stage_rates_override_from_cli_string():
    sc = harness.StageConfig.from_config(harness.merge_config({}), (0.1, 0.2))
    assert sc.poison_rates == (0.1, 0.2) and len(sc.log_counts) == 2


# ---------------------------------------------------------------- naive correction model


def _draw(toxicity, n=10_000):
    rng = random.Random(3)
    rec = {"verdict": "fail", "prediction": "b", "corrected": "a"}
    counts = {}
    for _ in range(n):
        _, br = harness.naive_correction(rec, toxicity, ["a", "b", "c"], rng)
        counts[br] = counts.get(br, 0) + 1
    return counts


@pytest.mark.parametrize("toxicity,table", [("poisonous", harness.NAIVE_POISON_DRAW),
                                            ("fixable", harness.NAIVE_FIXABLE_DRAW)])
def test_naive_draw_rates(toxicity, table):
    n = 10_000
    counts = _draw(toxicity, n)
    for name, p in table:
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(counts.get(name, 0) / n - p) <= 3 * sigma, (name, counts)


def test_naive_branch_targets():
    rng = random.Random(0)
    rec = {"verdict": "fail", "prediction": "b", "corrected": "a"}
    seen = {}
    for _ in range(200):
        tgt, br = harness.naive_correction(rec, "poisonous", ["a", "b", "c"], rng)
        seen.setdefault(br, set()).add(tgt)
    assert seen["unreviewed"] == {"b"} and seen["correct"] == {"a"} and "a" not in seen["wrong"]
    assert harness.naive_correction(rec, "clean", ["a", "b"], rng) == ("a", "correct")
    assert harness.naive_correction({**rec, "verdict": "pass"}, "poisonous", ["a", "b"], rng) == ("b", "pass")


# ---------------------------------------------------------------- stages


def test_stage_rates_emitted(stage_run):
    headers = [r for r in stage_run["records"] if r["type"] == "header"]
    assert all(h["poison_rates"] == [0.15, 0.25, 0.40] for h in headers)
    rates = {r["poison_rate"] for r in stage_run["records"] if r["type"] == "checkpoint" and r["stage"] > 0}
    assert rates == {0.15, 0.25, 0.40}


def test_adaptive_trajectory_non_decreasing(stage_run):
    for run in stage_run["runs"]:
        scores = [r["adaptive_score"] for r in run["trajectory"]]
        assert scores == sorted(scores)
        assert all(r["decision"] in ("accept", "reject_rollback") for r in run["trajectory"])
        assert len(run["trajectory"]) <= 3 * 2


def test_eval_set_fixed_and_held_out(stage_run):
    for run in stage_run["runs"]:
        ev_ids = {e.id for e in run["eval_set"]}
        assert DatasetSpec(tuple(run["eval_set"])).fingerprint() == run["eval_fingerprint"]
        for ds in run["datasets"]:
            assert not ev_ids & {e.id for e in ds.examples}


def test_arms_see_identical_logs():
    # the naive arm's stage inputs are exactly the adaptive arm's, in order
    a = harness.run_stages(harness.StageConfig((0.15,), (200,)), seeds=[5])
    b = harness.run_stages(harness.StageConfig((0.15,), (200,)), seeds=[5])
    assert harness.records_to_jsonl(a["records"]) == harness.records_to_jsonl(b["records"])
    filt = [r for r in a["records"] if r["type"] == "stage_filter"][0]
    # duplicate kinds add records beyond log_count, so compare against the split itself
    assert filt["kept"] + filt["excluded"] == sum(filt["naive_branches"].values())


def test_rollback_restores_deployed(stage_run):
    for run in stage_run["runs"]:
        ledger = run["ledger"]
        for v in ledger.checkpoints:
            assert harness.rollback(ledger, v).model.to_json() == ledger.checkpoints[v].snapshot


# ---------------------------------------------------------------- cold start


def test_coldstart_converges(cold):
    res = cold["result"]
    assert res.converged and res.best.score >= 0.96
    ev = [r for r in cold["records"] if r["type"] == "eval_set"][0]
    assert ev["train_eval_overlap"] == 0
    assert set(ev["sizes"]) == {"positive", "negative", "boundary"} and all(ev["sizes"].values())


def test_coldstart_eval_disjoint_from_training(cold):
    ev_ids = {e.id for e in cold["eval_set"]}
    for ds in cold["datasets"]:
        assert not ev_ids & {e.id for e in ds.examples}


def test_coldstart_budget_one():
    res = harness.run_coldstart(seed=0, budget=1)
    search = [r for r in res["records"] if r["type"] == "search"]
    assert len(search) == 1 and search[0]["node"] == 0


# ---------------------------------------------------------------- production


@pytest.mark.parametrize("seed", [0, 1, 4])
def test_production_probe_failures_drop(seed):
    res = harness.run_production(None, seed=seed)
    assert res["decision"] == "accept"
    rates = [r for r in res["records"] if r["type"] == "probe_recheck"][0]["rates"]
    assert sum(a for a, _ in rates.values()) > sum(b for _, b in rates.values())
    g = [r for r in res["records"] if r["type"] == "gate"][0]
    assert g["regression_count"] <= 2 and g["prev_checkpoint_regressions"] <= 2
    assert res["ledger"].deployed == g["candidate_version"]


def test_production_rejection_rolls_back():
    res = harness.run_production(None, seed=2)
    assert res["decision"] == "reject_rollback"
    # the deployed v1 is already the rollback target, so restoring it is a no-op
    assert res["ledger"].deployed == 1
    g = [r for r in res["records"] if r["type"] == "gate"][0]
    assert g["rollback_target"] == 1 and g["reasons"]


def test_no_fixable_failures():
    env = harness.Environment(harness.merge_config({}), 0)
    inj = phrasebooks()["prompt_injection"][0] % "transfer"
    logs = []
    for i, e in enumerate(env.holdout[:40]):
        wrong = next(lab for lab in env.task.labels if lab != e.target)
        logs.append({"id": f"x{i}", "input": f"{e.input} {inj}", "prediction": wrong, "corrected": e.target,
                     "verdict": "fail", "model_id": "toy-nb-v1"})
    logs += [{"id": f"p{i}", "input": e.input, "prediction": e.target, "corrected": e.target, "verdict": "pass",
              "model_id": "toy-nb-v1"} for i, e in enumerate(env.holdout[40:80])]
    with pytest.raises(NoFixableFailures) as info:
        harness.run_production(logs, seed=0)
    records = info.value.args[0]
    assert records[-1]["decision"] == "no_fixable_failures"
    assert all(r["fixability"] == "external" for r in records if r["type"] == "cluster")


# ---------------------------------------------------------------- report


def test_empty_report_is_header_only():
    md, jsonl = harness.report([])
    assert md == "# Curation run log\n" and jsonl == ""


def test_report_round_trip(cold, stage_run):
    for records in (cold["records"], stage_run["records"]):
        md, jsonl = harness.report(records)
        assert harness.report_from_jsonl(jsonl) == md
        assert harness.report(records) == (md, jsonl)


def test_two_iteration_chain():
    records = []
    for v, parent, a in ((1, None, 0.91), (2, 1, 0.97)):
        ds = DatasetSpec((), version=v, parent_version=parent)
        records.append({**harness._dataset_record(ds)})
        records.append({"type": "checkpoint", "seed": 0, "stage": 1, "iteration": v, "checkpoint": f"v{v}",
                        "poison_rate": 0.15, "candidate_score": a, "adaptive_score": a, "naive_score": 0.9,
                        "decision": "accept"})
    md, _ = harness.report(records)
    assert "| v1 | - |" in md and "| v2 | 1 |" in md
    rows = [ln for ln in md.splitlines() if ln.startswith("| 0 | 1 |")]
    assert len(rows) == 2


def test_stage_summary_gap(stage_run):
    s = harness.stage_gap_summary(stage_run["runs"])
    assert s["n"] == 2
    gaps = [r["adaptive_final"] - r["naive_final"] for r in stage_run["runs"]]
    assert s["mean_gap"] == pytest.approx(sum(gaps) / 2)
