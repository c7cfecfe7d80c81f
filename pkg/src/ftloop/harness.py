"""End-to-end runs: cold start, production repair, and the staged adaptive-vs-naive protocol."""

from __future__ import annotations

import copy
import json
import math
import random
import statistics
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

from .curation import (
    CurationConfig,
    ToyCounterGenerator,
    compose_dataset,
    filter_poison,
    two_for_one,
)
from .detector import PoisonDetector
from .errors import InfeasibleComposition, NoCounterexample, NoFixableFailures, UnsupportedProbe
from .gates import GateOverride, Ledger, gate, gate_decision, regression_count, rollback
from .logs import generate_logs
from .perturbation import overall_toxicity
from .pipeline import DatasetSpec, Example, HyperConfig, Pipeline, StrategySpec
from .search import Budget, EvalResult, RuleProposer, SearchContext, run_search
from .toy import ToyModel, ToyTaskSpec, generate_examples, score, toy_rationale, train
from .traces import (
    ConfusionClusterer,
    ConfusionProbeGenerator,
    ModelRegistry,
    build_regression_set,
    build_taxonomy,
    dominant_error_type,
    ingest,
    parent_lineage,
    partition,
    probe,
)

TEACHER_ID = "toy-teacher"
BASE_MODEL_ID = "toy-nb-base"

DEFAULT_CONFIG: dict = {
    "task": {},
    "clean_pool": 150,
    "hyper": {"model_id": BASE_MODEL_ID, "learning_rate": 0.1, "epochs": 2, "batch_size": 8, "lora_rank": 16},
    "eval": {"per_label": 12, "boundary": 36},
    "budget": {"cold": 60, "production": 30, "stagnation_window": 3, "top_k": 3},
    "tau": 0.96,
    "epsilon": 2,
    "logs": {"count": 1500},
    "production": {"regression_fraction": 0.3, "probes_per_cluster": 20, "max_probe_clusters": 6},
    "stages": [
        {"poison_rate": 0.15, "log_count": 500},
        {"poison_rate": 0.25, "log_count": 500},
        {"poison_rate": 0.40, "log_count": 500},
    ],
    "split": [0.7, 0.3],
    "iterations_per_stage": 2,
    # the staged scenario runs a harder, low-smoothing variant so that label noise can bite
    "stage_profile": {
        "task": {"input_length_range": [3, 6], "unique_per_label": 8, "shared_per_pair": 8},
        "hyper": {"learning_rate": 0.001},
    },
}


def merge_config(overrides: dict | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    for k, v in (overrides or {}).items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    return cfg


def extract_entities(text: str, task: ToyTaskSpec) -> tuple[str, ...]:
    pool = set(task.entity_pool)
    return tuple(t for t in text.split() if t in pool)


# ---------------------------------------------------------------- environment


@dataclass
class Environment:
    """Task, clean pool, the deployed v1 checkpoint and its registry, all derived from (config, seed)."""

    cfg: dict
    seed: int
    task: ToyTaskSpec = field(init=False)
    hyper: HyperConfig = field(init=False)
    clean: DatasetSpec = field(init=False)
    model: ToyModel = field(init=False)
    registry: ModelRegistry = field(init=False)
    holdout: list[Example] = field(init=False)

    def __post_init__(self):
        task_cfg = dict(self.cfg.get("task") or {})
        task_cfg.setdefault("seed", self.seed)
        self.task = ToyTaskSpec.from_config(task_cfg)
        self.hyper = HyperConfig(**self.cfg["hyper"])
        rng = self.rng("clean")
        pool = generate_examples(self.task, self.cfg["clean_pool"], rng, id_prefix="clean-")
        self.clean = DatasetSpec(tuple(pool), version=1)
        self.model = train(self.clean, self.hyper, labels=self.task.labels, model_id="toy-nb-v1")
        self.registry = ModelRegistry(base_ids={BASE_MODEL_ID}, runs={"toy-nb-v1": self.clean})
        self.holdout = generate_examples(self.task, 100, self.rng("holdout"), id_prefix="holdout-")

    def rng(self, purpose: str) -> random.Random:
        return random.Random(f"{self.seed}:{purpose}")

    @property
    def detector(self) -> PoisonDetector:
        return PoisonDetector(self.task)


def train_pipeline(p: Pipeline, task: ToyTaskSpec, warm_start: Sequence[Example] = ()) -> ToyModel:
    """Train ``p``; a warm start continues from a checkpoint by replaying its examples first."""
    rationale = toy_rationale(task) if p.strategy.supervision_format == "chain_of_thought" else None
    return train(tuple(warm_start) + p.dataset.examples, p.hyper, labels=task.labels, rationale=rationale,
                 model_id=p.hyper.model_id)


def failure_info(model: ToyModel, eval_set: Sequence[Example]) -> dict:
    preds = model.predict_many([e.input for e in eval_set])
    pairs = Counter((e.target, p) for e, (p, _) in zip(eval_set, preds) if p != e.target)
    ranked = sorted(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
    return {
        "worst_confusion": list(ranked[0][0]) if ranked else None,
        "failure_patterns": [list(k) for k, _ in ranked],
    }


class ToyDataOps:
    """Dataset moves the rule proposer can apply, all re-passed through compose_dataset."""

    def __init__(self, task: ToyTaskSpec, cfg: CurationConfig, parent: DatasetSpec | None,
                 gold_source: Callable[[random.Random], list[Example]],
                 reference_lengths: Sequence[int] | None = None, error_type: str | None = None):
        self.task = task
        self.cfg = cfg
        self.parent = parent
        self.gold_source = gold_source
        self.counter = ToyCounterGenerator(task)
        self.reference_lengths = list(reference_lengths or [])
        self.error_type = error_type
        self.emitted: list[DatasetSpec] = []
        self.next_version = (parent.version + 1) if parent is not None else 1

    def compose(self, gold, hard, rng, base: DatasetSpec | None = None, cfg: CurationConfig | None = None):
        # every emitted dataset gets a fresh version; its parent is the dataset it was derived from
        self.next_version = max(self.next_version, (base.version if base is not None else 0) + 1)
        version = self.next_version
        self.next_version += 1
        parent_version = base.version if base is not None else None
        d = compose_dataset(gold, hard, self.parent, cfg or self.cfg, rng, counter_generator=self.counter,
                            reference_lengths=self.reference_lengths or None, error_type=self.error_type,
                            version=version, parent_version=parent_version)
        self.emitted.append(d)
        return d

    def regenerate_gold(self, p: Pipeline, rng: random.Random) -> DatasetSpec:
        return self.compose(self.gold_source(rng), [], rng, p.dataset)

    def add_hard_negatives(self, p: Pipeline, confusion: Sequence[str], rng: random.Random) -> DatasetSpec:
        gold = list(p.dataset.slice("gold"))
        hard = list(p.dataset.slice("hard_negative"))
        src = [e for e in gold if e.target == confusion[0]] or [e for e in gold if self.counter.supports(e.target)]
        n = max(4, len(hard) // 3)
        for e in (rng.sample(src, min(n, len(src))) if src else []):
            try:
                _, h = two_for_one(e, self.counter, rng)
            except NoCounterexample:
                continue
            hard.append(replace(h, id=f"{h.id}-x{len(hard)}"))
        return self.compose(gold, hard, rng, p.dataset)

    def rebalance(self, p: Pipeline, rng: random.Random) -> DatasetSpec:
        tight = replace(self.cfg, max_label_ratio=2.0)
        return self.compose(list(p.dataset.slice("gold")), list(p.dataset.slice("hard_negative")), rng,
                            p.dataset, tight)

    def surgical(self, p: Pipeline, patterns: Sequence[Sequence[str]], per_pattern: int,
                 rng: random.Random) -> DatasetSpec:
        gold = list(p.dataset.slice("gold"))
        for gl, pred in patterns:
            if gl not in self.task.vocab:
                continue
            other = pred if pred in self.task.vocab and pred != gl else self.task.partner(gl)
            for j in range(min(per_pattern, 3)):
                toks = [rng.choice(self.task.vocab[gl]) for _ in range(rng.randint(*self.task.input_length_range))]
                if other:
                    pool = self.task.unique_vocab(other) or self.task.vocab[other]
                    toks[rng.randrange(len(toks))] = rng.choice(pool)
                gold.append(Example(" ".join(toks), gl, provenance="synthesized",
                                    id=f"surg-{p.dataset.version}-{gl}-{pred}-{j}"))
        return self.compose(gold, list(p.dataset.slice("hard_negative")), rng, p.dataset)

    def recompose(self, p: Pipeline) -> Pipeline:
        """Re-run composition on a fused dataset only if its bands slipped."""
        comp = p.dataset.composition
        bands = self.cfg.bands if self.parent is not None else CurationConfig.for_mode("cold_start").bands
        ok = all(bands[k][0] - self.cfg.slack <= v <= bands[k][1] + self.cfg.slack
                 for k, v in (("gold", comp.gold_frac), ("hard_negative", comp.hard_frac),
                              ("replay", comp.replay_frac)))
        if ok:
            return p
        rng = random.Random(f"recompose:{p.dataset.fingerprint()}")
        return replace(p, dataset=self.compose(list(p.dataset.slice("gold")),
                                               list(p.dataset.slice("hard_negative")), rng, p.dataset))


def make_budget(cfg: dict, mode: str, override: int | None = None) -> Budget:
    b = cfg["budget"]
    n = override if override is not None else b["cold" if mode == "cold_start" else "production"]
    return Budget(max_evaluations=n, stagnation_window=b["stagnation_window"], top_k=b["top_k"],
                  epsilon=cfg["epsilon"], tau=cfg["tau"])


# ---------------------------------------------------------------- cold start


def build_cold_eval(task: ToyTaskSpec, cfg: dict, rng: random.Random) -> dict[str, list[Example]]:
    """Held-out positives, negatives and confusable-boundary items, built before any training."""
    per = cfg["eval"]["per_label"]
    positives = []
    for lab in task.labels:
        if lab == task.negative_label:
            continue
        positives += generate_examples(task, per, rng, id_prefix=f"eval-pos-{lab}-", labels=[lab])
    if not task.negative_label or task.negative_label not in task.vocab:
        raise InfeasibleComposition("eval negatives: task has no negative label")
    negatives = generate_examples(task, per, rng, id_prefix="eval-neg-", labels=[task.negative_label])
    if not task.confusable_pairs:
        raise InfeasibleComposition("eval boundary: task has no confusable pairs")
    boundary = []
    lo, hi = task.input_length_range
    for i in range(cfg["eval"]["boundary"]):
        a, b = task.confusable_pairs[i % len(task.confusable_pairs)]
        lean, other = (a, b) if (i // len(task.confusable_pairs)) % 2 == 0 else (b, a)
        k = rng.randint(lo, hi)
        n_other = max(1, k // 4)
        toks = [rng.choice(task.unique_vocab(lean)) for _ in range(max(1, (k - n_other) // 2))]
        toks += [rng.choice(task.vocab[lean]) for _ in range(k - n_other - len(toks))]
        toks += [rng.choice(task.unique_vocab(other)) for _ in range(n_other)]
        rng.shuffle(toks)
        boundary.append(Example(" ".join(toks), lean, id=f"eval-bnd-{i}"))
    return {"positive": positives, "negative": negatives, "boundary": boundary}


def run_coldstart(cfg: dict | None = None, seed: int = 0, budget: int | None = None) -> dict:
    cfg = merge_config(cfg)
    env = Environment(cfg, seed)
    task = env.task
    slices = build_cold_eval(task, cfg, env.rng("cold-eval"))
    eval_set = [e for part in ("positive", "negative", "boundary") for e in slices[part]]
    eval_ids = {e.id for e in eval_set}
    n_gold = cfg["clean_pool"]

    def gold_source(rng: random.Random) -> list[Example]:
        tag = rng.randrange(10**6)
        return generate_examples(task, n_gold, rng, id_prefix=f"train-{tag}-")

    ccfg = CurationConfig.for_mode("cold_start")
    ops = ToyDataOps(task, ccfg, None, gold_source, reference_lengths=[e.length for e in eval_set])
    rng = env.rng("cold-compose")
    root_ds = ops.compose(gold_source(rng), [], rng)
    root = Pipeline(root_ds, env.hyper, StrategySpec(), mode="cold_start")

    leaks: list[str] = []

    def evaluator(p: Pipeline) -> EvalResult:
        overlap = eval_ids & {e.id for e in p.dataset.examples}
        if overlap:
            leaks.extend(sorted(overlap))
            raise AssertionError("evaluation items leaked into training")
        m = train_pipeline(p, task)
        return EvalResult(score(m, eval_set), None, failure_info(m, eval_set))

    b = make_budget(cfg, "cold_start", budget)
    ctx = SearchContext(seed=seed, data_ops=ops, teacher_id=TEACHER_ID, recompose=ops.recompose)
    res = run_search(root, evaluator, b, RuleProposer(), ctx, mode="cold_start")
    records: list[dict] = [{"type": "header", "command": "run-coldstart", "seed": seed, "budget": b.max_evaluations,
                            "tau": b.tau}]
    records.append({"type": "eval_set", "sizes": {k: len(v) for k, v in slices.items()},
                    "train_eval_overlap": len(leaks)})
    seen = set()
    for d in ops.emitted:
        if d.fingerprint() in seen:
            continue
        seen.add(d.fingerprint())
        records.append(_dataset_record(d))
    for t in res.trajectory:
        records.append({"type": "search", **t})
    best = res.best
    records.append({
        "type": "verdict",
        "mode": "cold_start",
        "converged": res.converged,
        "stop_reason": res.stop_reason,
        "best_node": best.id if best else None,
        "best_score": best.score if best else None,
        "best_move": best.move if best else None,
        "evaluations": res.graph.evaluations,
    })
    return {"records": records, "result": res, "eval_set": eval_set, "datasets": ops.emitted, "exit_code":
            0 if res.converged else 3}


def _dataset_record(d: DatasetSpec) -> dict:
    rec = d.header_record()
    rec["fingerprint"] = d.fingerprint()
    return rec


# ---------------------------------------------------------------- production


def run_production(logs: Sequence[str | dict] | None, model_id: str = "toy-nb-v1", cfg: dict | None = None,
                   seed: int = 0, budget: int | None = None, env: Environment | None = None) -> dict:
    """Diagnose judged logs, build D_post, search under the regression constraint, gate, deploy or roll back."""
    cfg = merge_config(cfg)
    env = env or Environment(cfg, seed)
    task = env.task
    if logs is None:
        logs = generate_logs(task, env.model, cfg["logs"]["count"], env.rng("logs"))
    store = ingest(logs)
    records: list[dict] = [{"type": "header", "command": "run-production", "seed": seed, "model_id": model_id,
                            "traces": len(store), "rejected": len(store.rejected)}]
    t_fail, t_pass = partition(store)
    records.append({"type": "partition", "fail": len(t_fail), "pass": len(t_pass)})
    detector = env.detector
    clusters = build_taxonomy(t_fail, ConfusionClusterer(detector, task))
    for c in clusters:
        records.append({"type": "cluster", **c.to_record()})
    fixable = [c for c in clusters if c.fixability == "fixable"]
    if not fixable:
        records.append({"type": "verdict", "mode": "production", "decision": "no_fixable_failures"})
        raise NoFixableFailures(records)

    d_parent = parent_lineage(model_id, env.registry)
    deployed = (train(d_parent, env.hyper, labels=task.labels, model_id=model_id) if len(d_parent)
                else ToyModel.untrained(task.labels, model_id))
    records.append({"type": "lineage", "model_id": model_id, "parent_version": d_parent.version if len(d_parent)
                    else None, "parent_size": len(d_parent)})

    gen = ConfusionProbeGenerator(task)
    pcfg = cfg["production"]
    probe_rng = env.rng("probes")
    probe_sets = {}
    failing_probes: list[Example] = []
    for c in fixable[: pcfg["max_probe_clusters"]]:
        try:
            pr = probe(deployed, c, gen, pcfg["probes_per_cluster"], probe_rng)
        except UnsupportedProbe:
            continue
        probe_sets[c.id] = pr
        failing_probes += list(pr.failing)
        records.append({"type": "probe", "cluster": c.id, "n": len(pr.probes), "failure_rate": pr.failure_rate})

    fixable_ids = {m for c in fixable for m in c.members}
    candidates = [t for t in t_fail if t.id in fixable_ids]
    kept, excluded, freport = filter_poison(candidates, detector)
    records.append({"type": "filter", "kept": freport.kept, "excluded": freport.excluded,
                    "reasons": [list(r) for r in freport.reasons]})
    if not kept:
        records.append({"type": "verdict", "mode": "production", "decision": "no_fixable_failures"})
        raise NoFixableFailures(records)

    clean_pass = [t for t in t_pass if not detector.is_poison(t.input)]
    reg_rng = env.rng("regression")
    regression = build_regression_set(clean_pass or t_pass, pcfg["regression_fraction"], len(kept),
                                      lambda t: t.corrected, reg_rng)
    eval_set = [Example(t.input, t.corrected, provenance="corrected_failure",
                        entity_values=extract_entities(t.input, task), id=t.id) for t in kept]
    gold = list(eval_set) + [replace(e, provenance="probe") for e in failing_probes]
    error_type = dominant_error_type(fixable)

    ccfg = CurationConfig.for_mode("production")
    gold_rng = env.rng("prod-gold")

    def gold_source(rng: random.Random) -> list[Example]:
        extra = []
        tag = rng.randrange(10**6)
        for c in fixable[: pcfg["max_probe_clusters"]]:
            try:
                extra += [replace(e, id=f"{e.id}-{tag}") for e in gen.generate(c, pcfg["probes_per_cluster"], rng)]
            except UnsupportedProbe:
                continue
        return list(eval_set) + extra

    ops = ToyDataOps(task, ccfg, d_parent if len(d_parent) else None, gold_source,
                     reference_lengths=[len(t.input.split()) for t in store], error_type=error_type)
    d_post = ops.compose(gold, [], gold_rng, d_parent if len(d_parent) else None)
    root = Pipeline(d_post, env.hyper, StrategySpec(), mode="production", parent_dataset_size=len(d_parent))

    warm = d_parent.examples

    def evaluator(p: Pipeline) -> EvalResult:
        m = train_pipeline(p, task, warm)
        return EvalResult(score(m, eval_set), regression_count(m, regression), failure_info(m, eval_set))

    b = make_budget(cfg, "production", budget)
    ctx = SearchContext(seed=seed, data_ops=ops, teacher_id=TEACHER_ID, recompose=ops.recompose)
    res = run_search(root, evaluator, b, RuleProposer(), ctx, mode="production")
    for t in res.trajectory:
        records.append({"type": "search", **t})

    ledger = Ledger()
    ledger.commit(d_parent.version if len(d_parent) else 0, d_parent, env.hyper, deployed,
                  eval_context={"eval_ids": [e.id for e in env.holdout]})
    ledger.deploy(d_parent.version if len(d_parent) else 0)
    prev_version = ledger.deployed
    decision = "no_feasible_pipeline"
    gate_rec = None
    if res.best is not None:
        best_p = res.best.pipeline
        cand = train_pipeline(best_p, task, warm)
        g = gate(cand, deployed, eval_set, regression, prev_eval_set=env.holdout, tau=b.tau, epsilon=b.epsilon,
                 best_version=prev_version)
        version = best_p.dataset.version
        rationale = toy_rationale(task) if best_p.strategy.supervision_format == "chain_of_thought" else None
        if version in ledger.checkpoints:
            version = max(ledger.checkpoints) + 1
        ledger.commit(version, best_p.dataset, best_p.hyper, cand, best_p.strategy,
                      eval_context={"eval_ids": [e.id for e in eval_set]}, rationale=rationale,
                      warm_start=warm)
        ledger.record_gate(version, g)
        gate_rec = g.to_record()
        if g.accepted:
            ledger.deploy(version)
            decision = "accept"
        else:
            rollback(ledger, prev_version)
            decision = "reject_rollback"
        post_rates = {}
        for cid, pr in probe_sets.items():
            after = probe(cand, None, gen, len(pr.probes), probe_rng, probes=pr.probes)
            post_rates[cid] = [pr.failure_rate, after.failure_rate]
        records.append({"type": "probe_recheck", "rates": post_rates})
        records.append({"type": "gate", **gate_rec, "candidate_version": version})
        seen = set()
        for d in ops.emitted:
            if d.fingerprint() not in seen:
                seen.add(d.fingerprint())
                records.append(_dataset_record(d))
    records.append({"type": "verdict", "mode": "production", "decision": decision,
                    "deployed_version": ledger.deployed, "evaluations": res.graph.evaluations,
                    "best_score": res.best.score if res.best else None,
                    "best_regressions": res.best.regressions if res.best else None})
    return {"records": records, "result": res, "ledger": ledger, "decision": decision,
            "datasets": list(ops.emitted), "exit_code": 0 if decision == "accept" else 3}


# ---------------------------------------------------------------- stages


@dataclass(frozen=True)
class StageConfig:
    poison_rates: tuple[float, ...] = (0.15, 0.25, 0.40)
    log_counts: tuple[int, ...] = (500, 500, 500)
    split: tuple[float, float] = (0.7, 0.3)
    iterations_per_stage: int = 2

    def __post_init__(self):
        if not self.poison_rates:
            raise ValueError("need at least one stage")
        if any(b <= a for a, b in zip(self.poison_rates, self.poison_rates[1:])):
            raise ValueError("poison rates must be strictly increasing")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if len(self.log_counts) != len(self.poison_rates):
            raise ValueError("one log count per stage")

    @classmethod
    def from_config(cls, cfg: dict, rates: Sequence[float] | None = None) -> "StageConfig":
        stages = cfg["stages"]
        pr = tuple(rates) if rates is not None else tuple(s["poison_rate"] for s in stages)
        counts = tuple(s.get("log_count", 500) for s in stages)
        if len(counts) != len(pr):
            counts = tuple([counts[0] if counts else 500] * len(pr))
        return cls(pr, counts, tuple(cfg["split"]), cfg["iterations_per_stage"])


NAIVE_POISON_DRAW = (("unreviewed", 0.30), ("wrong", 0.50), ("correct", 0.20))
NAIVE_FIXABLE_DRAW = (("unreviewed", 0.30), ("correct", 0.70))


def naive_correction(rec: dict, toxicity: str, labels: Sequence[str], rng: random.Random) -> tuple[str, str]:
    """Target the naive retrain uses for one logged trace, and which branch produced it."""
    gold = rec["corrected"]
    if rec["verdict"] == "pass":
        return rec["prediction"], "pass"
    if toxicity == "clean":
        return gold, "correct"
    table = NAIVE_POISON_DRAW if toxicity == "poisonous" else NAIVE_FIXABLE_DRAW
    u = rng.random()
    acc = 0.0
    branch = table[-1][0]
    for name, p in table:
        acc += p
        if u < acc:
            branch = name
            break
    if branch == "unreviewed":
        return (rec["prediction"] or gold), branch
    if branch == "wrong":
        return rng.choice([lab for lab in labels if lab != gold]), branch
    return gold, branch


def _split(records: list[dict], frac: float, rng: random.Random) -> tuple[list[dict], list[dict]]:
    order = list(range(len(records)))
    rng.shuffle(order)
    n_train = round(frac * len(records))
    train_idx = set(order[:n_train])
    return ([r for i, r in enumerate(records) if i in train_idx],
            [r for i, r in enumerate(records) if i not in train_idx])


def run_stages(stage_cfg: StageConfig | None = None, cfg: dict | None = None, seeds: Sequence[int] = (0,)) -> dict:
    """Adaptive and naive arms over the same stage logs, one trajectory per seed."""
    cfg = merge_config(cfg)
    stage_cfg = stage_cfg or StageConfig.from_config(cfg)
    runs = [_run_stages_seed(stage_cfg, cfg, seed) for seed in seeds]
    records = [r for run in runs for r in run["records"]]
    return {"runs": runs, "records": records, "exit_code": 0}


def stage_environment_config(cfg: dict) -> dict:
    """Base config with the stage profile's task and hyper overrides applied."""
    out = copy.deepcopy(cfg)
    for key, over in (cfg.get("stage_profile") or {}).items():
        out[key] = {**out.get(key, {}), **over}
    return out


def _run_stages_seed(stage_cfg: StageConfig, cfg: dict, seed: int) -> dict:
    env = Environment(stage_environment_config(cfg), seed)
    task = env.task
    labels = task.labels
    detector = env.detector
    counter = ToyCounterGenerator(task)
    records: list[dict] = [{"type": "header", "command": "run-stages", "seed": seed,
                            "poison_rates": list(stage_cfg.poison_rates),
                            "log_counts": list(stage_cfg.log_counts), "split": list(stage_cfg.split)}]

    # all stage logs are generated up front by the shared v1 checkpoint so the eval set is fixed
    stage_logs = []
    for s, (rate, count) in enumerate(zip(stage_cfg.poison_rates, stage_cfg.log_counts), start=1):
        recs = generate_logs(task, env.model, count, env.rng(f"stage{s}-logs"), poison_rate=rate,
                             id_prefix=f"s{s}-", timing=None)
        train_part, test_part = _split(recs, stage_cfg.split[0], env.rng(f"stage{s}-split"))
        stage_logs.append((rate, train_part, test_part))
    eval_set = [Example(r["input"], r["corrected"], id=r["id"]) for _, _, test in stage_logs for r in test
                if overall_toxicity(r["hidden"]) != "poisonous"]
    eval_hash = DatasetSpec(tuple(eval_set)).fingerprint()
    records.append({"type": "eval_set", "size": len(eval_set), "fingerprint": eval_hash})

    base_score = score(env.model, eval_set)
    ledger = Ledger()
    ledger.commit(1, env.clean, env.hyper, env.model)
    ledger.deploy(1)
    deployed_model, deployed_score, deployed_ds = env.model, base_score, env.clean
    records.append({"type": "checkpoint", "seed": seed, "stage": 0, "checkpoint": "v1", "arm": "both",
                    "adaptive_score": base_score, "naive_score": base_score, "poison_rate": 0.0,
                    "decision": "deploy"})

    naive_items: list[Example] = list(env.clean.examples)
    naive_rng = env.rng("naive")
    pending_gold: list[Example] = []
    pending_hard: list[Example] = []
    warm: tuple[Example, ...] = tuple(env.clean.examples)
    proposer = RuleProposer()
    version = 1
    override = GateOverride(tau=0.0, epsilon=10**9,
                            justification="stage protocol: accept only if the shared held-out score does not drop")
    trajectory = []
    datasets: list[DatasetSpec] = []
    for s, (rate, train_part, _) in enumerate(stage_logs, start=1):
        # naive arm: one retrain on everything seen so far, under the correction-noise model
        branches = Counter()
        for r in train_part:
            tgt, br = naive_correction(r, overall_toxicity(r["hidden"]), labels, naive_rng)
            branches[br] += 1
            naive_items.append(Example(r["input"], tgt, provenance="corrected_failure", id=r["id"]))
        naive_model = train(naive_items, env.hyper, labels=labels, model_id=f"naive-s{s}")
        naive_score = score(naive_model, eval_set)

        # adaptive arm: filter, contrastive pairs, compose with replay, gated iterations
        kept, excluded, rep = filter_poison(_as_traces(train_part), detector)
        crng = env.rng(f"stage{s}-curate")
        for t in kept:
            e = Example(t.input, t.corrected, provenance="corrected_failure" if t.verdict == "fail" else "benchmark",
                        entity_values=extract_entities(t.input, task), id=t.id)
            pending_gold.append(e)
            if t.verdict == "fail" and counter.supports(e.target):
                try:
                    g, h = two_for_one(e, counter, crng)
                except NoCounterexample:
                    continue
                pending_gold.append(g)
                pending_hard.append(h)
        fails = [t for t in kept if t.verdict == "fail"]
        error_type = dominant_error_type(build_taxonomy(fails, ConfusionClusterer(None, task))) if fails else None
        ccfg = CurationConfig.for_mode("production")
        records.append({"type": "stage_filter", "seed": seed, "stage": s, "kept": rep.kept, "excluded": rep.excluded,
                        "naive_branches": dict(sorted(branches.items()))})
        hyper = env.hyper
        for it in range(1, stage_cfg.iterations_per_stage + 1):
            version += 1
            ds = compose_dataset(pending_gold, pending_hard, deployed_ds, ccfg, env.rng(f"stage{s}-compose{it}"),
                                 counter_generator=counter, reference_lengths=[e.length for e in eval_set],
                                 error_type=error_type, version=version, parent_version=deployed_ds.version)
            datasets.append(ds)
            records.append({**_dataset_record(ds), "seed": seed, "stage": s, "iteration": it})
            cand = train(warm + ds.examples, hyper, labels=labels, model_id=f"adaptive-v{version}")
            a = score(cand, eval_set)
            g = gate_decision(a, 0, None, deployed_score, override=override, best_version=ledger.deployed)
            ledger.commit(version, ds, hyper, cand, warm_start=warm)
            ledger.record_gate(version, g)
            if g.accepted:
                ledger.deploy(version)
                deployed_model, deployed_score, deployed_ds = cand, a, ds
                warm = warm + ds.examples
                pending_gold, pending_hard = [], []
            else:
                deployed_model = rollback(ledger, g.rollback_target).model
            rec = {"type": "checkpoint", "seed": seed, "stage": s, "iteration": it, "checkpoint": f"v{version}",
                   "arm": "adaptive", "candidate_score": a, "adaptive_score": deployed_score,
                   "naive_score": naive_score, "poison_rate": rate, "decision": g.decision,
                   "hyper": {"epochs": hyper.epochs, "learning_rate": hyper.learning_rate}}
            records.append(rec)
            trajectory.append(rec)
            if g.accepted or not pending_gold:
                break
            # second try: the score band picks what moves (data redraw below the rework line, else epochs)
            if proposer.band(a) != "rework":
                hyper = replace(hyper, epochs=max(1, hyper.epochs - 1)) if hyper.epochs > 1 else \
                    replace(hyper, learning_rate=hyper.learning_rate / 2)
    final = {"type": "stage_summary", "seed": seed, "adaptive_final": deployed_score, "naive_final": naive_score,
             "gap": deployed_score - naive_score, "eval_fingerprint": eval_hash}
    records.append(final)
    return {"seed": seed, "records": records, "trajectory": trajectory, "adaptive_final": deployed_score,
            "naive_final": naive_score, "eval_set": eval_set, "datasets": datasets, "ledger": ledger,
            "eval_fingerprint": eval_hash}


def _as_traces(recs: Sequence[dict]):
    store = ingest(recs)
    return list(store)


# ---------------------------------------------------------------- reporting


def _fmt(x: Any) -> str:
    if x is None:
        return "-"
    if isinstance(x, float):
        return "-inf" if math.isinf(x) else f"{x:.4f}"
    return str(x)


def render_markdown(records: Sequence[dict]) -> str:
    """Markdown run log; a pure function of the JSONL records."""
    lines = ["# Curation run log", ""]
    headers = [r for r in records if r["type"] == "header"]
    for h in headers:
        extra = ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(h.items()) if k not in ("type", "command"))
        lines.append(f"- command `{h.get('command', '?')}`: {extra}")
    if headers:
        lines.append("")
    datasets = [r for r in records if r["type"] in ("dataset", "stage_data")]
    if datasets:
        seeded = any("seed" in d for d in datasets)
        head = "| seed | version | parent | size | gold | hard | replay | waivers |" if seeded else \
            "| version | parent | size | gold | hard | replay | waivers |"
        lines += ["## Dataset versions", "", head, "|---" * head.count(" | ") + "|---|"]
        for d in datasets:
            c = d["composition"]
            waivers = sum(1 for x in d["curation_log"] if x.startswith("waiver:"))
            lead = f"| {_fmt(d.get('seed'))} " if seeded else ""
            lines.append(f"{lead}| v{d['version']} | {_fmt(d['parent_version'])} | {d['size']} | "
                         f"{_fmt(c['gold_frac'])} | {_fmt(c['hard_frac'])} | {_fmt(c['replay_frac'])} | {waivers} |")
        lines.append("")
        lines += ["### Quality-control log", ""]
        for d in datasets:
            for entry in d["curation_log"]:
                lines.append(f"- v{d['version']}: {entry}")
        lines.append("")
    clusters = [r for r in records if r["type"] == "cluster"]
    if clusters:
        lines += ["## Failure taxonomy", "",
                  "| cluster | size | gold -> predicted | suspected poison | fixability | error type |",
                  "|---|---|---|---|---|---|"]
        for c in clusters:
            ch = c["characteristics"]
            g, p = ch["confusion"]
            lines.append(f"| {c['id']} | {c['size']} | {g} -> {p or '(none)'} | {ch.get('suspected_poison') or '-'} | "
                         f"{c['fixability']} | {c['error_type']} |")
        lines.append("")
    search = [r for r in records if r["type"] == "search"]
    checkpoints = [r for r in records if r["type"] == "checkpoint"]
    gates = [r for r in records if r["type"] == "gate"]
    if search or checkpoints or gates:
        lines += ["## Iterations", ""]
    if search:
        lines += ["| eval | node | parents | move | score | regressions | decision |", "|---|---|---|---|---|---|---|"]
        for r in search:
            if r["kind"] == "transposition":
                lines.append(f"| {r['eval']} | {r['node']} | {r['parents']} | {r['move']} (merged) | - | - | - |")
                continue
            decision = "accept" if r["accepted"] else ("rollback" if r["rolled_back"] else
                                                       ("infeasible" if not r["feasible"] else "keep"))
            lines.append(f"| {r['eval']} | {r['node']} | {r['parents']} | {r['move']} | {_fmt(r['score'])} | "
                         f"{_fmt(r['regressions'])} | {decision} |")
        lines.append("")
    if checkpoints:
        lines += ["| seed | stage | iteration | checkpoint | poison | candidate | adaptive deployed | naive | decision |",
                  "|---|---|---|---|---|---|---|---|---|"]
        for r in checkpoints:
            lines.append(f"| {r['seed']} | {r['stage']} | {_fmt(r.get('iteration'))} | {r['checkpoint']} | "
                         f"{_fmt(r['poison_rate'])} | {_fmt(r.get('candidate_score'))} | {_fmt(r['adaptive_score'])} | "
                         f"{_fmt(r['naive_score'])} | {r['decision']} |")
        lines.append("")
    for g in gates:
        lines.append(f"- gate on v{g['candidate_version']}: {g['decision']} (a={_fmt(g['eval_score'])}, "
                     f"r={g['regression_count']}, prev r={_fmt(g['prev_checkpoint_regressions'])})")
        for reason in g["reasons"]:
            lines.append(f"  - {reason}")
    if gates:
        lines.append("")
    verdicts = [r for r in records if r["type"] in ("verdict", "stage_summary")]
    if verdicts:
        lines += ["## Final verdict", ""]
        for v in verdicts:
            body = ", ".join(f"{k}={_fmt(x)}" for k, x in sorted(v.items()) if k != "type")
            lines.append(f"- {v['type']}: {body}")
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def records_to_jsonl(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records)


def report(records: Sequence[dict]) -> tuple[str, str]:
    """(markdown, jsonl) for a run; the markdown is regenerated from the JSONL text so both agree."""
    text = records_to_jsonl(records)
    parsed = [json.loads(line) for line in text.splitlines() if line.strip()]
    return render_markdown(parsed), text


def report_from_jsonl(text: str) -> str:
    return render_markdown([json.loads(line) for line in text.splitlines() if line.strip()])


def stage_gap_summary(runs: Sequence[dict]) -> dict:
    gaps = [r["adaptive_final"] - r["naive_final"] for r in runs]
    return {"mean_gap": statistics.fmean(gaps) if gaps else 0.0,
            "wins": sum(1 for g in gaps if g > 0), "n": len(gaps)}
