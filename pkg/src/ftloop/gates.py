"""Acceptance machinery: regression and cross-checkpoint gates, rollback ledger,
confidence calibration and TF-IDF correction propagation."""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import BadProbability, EmptyEvalSet, EmptyRegressionSet, UnknownVersion
from .pipeline import DatasetSpec, Example, HyperConfig, StrategySpec, write_dataset
from .toy import ToyModel, judge, score, train

DEFAULT_TAU = 0.96
DEFAULT_EPSILON = 2


@dataclass(frozen=True)
class GateOverride:
    """Lowered thresholds; only valid with a written justification."""

    tau: float | None = None
    epsilon: int | None = None
    justification: str = ""

    def __post_init__(self):
        if not self.justification.strip():
            raise ValueError("a gate override needs a justification")


@dataclass(frozen=True)
class GateResult:
    eval_score: float
    regression_count: int
    prev_checkpoint_regressions: int | None
    decision: str
    rollback_target: int | None = None
    best_score: float | None = None
    tau: float = DEFAULT_TAU
    epsilon: int = DEFAULT_EPSILON
    reasons: tuple[str, ...] = ()
    justification: str | None = None

    @property
    def accepted(self) -> bool:
        return self.decision == "accept"

    def to_record(self) -> dict:
        return {
            "type": "gate",
            "eval_score": self.eval_score,
            "regression_count": self.regression_count,
            "prev_checkpoint_regressions": self.prev_checkpoint_regressions,
            "decision": self.decision,
            "rollback_target": self.rollback_target,
            "best_score": self.best_score,
            "tau": self.tau,
            "epsilon": self.epsilon,
            "reasons": list(self.reasons),
            "justification": self.justification,
        }


def regression_count(model: ToyModel, regression_set: Sequence, judge_fn: Callable = judge) -> int:
    """Fail verdicts of ``model`` on previously passing items (traces or examples)."""
    if not regression_set:
        raise EmptyRegressionSet("regression set is empty")
    items = list(regression_set)
    preds = model.predict_many([t.input for t in items])
    return sum(1 for t, (p, _) in zip(items, preds) if not judge_fn(p, _target(t)).passed)


def _target(item) -> str:
    if isinstance(item, Example):
        return item.target
    return item.corrected if item.corrected is not None else item.prediction


def cross_regressions(candidate: ToyModel, reference: ToyModel, eval_set: Sequence[Example]) -> int:
    """Items of ``eval_set`` that ``reference`` gets right and ``candidate`` gets wrong."""
    if not eval_set:
        raise EmptyEvalSet("previous evaluation set is empty")
    texts = [e.input for e in eval_set]
    ref = reference.predict_many(texts)
    cand = candidate.predict_many(texts)
    return sum(1 for e, (rp, _), (cp, _) in zip(eval_set, ref, cand) if rp == e.target and cp != e.target)


def gate_decision(a: float, r: int, prev_r: int | None, best_a: float | None,
                  tau: float = DEFAULT_TAU, epsilon: int = DEFAULT_EPSILON,
                  override: GateOverride | None = None, best_version: int | None = None) -> GateResult:
    """Pure decision rule on precomputed statistics.

    Accept iff a ≥ τ, r ≤ ε, the previous checkpoint's eval set shows at most ε
    regressions, and the candidate does not score below the current best.
    """
    just = None
    if override is not None:
        tau = override.tau if override.tau is not None else tau
        epsilon = override.epsilon if override.epsilon is not None else epsilon
        just = override.justification
    reasons = []
    if a < tau:
        reasons.append(f"score {a:.4f} below tau {tau}")
    if r > epsilon:
        reasons.append(f"{r} regressions exceed epsilon {epsilon}")
    if prev_r is not None and prev_r > epsilon:
        reasons.append(f"{prev_r} regressions on previous checkpoint eval set exceed epsilon {epsilon}")
    if best_a is not None and a < best_a:
        reasons.append(f"score {a:.4f} below current best {best_a:.4f}")
    decision = "reject_rollback" if reasons else "accept"
    return GateResult(
        eval_score=a,
        regression_count=r,
        prev_checkpoint_regressions=prev_r,
        decision=decision,
        rollback_target=best_version if reasons else None,
        best_score=best_a,
        tau=tau,
        epsilon=epsilon,
        reasons=tuple(reasons),
        justification=just,
    )


def gate(
    candidate: ToyModel,
    current_best: ToyModel | None,
    eval_set: Sequence[Example],
    regression_set: Sequence,
    prev_eval_set: Sequence[Example] | None = None,
    tau: float = DEFAULT_TAU,
    epsilon: int = DEFAULT_EPSILON,
    override: GateOverride | None = None,
    best_version: int | None = None,
) -> GateResult:
    a = score(candidate, eval_set)
    r = regression_count(candidate, regression_set) if regression_set else 0
    prev_r = None
    best_a = None
    if current_best is not None:
        best_a = score(current_best, eval_set)
        if prev_eval_set:
            prev_r = cross_regressions(candidate, current_best, prev_eval_set)
    return gate_decision(a, r, prev_r, best_a, tau, epsilon, override, best_version)


def converged(a: float, r: int | None, tau: float = DEFAULT_TAU, epsilon: int = DEFAULT_EPSILON,
              mode: str = "cold_start") -> bool:
    if mode == "cold_start":
        return a >= tau
    return a >= tau and r is not None and r <= epsilon


def calibrate_confidence(raw: float, label_accuracy: float, weight: float = 0.7) -> float:
    for name, v in (("raw", raw), ("label_accuracy", label_accuracy), ("weight", weight)):
        if not 0.0 <= v <= 1.0 or math.isnan(v):
            raise BadProbability(f"{name}={v} outside [0, 1]")
    return weight * label_accuracy + (1.0 - weight) * raw


def label_accuracy_table(history: Iterable[tuple[str, bool]]) -> dict[str, float]:
    """All-time per-label accuracy from (predicted label, was correct) pairs."""
    hit: Counter = Counter()
    tot: Counter = Counter()
    for lab, ok in history:
        tot[lab] += 1
        hit[lab] += bool(ok)
    return {lab: hit[lab] / tot[lab] for lab in sorted(tot)}


# ---------------------------------------------------------------- TF-IDF


class TfidfIndex:
    """Raw term counts times smoothed idf ln((1+N)/(1+df)) + 1, L2-normalised."""

    def __init__(self, docs: Sequence[str]):
        self.n = len(docs)
        tokenized = [d.split() for d in docs]
        df: Counter = Counter()
        for toks in tokenized:
            df.update(set(toks))
        self.idf = {t: math.log((1 + self.n) / (1 + c)) + 1.0 for t, c in df.items()}
        self.vectors = [self._vector(toks) for toks in tokenized]

    def _vector(self, toks: Sequence[str]) -> dict[str, float]:
        tf = Counter(toks)
        v = {t: c * self.idf[t] for t, c in tf.items() if t in self.idf}
        norm = math.sqrt(sum(x * x for x in v.values()))
        return {t: x / norm for t, x in v.items()} if norm > 0 else {}

    def similarity(self, i: int, j: int) -> float:
        return cosine(self.vectors[i], self.vectors[j])


def cosine(u: dict[str, float], v: dict[str, float]) -> float:
    if len(u) > len(v):
        u, v = v, u
    dot = sum(x * v[t] for t, x in u.items() if t in v)
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0 or nv == 0:
        return 0.0
    return max(0.0, min(1.0, dot / (nu * nv)))


@dataclass(frozen=True)
class Propagated:
    id: str
    similarity: float
    correction: str


def propagate_correction(corrected, pool: Sequence, threshold: float = 0.6) -> list[Propagated]:
    """Pool items whose TF-IDF cosine to the corrected trace is at least ``threshold``."""
    if not pool:
        raise ValueError("pool must be non-empty")
    idx = TfidfIndex([corrected.input] + [t.input for t in pool])
    label = corrected.corrected
    out = []
    for j, t in enumerate(pool, start=1):
        s = idx.similarity(0, j)
        if s >= threshold - 1e-12:
            out.append(Propagated(t.id, s, label))
    return out


# ---------------------------------------------------------------- ledger and rollback


@dataclass
class Checkpoint:
    version: int
    dataset: DatasetSpec
    hyper: HyperConfig
    strategy: StrategySpec
    labels: tuple[str, ...]
    snapshot: str
    eval_context: dict = field(default_factory=dict)
    rationale: Callable | None = field(default=None, repr=False)
    model_id: str | None = None
    warm_start: tuple[Example, ...] = ()

    def retrain(self) -> ToyModel:
        # from the base model; a warm start is replayed as the lineage's examples first
        return train(self.warm_start + self.dataset.examples, self.hyper, labels=self.labels,
                     rationale=self.rationale, model_id=self.model_id or self.hyper.model_id)


@dataclass(frozen=True)
class Restored:
    version: int
    dataset: DatasetSpec
    model: ToyModel
    eval_context: dict


class Ledger:
    """Append-only record of checkpoints and gate results."""

    def __init__(self):
        self.checkpoints: dict[int, Checkpoint] = {}
        self.records: list[dict] = []
        self.deployed: int | None = None

    def commit(self, version: int, dataset: DatasetSpec, hyper: HyperConfig, model: ToyModel,
               strategy: StrategySpec = StrategySpec(), eval_context: dict | None = None,
               rationale: Callable | None = None, warm_start: Sequence[Example] = ()) -> Checkpoint:
        if version in self.checkpoints:
            raise ValueError(f"version {version} already committed")
        cp = Checkpoint(version, dataset, hyper, strategy, tuple(model.labels), model.to_json(),
                        dict(eval_context or {}), rationale, model.model_id, tuple(warm_start))
        self.checkpoints[version] = cp
        self.records.append({"type": "checkpoint", "version": version, "dataset_version": dataset.version,
                             "dataset_fingerprint": dataset.fingerprint(), "model_id": model.model_id})
        return cp

    def record_gate(self, version: int, result: GateResult) -> None:
        rec = result.to_record()
        rec["candidate_version"] = version
        self.records.append(rec)

    def deploy(self, version: int) -> None:
        if version not in self.checkpoints:
            raise UnknownVersion(version)
        self.deployed = version
        self.records.append({"type": "deploy", "version": version})

    def save(self, directory: str) -> None:
        os.makedirs(os.path.join(directory, "snapshots"), exist_ok=True)
        with open(os.path.join(directory, "ledger.jsonl"), "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for v, cp in sorted(self.checkpoints.items()):
            with open(os.path.join(directory, "snapshots", f"v{v}.json"), "w", encoding="utf-8") as fh:
                fh.write(cp.snapshot)
            with open(os.path.join(directory, "snapshots", f"v{v}.dataset.jsonl"), "w", encoding="utf-8") as fh:
                write_dataset(cp.dataset, fh)


def rollback(ledger: Ledger, target_version: int) -> Restored:
    """Retrain the target checkpoint from base and verify it matches the stored snapshot byte for byte."""
    cp = ledger.checkpoints.get(target_version)
    if cp is None:
        raise UnknownVersion(target_version)
    model = cp.retrain()
    if model.to_json() != cp.snapshot:
        raise AssertionError(f"retrained v{target_version} differs from its snapshot")
    if ledger.deployed != target_version:
        ledger.records.append({"type": "rollback", "version": target_version})
        ledger.deployed = target_version
    return Restored(target_version, cp.dataset, model, dict(cp.eval_context))
