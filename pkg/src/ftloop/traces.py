"""Judged inference traces: ingestion, partition, query, taxonomy, regression sets, probes.

Hidden perturbation labels are stored apart from the visible trace fields and
are only reachable through :mod:`ftloop.audit`. Nothing in this module reads them.
"""

from __future__ import annotations

import json
import math
import random
import statistics
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

from .errors import (
    DuplicateId,
    EmptyFailureSet,
    EmptyPassingSet,
    QueryError,
    UnknownModel,
    UnsupportedProbe,
)
from .pipeline import DatasetSpec, Example
from .toy import ToyModel, ToyTaskSpec

VERDICTS = ("pass", "fail")
TRACE_FIELDS = ("id", "input", "prediction", "corrected", "verdict", "judge_reasoning",
                "judge_meta", "model_id", "ts", "latency_ms")
# fields a query may filter or group on; "length" and "status" are derived
QUERY_FIELDS = frozenset(TRACE_FIELDS) | {"length", "status", "unreviewed"}


@dataclass(frozen=True)
class InferenceTrace:
    id: str
    input: str
    prediction: str
    corrected: str | None
    verdict: str
    judge_reasoning: str = ""
    judge_meta: Mapping[str, Any] = field(default_factory=dict)
    model_id: str = ""
    ts: float | None = None
    latency_ms: float | None = None

    @property
    def unreviewed(self) -> bool:
        return self.corrected is None

    @property
    def status(self) -> str:
        return str(self.judge_meta.get("status", "ok"))

    def field(self, name: str):
        if name == "length":
            return len(self.input.split())
        if name == "status":
            return self.status
        if name == "unreviewed":
            return self.unreviewed
        return getattr(self, name)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "input": self.input,
            "prediction": self.prediction,
            "corrected": self.corrected,
            "verdict": self.verdict,
            "judge_reasoning": self.judge_reasoning,
            "judge_meta": dict(self.judge_meta),
            "model_id": self.model_id,
            "ts": self.ts,
            "latency_ms": self.latency_ms,
        }


def _parse(rec: Any) -> tuple[InferenceTrace, tuple[str, ...] | None]:
    if not isinstance(rec, dict):
        raise ValueError("record is not an object")
    for key in ("id", "input", "prediction", "verdict"):
        if key not in rec:
            raise ValueError(f"missing field {key!r}")
    if rec["verdict"] not in VERDICTS:
        raise ValueError(f"bad verdict {rec['verdict']!r}")
    if not isinstance(rec["id"], str) or not isinstance(rec["input"], str):
        raise ValueError("id and input must be strings")
    if rec["verdict"] == "fail" and "corrected" not in rec and not rec.get("unreviewed"):
        raise ValueError("failing trace without correction or unreviewed marker")
    meta = rec.get("judge_meta") or {}
    if not isinstance(meta, dict):
        raise ValueError("judge_meta must be an object")
    trace = InferenceTrace(
        id=rec["id"],
        input=rec["input"],
        prediction=rec["prediction"] if rec["prediction"] is not None else "",
        corrected=rec.get("corrected"),
        verdict=rec["verdict"],
        judge_reasoning=rec.get("judge_reasoning") or "",
        judge_meta=meta,
        model_id=rec.get("model_id") or "",
        ts=rec.get("ts"),
        latency_ms=rec.get("latency_ms"),
    )
    hidden = rec.get("hidden")
    return trace, (tuple(hidden) if hidden is not None else None)


class TraceStore:
    """Append-only trace table indexed by id, verdict and model_id."""

    def __init__(self):
        self._rows: list[InferenceTrace] = []
        self._by_id: dict[str, InferenceTrace] = {}
        self._by_verdict: dict[str, list[InferenceTrace]] = {v: [] for v in VERDICTS}
        self._by_model: dict[str, list[InferenceTrace]] = defaultdict(list)
        self._hidden: dict[str, Any] = {}
        self.rejected: list[tuple[int, str]] = []

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self):
        return iter(self._rows)

    def get(self, trace_id: str) -> InferenceTrace:
        return self._by_id[trace_id]

    def by_model(self, model_id: str) -> list[InferenceTrace]:
        return list(self._by_model.get(model_id, ()))

    def add(self, trace: InferenceTrace, hidden: Any = None) -> None:
        if trace.id in self._by_id:
            raise DuplicateId(trace.id)
        self._rows.append(trace)
        self._by_id[trace.id] = trace
        self._by_verdict[trace.verdict].append(trace)
        self._by_model[trace.model_id].append(trace)
        if hidden is not None:
            self._hidden[trace.id] = hidden


def ingest(records: Iterable[str | dict], store: TraceStore | None = None) -> TraceStore:
    """Load JSONL lines (or already-parsed dicts). Bad rows are recorded in ``store.rejected``."""
    store = store if store is not None else TraceStore()
    for lineno, raw in enumerate(records, start=1):
        if isinstance(raw, str):
            if not raw.strip():
                continue
            try:
                raw = json.loads(raw)
            except json.JSONDecodeError as exc:
                store.rejected.append((lineno, f"malformed JSON: {exc.msg}"))
                continue
        try:
            trace, hidden = _parse(raw)
            store.add(trace, hidden)
        except DuplicateId as exc:
            store.rejected.append((lineno, f"DuplicateId: {exc}"))
        except (ValueError, TypeError) as exc:
            store.rejected.append((lineno, f"malformed record: {exc}"))
    return store


def partition(store: TraceStore) -> tuple[list[InferenceTrace], list[InferenceTrace]]:
    return list(store._by_verdict["fail"]), list(store._by_verdict["pass"])


_OPS = {
    "eq": lambda got, arg: got == arg,
    "ne": lambda got, arg: got != arg,
    "in": lambda got, arg: got in arg,
    "lt": lambda got, arg: got is not None and got < arg,
    "le": lambda got, arg: got is not None and got <= arg,
    "gt": lambda got, arg: got is not None and got > arg,
    "ge": lambda got, arg: got is not None and got >= arg,
    "contains": lambda got, arg: isinstance(got, str) and arg in got,
}


def _matches(t: InferenceTrace, cond: Mapping[str, Any]) -> bool:
    for name, want in cond.items():
        got = t.field(name)
        if isinstance(want, Mapping):
            if not all(_OPS[op](got, arg) for op, arg in want.items()):
                return False
        elif got != want:
            return False
    return True


def _check_fields(names: Iterable[str]) -> None:
    for name in names:
        if name not in QUERY_FIELDS:
            raise QueryError(f"unknown field {name!r}")


def _check_ops(where: Mapping[str, Any]) -> None:
    for want in where.values():
        if isinstance(want, Mapping):
            for op in want:
                if op not in _OPS:
                    raise QueryError(f"unknown operator {op!r}")


def query(
    rows: TraceStore | Sequence[InferenceTrace],
    where: Mapping[str, Any] | None = None,
    group_by: Sequence[str] | None = None,
    limit: int | None = None,
) -> list:
    """Filter traces; with ``group_by`` return ``[(key_tuple, count), ...]`` sorted by count desc.

    ``where`` maps a field to a value (equality) or to ``{op: arg}`` with op in
    eq, ne, in, lt, le, gt, ge, contains.
    """
    where = where or {}
    _check_fields(where)
    _check_ops(where)
    if group_by:
        _check_fields(group_by)
    hits = [t for t in rows if _matches(t, where)]
    if not group_by:
        out = [t.to_record() for t in hits]
        return out[:limit] if limit is not None else out
    counts = Counter(tuple(t.field(g) for g in group_by) for t in hits)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], repr(kv[0])))
    return ranked[:limit] if limit is not None else ranked


# ---------------------------------------------------------------- taxonomy


@dataclass(frozen=True)
class FailureCluster:
    id: str
    members: tuple[str, ...]
    characteristics: Mapping[str, Any]
    fixability: str
    error_type: str = "recall"

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def confusion(self) -> tuple[str, str]:
        """(gold, predicted) pair the cluster was built around."""
        return tuple(self.characteristics["confusion"])

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "size": self.size,
            "fixability": self.fixability,
            "error_type": self.error_type,
            "characteristics": dict(self.characteristics),
        }


class ConfusionClusterer:
    """Groups classification failures by (corrected, predicted) pair and poison-detector verdict.

    Splitting on the detector keeps suspected poison out of the fixable
    clusters. A cluster is external when none of its members carries a
    correction, when it is a suspected-poison group, or when most members are
    infrastructure timeouts. Recall-type clusters are those
    where the model fell back to something other than the gold label's
    confusable partner (it missed the label); precision-type clusters are
    partner confusions.
    """

    def __init__(self, detector=None, task: ToyTaskSpec | None = None, top_tokens: int = 5):
        self.detector = detector
        self.task = task
        self.top_tokens = top_tokens

    def __call__(self, failures: Sequence[InferenceTrace]) -> list[FailureCluster]:
        groups: dict[tuple[str, str, str], list[InferenceTrace]] = defaultdict(list)
        for t in failures:
            gold = t.corrected if t.corrected is not None else "?"
            flag = ""
            if self.detector is not None:
                flag = self.detector.reason(t.input, t.prediction, t.corrected) or ""
            groups[gold, t.prediction, flag].append(t)
        ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
        out = []
        for k, ((gold, pred, flag), members) in enumerate(ordered, start=1):
            lengths = [len(t.input.split()) for t in members]
            toks = Counter(tok for t in members for tok in t.input.split())
            top = [tok for tok, _ in sorted(toks.items(), key=lambda kv: (-kv[1], kv[0]))[: self.top_tokens]]
            reviewed = [t for t in members if t.corrected is not None]
            poison = len(members) if flag else 0
            timeouts = sum(1 for t in members if t.status == "timeout")
            external = not reviewed or poison * 2 > len(members) or timeouts * 2 > len(members)
            partner = self.task.partner(gold) if self.task is not None else None
            error_type = "precision" if partner is not None and pred == partner else "recall"
            out.append(FailureCluster(
                id=f"C{k}",
                members=tuple(t.id for t in members),
                characteristics={
                    "confusion": [gold, pred],
                    "length_mean": round(statistics.fmean(lengths), 6),
                    "length_min": min(lengths),
                    "length_max": max(lengths),
                    "top_tokens": top,
                    "poison_flags": poison,
                    "suspected_poison": flag or None,
                    "timeouts": timeouts,
                },
                fixability="external" if external else "fixable",
                error_type=error_type,
            ))
        return out


def build_taxonomy(failures: Sequence[InferenceTrace], clusterer: Callable | None = None) -> list[FailureCluster]:
    if not failures:
        raise EmptyFailureSet("taxonomy needs at least one failure")
    clusterer = clusterer or ConfusionClusterer()
    clusters = clusterer(failures)
    covered = [m for c in clusters for m in c.members]
    if len(covered) != len(failures) or set(covered) != {t.id for t in failures}:
        raise AssertionError("clusterer output is not a partition of the failure set")
    return clusters


def dominant_error_type(clusters: Sequence[FailureCluster]) -> str | None:
    fixable = [c for c in clusters if c.fixability == "fixable"]
    if not fixable:
        return None
    # clusters arrive sorted by size, largest first
    return fixable[0].error_type


# ---------------------------------------------------------------- regression set


def regression_set_size(n_fail: int, fraction: float, n_strata: int, n_pass: int) -> int:
    return min(n_pass, max(round(fraction * n_fail), n_strata))


def build_regression_set(
    passing: Sequence[InferenceTrace],
    fraction: float,
    n_fail: int,
    stratify_key: Callable[[InferenceTrace], Any],
    rng: random.Random,
) -> list[InferenceTrace]:
    """Stratified sample of passing traces, sized ``fraction`` of the failure count.

    Every stratum gets one member first; the remainder is allocated
    proportionally (largest remainder). If strata outnumber the target size the
    set grows to cover them all.
    """
    if not passing:
        raise EmptyPassingSet("regression set needs passing traces")
    if not 0.3 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0.3, 1.0]")
    strata: dict[Any, list[InferenceTrace]] = defaultdict(list)
    for t in passing:
        strata[stratify_key(t)].append(t)
    keys = sorted(strata, key=repr)
    size = regression_set_size(n_fail, fraction, len(keys), len(passing))
    if len(keys) == 1:
        pool = strata[keys[0]]
        return rng.sample(pool, size)
    alloc = {k: 1 for k in keys}
    spare = size - len(keys)
    if spare > 0:
        room = {k: len(strata[k]) - 1 for k in keys}
        total_room = sum(room.values())
        quotas = {k: spare * room[k] / total_room for k in keys} if total_room else {k: 0 for k in keys}
        for k in keys:
            alloc[k] += min(room[k], math.floor(quotas[k]))
        left = size - sum(alloc.values())
        order = sorted(keys, key=lambda k: (-(quotas[k] - math.floor(quotas[k])), repr(k)))
        while left > 0:
            moved = False
            for k in order:
                if left and alloc[k] < len(strata[k]):
                    alloc[k] += 1
                    left -= 1
                    moved = True
            if not moved:
                break
    out: list[InferenceTrace] = []
    for k in keys:
        out.extend(rng.sample(strata[k], alloc[k]))
    return out


# ---------------------------------------------------------------- probes


@dataclass(frozen=True)
class ProbeResult:
    probes: tuple[Example, ...]
    failing: tuple[Example, ...]

    @property
    def failure_rate(self) -> float:
        return len(self.failing) / len(self.probes) if self.probes else 0.0


class ConfusionProbeGenerator:
    """Boundary inputs for a (gold, predicted) confusion: alternately gold-leaning and predicted-leaning.

    A probe leaning toward label L draws about two thirds of its tokens from L's
    vocabulary and the rest from the other label's unique vocabulary.
    """

    def __init__(self, task: ToyTaskSpec):
        self.task = task

    def generate(self, cluster: FailureCluster, n: int, rng: random.Random) -> list[Example]:
        a, b = cluster.confusion
        if a not in self.task.vocab or b not in self.task.vocab or a == b:
            raise UnsupportedProbe(f"no probe generator for confusion {cluster.confusion}")
        lo, hi = self.task.input_length_range
        out = []
        for i in range(n):
            lean, other = (a, b) if i % 2 == 0 else (b, a)
            other_pool = self.task.unique_vocab(other) or self.task.vocab[other]
            k = rng.randint(lo, hi)
            n_other = max(1, k // 3)
            toks = [rng.choice(self.task.vocab[lean]) for _ in range(k - n_other)]
            toks += [rng.choice(other_pool) for _ in range(n_other)]
            rng.shuffle(toks)
            out.append(Example(input=" ".join(toks), target=lean, provenance="probe",
                               id=f"probe-{cluster.id}-{i}"))
        return out


def probe(model: ToyModel, cluster: FailureCluster, generator: ConfusionProbeGenerator, n: int,
          rng: random.Random, probes: Sequence[Example] | None = None) -> ProbeResult:
    """Run ``n`` generated probes (or a fixed probe list) through ``model``."""
    if n < 1:
        raise ValueError("n must be ≥ 1")
    items = list(probes) if probes is not None else generator.generate(cluster, n, rng)
    preds = model.predict_many([e.input for e in items])
    failing = tuple(e for e, (p, _) in zip(items, preds) if p != e.target)
    return ProbeResult(tuple(items), failing)


# ---------------------------------------------------------------- lineage


@dataclass
class ModelRegistry:
    base_ids: set = field(default_factory=lambda: {"toy-nb-base"})
    runs: dict = field(default_factory=dict)  # model_id -> DatasetSpec of its most recent run

    def register(self, model_id: str, dataset: DatasetSpec) -> None:
        self.runs[model_id] = dataset


def parent_lineage(model_id: str, registry: ModelRegistry) -> DatasetSpec:
    if model_id in registry.runs:
        return registry.runs[model_id]
    if model_id in registry.base_ids:
        return DatasetSpec()
    raise UnknownModel(model_id)
