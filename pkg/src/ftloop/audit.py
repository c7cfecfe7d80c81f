"""Acceptance-only access to hidden perturbation labels.

Diagnosis, curation and search never import this module; the harness uses it
only to score the poison detector and to tally generation ground truth.
"""

from __future__ import annotations

from collections import Counter
from typing import Iterable

from .perturbation import overall_toxicity
from .traces import InferenceTrace, TraceStore


def hidden_labels(store: TraceStore, trace_id: str) -> tuple[str, ...]:
    return tuple(store._hidden.get(trace_id, ()))


def hidden_toxicity(store: TraceStore, trace_id: str) -> str:
    return overall_toxicity(hidden_labels(store, trace_id))


def perturbation_counts(store: TraceStore, traces: Iterable[InferenceTrace] | None = None) -> list[tuple[str, int]]:
    """Per-kind counts over ``traces`` (default: the whole store), sorted by count desc."""
    rows = store if traces is None else traces
    c = Counter(k for t in rows for k in hidden_labels(store, t.id))
    return sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))


def detector_quality(store: TraceStore, failures: Iterable[InferenceTrace], detector) -> dict:
    """Precision and recall of ``detector`` against hidden poisonous labels."""
    tp = fp = fn = tn = 0
    for t in failures:
        truth = hidden_toxicity(store, t.id) == "poisonous"
        flag = detector.is_poison(t.input, t.prediction, t.corrected)
        if flag and truth:
            tp += 1
        elif flag:
            fp += 1
        elif truth:
            fn += 1
        else:
            tn += 1
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn, "precision": precision, "recall": recall}
