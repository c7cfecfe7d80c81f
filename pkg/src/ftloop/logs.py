"""Synthetic inference-log generation: perturb, predict, judge, decorate."""

from __future__ import annotations

import json
import random
import statistics
from typing import IO, Iterable, Mapping, Sequence

from .errors import TooShort
from .perturbation import (
    LogTiming,
    PerturbContext,
    decorate_log_sequence,
    make_near_duplicate,
    perturb_sample,
)
from .pipeline import Example
from .toy import ToyModel, ToyTaskSpec, generate_examples, judge

JUDGE_META = {"judge_id": "exact-match", "criteria": "label exact match", "template_id": "em-v1"}


def _record(rid: str, text: str, gold: str, model: ToyModel, hidden: Sequence[str]) -> dict:
    pred, _ = model.predict(text)
    v = judge(pred, gold)
    return {
        "id": rid,
        "input": text,
        "prediction": pred,
        "corrected": gold,
        "verdict": v.verdict,
        "judge_reasoning": v.reasoning,
        "judge_meta": dict(JUDGE_META),
        "model_id": model.model_id,
        "hidden": list(hidden),
    }


def generate_logs(
    task: ToyTaskSpec,
    model: ToyModel,
    n: int,
    rng: random.Random,
    rates: Mapping[str, float] | None = None,
    poison_rate: float | None = None,
    id_prefix: str = "log",
    timing: LogTiming | None = LogTiming(),
    examples: Sequence[Example] | None = None,
) -> list[dict]:
    """``n`` base inferences judged against the deployed ``model``.

    Every record carries ``corrected`` = the original gold answer, which is what a
    reviewer would write; for poisonous inputs that answer no longer follows from
    the text. ``poison_rate`` replaces the table's poisonous rates with one
    per-sample Bernoulli draw. Duplicates and retry storms add extra rows, so the
    output is usually a little longer than ``n``. ``timing=None`` skips timestamps.
    """
    base = list(examples) if examples is not None else generate_examples(task, n, rng, id_prefix=f"{id_prefix}-src")
    median = statistics.median(e.length for e in base) if base else None
    out: list[dict] = []
    for i, e in enumerate(base):
        poison = None if poison_rate is None else rng.random() < poison_rate
        ctx = PerturbContext(gold=e.target, task=task, median_length=median, index=i)
        s = perturb_sample(e, rates, rng, ctx, poison=poison)
        rid = f"{id_prefix}{i:06d}"
        out.append(_record(rid, s.noisy_input, e.target, model, s.applied))
        if "exact_duplicate" in s.applied:
            out.append(_record(rid + "-dup", s.noisy_input, e.target, model, s.applied))
        if "near_duplicate" in s.applied:
            try:
                near = make_near_duplicate(Example(input=s.noisy_input, target=e.target), rng)
            except TooShort:
                near = None
            if near is not None:
                out.append(_record(rid + "-near", near.input, e.target, model, s.applied))
    if timing is None:
        return out
    return decorate_log_sequence(out, rng, timing)


def write_logs(records: Iterable[dict], fh: IO[str]) -> None:
    for r in records:
        fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")
