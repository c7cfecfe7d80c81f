"""Training-pipeline configuration space: examples, datasets, hyperparameters, strategies."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Iterator

from .errors import EmptyDataset

SLICES = ("gold", "hard_negative", "replay")
PROVENANCES = ("benchmark", "synthesized", "corrected_failure", "probe")
MODES = ("cold_start", "production")
SUPERVISION_FORMATS = ("direct", "chain_of_thought")
EVAL_METHODS = ("exact_match", "f1", "judge_score")

FRACTION_TOL = 1e-9


def token_count(text: str) -> int:
    return len(text.split())


@dataclass(frozen=True)
class Example:
    input: str
    target: str
    slice: str = "gold"
    provenance: str = "benchmark"
    entity_values: tuple[str, ...] = ()
    id: str = ""
    length: int = field(init=False)

    def __post_init__(self):
        # length is always recomputed from the input
        object.__setattr__(self, "length", token_count(self.input))
        object.__setattr__(self, "entity_values", tuple(self.entity_values))

    def with_slice(self, slice_: str) -> "Example":
        return replace(self, slice=slice_)

    def to_record(self) -> dict:
        return {
            "input": self.input,
            "target": self.target,
            "slice": self.slice,
            "length": self.length,
            "entity_values": list(self.entity_values),
            "provenance": self.provenance,
            "id": self.id,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Example":
        return cls(
            input=rec["input"],
            target=rec["target"],
            slice=rec.get("slice", "gold"),
            provenance=rec.get("provenance", "benchmark"),
            entity_values=tuple(rec.get("entity_values") or ()),
            id=rec.get("id", ""),
        )


@dataclass(frozen=True)
class Composition:
    gold_frac: float
    hard_frac: float
    replay_frac: float

    def as_dict(self) -> dict:
        return {"gold_frac": self.gold_frac, "hard_frac": self.hard_frac, "replay_frac": self.replay_frac}


def composition_ratios(examples: "DatasetSpec | Iterable[Example]") -> Composition:
    """Realized slice fractions of a dataset."""
    items = examples.examples if isinstance(examples, DatasetSpec) else tuple(examples)
    n = len(items)
    if n == 0:
        raise EmptyDataset("composition of an empty dataset is undefined")
    gold = sum(1 for e in items if e.slice == "gold")
    hard = sum(1 for e in items if e.slice == "hard_negative")
    replay = n - gold - hard
    return Composition(gold / n, hard / n, replay / n)


@dataclass(frozen=True)
class DatasetSpec:
    examples: tuple[Example, ...] = ()
    version: int = 0
    parent_version: int | None = None
    curation_log: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        object.__setattr__(self, "curation_log", tuple(self.curation_log))

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def composition(self) -> Composition:
        if not self.examples:
            return Composition(0.0, 0.0, 0.0)
        return composition_ratios(self.examples)

    def slice(self, name: str) -> tuple[Example, ...]:
        return tuple(e for e in self.examples if e.slice == name)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.examples:
            h.update(json.dumps([e.input, e.target, e.slice], ensure_ascii=False).encode())
        return h.hexdigest()[:16]

    def waivers(self) -> tuple[str, ...]:
        return tuple(entry for entry in self.curation_log if entry.startswith("waiver:"))

    def header_record(self) -> dict:
        return {
            "type": "dataset",
            "version": self.version,
            "parent_version": self.parent_version,
            "size": len(self.examples),
            "composition": self.composition.as_dict(),
            "curation_log": list(self.curation_log),
        }


@dataclass(frozen=True)
class HyperConfig:
    model_id: str = "toy-nb-base"
    lora_rank: int = 16
    learning_rate: float = 0.1
    batch_size: int = 8
    epochs: int = 2
    system_prompt: str = ""


@dataclass(frozen=True)
class StrategySpec:
    supervision_format: str = "direct"
    teacher_id: str | None = None
    eval_method: str = "exact_match"


@dataclass(frozen=True)
class Pipeline:
    dataset: DatasetSpec
    hyper: HyperConfig = HyperConfig()
    strategy: StrategySpec = StrategySpec()
    mode: str = "cold_start"
    parent_dataset_size: int = 0

    def key(self) -> tuple:
        """Identity used to merge transpositions in the search graph."""
        return (self.dataset.fingerprint(), self.hyper, self.strategy, self.mode)


def validate_pipeline(p: Pipeline) -> list[str]:
    """Every invariant violation across the embedded types; empty list means valid."""
    out: list[str] = []
    d, h, s = p.dataset, p.hyper, p.strategy
    if p.mode not in MODES:
        out.append(f"unknown mode {p.mode!r}")
    for e in d.examples:
        if e.slice not in SLICES:
            out.append(f"unknown slice {e.slice!r}")
        if e.provenance not in PROVENANCES:
            out.append(f"unknown provenance {e.provenance!r}")
        if not e.input.strip() and e.provenance != "probe":
            out.append("empty input outside a probe example")
    if d.examples:
        comp = d.composition
        total = comp.gold_frac + comp.hard_frac + comp.replay_frac
        if abs(total - 1.0) > FRACTION_TOL:
            out.append("composition fractions do not sum to 1")
        if p.mode == "cold_start" and comp.replay_frac > 0:
            out.append("replay in cold start")
        if p.mode == "production" and p.parent_dataset_size > 0 and comp.replay_frac == 0:
            out.append("production pipeline with a parent dataset lacks replay")
    if d.parent_version is not None and d.version <= d.parent_version:
        out.append("dataset version must exceed parent_version")
    if h.epochs < 1:
        out.append("epochs ≥ 1")
    if not h.learning_rate > 0:
        out.append("learning_rate > 0")
    if h.batch_size < 1:
        out.append("batch_size ≥ 1")
    if h.lora_rank < 1:
        out.append("lora_rank ≥ 1")
    if s.supervision_format not in SUPERVISION_FORMATS:
        out.append(f"unknown supervision format {s.supervision_format!r}")
    if s.supervision_format == "chain_of_thought" and not s.teacher_id:
        out.append("chain_of_thought requires a teacher_id")
    if s.eval_method not in EVAL_METHODS:
        out.append(f"unknown eval method {s.eval_method!r}")
    return out


# ---------------------------------------------------------------- JSONL


def write_examples(examples: Iterable[Example], fh: IO[str]) -> None:
    for e in examples:
        fh.write(json.dumps(e.to_record(), ensure_ascii=False, sort_keys=True) + "\n")


def write_dataset(d: DatasetSpec, fh: IO[str]) -> None:
    fh.write(json.dumps(d.header_record(), ensure_ascii=False, sort_keys=True) + "\n")
    write_examples(d.examples, fh)


def read_dataset(lines: Iterable[str]) -> DatasetSpec:
    it: Iterator[str] = (ln for ln in lines if ln.strip())
    header = json.loads(next(it))
    examples = [Example.from_record(json.loads(ln)) for ln in it]
    return DatasetSpec(
        examples=tuple(examples),
        version=header["version"],
        parent_version=header.get("parent_version"),
        curation_log=tuple(header.get("curation_log", ())),
    )
