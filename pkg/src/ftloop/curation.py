"""Training-set assembly under the five quality controls.

Datasets are built from three slices (gold, hard negatives, replay). Slice
counts are chosen as the largest total that keeps every fraction inside its
band; the remaining checks (label balance, entity repeats, surface patterns,
length distribution) are enforced where a cheap repair exists and otherwise
recorded as a ``waiver:`` line in the curation log.
"""

from __future__ import annotations

import math
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _kernels
from .detector import PoisonDetector
from .errors import (
    BadFraction,
    EmptyDataset,
    EmptyReference,
    InfeasibleComposition,
    NoCounterexample,
)
from .perturbation import jaccard
from .pipeline import DatasetSpec, Example
from .toy import ToyTaskSpec, entity_name

PRODUCTION_BANDS = {"gold": (0.40, 0.60), "hard_negative": (0.25, 0.35), "replay": (0.10, 0.20)}
COLD_BANDS = {"gold": (0.60, 0.70), "hard_negative": (0.30, 0.40), "replay": (0.0, 0.0)}
REPLAY_PARENT_BAND = (0.1, 0.2)

SIZE_TARGETS = {"classification": (100, 200), "ner": (100, 200), "generation": (500, 3000)}


@dataclass(frozen=True)
class CurationConfig:
    mode: str = "production"
    gold_frac: float = 0.50
    hard_frac: float = 0.30
    replay_frac: float = 0.20
    max_label_ratio: float = 3.0
    max_entity_repeats: int = 3
    min_patterns_per_label: int = 3
    length_match_tolerance: float = 0.25
    slack: float = 0.02
    max_size: int | None = None

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "CurationConfig":
        if mode == "cold_start":
            return cls(mode=mode, gold_frac=0.65, hard_frac=0.35, replay_frac=0.0, **kw)
        return cls(mode=mode, **kw)

    @property
    def bands(self) -> dict:
        return COLD_BANDS if self.mode == "cold_start" else PRODUCTION_BANDS

    def targets(self) -> dict:
        return {"gold": self.gold_frac, "hard_negative": self.hard_frac, "replay": self.replay_frac}

    def adapted(self, error_type: str | None) -> "CurationConfig":
        """Shift targets toward gold (recall errors) or hard negatives (precision errors)."""
        if self.mode == "cold_start" or error_type is None:
            return self
        if error_type == "recall":
            return replace(self, gold_frac=0.55, hard_frac=0.30, replay_frac=0.15)
        if error_type == "precision":
            return replace(self, gold_frac=0.50, hard_frac=0.33, replay_frac=0.17)
        raise ValueError(f"unknown error type {error_type!r}")


def size_target(task_kind: str) -> tuple[int, int]:
    try:
        return SIZE_TARGETS[task_kind]
    except KeyError:
        raise ValueError(f"unknown task kind {task_kind!r}") from None


# ---------------------------------------------------------------- replay


def sample_replay(parent: DatasetSpec, fraction: float, rng: random.Random) -> list[Example]:
    lo, hi = REPLAY_PARENT_BAND
    if not lo <= fraction <= hi:
        raise BadFraction(f"replay fraction {fraction} outside [{lo}, {hi}]")
    k = round(fraction * len(parent))
    return [e.with_slice("replay") for e in rng.sample(list(parent.examples), k)]


# ---------------------------------------------------------------- 2-for-1


class ToyCounterGenerator:
    """Builds a boundary gold example and its hard negative for a confusable pair.

    Tokens are first mapped onto the task vocabulary (case-folded, unknown
    tokens replaced by shared-pair tokens). The boundary gold keeps at most a
    third of its tokens unique to the gold label (the rest become shared-pair
    tokens); the hard negative swaps those unique tokens for the partner's
    unique tokens and takes the partner label.
    """

    def __init__(self, task: ToyTaskSpec):
        self.task = task

    def supports(self, label: str) -> bool:
        return self.task.partner(label) is not None

    def __call__(self, gold: Example, rng: random.Random) -> tuple[Example, Example]:
        a = gold.target
        b = self.task.partner(a)
        if b is None:
            raise NoCounterexample(f"label {a!r} has no confusable partner")
        a_unique = set(self.task.unique_vocab(a))
        b_unique = list(self.task.unique_vocab(b))
        shared = list(self.task.shared_vocab(a, b))
        known = self.task.all_tokens()
        entities = set(gold.entity_values)
        toks = []
        for t in gold.input.split():
            # noisy surface forms would otherwise be copied into the negative and cancel out
            if t in known or t in entities:
                toks.append(t)
            elif t.lower() in known:
                toks.append(t.lower())
            elif shared:
                toks.append(rng.choice(shared))
        if not toks:
            raise NoCounterexample("cannot build a counterexample from an empty input")
        spots = [i for i, t in enumerate(toks) if t in a_unique]
        keep = max(1, len(toks) // 3)
        if not spots:
            i = rng.randrange(len(toks))
            toks[i] = rng.choice(sorted(a_unique))
            spots = [i]
        rng.shuffle(spots)
        for i in spots[keep:]:
            toks[i] = rng.choice(shared)
        spots = sorted(spots[:keep])
        boundary = " ".join(toks)
        neg = list(toks)
        for i in spots:
            neg[i] = rng.choice(b_unique)
        # back off swaps until the pair stays similar enough
        while jaccard(toks, neg) < 0.5 and len(spots) > 1:
            i = spots.pop()
            neg[i] = toks[i]
        g = Example(input=boundary, target=a, slice="gold", provenance="synthesized",
                    entity_values=gold.entity_values, id=f"{gold.id}-b")
        h = Example(input=" ".join(neg), target=b, slice="hard_negative", provenance="synthesized",
                    entity_values=gold.entity_values, id=f"{gold.id}-h")
        return g, h


def two_for_one(gold: Example, counter_generator, rng: random.Random) -> tuple[Example, Example]:
    if counter_generator is None:
        raise NoCounterexample("no counter generator configured")
    return counter_generator(gold, rng)


# ---------------------------------------------------------------- checks


def check_label_balance(d: DatasetSpec | Sequence[Example], max_ratio: float = 3.0) -> list[str]:
    items = d.examples if isinstance(d, DatasetSpec) else d
    counts = Counter(e.target for e in items)
    out = []
    for a in sorted(counts):
        for b in sorted(counts):
            if a != b and counts[a] > max_ratio * counts[b]:
                out.append(f"label balance: {a}={counts[a]} exceeds {max_ratio:g}x {b}={counts[b]}")
    return out


def ks_statistic(a: Sequence[float], b: Sequence[float]) -> float:
    return float(_kernels.ks_statistic(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def check_length_match(d: DatasetSpec | Sequence[Example], reference: Sequence[int],
                       tolerance: float = 0.25) -> tuple[float, bool]:
    items = d.examples if isinstance(d, DatasetSpec) else d
    if len(reference) == 0:
        raise EmptyReference("length reference is empty")
    if not items:
        raise EmptyDataset("length match of an empty dataset")
    stat = ks_statistic([e.length for e in items], reference)
    return stat, stat <= tolerance


def check_entity_diversity(d: DatasetSpec | Sequence[Example], max_repeats: int = 3) -> list[str]:
    items = d.examples if isinstance(d, DatasetSpec) else d
    counts = Counter(v for e in items for v in e.entity_values)
    return [f"entity repeats: {v!r} appears {n}x" for v, n in sorted(counts.items()) if n > max_repeats]


def template_of(e: Example) -> str:
    text = e.input
    for v in e.entity_values:
        text = text.replace(v, "<ENT>")
    return text


def check_pattern_diversity(d: DatasetSpec | Sequence[Example], min_patterns: int = 3) -> list[str]:
    items = d.examples if isinstance(d, DatasetSpec) else d
    by_label: dict[str, list[Example]] = defaultdict(list)
    for e in items:
        by_label[e.target].append(e)
    out = []
    for lab in sorted(by_label):
        group = by_label[lab]
        if len(group) < min_patterns:
            continue
        n = len({template_of(e) for e in group})
        if n < min_patterns:
            out.append(f"pattern diversity: {lab} has {n} templates over {len(group)} examples")
    return out


# ---------------------------------------------------------------- repairs


def _balance(pool: list[Example], max_ratio: float, rng: random.Random) -> list[Example]:
    """Downsample labels above ``max_ratio`` times the rarest label, corrected failures last."""
    counts = Counter(e.target for e in pool)
    if len(counts) < 2:
        return pool
    cap = int(math.floor(max_ratio * min(counts.values())))
    keep_ids: set[int] = set()
    by_label: dict[str, list[int]] = defaultdict(list)
    for i, e in enumerate(pool):
        by_label[e.target].append(i)
    for lab in sorted(by_label):
        idx = by_label[lab]
        if len(idx) <= cap:
            keep_ids.update(idx)
            continue
        # corrected failures are the point of the curriculum; drop other provenances first
        firm = [i for i in idx if pool[i].provenance == "corrected_failure"]
        rest = [i for i in idx if pool[i].provenance != "corrected_failure"]
        if len(firm) >= cap:
            keep_ids.update(rng.sample(firm, cap))
        else:
            keep_ids.update(firm)
            keep_ids.update(rng.sample(rest, cap - len(firm)))
    return [e for i, e in enumerate(pool) if i in keep_ids]


def diversify_entities(examples: Sequence[Example], max_repeats: int, rng: random.Random,
                       taken: set[str] | None = None) -> tuple[list[Example], int]:
    """Replace entity occurrences beyond ``max_repeats`` with fresh synthetic names."""
    seen: Counter = Counter()
    taken = set(taken or ()) | {v for e in examples for v in e.entity_values}
    out = []
    replaced = 0
    for e in examples:
        if not e.entity_values:
            out.append(e)
            continue
        text = e.input
        values = []
        for v in e.entity_values:
            seen[v] += 1
            if seen[v] > max_repeats:
                new = entity_name(rng)
                while new in taken:
                    new = entity_name(rng)
                taken.add(new)
                seen[new] += 1
                text = text.replace(v, new)
                values.append(new)
                replaced += 1
            else:
                values.append(v)
        out.append(replace(e, input=text, entity_values=tuple(values)) if values != list(e.entity_values) else e)
    return out, replaced


def _repair_balance(examples: list[Example], cfg: CurationConfig, rng: random.Random) -> tuple[list[Example], int]:
    """Greedily drop gold or hard examples of the most over-represented label while bands allow."""
    out = list(examples)
    dropped = 0
    targets = cfg.targets()
    while True:
        counts = Counter(e.target for e in out)
        if len(counts) < 2:
            break
        worst = max(sorted(counts), key=lambda lab: counts[lab])
        if counts[worst] <= cfg.max_label_ratio * min(counts.values()):
            break
        n = len(out) - 1
        slices = Counter(e.slice for e in out)
        options = []
        for name in ("gold", "hard_negative"):
            idx = [i for i, e in enumerate(out) if e.target == worst and e.slice == name]
            soft = [i for i in idx if out[i].provenance != "corrected_failure"]
            idx = soft or idx
            if not idx:
                continue
            after = {k: (slices[k] - (k == name)) / n for k in ("gold", "hard_negative", "replay")}
            if all(cfg.bands[k][0] - cfg.slack <= after[k] <= cfg.bands[k][1] + cfg.slack for k in after):
                options.append((-(slices[name] / len(out) - targets[name]), name, idx))
        if not options:
            break
        _, _, idx = min(options)
        del out[rng.choice(idx)]
        dropped += 1
    return out, dropped


def _choose_counts(n_gold: int, n_hard: int, n_parent: int, cfg: CurationConfig,
                   targets: Mapping[str, float], bands: Mapping[str, tuple[float, float]],
                   parent_band: bool = True):
    """Largest feasible (gold, hard, replay) counts; raises naming the binding constraint.

    With ``parent_band`` the replay count must also be 10-20% of the parent.
    """
    g_t, h_t, r_t = targets["gold"], targets["hard_negative"], targets["replay"]
    if n_parent > 0 and r_t > 0 and parent_band:
        r_lo = math.ceil(REPLAY_PARENT_BAND[0] * n_parent)
        r_hi = max(math.floor(REPLAY_PARENT_BAND[1] * n_parent), r_lo)
    elif n_parent > 0 and r_t > 0:
        r_lo, r_hi = 1, n_parent
    else:
        r_lo = r_hi = 0
    top = n_gold + n_hard + r_hi
    if cfg.max_size is not None:
        top = min(top, cfg.max_size)
    binding = "gold: pool too small"
    s = cfg.slack
    for n in range(top, 0, -1):
        ng = min(n_gold, round(g_t * n))
        nr = min(max(round(r_t * n), r_lo), r_hi)
        nh = n - ng - nr
        if nh < 0:
            binding = "replay: parent band forces more replay than the dataset can hold"
            continue
        if nh > n_hard:
            binding = "hard_negative: not enough hard negatives"
            continue
        ok = True
        for name, cnt in (("gold", ng), ("hard_negative", nh), ("replay", nr)):
            lo, hi = bands[name]
            if not lo - s <= cnt / n <= hi + s:
                binding = f"{name}: fraction {cnt / n:.3f} outside [{lo}, {hi}]"
                ok = False
                break
        if ok:
            return ng, nh, nr
    raise InfeasibleComposition(binding)


def compose_dataset(
    gold: Sequence[Example],
    hard: Sequence[Example],
    parent: DatasetSpec | None,
    cfg: CurationConfig,
    rng: random.Random,
    counter_generator: Callable | None = None,
    reference_lengths: Sequence[int] | None = None,
    error_type: str | None = None,
    version: int | None = None,
    parent_version: int | None = None,
) -> DatasetSpec:
    """Assemble gold ∪ hard ∪ replay with every fraction inside its band.

    Hard negatives are topped up from gold examples of confusable labels via
    ``counter_generator`` when the given pool is short. In production mode with
    an empty parent the replay share goes to gold, which is logged as a waiver.
    ``version``/``parent_version`` override the default numbering (parent + 1).
    """
    if not gold:
        raise EmptyDataset("gold pool is empty")
    log: list[str] = []
    parent = parent if parent is not None and len(parent) else None
    if cfg.mode == "production" and parent is None:
        cfg = CurationConfig.for_mode("cold_start", max_label_ratio=cfg.max_label_ratio,
                                      max_entity_repeats=cfg.max_entity_repeats,
                                      min_patterns_per_label=cfg.min_patterns_per_label,
                                      length_match_tolerance=cfg.length_match_tolerance,
                                      slack=cfg.slack, max_size=cfg.max_size)
        log.append("waiver: composition: no parent dataset, replay share redistributed to gold (65:35)")
    cfg = cfg.adapted(error_type)
    if error_type and cfg.mode == "production":
        log.append(f"adapt: dominant {error_type} errors, targets "
                   f"{cfg.gold_frac:.2f}/{cfg.hard_frac:.2f}/{cfg.replay_frac:.2f}")

    gold_pool = _balance([e.with_slice("gold") for e in gold], cfg.max_label_ratio, rng)
    hard_pool = [e.with_slice("hard_negative") for e in hard]
    if len(gold_pool) < len(gold):
        log.append(f"balance: downsampled gold {len(gold)} -> {len(gold_pool)}")

    targets = cfg.targets()
    need_hard = math.ceil(targets["hard_negative"] / max(targets["gold"], 1e-9) * len(gold_pool))
    if len(hard_pool) < need_hard and counter_generator is not None:
        sources = [e for e in gold_pool if counter_generator.supports(e.target)]
        rng.shuffle(sources)
        added = 0
        for src in sources:
            if len(hard_pool) >= need_hard:
                break
            _, h = counter_generator(src, rng)
            hard_pool.append(h)
            added += 1
        if added:
            log.append(f"two_for_one: generated {added} hard negatives")
    n_parent = len(parent) if parent is not None else 0
    try:
        ng, nh, nr = _choose_counts(len(gold_pool), len(hard_pool), n_parent, cfg, targets, cfg.bands)
    except InfeasibleComposition as exc:
        if n_parent == 0 or "replay" not in str(exc):
            raise
        # the composition bands are the hard rule; the parent-fraction band gives way
        ng, nh, nr = _choose_counts(len(gold_pool), len(hard_pool), n_parent, cfg, targets, cfg.bands,
                                    parent_band=False)
    chosen_gold = rng.sample(gold_pool, ng) if ng < len(gold_pool) else list(gold_pool)
    chosen_hard = rng.sample(hard_pool, nh) if nh < len(hard_pool) else list(hard_pool)
    replay_slice: list[Example] = []
    if nr:
        frac = nr / n_parent
        if REPLAY_PARENT_BAND[0] <= frac <= REPLAY_PARENT_BAND[1] and round(frac * n_parent) == nr:
            replay_slice = sample_replay(parent, frac, rng)
        else:
            replay_slice = [e.with_slice("replay") for e in rng.sample(list(parent.examples), nr)]
            log.append(f"waiver: replay size: {nr} of {n_parent} parent examples is outside the 10-20% band")
        log.append(f"replay: sampled {nr} of {n_parent} parent examples")
    examples = chosen_gold + chosen_hard + replay_slice
    examples, n_drop = _repair_balance(examples, cfg, rng)
    if n_drop:
        log.append(f"balance: dropped {n_drop} examples of over-represented labels")

    examples, n_rep = diversify_entities(examples, cfg.max_entity_repeats, rng)
    if n_rep:
        log.append(f"entities: replaced {n_rep} repeated entity values")

    if version is not None:
        new_version = version
        if parent_version is None and parent is not None:
            parent_version = parent.version
    elif parent is not None:
        new_version, parent_version = parent.version + 1, parent.version
    else:
        new_version = 1

    d = DatasetSpec(examples=tuple(examples), version=new_version, parent_version=parent_version)
    log.extend(_audit(d, cfg, reference_lengths))
    return replace(d, curation_log=tuple(log))


def _audit(d: DatasetSpec, cfg: CurationConfig, reference_lengths: Sequence[int] | None) -> list[str]:
    out = []
    comp = d.composition
    for name, frac in (("gold", comp.gold_frac), ("hard_negative", comp.hard_frac), ("replay", comp.replay_frac)):
        lo, hi = cfg.bands[name]
        if not lo - cfg.slack <= frac <= hi + cfg.slack:
            out.append(f"waiver: composition: {name} fraction {frac:.3f} outside band")
    problems = check_label_balance(d, cfg.max_label_ratio)
    out.extend(f"waiver: {p}" for p in problems)
    out.extend(f"waiver: {p}" for p in check_entity_diversity(d, cfg.max_entity_repeats))
    out.extend(f"waiver: {p}" for p in check_pattern_diversity(d, cfg.min_patterns_per_label))
    if reference_lengths:
        stat, ok = check_length_match(d, reference_lengths, cfg.length_match_tolerance)
        if ok:
            out.append(f"check: length match KS={stat:.4f}")
        else:
            out.append(f"waiver: length match: KS={stat:.4f} above {cfg.length_match_tolerance}")
    out.append(f"check: composition {comp.gold_frac:.3f}/{comp.hard_frac:.3f}/{comp.replay_frac:.3f}")
    return out


def audit_dataset(d: DatasetSpec, cfg: CurationConfig, reference_lengths: Sequence[int] | None = None) -> list[str]:
    """Violations of the quality checks that are not covered by a waiver in ``d.curation_log``."""
    waived = " ".join(d.waivers())
    out = []
    for line in _audit(d, cfg, reference_lengths):
        if line.startswith("waiver:"):
            topic = line.split(":")[1].strip()
            if topic not in waived:
                out.append(line[len("waiver: "):])
    return out


# ---------------------------------------------------------------- poison filter


@dataclass(frozen=True)
class FilterReport:
    kept: int
    excluded: int
    reasons: tuple[tuple[str, int], ...]


def filter_poison(failures: Sequence, detector: PoisonDetector):
    """Split corrected failures into (kept_fixable, excluded_poison, report)."""
    kept, excluded = [], []
    reasons: Counter = Counter()
    for t in failures:
        why = detector.reason(t.input, t.prediction, t.corrected)
        if why is None:
            kept.append(t)
        else:
            excluded.append(t)
            reasons[why] += 1
    report = FilterReport(len(kept), len(excluded), tuple(sorted(reasons.items())))
    return kept, excluded, report
