"""Noise injection for synthetic inference logs.

Each sample rolls independently against every kind's rate, in table order, so
several kinds can stack on one input. Kinds are tagged fixable, partial or
poisonous; the tag decides whether the original answer still holds for the
corrupted input.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import TooShort, UnsupportedKind
from .phrasebooks import default_rates, phrasebooks
from .pipeline import Example

# name, category, toxicity -- table order is application order
KIND_TABLE: tuple[tuple[str, str, str], ...] = (
    ("typo", "linguistic", "fixable"),
    ("phonetic_misspelling", "linguistic", "fixable"),
    ("syntactic_error", "linguistic", "fixable"),
    ("grammatical_error", "linguistic", "fixable"),
    ("punctuation_abuse", "linguistic", "fixable"),
    ("casing_error", "linguistic", "fixable"),
    ("abbreviation_slang", "linguistic", "fixable"),
    ("code_switching", "linguistic", "fixable"),
    ("preamble_injection", "structural", "partial"),
    ("instruction_following", "structural", "fixable"),
    ("truncation", "structural", "partial"),
    ("html_remnant", "structural", "fixable"),
    ("missing_modality", "structural", "fixable"),
    ("intra_duplication", "structural", "fixable"),
    ("very_long", "structural", "fixable"),
    ("ocr_artifact", "structural", "fixable"),
    ("empty_input", "structural", "poisonous"),
    ("utf8_anomaly", "structural", "fixable"),
    ("metadata_leakage", "structural", "fixable"),
    ("label_flip_adversarial", "adversarial", "poisonous"),
    ("boundary_probe", "adversarial", "fixable"),
    ("false_premise", "adversarial", "poisonous"),
    ("prompt_injection", "adversarial", "poisonous"),
    ("cross_benchmark", "adversarial", "fixable"),
    ("jailbreak", "adversarial", "poisonous"),
    ("off_domain", "off_task", "poisonous"),
    ("meta_question", "off_task", "fixable"),
    ("context_assumption", "off_task", "fixable"),
    ("verbatim_recall", "off_task", "fixable"),
    ("gibberish", "off_task", "poisonous"),
    ("retry_storm", "off_task", "fixable"),
    ("near_duplicate", "repetition", "fixable"),
    ("exact_duplicate", "repetition", "fixable"),
)

KIND_NAMES = tuple(k for k, _, _ in KIND_TABLE)
CATEGORY = {k: c for k, c, _ in KIND_TABLE}
TOXICITY = {k: t for k, _, t in KIND_TABLE}
POISONOUS_KINDS = frozenset(k for k, t in TOXICITY.items() if t == "poisonous")
PARTIAL_KINDS = frozenset(k for k, t in TOXICITY.items() if t == "partial")
SEQUENCE_KINDS = frozenset({"retry_storm", "near_duplicate", "exact_duplicate"})

DEFAULT_RATES = default_rates()


@dataclass(frozen=True)
class PerturbationKind:
    name: str
    category: str
    default_rate: float
    toxicity: str


def kinds() -> tuple[PerturbationKind, ...]:
    return tuple(PerturbationKind(n, c, DEFAULT_RATES[n], t) for n, c, t in KIND_TABLE)


@dataclass(frozen=True)
class PerturbContext:
    """Task knowledge some adversarial kinds need (gold label, label vocabularies, pool median)."""

    gold: str | None = None
    task: object | None = None  # ToyTaskSpec
    median_length: float | None = None
    index: int = 0


@dataclass(frozen=True)
class PerturbedSample:
    original: Example
    noisy_input: str
    applied: tuple[str, ...]

    @property
    def toxicity(self) -> str:
        if any(k in POISONOUS_KINDS for k in self.applied):
            return "poisonous"
        return "fixable" if self.applied else "clean"

    @property
    def partial(self) -> bool:
        return any(k in PARTIAL_KINDS for k in self.applied)


def overall_toxicity(applied: Sequence[str]) -> str:
    if any(k in POISONOUS_KINDS for k in applied):
        return "poisonous"
    return "fixable" if applied else "clean"


def validate_rates(rates: Mapping[str, float]) -> dict[str, float]:
    out = {}
    for k in KIND_NAMES:
        r = float(rates.get(k, 0.0))
        if not 0.0 <= r <= 1.0:
            raise ValueError(f"rate for {k} outside [0, 1]: {r}")
        out[k] = r
    unknown = set(rates) - set(KIND_NAMES)
    if unknown:
        raise ValueError(f"unknown perturbation kinds: {sorted(unknown)}")
    return out


def perturb_sample(
    e: Example,
    rates: Mapping[str, float] | None,
    rng: random.Random,
    ctx: PerturbContext | None = None,
    poison: bool | None = None,
) -> PerturbedSample:
    """Roll every kind against its rate and apply the hits in table order.

    ``poison=True`` forces exactly one poisonous kind (drawn in proportion to its
    rate) and suppresses the others; ``poison=False`` suppresses all of them.
    This is how stage-level poison rates are layered on top of the table.
    """
    rates = validate_rates(DEFAULT_RATES if rates is None else rates)
    forced = None
    if poison:
        pool = [k for k in KIND_NAMES if k in POISONOUS_KINDS]
        forced = rng.choices(pool, weights=[DEFAULT_RATES[k] for k in pool])[0]
    ctx = ctx or PerturbContext(gold=e.target)
    text = e.input
    applied = []
    for kind in KIND_NAMES:
        if kind in POISONOUS_KINDS and poison is not None:
            hit = kind == forced
        else:
            hit = rng.random() < rates[kind]
        if not hit:
            continue
        applied.append(kind)
        if kind not in SEQUENCE_KINDS:
            text = apply_kind(kind, text, rng, ctx)
    if not applied:
        text = e.input
    return PerturbedSample(original=e, noisy_input=text, applied=tuple(applied))


# ---------------------------------------------------------------- per-kind rules

_LETTERS = "abcdefghijklmnopqrstuvwxyz"
_PHONETIC = (("ph", "f"), ("ck", "k"), ("c", "k"), ("s", "z"), ("v", "b"), ("ee", "ea"),
             ("i", "y"), ("o", "oh"), ("k", "q"), ("t", "tt"), ("d", "t"), ("g", "j"))
_OCR_PRIMARY = {"l": "1", "1": "l", "O": "0", "0": "O"}
_OCR_FALLBACK = (("m", "rn"), ("i", "1"), ("e", "c"), ("a", "o"), ("u", "v"))


def _typo(text: str, rng: random.Random) -> str:
    if not text:
        return text
    chars = list(text)
    for _ in range(max(1, len(text) // 20)):
        op = rng.choice(("transpose", "insert", "delete"))
        if op == "transpose" and len(chars) >= 2:
            i = rng.randrange(len(chars) - 1)
            chars[i], chars[i + 1] = chars[i + 1], chars[i]
        elif op == "delete" and len(chars) >= 2:
            del chars[rng.randrange(len(chars))]
        else:
            chars.insert(rng.randrange(len(chars) + 1), rng.choice(_LETTERS))
    return "".join(chars)


def _phonetic(text: str, rng: random.Random) -> str:
    toks = text.split()
    if not toks:
        return text
    order = list(range(len(toks)))
    rng.shuffle(order)
    for i in order:
        rules = [(a, b) for a, b in _PHONETIC if a in toks[i]]
        if rules:
            a, b = rng.choice(rules)
            toks[i] = toks[i].replace(a, b, 1)
            return " ".join(toks)
    i = order[0]
    toks[i] = toks[i] + toks[i][-1]
    return " ".join(toks)


def _syntactic(text: str, rng: random.Random) -> str:
    toks = text.split()
    if len(toks) >= 3:
        del toks[rng.randrange(len(toks))]
    if len(toks) >= 2:
        i = rng.randrange(len(toks) - 1)
        toks[i], toks[i + 1] = toks[i + 1], toks[i]
    return " ".join(toks)


def _grammatical(text: str, rng: random.Random) -> str:
    words = phrasebooks()["function_words"]
    toks = text.split()
    present = [i for i, t in enumerate(toks) if t.lower() in words]
    if present and rng.random() < 0.5:
        i = rng.choice(present)
        toks[i] = rng.choice([w for w in words if w != toks[i].lower()])
    else:
        toks.insert(rng.randrange(len(toks) + 1), rng.choice(words))
    return " ".join(toks)


def _punctuation(text: str, rng: random.Random, mode: str | None = None) -> str:
    mode = mode or rng.choice(("missing", "excessive"))
    if mode == "missing":
        stripped = "".join(ch for ch in text if ch not in ".,;:!?'\"")
        if stripped != text:
            return stripped
    toks = text.split()
    if not toks:
        return text + "!!!"
    i = rng.randrange(len(toks))
    toks[i] = toks[i] + rng.choice(("!!!", "??", ",,", "...", "?!"))
    return " ".join(toks)


def _casing(text: str, rng: random.Random, mode: str | None = None) -> str:
    mode = mode or rng.choice(("lower", "upper", "random"))
    if mode == "lower":
        return text.lower()
    if mode == "upper":
        return text.upper()
    return "".join(ch.upper() if rng.random() < 0.5 else ch.lower() for ch in text)


def _slang(text: str, rng: random.Random) -> str:
    book = phrasebooks()
    mapping = book["slang"]
    toks = text.split()
    hits = [i for i, t in enumerate(toks) if t.lower() in mapping]
    if hits:
        for i in hits:
            toks[i] = mapping[toks[i].lower()]
        return " ".join(toks)
    return (text + " " + rng.choice(book["slang_tail"])).strip()


def _insert_phrase(text: str, phrase: str, rng: random.Random) -> str:
    toks = text.split()
    i = rng.randrange(len(toks) + 1)
    return " ".join(toks[:i] + phrase.split() + toks[i:])


def _truncate(text: str, rng: random.Random) -> str:
    if len(text) < 2:
        return text
    cut = rng.randint(math.ceil(len(text) / 2), len(text) - 1)
    return text[:cut]


def _intra_dup(text: str, rng: random.Random) -> str:
    toks = text.split()
    if not toks:
        return text
    i = rng.randrange(len(toks))
    j = min(len(toks), i + rng.randint(1, 3))
    return " ".join(toks[:j] + toks[i:j] + toks[j:])


def _very_long(text: str, rng: random.Random, median: float | None) -> str:
    filler = phrasebooks()["filler"]
    base = median if median else max(len(text.split()), 1)
    out = text
    while len(out.split()) <= 2 * base:
        out = (out + " " + rng.choice(filler)).strip()
    return out


def ocr_artifact(text: str, rng: random.Random, positions: Sequence[int] | None = None) -> str:
    """l/1 and O/0 confusion; ``positions`` pins which characters flip."""
    chars = list(text)
    candidates = [i for i, ch in enumerate(chars) if ch in _OCR_PRIMARY]
    if positions is not None:
        for i in positions:
            chars[i] = _OCR_PRIMARY[chars[i]]
        return "".join(chars)
    if candidates:
        picked = [i for i in candidates if rng.random() < 0.5] or [rng.choice(candidates)]
        for i in picked:
            chars[i] = _OCR_PRIMARY[chars[i]]
        return "".join(chars)
    options = [(a, b) for a, b in _OCR_FALLBACK if a in text]
    if not options:
        return text + " l"
    a, b = rng.choice(options)
    starts = [i for i in range(len(text)) if text.startswith(a, i)]
    i = rng.choice(starts)
    return text[:i] + b + text[i + len(a):]


def _utf8(text: str, rng: random.Random) -> str:
    mode = rng.choice(("bom", "quotes", "null", "apostrophe"))
    if mode == "bom":
        return "﻿" + text
    if mode == "quotes":
        return "“" + text + "”"
    if mode == "null":
        toks = text.split(" ")
        i = rng.randrange(len(toks) + 1)
        return " ".join(toks[:i] + ["\x00"] + toks[i:])
    return text + " ’s"


def _task_tokens(ctx: PerturbContext):
    task = ctx.task
    if task is None or ctx.gold is None or ctx.gold not in task.vocab:
        return None
    return task


def _flip_to(text: str, task, gold: str, target: str, rng: random.Random, frac: float) -> str:
    gold_vocab = set(task.vocab[gold])
    target_vocab = task.unique_vocab(target) or task.vocab[target]
    toks = text.split()
    content = [i for i, t in enumerate(toks) if t in gold_vocab]
    if not content:
        return " ".join(toks + [rng.choice(target_vocab) for _ in range(3)])
    k = max(1, math.ceil(frac * len(content)))
    for i in rng.sample(content, k):
        toks[i] = rng.choice(target_vocab)
    return " ".join(toks)


def _label_flip(text: str, rng: random.Random, ctx: PerturbContext, mode: str | None) -> str:
    task = _task_tokens(ctx)
    if mode == "number_swap" or task is None:
        toks = text.split()
        nums = [i for i, t in enumerate(toks) if t.isdigit()]
        if nums:
            for i in nums:
                toks[i] = str((int(toks[i]) + rng.randint(1, 9)) % 100)
            return " ".join(toks)
        if len(toks) >= 2:
            i, j = rng.sample(range(len(toks)), 2)
            toks[i], toks[j] = toks[j], toks[i]
        return " ".join(toks)
    target = task.partner(ctx.gold) or rng.choice([lab for lab in task.labels if lab != ctx.gold])
    return _flip_to(text, task, ctx.gold, target, rng, 0.8)


def _boundary_probe(text: str, rng: random.Random, ctx: PerturbContext, mode: str | None) -> str:
    task = _task_tokens(ctx)
    if mode == "number_distractor" or task is None or task.partner(ctx.gold) is None:
        return _insert_phrase(text, str(rng.randint(2, 99)), rng)
    partner_unique = task.unique_vocab(task.partner(ctx.gold))
    gold_unique = set(task.unique_vocab(ctx.gold))
    n_gold = sum(1 for t in text.split() if t in gold_unique)
    k = max(1, min(2, n_gold - 1)) if n_gold > 1 else 1
    out = text
    for _ in range(k):
        out = _insert_phrase(out, rng.choice(partner_unique), rng)
    return out


def _false_premise(text: str, rng: random.Random, ctx: PerturbContext) -> str:
    neg = rng.choice(phrasebooks()["negation"])
    task = _task_tokens(ctx)
    if task is None:
        toks = text.split()
        return " ".join(toks[:1] + [neg] + toks[1:])
    target = rng.choice([lab for lab in task.labels if lab != ctx.gold and lab != task.negative_label])
    flipped = _flip_to(text, task, ctx.gold, target, rng, 0.7)
    return neg + " " + flipped


def _gibberish(text: str, rng: random.Random) -> str:
    rows = "".join(phrasebooks()["keyboard_rows"])
    n = max(8, int(len(text) * rng.uniform(0.8, 1.2)))
    out = []
    run = 0
    for _ in range(n):
        if run >= 3 and rng.random() < 0.2:
            out.append(" ")
            run = 0
        else:
            out.append(rng.choice(rows))
            run += 1
    return "".join(out).strip()


def apply_kind(kind: str, text: str, rng: random.Random, ctx: PerturbContext | None = None,
               mode: str | None = None) -> str:
    """Apply one kind to a single text. ``mode`` pins a sub-mode where the kind has several."""
    ctx = ctx or PerturbContext()
    book = phrasebooks()
    if kind in SEQUENCE_KINDS:
        raise UnsupportedKind(f"{kind} operates on log sequences, not single texts")
    if kind == "typo":
        return _typo(text, rng)
    if kind == "phonetic_misspelling":
        return _phonetic(text, rng)
    if kind == "syntactic_error":
        return _syntactic(text, rng)
    if kind == "grammatical_error":
        return _grammatical(text, rng)
    if kind == "punctuation_abuse":
        return _punctuation(text, rng, mode)
    if kind == "casing_error":
        return _casing(text, rng, mode)
    if kind == "abbreviation_slang":
        return _slang(text, rng)
    if kind == "code_switching":
        return _insert_phrase(text, rng.choice(book["code_switch"]), rng)
    if kind == "preamble_injection":
        return (rng.choice(book["preamble"]) + " " + text).strip()
    if kind == "instruction_following":
        return (text + " " + rng.choice(book["instruction_following"])).strip()
    if kind == "truncation":
        return _truncate(text, rng)
    if kind == "html_remnant":
        left, right = rng.choice(book["html"])
        return left + text + right
    if kind == "missing_modality":
        return (text + " " + rng.choice(book["missing_modality"])).strip()
    if kind == "intra_duplication":
        return _intra_dup(text, rng)
    if kind == "very_long":
        return _very_long(text, rng, ctx.median_length)
    if kind == "ocr_artifact":
        return ocr_artifact(text, rng)
    if kind == "empty_input":
        return "  " if mode == "whitespace" else ""
    if kind == "utf8_anomaly":
        return _utf8(text, rng)
    if kind == "metadata_leakage":
        return (text + " " + rng.choice(book["metadata_leakage"]) % (ctx.index or rng.randint(1, 9999))).strip()
    if kind == "label_flip_adversarial":
        return _label_flip(text, rng, ctx, mode)
    if kind == "boundary_probe":
        return _boundary_probe(text, rng, ctx, mode)
    if kind == "false_premise":
        return _false_premise(text, rng, ctx)
    if kind == "prompt_injection":
        task = ctx.task
        if task is not None:
            target = rng.choice([lab for lab in task.labels if lab != ctx.gold])
        else:
            target = "yes"
        return (text + " " + rng.choice(book["prompt_injection"]) % target).strip()
    if kind == "cross_benchmark":
        return (text + " " + rng.choice(book["cross_benchmark"])).strip()
    if kind == "jailbreak":
        return (rng.choice(book["jailbreak"]) + " " + text).strip()
    if kind == "off_domain":
        return rng.choice(book["off_domain"])
    if kind == "meta_question":
        return (rng.choice(book["meta_question"]) + " " + text).strip()
    if kind == "context_assumption":
        return (rng.choice(book["context_assumption"]) + " " + text).strip()
    if kind == "verbatim_recall":
        return (rng.choice(book["verbatim_recall"]) + " " + text).strip()
    if kind == "gibberish":
        return _gibberish(text, rng)
    raise UnsupportedKind(f"unknown perturbation kind {kind!r}")


# ---------------------------------------------------------------- repetition


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


_NEAR_DUP_FILLERS = ("please", "just", "also", "now", "again", "quickly", "here", "today")


def make_near_duplicate(e: Example, rng: random.Random, min_jaccard: float = 0.8) -> Example:
    """A token-level variant of ``e`` whose token-set Jaccard with the original stays ≥ ``min_jaccard``.

    The edit plan (substitutions s, insertions i of tokens new to the set) is
    drawn among plans with (m - s) / (m + s + i) ≥ min_jaccard for m distinct
    tokens; at 5 distinct tokens only a single insertion qualifies.
    """
    toks = e.input.split()
    if len(toks) < 5:
        raise TooShort("near-duplicates need at least 5 tokens")
    distinct = set(toks)
    m = len(distinct)
    plans = [(s, i) for s in range(0, 3) for i in range(0, 4)
             if s + i >= 1 and (m - s) / (m + s + i) >= min_jaccard]
    fresh = [w for w in _NEAR_DUP_FILLERS if w not in distinct]
    if not plans or len(fresh) < 3 + 2:
        out = list(toks)
        i = rng.randrange(len(out))
        out.insert(i, out[i])
        return Example(input=" ".join(out), target=e.target, slice=e.slice, provenance=e.provenance,
                       entity_values=e.entity_values, id=e.id)
    s, n_ins = rng.choice(plans)
    rng.shuffle(fresh)
    out = list(toks)
    # substitute every occurrence of s distinct tokens so each really leaves the set
    for victim in rng.sample(sorted(distinct), s):
        new = fresh.pop()
        out = [new if t == victim else t for t in out]
    for _ in range(n_ins):
        out.insert(rng.randrange(len(out) + 1), fresh.pop())
    result = Example(input=" ".join(out), target=e.target, slice=e.slice, provenance=e.provenance,
                     entity_values=e.entity_values, id=e.id)
    assert jaccard(toks, out) >= min_jaccard
    return result


# ---------------------------------------------------------------- log sequences


@dataclass(frozen=True)
class LogTiming:
    latency_mu: float = math.log(300.0)
    latency_sigma: float = 0.8
    timeout_rate: float = 0.015
    timeout_ms: float = 30000.0
    mean_gap_ms: float = 2000.0
    batch_prob: float = 0.1
    storm_min: int = 3
    storm_max: int = 8


def decorate_log_sequence(logs: Sequence[dict], rng: random.Random, timing: LogTiming = LogTiming(),
                          start_ts: float = 1_700_000_000_000.0) -> list[dict]:
    """Attach timestamps and latencies, expand retry storms, and insert timeout/retry pairs.

    Input records are time-ordered dicts with at least ``id`` and an optional
    ``hidden`` list of perturbation kinds. Batch effects only cluster timestamps.
    """
    out: list[dict] = []
    ts = start_ts
    for rec in logs:
        if rng.random() < timing.batch_prob:
            ts += rng.uniform(1.0, 20.0)
        else:
            ts += rng.expovariate(1.0 / timing.mean_gap_ms)
        base = dict(rec)
        base["ts"] = round(ts, 3)
        base["latency_ms"] = round(rng.lognormvariate(timing.latency_mu, timing.latency_sigma), 3)
        copies = [base]
        if "retry_storm" in (rec.get("hidden") or ()):
            k = rng.randint(timing.storm_min, timing.storm_max)
            copies = []
            for j in range(k):
                c = dict(base)
                c["id"] = f"{rec['id']}-rs{j}"
                c["ts"] = round(ts + j * rng.uniform(50.0, 400.0), 3)
                c["latency_ms"] = round(rng.lognormvariate(timing.latency_mu, timing.latency_sigma), 3)
                copies.append(c)
            ts = copies[-1]["ts"]
        for c in copies:
            if rng.random() < timing.timeout_rate:
                failed = dict(c)
                failed["latency_ms"] = timing.timeout_ms
                failed["prediction"] = ""
                failed["verdict"] = "fail"
                failed["judge_reasoning"] = "timeout"
                meta = dict(failed.get("judge_meta") or {})
                meta["status"] = "timeout"
                failed["judge_meta"] = meta
                retry = dict(c)
                retry["id"] = f"{c['id']}-retry"
                retry["ts"] = round(c["ts"] + timing.timeout_ms, 3)
                meta = dict(retry.get("judge_meta") or {})
                meta["status"] = "retry"
                retry["judge_meta"] = meta
                out.extend((failed, retry))
            else:
                out.append(c)
    out.sort(key=lambda r: (r["ts"], r["id"]))
    return out
