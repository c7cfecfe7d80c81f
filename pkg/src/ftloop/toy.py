"""Synthetic confusable-intent task, count-based learner and exact-match judge.

The learner is a multinomial count model: every training example adds
``min(epochs, 4)`` to the count of each of its tokens under its label, and
prediction takes the argmax of summed log smoothed frequencies. It is cheap,
deterministic and checkable by hand, yet responds to every lever the search
can pull (label noise, epochs, smoothing, prompt tokens, hard negatives).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .phrasebooks import phrasebook_tokens
from .errors import EmptyDataset, EmptyEvalSet
from .pipeline import DatasetSpec, Example, HyperConfig

EPOCH_WEIGHT_CAP = 4

_CONSONANTS = "bdgkmnprstvz"
_VOWELS = "aeiou"

CHITCHAT_WORDS = (
    "hello", "thanks", "okay", "nice", "cool", "great", "sure", "maybe", "whatever",
    "lovely", "sunny", "weekend", "coffee", "music", "movie", "funny", "joke", "bored",
    "tired", "happy", "sleepy", "awesome", "dinner", "friend", "chat", "random",
    "nothing", "really", "honestly", "yeah",
)

DEFAULT_LABELS = ("balance", "change_language", "flight_status", "none", "time", "transfer", "translate")
DEFAULT_PAIRS = (("change_language", "translate"), ("flight_status", "time"), ("balance", "transfer"))


def _pseudo_word(rng: random.Random) -> str:
    n_syl = rng.choice((2, 2, 3))
    w = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(n_syl))
    if rng.random() < 0.3:
        w += rng.choice(_CONSONANTS)
    return w


def _fresh_words(rng: random.Random, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        w = _pseudo_word(rng)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def entity_name(rng: random.Random) -> str:
    return _pseudo_word(rng).capitalize()


@dataclass(frozen=True)
class ToyTaskSpec:
    labels: tuple[str, ...]
    vocab: dict
    confusable_pairs: tuple[tuple[str, str], ...]
    input_length_range: tuple[int, int] = (5, 12)
    seed: int = 0
    negative_label: str | None = "none"
    entity_pool: tuple[str, ...] = ()
    entity_rate: float = 0.5

    @classmethod
    def build(
        cls,
        seed: int = 0,
        labels: Sequence[str] = DEFAULT_LABELS,
        confusable_pairs: Sequence[Sequence[str]] = DEFAULT_PAIRS,
        unique_per_label: int = 24,
        shared_per_pair: int = 12,
        input_length_range: Sequence[int] = (5, 12),
        negative_label: str | None = "none",
        n_entities: int = 40,
        entity_rate: float = 0.5,
        reserved: Iterable[str] | None = None,
    ) -> "ToyTaskSpec":
        rng = random.Random(f"toy-task:{seed}")
        labels = tuple(sorted(labels))
        pairs = tuple(tuple(sorted(p)) for p in confusable_pairs)
        if reserved is None:
            reserved = phrasebook_tokens()
        taken = set(w.lower() for w in reserved) | set(CHITCHAT_WORDS)
        vocab: dict[str, list[str]] = {}
        for lab in labels:
            if lab == negative_label:
                vocab[lab] = list(CHITCHAT_WORDS)
            else:
                vocab[lab] = _fresh_words(rng, unique_per_label, taken)
        for a, b in pairs:
            shared = _fresh_words(rng, shared_per_pair, taken)
            vocab[a].extend(shared)
            vocab[b].extend(shared)
        entities = tuple(w.capitalize() for w in _fresh_words(rng, n_entities, taken))
        return cls(
            labels=labels,
            vocab={k: tuple(v) for k, v in vocab.items()},
            confusable_pairs=pairs,
            input_length_range=tuple(input_length_range),
            seed=seed,
            negative_label=negative_label,
            entity_pool=entities,
            entity_rate=entity_rate,
        )

    @classmethod
    def from_config(cls, cfg: dict) -> "ToyTaskSpec":
        if "vocab" in cfg:
            return cls(
                labels=tuple(sorted(cfg["labels"])),
                vocab={k: tuple(v) for k, v in cfg["vocab"].items()},
                confusable_pairs=tuple(tuple(sorted(p)) for p in cfg.get("confusable_pairs", ())),
                input_length_range=tuple(cfg.get("input_length_range", (5, 12))),
                seed=cfg.get("seed", 0),
                negative_label=cfg.get("negative_label"),
                entity_pool=tuple(cfg.get("entity_pool", ())),
                entity_rate=cfg.get("entity_rate", 0.0),
            )
        keys = ("seed", "labels", "confusable_pairs", "unique_per_label", "shared_per_pair",
                "input_length_range", "negative_label", "n_entities", "entity_rate")
        return cls.build(**{k: cfg[k] for k in keys if k in cfg})

    def to_config(self) -> dict:
        return {
            "labels": list(self.labels),
            "vocab": {k: list(v) for k, v in sorted(self.vocab.items())},
            "confusable_pairs": [list(p) for p in self.confusable_pairs],
            "input_length_range": list(self.input_length_range),
            "seed": self.seed,
            "negative_label": self.negative_label,
            "entity_pool": list(self.entity_pool),
            "entity_rate": self.entity_rate,
        }

    # -- vocabulary helpers

    def partner(self, label: str) -> str | None:
        for a, b in self.confusable_pairs:
            if label == a:
                return b
            if label == b:
                return a
        return None

    def shared_vocab(self, a: str, b: str) -> tuple[str, ...]:
        sb = set(self.vocab[b])
        return tuple(t for t in self.vocab[a] if t in sb)

    def unique_vocab(self, label: str) -> tuple[str, ...]:
        others = set()
        for lab, toks in self.vocab.items():
            if lab != label:
                others.update(toks)
        return tuple(t for t in self.vocab[label] if t not in others)

    def overlap(self, a: str, b: str) -> float:
        shared = len(self.shared_vocab(a, b))
        return shared / min(len(self.vocab[a]), len(self.vocab[b]))

    def all_tokens(self) -> frozenset[str]:
        out = set()
        for toks in self.vocab.values():
            out.update(toks)
        return frozenset(out)

    def label_of_token(self) -> dict[str, frozenset[str]]:
        out: dict[str, set[str]] = {}
        for lab, toks in self.vocab.items():
            for t in toks:
                out.setdefault(t, set()).add(lab)
        return {k: frozenset(v) for k, v in out.items()}


def generate_examples(spec: ToyTaskSpec, n: int, rng: random.Random, id_prefix: str = "ex",
                      labels: Sequence[str] | None = None) -> list[Example]:
    """``n`` labelled examples with labels drawn uniformly from ``labels`` (default: all)."""
    if n < 1:
        raise ValueError("n must be ≥ 1")
    labels = tuple(labels) if labels else spec.labels
    lo, hi = spec.input_length_range
    out = []
    for i in range(n):
        lab = rng.choice(labels)
        toks = [rng.choice(spec.vocab[lab]) for _ in range(rng.randint(lo, hi))]
        ents: tuple[str, ...] = ()
        if spec.entity_pool and rng.random() < spec.entity_rate:
            ent = rng.choice(spec.entity_pool)
            toks.insert(rng.randrange(len(toks) + 1), ent)
            ents = (ent,)
        out.append(Example(input=" ".join(toks), target=lab, entity_values=ents, id=f"{id_prefix}{i}"))
    return out


# ---------------------------------------------------------------- learner


@dataclass(frozen=True, eq=False)
class ToyModel:
    labels: tuple[str, ...]
    vocab: tuple[str, ...]
    counts: np.ndarray
    alpha: float = 1.0
    prompt_tokens: tuple[str, ...] = ()
    model_id: str = "toy-nb-base"
    _index: dict = field(default=None, repr=False, compare=False)
    _log_probs: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.float64).reshape(len(self.labels), len(self.vocab))
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.vocab)})
        totals = counts.sum(axis=1)
        denom = totals[:, None] + self.alpha * max(len(self.vocab), 1)
        object.__setattr__(self, "_log_probs", np.log((counts + self.alpha) / denom))

    @classmethod
    def untrained(cls, labels: Sequence[str], model_id: str = "toy-nb-base") -> "ToyModel":
        labels = tuple(sorted(labels))
        return cls(labels=labels, vocab=(), counts=np.zeros((len(labels), 0)), model_id=model_id)

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def encode(self, texts: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        ids: list[int] = []
        offsets = [0]
        index = self._index
        for text in texts:
            for tok in text.split():
                j = index.get(tok)
                if j is not None:
                    ids.append(j)
            for tok in self.prompt_tokens:
                j = index.get(tok)
                if j is not None:
                    ids.append(j)
            offsets.append(len(ids))
        return np.asarray(ids, dtype=np.int64), np.asarray(offsets, dtype=np.int64)

    def predict_many(self, texts: Sequence[str]) -> list[tuple[str, float]]:
        if not texts:
            return []
        ids, offsets = self.encode(texts)
        best, conf = _kernels.score_batch(self._log_probs, ids, offsets)
        return [(self.labels[b], float(c)) for b, c in zip(best, conf)]

    def predict(self, text: str) -> tuple[str, float]:
        return self.predict_many([text])[0]

    def to_json(self) -> str:
        counts = [[int(c) if float(c).is_integer() else float(c) for c in row] for row in self.counts]
        payload = {
            "model_id": self.model_id,
            "labels": list(self.labels),
            "vocab": list(self.vocab),
            "counts": counts,
            "alpha": self.alpha,
            "prompt_tokens": list(self.prompt_tokens),
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "ToyModel":
        d = json.loads(text)
        return cls(
            labels=tuple(d["labels"]),
            vocab=tuple(d["vocab"]),
            counts=np.asarray(d["counts"], dtype=np.float64).reshape(len(d["labels"]), len(d["vocab"])),
            alpha=d["alpha"],
            prompt_tokens=tuple(d["prompt_tokens"]),
            model_id=d["model_id"],
        )


def predict(model: ToyModel, text: str) -> tuple[str, float]:
    return model.predict(text)


def smoothing_for(learning_rate: float) -> float:
    return min(max(learning_rate * 10.0, 0.01), 10.0)


def epoch_weight(epochs: int) -> int:
    return min(epochs, EPOCH_WEIGHT_CAP)


def train(
    dataset: DatasetSpec | Sequence[Example],
    hyper: HyperConfig = HyperConfig(),
    labels: Sequence[str] | None = None,
    rationale: Callable[[Example], str] | None = None,
    model_id: str | None = None,
) -> ToyModel:
    """Fit the count model. ``rationale`` (chain-of-thought teacher) adds its tokens as extra evidence."""
    examples = dataset.examples if isinstance(dataset, DatasetSpec) else tuple(dataset)
    if not examples:
        raise EmptyDataset("cannot train on an empty dataset")
    w = float(epoch_weight(hyper.epochs))
    alpha = smoothing_for(hyper.learning_rate)
    prompt = tuple(hyper.system_prompt.split())
    labels = tuple(sorted(set(labels) if labels else {e.target for e in examples}))
    lab_index = {lab: i for i, lab in enumerate(labels)}

    docs = []
    for e in examples:
        toks = e.input.split() + list(prompt)
        if rationale is not None:
            toks += rationale(e).split()
        docs.append(toks)
    vocab = tuple(sorted({t for toks in docs for t in toks}))
    index = {t: i for i, t in enumerate(vocab)}
    ids = np.fromiter((index[t] for toks in docs for t in toks), dtype=np.int64)
    offsets = np.zeros(len(docs) + 1, dtype=np.int64)
    np.cumsum([len(toks) for toks in docs], out=offsets[1:])
    lab_ids = np.asarray([lab_index[e.target] for e in examples], dtype=np.int64)
    weights = np.full(len(examples), w)
    counts = _kernels.accumulate_counts(ids, offsets, lab_ids, weights, len(labels), len(vocab))
    return ToyModel(labels=labels, vocab=vocab, counts=counts, alpha=alpha, prompt_tokens=prompt,
                    model_id=model_id or hyper.model_id)


@dataclass(frozen=True)
class Verdict:
    verdict: str
    reasoning: str

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"


def judge(prediction: str, gold: str) -> Verdict:
    if prediction == gold:
        return Verdict("pass", f"exact match: predicted {prediction!r} equals gold {gold!r}")
    return Verdict("fail", f"mismatch: predicted {prediction!r}, gold {gold!r}")


def score(model: ToyModel, eval_set: Sequence[Example]) -> float:
    """Mean exact-match pass rate; the search objective."""
    if not eval_set:
        raise EmptyEvalSet("cannot score on an empty evaluation set")
    preds = model.predict_many([e.input for e in eval_set])
    hits = sum(1 for (p, _), e in zip(preds, eval_set) if judge(p, e.target).passed)
    return hits / len(eval_set)


def failures(model: ToyModel, eval_set: Sequence[Example]) -> list[tuple[Example, str]]:
    preds = model.predict_many([e.input for e in eval_set])
    return [(e, p) for (p, _), e in zip(preds, eval_set) if p != e.target]


def toy_rationale(spec: ToyTaskSpec) -> Callable[[Example], str]:
    """Built-in chain-of-thought teacher: names the input tokens that belong to the gold label."""
    vocab = {lab: set(toks) for lab, toks in spec.vocab.items()}

    def annotate(e: Example) -> str:
        hits = [t for t in e.input.split() if t in vocab.get(e.target, ())]
        return f"tokens {' '.join(hits)} overlap label {e.target}"

    return annotate


def bayes_posterior(log_likelihoods: Sequence[float]) -> list[float]:
    m = max(log_likelihoods)
    z = sum(math.exp(v - m) for v in log_likelihoods)
    return [math.exp(v - m) / z for v in log_likelihoods]
