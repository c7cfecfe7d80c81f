"""Rule-based poison detector used by taxonomy construction and curation."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

from .phrasebooks import phrasebooks

_PUNCT = re.compile(r"[^\w]+", re.UNICODE)
_ALPHABET = "abcdefghijklmnopqrstuvwxyz "


def normalize_tokens(text: str) -> list[str]:
    out = []
    for tok in text.lower().split():
        tok = _PUNCT.sub("", tok)
        if tok:
            out.append(tok)
    return out


def _letters(text: str) -> str:
    s = "".join(ch if ch in _ALPHABET else " " for ch in text.lower())
    return " ".join(s.split())


class BigramModel:
    """Add-one smoothed character bigram model over lowercase letters and space."""

    def __init__(self, corpus: list[str]):
        self.pairs: Counter = Counter()
        self.firsts: Counter = Counter()
        for text in corpus:
            s = " " + _letters(text) + " "
            for a, b in zip(s, s[1:]):
                self.pairs[a, b] += 1
                self.firsts[a] += 1

    def surprisal(self, text: str) -> float:
        """Mean bits per character transition; 0.0 for texts with no transitions."""
        s = _letters(text)
        if len(s) < 2:
            return 0.0
        v = len(_ALPHABET)
        bits = 0.0
        n = 0
        for a, b in zip(s, s[1:]):
            p = (self.pairs[a, b] + 1) / (self.firsts[a] + v)
            bits -= math.log2(p)
            n += 1
        return bits / n


def _english_strings(node) -> list[str]:
    # every phrasebook string except the keyboard rows used to make gibberish
    if isinstance(node, str):
        return [node]
    if isinstance(node, dict):
        out = []
        for k, v in node.items():
            if k != "keyboard_rows":
                out.append(k)
                out.extend(_english_strings(v))
        return out
    return [s for v in node for s in _english_strings(v)]


def _phrase_stems(key: str) -> list[str]:
    stems = []
    for phrase in phrasebooks()[key]:
        stem = phrase.split("%s")[0].strip().lower()
        stems.append(" ".join(normalize_tokens(stem)))
    return stems


@dataclass
class PoisonDetector:
    """Flags traces whose raw (input, correction) pair would teach wrong behaviour.

    Predicates, in order: empty input, injection/jailbreak phrasebook match,
    gibberish (mean character-bigram surprisal above ``entropy_threshold`` bits
    under a reference model of task and conversational text), off-domain (no
    token in any task vocabulary), correction inconsistency (the corrected
    label's vocabulary covers fewer input tokens than the predicted label's).
    """

    task: object  # ToyTaskSpec
    entropy_threshold: float = 4.2
    _vocab: dict = field(init=False, repr=False)
    _all: frozenset = field(init=False, repr=False)
    _stems: list = field(init=False, repr=False)
    _bigrams: BigramModel = field(init=False, repr=False)

    def __post_init__(self):
        self._vocab = {lab: frozenset(t.lower() for t in toks) for lab, toks in self.task.vocab.items()}
        self._all = frozenset().union(*self._vocab.values())
        self._stems = _phrase_stems("prompt_injection") + _phrase_stems("jailbreak")
        corpus = [" ".join(toks) for toks in self.task.vocab.values()]
        corpus += [" ".join(self.task.entity_pool)]
        corpus += _english_strings(phrasebooks())
        self._bigrams = BigramModel(corpus)

    def overlap(self, tokens: list[str], label: str) -> int:
        vocab = self._vocab.get(label)
        if not vocab:
            return 0
        return sum(1 for t in tokens if t in vocab)

    def surprisal(self, text: str) -> float:
        return self._bigrams.surprisal(text)

    def reason(self, text: str, prediction: str | None = None, corrected: str | None = None) -> str | None:
        """Name of the first predicate that fires, or None when the pair looks safe."""
        if not text.strip():
            return "empty"
        toks = normalize_tokens(text)
        joined = " ".join(toks)
        if any(stem and stem in joined for stem in self._stems):
            return "injection"
        if self.surprisal(text) > self.entropy_threshold:
            return "gibberish"
        if not any(t in self._all for t in toks):
            return "off_domain"
        if (corrected is not None and prediction is not None and corrected != prediction
                and corrected in self._vocab and prediction in self._vocab):
            if self.overlap(toks, corrected) < self.overlap(toks, prediction):
                return "inconsistent"
        return None

    def is_poison(self, text: str, prediction: str | None = None, corrected: str | None = None) -> bool:
        return self.reason(text, prediction, corrected) is not None
