"""Fixed phrasebooks and the default noise-rate table, shipped as package data."""

import json
from functools import lru_cache
from importlib import resources


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    return json.loads(resources.files("ftloop.data").joinpath(name).read_text(encoding="utf-8"))


def phrasebooks() -> dict:
    return load("phrasebooks.json")


def default_rates() -> dict[str, float]:
    return dict(load("rates.json"))


@lru_cache(maxsize=None)
def phrasebook_tokens() -> frozenset[str]:
    """Every lowercase word appearing in any phrasebook, used to keep toy vocabularies disjoint."""
    out: set[str] = set()

    def walk(node):
        if isinstance(node, str):
            for w in node.lower().replace("%s", " ").replace("%d", " ").split():
                out.add(w.strip(".,:?!()[]<>\"'=-"))
        elif isinstance(node, dict):
            for k, v in node.items():
                walk(k)
                walk(v)
        else:
            for v in node:
                walk(v)

    walk(phrasebooks())
    out.discard("")
    return frozenset(out)
