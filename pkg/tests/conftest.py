import random

import pytest
from hypothesis import settings

from ftloop.pipeline import DatasetSpec, Example

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


def make_dataset(gold=0, hard=0, replay=0, version=1, parent_version=None):
    ex = [Example(f"g{i} tok", "a", "gold") for i in range(gold)]
    ex += [Example(f"h{i} tok", "b", "hard_negative") for i in range(hard)]
    ex += [Example(f"r{i} tok", "a", "replay") for i in range(replay)]
    return DatasetSpec(tuple(ex), version=version, parent_version=parent_version)


@pytest.fixture
def rng():
    return random.Random(1234)
