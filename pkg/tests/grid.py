"""Exhaustively enumerable search landscape shared by the search and acceptance tests."""

import random

from dataclasses import replace

from ftloop.curation import CurationConfig, ToyCounterGenerator, audit_dataset
from ftloop.pipeline import DatasetSpec, Example, HyperConfig, Pipeline
from ftloop.search import Budget, EvalResult, GridProposer, SearchContext, run_search
from ftloop.toy import ToyTaskSpec, generate_examples, score, train

EPOCHS = (1, 2, 4)
LEARNING_RATES = (0.002, 0.2)


def grid_problem(seed):
    task = ToyTaskSpec.build(seed=seed, unique_per_label=8, shared_per_pair=8, input_length_range=(3, 6))
    rng = random.Random(f"grid:{seed}")
    base = generate_examples(task, 40, rng, id_prefix="g")
    gen = ToyCounterGenerator(task)
    hard = [gen(e, rng)[1] for e in base if gen.supports(e.target)]
    flipped = [Example(e.input, rng.choice(task.labels)) if rng.random() < 0.25 else e for e in base]
    variants = {
        "base": DatasetSpec(tuple(base), version=1),
        "hard": DatasetSpec(tuple(base + hard), version=2),
        "noisy": DatasetSpec(tuple(flipped + hard), version=3),
    }
    # the landscape is deliberately off-band; each variant records why
    cfg = CurationConfig.for_mode("cold_start")
    variants = {k: replace(d, curation_log=tuple(f"waiver: {v} (grid landscape fixture)"
                                                 for v in audit_dataset(d, cfg)))
                for k, d in variants.items()}
    eval_set = generate_examples(task, 150, random.Random(f"grid-eval:{seed}"), id_prefix="e")
    proposer = GridProposer(variants, EPOCHS, LEARNING_RATES)

    def evaluator(p):
        return EvalResult(score(train(p.dataset, p.hyper, labels=task.labels), eval_set))

    root = proposer.pipeline_at(Pipeline(variants["base"], HyperConfig()), "noisy", 1, LEARNING_RATES[0])
    return root, proposer, evaluator


def brute_force(root, proposer, evaluator):
    scored = [(evaluator(p).score, proposer.coords(p)) for p in proposer.all_pipelines(root)]
    top = max(s for s, _ in scored)
    return top, {c for s, c in scored if s == top}, scored


def grid_search(seed, budget):
    root, proposer, evaluator = grid_problem(seed)
    # tau above 1 keeps the search from stopping early
    res = run_search(root, evaluator, Budget(max_evaluations=budget, tau=1.01), proposer,
                     SearchContext(seed=seed), mode="cold_start")
    top, argmax, _ = brute_force(root, proposer, evaluator)
    return res, top, argmax, proposer
