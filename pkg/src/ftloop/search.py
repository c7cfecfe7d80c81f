"""Monte Carlo Graph Search over training pipelines.

The graph is a DAG: a proposal whose pipeline already exists becomes an extra
edge to the existing node instead of a second evaluation (transposition). Node
statistics are taken over the node's descendant set, counted once per node no
matter how many paths lead there:

    n_i  = |{i} ∪ desc(i)|
    f̄_i  = mean score over the evaluated, non-failed members of that set
    UCT  = f̄_i + c(t) · sqrt(ln N / n_i)

with N the number of evaluations so far and c(t) decaying linearly.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import IO, Any, Callable, Protocol, Sequence

from .errors import MenuExhausted, NeedTwoBranches, SearchExhausted
from .pipeline import Pipeline, StrategySpec

NEG_INF = float("-inf")
COMPONENTS = ("D", "H", "S")


@dataclass(frozen=True)
class Budget:
    max_evaluations: int = 60
    stagnation_window: int = 3
    top_k: int = 3
    epsilon: int = 2
    tau: float = 0.96
    c0: float = 1.0
    c_min: float = 0.1

    def __post_init__(self):
        if min(self.max_evaluations, self.stagnation_window, self.top_k) < 1:
            raise ValueError("budget fields must be positive")
        if self.epsilon < 0 or not self.tau > 0:
            raise ValueError("epsilon must be ≥ 0 and tau > 0")

    @classmethod
    def cold(cls, **kw) -> "Budget":
        return cls(**{"max_evaluations": 60, **kw})

    @classmethod
    def production(cls, **kw) -> "Budget":
        return cls(**{"max_evaluations": 30, **kw})


@dataclass(frozen=True)
class EvalResult:
    score: float
    regressions: int | None = None
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Move:
    description: str
    component: str
    apply: Callable[[Pipeline, random.Random], Pipeline] = field(compare=False, repr=False)


@dataclass(eq=False)
class SearchNode:
    id: int
    pipeline: Pipeline
    score: float = NEG_INF
    regressions: int | None = None
    failed: bool = False
    info: dict = field(default_factory=dict)
    move: str = "root"
    component: str | None = None
    parents: list[int] = field(default_factory=list)
    children: list[int] = field(default_factory=list)
    members: set[int] = field(default_factory=set)  # {self} ∪ descendants
    visits: int = 0
    score_sum: float = 0.0
    score_n: int = 0
    menu: list[Move] | None = None
    cursor: int = 0
    exhausted: bool = False
    last_recovery: int = -1
    evaluated: bool = False

    @property
    def descendant_mean(self) -> float:
        return self.score_sum / self.score_n if self.score_n else NEG_INF

    def feasible(self, mode: str, epsilon: int) -> bool:
        if self.failed or not self.evaluated:
            return False
        if mode == "production" and self.regressions is not None:
            return self.regressions <= epsilon
        return True


class SearchGraph:
    def __init__(self):
        self.nodes: list[SearchNode] = []
        self.index: dict[tuple, int] = {}
        self.evaluations = 0
        self.best_id: int | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def best(self) -> SearchNode | None:
        return self.nodes[self.best_id] if self.best_id is not None else None

    def add_node(self, pipeline: Pipeline, parents: Sequence[int] = (), move: str = "root",
                 component: str | None = None) -> SearchNode:
        node = SearchNode(id=len(self.nodes), pipeline=pipeline, move=move, component=component)
        node.members = {node.id}
        self.nodes.append(node)
        self.index[pipeline.key()] = node.id
        for p in dict.fromkeys(parents):
            self.nodes[p].children.append(node.id)
            node.parents.append(p)
        return node

    def ancestors(self, node_id: int) -> set[int]:
        seen: set[int] = set()
        stack = list(self.nodes[node_id].parents)
        while stack:
            a = stack.pop()
            if a not in seen:
                seen.add(a)
                stack.extend(self.nodes[a].parents)
        return seen

    def add_edge(self, parent: int, child: int) -> bool:
        """Link an existing node under another; refused if it would close a cycle."""
        if parent == child or child in self.ancestors(parent) or child in self.nodes[parent].children:
            return False
        self.nodes[parent].children.append(child)
        self.nodes[child].parents.append(parent)
        newcomers = self.nodes[child].members
        for a in self.ancestors(child):
            node = self.nodes[a]
            for m in sorted(newcomers - node.members):
                _absorb(node, self.nodes[m])
        return True

    def is_acyclic(self) -> bool:
        state = [0] * len(self.nodes)
        for start in range(len(self.nodes)):
            if state[start]:
                continue
            stack = [(start, iter(self.nodes[start].children))]
            state[start] = 1
            while stack:
                v, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[v] = 2
                    stack.pop()
                elif state[nxt] == 1:
                    return False
                elif state[nxt] == 0:
                    state[nxt] = 1
                    stack.append((nxt, iter(self.nodes[nxt].children)))
        return True

    def recompute(self, node_id: int) -> tuple[int, float]:
        """From-scratch (visits, descendant mean) for checking the incremental statistics."""
        members = {node_id}
        stack = list(self.nodes[node_id].children)
        while stack:
            c = stack.pop()
            if c not in members:
                members.add(c)
                stack.extend(self.nodes[c].children)
        evaluated = [self.nodes[m] for m in members if self.nodes[m].evaluated]
        scores = [n.score for n in evaluated if not n.failed]
        mean = sum(scores) / len(scores) if scores else NEG_INF
        return len(evaluated), mean


def _absorb(node: SearchNode, member: SearchNode) -> None:
    node.members.add(member.id)
    if member.evaluated:
        node.visits += 1
        if not member.failed:
            node.score_sum += member.score
            node.score_n += 1


def backprop(graph: SearchGraph, node: SearchNode) -> None:
    """Count the freshly evaluated node once in itself and in every DAG ancestor."""
    node.visits += 1
    if not node.failed:
        node.score_sum += node.score
        node.score_n += 1
    for a in sorted(graph.ancestors(node.id)):
        anc = graph.nodes[a]
        if node.id not in anc.members:
            anc.members.add(node.id)
        anc.visits += 1
        if not node.failed:
            anc.score_sum += node.score
            anc.score_n += 1


def uct_score(node: SearchNode, n_total: int, c: float) -> float:
    if node.visits == 0:
        return math.inf
    if n_total < 1:
        raise ValueError("N must be ≥ 1")
    return node.descendant_mean + c * math.sqrt(math.log(n_total) / node.visits)


def exploration_schedule(t: int, budget: Budget | int, c0: float = 1.0, c_min: float = 0.1) -> float:
    if isinstance(budget, Budget):
        total, c0, c_min = budget.max_evaluations, budget.c0, budget.c_min
    else:
        total = budget
    if not 0 <= t <= total:
        raise ValueError("t must lie in [0, budget]")
    frac = t / total if total else 1.0
    return c0 * (1.0 - frac) + c_min * frac


def select_leaf(graph: SearchGraph, c: float) -> SearchNode:
    """Highest-UCT node whose move menu is not exhausted; earliest node wins ties."""
    best = None
    best_u = NEG_INF
    n_total = max(graph.evaluations, 1)
    for node in graph.nodes:
        if node.exhausted or node.failed:
            continue
        u = uct_score(node, n_total, c)
        if best is None or u > best_u:
            best, best_u = node, u
    if best is None:
        raise SearchExhausted("no expandable node left")
    return best


# ---------------------------------------------------------------- proposers


class Proposer(Protocol):
    def menu(self, node: SearchNode, graph: SearchGraph, context: Any) -> list[Move]: ...

    def component_moves(self, node: SearchNode, component: str, context: Any) -> list[Move]: ...


def _move_rng(context: Any, node: SearchNode, k: int) -> random.Random:
    seed = getattr(context, "seed", 0)
    return random.Random(f"move:{seed}:{node.id}:{k}")


def expand(parent: SearchNode, graph: SearchGraph, context: Any, proposer: Proposer) -> tuple[Pipeline, Move]:
    """Next untried move from the parent's menu, applied to the parent pipeline."""
    if parent.menu is None:
        parent.menu = list(proposer.menu(parent, graph, context))
    if parent.cursor >= len(parent.menu):
        parent.exhausted = True
        raise MenuExhausted(f"node {parent.id} has no untried moves")
    k = parent.cursor
    move = parent.menu[k]
    parent.cursor += 1
    if parent.cursor >= len(parent.menu):
        parent.exhausted = True
    return move.apply(parent.pipeline, _move_rng(context, parent, k)), move


def _hyper_moves(p: Pipeline, alt_models: Sequence[str] = ()) -> list[Move]:
    h = p.hyper
    out = [Move("epochs +1", "H", lambda q, r: replace(q, hyper=replace(q.hyper, epochs=q.hyper.epochs + 1)))]
    if h.epochs > 1:
        out.append(Move("epochs -1", "H", lambda q, r: replace(q, hyper=replace(q.hyper, epochs=q.hyper.epochs - 1))))
    out.append(Move("learning_rate x2", "H",
                    lambda q, r: replace(q, hyper=replace(q.hyper, learning_rate=q.hyper.learning_rate * 2))))
    out.append(Move("learning_rate /2", "H",
                    lambda q, r: replace(q, hyper=replace(q.hyper, learning_rate=q.hyper.learning_rate / 2))))
    for mid in alt_models:
        if mid != h.model_id:
            out.append(Move(f"model_id {mid}", "H",
                            lambda q, r, mid=mid: replace(q, hyper=replace(q.hyper, model_id=mid))))
    return out


def _strategy_moves(p: Pipeline, teacher_id: str | None) -> list[Move]:
    s = p.strategy
    if s.supervision_format == "direct" and teacher_id:
        return [Move("supervision chain_of_thought", "S",
                     lambda q, r: replace(q, strategy=replace(q.strategy, supervision_format="chain_of_thought",
                                                              teacher_id=teacher_id)))]
    if s.supervision_format == "chain_of_thought":
        return [Move("supervision direct", "S",
                     lambda q, r: replace(q, strategy=StrategySpec("direct", None, q.strategy.eval_method)))]
    return []


class RuleProposer:
    """Score-banded move menus.

    Below ``rework_below`` the dataset is reworked (regenerate gold, hard
    negatives for the worst confusion, rebalance labels). Between the two
    thresholds the dataset is frozen and hyperparameters move. Above
    ``surgical_above`` only targeted additions are made, at most three
    examples per remaining failure pattern.
    """

    def __init__(self, rework_below: float = 0.80, surgical_above: float = 0.95, per_pattern: int = 3):
        self.rework_below = rework_below
        self.surgical_above = surgical_above
        self.per_pattern = min(per_pattern, 3)

    def band(self, score: float) -> str:
        if score < self.rework_below:
            return "rework"
        if score > self.surgical_above:
            return "surgical"
        return "hyper"

    def data_moves(self, node: SearchNode, context: Any) -> list[Move]:
        ops = context.data_ops
        worst = node.info.get("worst_confusion")
        out = [Move("regenerate gold", "D", lambda q, r: replace(q, dataset=ops.regenerate_gold(q, r)))]
        if worst:
            out.append(Move(f"hard negatives for {worst[0]}->{worst[1]}", "D",
                            lambda q, r, w=tuple(worst): replace(q, dataset=ops.add_hard_negatives(q, w, r))))
        out.append(Move("rebalance labels", "D", lambda q, r: replace(q, dataset=ops.rebalance(q, r))))
        return out

    def surgical_moves(self, node: SearchNode, context: Any) -> list[Move]:
        ops = context.data_ops
        patterns = [tuple(p) for p in node.info.get("failure_patterns", ())]
        if not patterns:
            return []
        out = []
        for k in range(2, self.per_pattern + 1):
            out.append(Move(f"surgical +{k} per failure pattern", "D",
                            lambda q, r, k=k: replace(q, dataset=ops.surgical(q, patterns, k, r))))
        return out

    def menu(self, node: SearchNode, graph: SearchGraph, context: Any) -> list[Move]:
        band = self.band(node.score)
        if band == "rework":
            return self.data_moves(node, context)
        if band == "surgical":
            return self.surgical_moves(node, context)
        return (_hyper_moves(node.pipeline, getattr(context, "alt_model_ids", ()))
                + _strategy_moves(node.pipeline, getattr(context, "teacher_id", None)))

    def component_moves(self, node: SearchNode, component: str, context: Any) -> list[Move]:
        if component == "D":
            return self.data_moves(node, context) + self.surgical_moves(node, context)
        if component == "H":
            return _hyper_moves(node.pipeline, getattr(context, "alt_model_ids", ()))
        return _strategy_moves(node.pipeline, getattr(context, "teacher_id", None))


class GridProposer:
    """Single-coordinate moves over a finite grid of (dataset variant, epochs, learning rate).

    ``variants`` maps a variant name to its DatasetSpec; every move changes
    exactly one coordinate to another grid value.
    """

    def __init__(self, variants: dict, epochs: Sequence[int], learning_rates: Sequence[float]):
        self.variants = dict(variants)
        self.epochs = tuple(epochs)
        self.learning_rates = tuple(learning_rates)
        self._by_fp = {d.fingerprint(): name for name, d in self.variants.items()}

    COORDS = ("epochs", "learning_rate", "dataset")

    def coords(self, p: Pipeline) -> tuple[str, int, float]:
        return self._by_fp[p.dataset.fingerprint()], p.hyper.epochs, p.hyper.learning_rate

    def pipeline_at(self, base: Pipeline, variant: str, epochs: int, lr: float) -> Pipeline:
        return replace(base, dataset=self.variants[variant],
                       hyper=replace(base.hyper, epochs=epochs, learning_rate=lr))

    def all_pipelines(self, base: Pipeline) -> list[Pipeline]:
        return [self.pipeline_at(base, v, e, lr) for v in self.variants for e in self.epochs
                for lr in self.learning_rates]

    def coordinate_moves(self, node: SearchNode, coord: str) -> list[Move]:
        v, e, lr = self.coords(node.pipeline)
        if coord == "dataset":
            return [Move(f"dataset {name}", "D", lambda q, r, name=name: replace(q, dataset=self.variants[name]))
                    for name in self.variants if name != v]
        if coord == "epochs":
            return [Move(f"epochs {ep}", "H", lambda q, r, ep=ep: replace(q, hyper=replace(q.hyper, epochs=ep)))
                    for ep in self.epochs if ep != e]
        return [Move(f"learning_rate {x:g}", "H",
                     lambda q, r, x=x: replace(q, hyper=replace(q.hyper, learning_rate=x)))
                for x in self.learning_rates if x != lr]

    def component_moves(self, node: SearchNode, component: str, context: Any = None) -> list[Move]:
        if component == "D":
            return self.coordinate_moves(node, "dataset")
        if component == "H":
            return self.coordinate_moves(node, "epochs") + self.coordinate_moves(node, "learning_rate")
        return []

    def menu(self, node: SearchNode, graph: SearchGraph, context: Any = None) -> list[Move]:
        # start with the coordinate after the one that produced this node, so a
        # chain of expansions sweeps every coordinate instead of one
        last = node.move.split()[0] if node.move else ""
        start = (self.COORDS.index(last) + 1) % 3 if last in self.COORDS else 0
        order = self.COORDS[start:] + self.COORDS[:start]
        return [mv for coord in order for mv in self.coordinate_moves(node, coord)]


# ---------------------------------------------------------------- stagnation, evolution, fusion


def branch_members(graph: SearchGraph, head: SearchNode, since: int = -1) -> list[SearchNode]:
    """Evaluated members of head's descendant set created after node id ``since``, in creation order."""
    return [graph.nodes[m] for m in sorted(head.members) if graph.nodes[m].evaluated and m > since]


def detect_stagnation(graph: SearchGraph, head: SearchNode, window: int) -> bool:
    """True iff the last ``window`` evaluations under head never beat the best that came before them."""
    if window < 1:
        raise ValueError("window must be ≥ 1")
    members = [n for n in branch_members(graph, head) if n.id != head.id and n.id > head.last_recovery]
    if len(members) < window:
        return False
    recent = members[-window:]
    cutoff = recent[0].id
    before = [n.score for n in branch_members(graph, head) if n.id < cutoff]
    best_before = max(before) if before else NEG_INF
    return all(n.score <= best_before for n in recent)


def branch_head(graph: SearchGraph, node: SearchNode, window: int) -> SearchNode:
    """Ancestor ``window`` primary-parent steps above ``node`` (the root if the path is shorter)."""
    chain = lineage(graph, node)
    return chain[max(0, len(chain) - 1 - window)]


def lineage(graph: SearchGraph, node: SearchNode) -> list[SearchNode]:
    """Primary-parent chain from the root down to ``node``."""
    chain = [node]
    while chain[-1].parents:
        chain.append(graph.nodes[chain[-1].parents[0]])
    return chain[::-1]


def component_gains(graph: SearchGraph, node: SearchNode) -> dict[str, list[float]]:
    gains: dict[str, list[float]] = {c: [] for c in COMPONENTS}
    chain = lineage(graph, node)
    for parent, child in zip(chain, chain[1:]):
        if child.component in gains and not child.failed and not parent.failed:
            gains[child.component].append(child.score - parent.score)
    return gains


def evolve(node: SearchNode, graph: SearchGraph, rng: random.Random, proposer: Proposer,
           context: Any = None) -> tuple[Pipeline, str]:
    """Keep the component with the best mean gain along the lineage, redraw another one."""
    chain = lineage(graph, node)
    gains = component_gains(graph, node)
    if len(chain) - 1 < 2 or not any(gains.values()):
        keep = None
        order = list(COMPONENTS)
        rng.shuffle(order)
        tag = "uniform"
    else:
        means = {c: (sum(v) / len(v) if v else NEG_INF) for c, v in gains.items()}
        keep = max(COMPONENTS, key=lambda c: (means[c], -COMPONENTS.index(c)))
        order = [c for c in COMPONENTS if c != keep]
        rng.shuffle(order)
        tag = f"keep {keep}"
    for comp in order:
        moves = proposer.component_moves(node, comp, context)
        rng.shuffle(moves)
        for mv in moves:
            child = mv.apply(node.pipeline, rng)
            if child.key() != node.pipeline.key():
                return child, f"evolve ({tag}): {mv.description}"
    raise MenuExhausted("evolution found no component to replace")


def top_k(graph: SearchGraph, k: int, mode: str = "cold_start", epsilon: int = 2) -> list[SearchNode]:
    ranked = [n for n in graph.nodes if n.feasible(mode, epsilon)]
    ranked.sort(key=lambda n: (-n.score, n.id))
    return ranked[:k]


def _last_gain(graph: SearchGraph, node: SearchNode, component: str) -> float:
    chain = lineage(graph, node)
    for parent, child in reversed(list(zip(chain, chain[1:]))):
        if child.component == component and not child.failed and not parent.failed:
            return child.score - parent.score
    return NEG_INF


def fuse(top_nodes: Sequence[SearchNode], graph: SearchGraph,
         recompose: Callable[[Pipeline], Pipeline] | None = None) -> Pipeline:
    """Component-wise best-of the top nodes: each of D, H, S comes from the node whose
    last move on that component gained the most (higher node score breaks ties)."""
    if len(top_nodes) < 2:
        raise NeedTwoBranches("fusion needs at least two nodes")
    pick = {}
    for comp in COMPONENTS:
        pick[comp] = max(top_nodes, key=lambda n: (_last_gain(graph, n, comp), n.score, -n.id))
    base = pick["H"].pipeline
    fused = replace(base, dataset=pick["D"].pipeline.dataset, hyper=pick["H"].pipeline.hyper,
                    strategy=pick["S"].pipeline.strategy)
    if recompose is not None:
        fused = recompose(fused)
    return fused


# ---------------------------------------------------------------- driver


@dataclass
class SearchResult:
    best: SearchNode | None
    graph: SearchGraph
    trajectory: list[dict]
    converged: bool
    stop_reason: str

    @property
    def best_pipeline(self) -> Pipeline | None:
        return self.best.pipeline if self.best is not None else None


@dataclass
class SearchContext:
    seed: int = 0
    data_ops: Any = None
    teacher_id: str | None = None
    alt_model_ids: tuple[str, ...] = ()
    recompose: Callable[[Pipeline], Pipeline] | None = None


def _evaluate(graph: SearchGraph, node: SearchNode, evaluator: Callable[[Pipeline], EvalResult]) -> None:
    try:
        res = evaluator(node.pipeline)
        node.score = float(res.score)
        node.regressions = res.regressions
        node.info = dict(res.info)
        if math.isnan(node.score):
            raise ValueError("evaluator returned NaN")
    except Exception as exc:  # noqa: BLE001 - any trainer failure marks the node, search goes on
        node.score = NEG_INF
        node.failed = True
        node.info = {"error": f"{type(exc).__name__}: {exc}"}
        node.exhausted = True
    node.evaluated = True
    graph.evaluations += 1
    backprop(graph, node)


def _record(graph: SearchGraph, node: SearchNode, c: float | None, accepted: bool, rolled_back: bool,
            feasible: bool, kind: str) -> dict:
    return {
        "eval": graph.evaluations,
        "kind": kind,
        "node": node.id,
        "parents": list(node.parents),
        "move": node.move,
        "score": None if node.failed else round(node.score, 12),
        "failed": node.failed,
        "regressions": node.regressions,
        "feasible": feasible,
        "accepted": accepted,
        "rolled_back": rolled_back,
        "best": graph.best_id,
        "c": None if c is None else round(c, 12),
    }


def run_search(
    root: Pipeline,
    evaluator: Callable[[Pipeline], EvalResult],
    budget: Budget,
    proposer: Proposer,
    context: SearchContext | None = None,
    mode: str | None = None,
    tau: float | None = None,
    epsilon: int | None = None,
) -> SearchResult:
    """Select → expand → evaluate → backprop until convergence or the evaluation budget runs out.

    In production mode a candidate with more than ε regressions is recorded but
    never becomes best; cold start uses the unconstrained argmax. A candidate
    scoring below the current best is logged as rolled back; history is kept.
    """
    context = context or SearchContext()
    mode = mode or root.mode
    tau = budget.tau if tau is None else tau
    epsilon = budget.epsilon if epsilon is None else epsilon
    graph = SearchGraph()
    trajectory: list[dict] = []
    rng = random.Random(f"search:{context.seed}")
    recoveries = 0

    def admit(node: SearchNode, c: float | None, kind: str) -> None:
        _evaluate(graph, node, evaluator)
        feasible = node.feasible(mode, epsilon)
        best = graph.best
        accepted = feasible and (best is None or node.score > best.score)
        rolled_back = feasible and best is not None and node.score < best.score
        if accepted:
            graph.best_id = node.id
        trajectory.append(_record(graph, node, c, accepted, rolled_back, feasible, kind))

    def done() -> bool:
        b = graph.best
        if b is None:
            return False
        if mode == "production":
            return b.score >= tau and b.regressions is not None and b.regressions <= epsilon
        return b.score >= tau

    admit(graph.add_node(root), None, "root")
    stop = "budget"
    while graph.evaluations < budget.max_evaluations:
        if done():
            stop = "converged"
            break
        c = exploration_schedule(graph.evaluations, budget)
        try:
            leaf = select_leaf(graph, c)
        except SearchExhausted:
            stop = "exhausted"
            break
        try:
            child, move = expand(leaf, graph, context, proposer)
        except MenuExhausted:
            continue
        key = child.key()
        if key in graph.index:
            target = graph.index[key]
            linked = graph.add_edge(leaf.id, target)
            trajectory.append({"eval": graph.evaluations, "kind": "transposition", "node": target,
                               "parents": [leaf.id], "move": move.description, "linked": linked})
            continue
        node = graph.add_node(child, [leaf.id], move.description, move.component)
        admit(node, c, "expand")

        if graph.evaluations >= budget.max_evaluations:
            break
        head = branch_head(graph, node, budget.stagnation_window)
        if detect_stagnation(graph, head, budget.stagnation_window):
            head.last_recovery = len(graph.nodes) - 1
            pipeline, parents, desc, comp = _recover(graph, head, budget, proposer, context, rng, recoveries,
                                                     mode, epsilon)
            recoveries += 1
            if pipeline is None:
                continue
            key = pipeline.key()
            if key in graph.index:
                target = graph.index[key]
                linked = [p for p in parents if graph.add_edge(p, target)]
                trajectory.append({"eval": graph.evaluations, "kind": "transposition", "node": target,
                                   "parents": linked, "move": desc, "linked": bool(linked)})
                continue
            admit(graph.add_node(pipeline, parents, desc, comp), c, "recovery")
    else:
        stop = "converged" if done() else "budget"
    return SearchResult(graph.best, graph, trajectory, done(), stop)


def _recover(graph, head, budget, proposer, context, rng, recoveries, mode, epsilon):
    """Alternate evolution and fusion when a branch stagnates."""
    top = top_k(graph, budget.top_k, mode, epsilon)
    if recoveries % 2 == 1 and len(top) >= 2:
        fused = fuse(top, graph, context.recompose)
        return fused, [n.id for n in top], f"fuse top-{len(top)}", None
    branch = [n for n in branch_members(graph, head) if not n.failed] or [head]
    anchor = max(branch, key=lambda n: (n.score, -n.id))
    try:
        child, desc = evolve(anchor, graph, rng, proposer, context)
    except MenuExhausted:
        return None, [], "", None
    return child, [anchor.id], desc, None


def write_trajectory(trajectory: Sequence[dict], fh: IO[str]) -> None:
    for rec in trajectory:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
