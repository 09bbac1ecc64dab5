"""Tasks, the reader oracle, the round-based episode runner, and evaluation."""

from __future__ import annotations

import json
import logging
import re
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from . import agents as A
from .episode import (
    AGENTS,
    GENEROUS,
    RESOURCES,
    Budgets,
    CostCounters,
    EpisodeConfig,
    EpisodeState,
    Prices,
    new_episode,
)
from .kg import GraphError, KnowledgeGraph, load_triples
from .policy import Policy

log = logging.getLogger(__name__)

RELATION_VOCAB = [
    "directed_by", "written_by", "starred_actors", "release_year", "in_language",
    "has_genre", "has_tags", "has_imdb_rating", "has_imdb_votes",
]
TEMPLATES = [
    "which entity is reached from [{anchor}] via {rels}",
    "starting at [{anchor}] follow {rels}",
    "what do you get from [{anchor}] by {rels}",
]
_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kl", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]


@dataclass
class QAExample:
    question: str
    anchor_names: list[str]
    gold_paths: list[tuple[int, ...]]
    answers: list[str]
    hops: int = 0

    def anchor_ids(self, g: KnowledgeGraph) -> list[int]:
        return [g.entity_id(n) for n in self.anchor_names]


@dataclass(frozen=True)
class SyntheticTaskConfig:
    n_entities: int = 200
    n_relations: int = 9
    hops: int = 2
    n_examples: int = 1200
    distractor_multiplier: float = 0.25
    branching: int = 1
    template: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.hops < 1:
            raise ValueError("hops must be >= 1")
        if self.distractor_multiplier < 0:
            raise ValueError("distractor multiplier must be >= 0")


@dataclass
class Dataset:
    graph: KnowledgeGraph
    examples: list[QAExample]
    dropped: int = 0

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        return (Dataset(self.graph, self.examples[:n_train]), Dataset(self.graph, self.examples[n_train:]))


# --- synthetic tasks ------------------------------------------------------

def _entity_names(n: int, rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    seen: set[str] = set()

    def word(k: int) -> str:
        return "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(k))

    while len(names) < n:
        name = f"{word(2).capitalize()} {word(int(rng.integers(2, 4))).capitalize()}"
        if name.casefold() not in seen:
            seen.add(name.casefold())
            names.append(name)
    return names


def _relation_names(n: int) -> list[str]:
    return RELATION_VOCAB[:n] + [f"relation_{i}" for i in range(len(RELATION_VOCAB), n)]


def _undirected_adj(n: int, triples: Iterable[tuple[int, int, int]]) -> list[list[tuple[int, int, int]]]:
    adj: list[list[tuple[int, int, int]]] = [[] for _ in range(n)]
    for s, r, o in triples:
        adj[s].append((r, o, 0))
        adj[o].append((r, s, 1))
    return adj


def bfs_distance(g: KnowledgeGraph, source: int, limit: int | None = None) -> dict[int, int]:
    """Undirected hop distances from ``source`` (optionally only up to ``limit``)."""
    dist = {source: 0}
    frontier = deque([source])
    while frontier:
        v = frontier.popleft()
        if limit is not None and dist[v] >= limit:
            continue
        for nb in g.neighbors(v, "both"):
            if nb.entity not in dist:
                dist[nb.entity] = dist[v] + 1
                frontier.append(nb.entity)
    return dist


def relation_walks(g: KnowledgeGraph, anchor: int, relations: Sequence[int]) -> list[tuple[int, ...]]:
    """Simple walks from ``anchor`` following ``relations`` in order, either edge direction."""
    walks: list[tuple[tuple[int, ...], int, tuple[int, ...]]] = [((), anchor, (anchor,))]
    for r in relations:
        nxt = []
        for tids, v, visited in walks:
            for nb in g.neighbors(v, "both"):
                if nb.relation == r and nb.entity not in visited:
                    nxt.append((tids + (nb.triple,), nb.entity, visited + (nb.entity,)))
        walks = nxt
    return [w[0] for w in walks]


def path_end(g: KnowledgeGraph, anchor: int, tids: Sequence[int]) -> int:
    v = anchor
    for t in tids:
        s, _, o = g.triples[t]
        v = int(o) if v == s else int(s)
    return v


class _ChainGraph:
    """Undirected adjacency under construction, refusing edges that shorten any placed example."""

    def __init__(self, n: int, hops: int):
        self.adj: list[set[int]] = [set() for _ in range(n)]
        self.hops = hops
        self.answers_of: dict[int, set[int]] = {}
        self.anchors_of: dict[int, set[int]] = {}

    def ball(self, v: int, radius: int) -> dict[int, int]:
        dist = {v: 0}
        layer = [v]
        for d in range(1, radius + 1):
            nxt = []
            for x in layer:
                for y in self.adj[x]:
                    if y not in dist:
                        dist[y] = d
                        nxt.append(y)
            layer = nxt
        return dist

    def shortcut(self, u: int, v: int) -> bool:
        """Would an edge u-v put some answer closer than ``hops`` to its anchor?"""
        if v in self.adj[u]:
            return False
        r = self.hops - 2
        if r < 0:
            return False
        du, dv = self.ball(u, r), self.ball(v, r)
        for near, far in ((du, dv), (dv, du)):
            for a, d1 in near.items():
                for b in self.answers_of.get(a, ()):
                    if b in far and d1 + 1 + far[b] < self.hops:
                        return True
        return False

    def add(self, u: int, v: int) -> None:
        self.adj[u].add(v)
        self.adj[v].add(u)

    def remove(self, u: int, v: int) -> None:
        self.adj[u].discard(v)
        self.adj[v].discard(u)

    def register(self, anchor: int, answer: int) -> None:
        self.answers_of.setdefault(anchor, set()).add(answer)
        self.anchors_of.setdefault(answer, set()).add(anchor)


def generate_tasks(config: SyntheticTaskConfig) -> Dataset:
    """One shared graph of gold chains, side branches and distractors, and its questions.

    Every added edge is checked so that no placed example gets an answer closer
    to its anchor than the gold hop count.
    """
    cfg = config
    h = cfg.hops
    if cfg.n_entities < h + 2 or cfg.n_relations < 1:
        raise GraphError("infeasible config: too few entities or relations")
    rng = np.random.default_rng(cfg.seed)
    names = _entity_names(cfg.n_entities, rng)
    rels = _relation_names(cfg.n_relations)
    triples: dict[tuple[int, int, int], None] = {}
    cg = _ChainGraph(cfg.n_entities, h)
    raw: list[tuple[int, list[int], int]] = []

    def try_edge(u: int, r: int, v: int) -> bool:
        if u == v or v in cg.adj[u] or cg.shortcut(u, v):
            return False
        triples[(u, r, v) if rng.random() < 0.5 else (v, r, u)] = None
        cg.add(u, v)
        return True

    attempts = 0
    while len(raw) < cfg.n_examples:
        attempts += 1
        if attempts > 200 * cfg.n_examples:
            raise GraphError("infeasible config: could not place enough gold chains")
        anchor = int(rng.integers(cfg.n_entities))
        chain_rels = [int(x) for x in rng.choice(cfg.n_relations, size=h, replace=h > cfg.n_relations)]
        nodes = [anchor] + [int(x) for x in rng.integers(cfg.n_entities, size=h)]
        if len(set(nodes)) != len(nodes):
            continue
        if any(nodes[i + 1] in cg.adj[nodes[i]] for i in range(h)):
            continue
        if any(cg.shortcut(nodes[i], nodes[i + 1]) for i in range(h)):
            continue
        placed = []
        for i in range(h):
            cg.add(nodes[i], nodes[i + 1])
            placed.append((nodes[i], nodes[i + 1]))
        if cg.ball(anchor, h - 1).get(nodes[-1], h) < h:
            for u, v in placed:
                cg.remove(u, v)
            continue
        for i, r in enumerate(chain_rels):
            u, v = nodes[i], nodes[i + 1]
            triples[(u, r, v) if rng.random() < 0.5 else (v, r, u)] = None
        cg.register(anchor, nodes[-1])
        raw.append((anchor, chain_rels, nodes[-1]))
        # Side branches use relations that differ from the next gold hop.
        for depth, v in enumerate(nodes[:-1]):
            for _ in range(cfg.branching):
                r = int(rng.integers(cfg.n_relations))
                w = int(rng.integers(cfg.n_entities))
                if r != chain_rels[depth] and w not in nodes:
                    try_edge(v, r, w)
    n_dist = int(round(cfg.distractor_multiplier * h * len(raw)))
    added = 0
    for _ in range(n_dist * 20):
        if added >= n_dist:
            break
        s, o = (int(x) for x in rng.integers(cfg.n_entities, size=2))
        added += try_edge(s, int(rng.integers(cfg.n_relations)), o)
    g = KnowledgeGraph.from_triples([(names[s], rels[r], names[o]) for s, r, o in triples], dim=128)
    gid = {i: g.entity_id(n) for i, n in enumerate(names) if _has_entity(g, n)}
    examples: list[QAExample] = []
    dropped = 0
    for anchor, chain_rels, answer in raw:
        ex = _make_example(g, gid[anchor], [g.relation_id(rels[r]) for r in chain_rels], gid[answer], cfg.template)
        if ex is None:
            dropped += 1
        else:
            examples.append(ex)
    if not examples:
        raise GraphError("infeasible config: no example survived the shortcut audit")
    return Dataset(g, examples, dropped)


def _has_entity(g: KnowledgeGraph, name: str) -> bool:
    try:
        g.entity_id(name)
    except GraphError:
        return False
    return True


def _make_example(g: KnowledgeGraph, anchor: int, rels: list[int], answer: int, template: int) -> QAExample | None:
    h = len(rels)
    dist = bfs_distance(g, anchor, limit=h)
    walks = relation_walks(g, anchor, rels)
    gold = [w for w in walks if dist.get(path_end(g, anchor, w), h + 1) == h]
    ends = sorted({path_end(g, anchor, w) for w in gold})
    if answer not in ends:
        return None
    rel_text = " then ".join(g.relation_names[r] for r in rels)
    question = TEMPLATES[template % len(TEMPLATES)].format(anchor=g.entity_names[anchor], rels=rel_text)
    return QAExample(question, [g.entity_names[anchor]], gold, [g.entity_names[v] for v in ends], h)


def shortcut_free(g: KnowledgeGraph, ex: QAExample) -> bool:
    """True when no answer is closer to the anchor than the gold hop count."""
    anchor = g.entity_id(ex.anchor_names[0])
    dist = bfs_distance(g, anchor, limit=ex.hops)
    return all(dist.get(g.entity_id(a), ex.hops + 1) >= ex.hops for a in ex.answers)


# --- MetaQA-format files --------------------------------------------------

_ANCHOR_RE = re.compile(r"\[([^\]]+)\]")


@dataclass
class LoadStats:
    total: int = 0
    kept: int = 0
    dropped_unreachable: int = 0
    malformed: int = 0


def shortest_paths(g: KnowledgeGraph, source: int, target: int, max_len: int, cap: int = 64) -> list[tuple[int, ...]]:
    """All shortest undirected paths (as triple ids) of length <= max_len, at most ``cap``."""
    if source == target:
        return []
    parents: dict[int, list[tuple[int, int]]] = {source: []}
    dist = {source: 0}
    layer = [source]
    for d in range(1, max_len + 1):
        nxt: list[int] = []
        for v in layer:
            for nb in g.neighbors(v, "both"):
                u = nb.entity
                if u not in dist:
                    dist[u] = d
                    parents[u] = []
                    nxt.append(u)
                if dist[u] == d:
                    parents[u].append((v, nb.triple))
        if target in dist:
            break
        layer = nxt
    if target not in dist:
        return []
    out: list[tuple[int, ...]] = []

    def walk(v: int, suffix: tuple[int, ...]) -> None:
        if len(out) >= cap:
            return
        if v == source:
            out.append(suffix)
            return
        for p, t in sorted(set(parents[v])):
            walk(p, (t,) + suffix)

    walk(target, ())
    return out


def load_metaqa(kb: str | Path, questions: str | Path | Iterable[str], hop: int,
                stats: LoadStats | None = None) -> Dataset:
    """``question with [anchor]<TAB>ans1|ans2`` lines over a ``s|r|o`` kb."""
    g = kb if isinstance(kb, KnowledgeGraph) else load_triples(kb)
    stats = stats if stats is not None else LoadStats()
    if isinstance(questions, Path) or (isinstance(questions, str) and "\n" not in questions and Path(questions).exists()):
        lines = Path(questions).read_text(encoding="utf-8").splitlines()
    elif isinstance(questions, str):
        lines = questions.splitlines()
    else:
        lines = list(questions)
    examples = []
    for line in lines:
        if not line.strip():
            continue
        stats.total += 1
        parts = line.rstrip("\r\n").split("\t")
        m = _ANCHOR_RE.search(parts[0]) if len(parts) == 2 else None
        if m is None:
            stats.malformed += 1
            log.warning("skipping malformed question line: %r", line)
            continue
        try:
            anchor = g.entity_id(m.group(1).strip())
            answers = [a.strip() for a in parts[1].split("|") if a.strip()]
            answer_ids = [g.entity_id(a) for a in answers]
        except GraphError:
            stats.dropped_unreachable += 1
            continue
        gold: list[tuple[int, ...]] = []
        reach: list[str] = []
        for name, a in zip(answers, answer_ids):
            paths = shortest_paths(g, anchor, a, hop)
            if paths:
                gold.extend(paths)
                reach.append(name)
        if not gold:
            stats.dropped_unreachable += 1
            continue
        stats.kept += 1
        examples.append(QAExample(parts[0].strip(), [g.entity_names[anchor]], gold, reach, hop))
    return Dataset(g, examples, stats.dropped_unreachable + stats.malformed)


def write_metaqa(ds: Dataset, kb_path: str | Path, questions_path: str | Path, examples: Sequence[QAExample] | None = None) -> None:
    from .kg import dump_triples
    Path(kb_path).write_text(dump_triples(ds.graph), encoding="utf-8")
    exs = ds.examples if examples is None else examples
    Path(questions_path).write_text(
        "".join(f"{ex.question}\t{'|'.join(ex.answers)}\n" for ex in exs), encoding="utf-8"
    )


# --- oracle and runner ----------------------------------------------------

def reader_oracle(selected: Iterable[Any], example: QAExample) -> int:
    """1 iff some gold path is fully covered by the provenance of the selected snippets."""
    covered: set[int] = set()
    for s in selected:
        covered.update(s.provenance if hasattr(s, "provenance") else s)
    return int(any(path and set(path) <= covered for path in example.gold_paths))


DecisionHook = Callable[[int, A.Decision, np.ndarray, np.ndarray, int, float, np.ndarray], None]


@dataclass
class EpisodeResult:
    state: EpisodeState
    em: int
    counters: CostCounters
    n_decisions: int

    @property
    def trace(self) -> dict[str, Any]:
        return self.state.trace_document({"em": self.em})


def _greedy_hop_index(d: A.Decision) -> int | None:
    """Ablation navigator: best (relation + neighbor) similarity hop, never backtracks."""
    best, best_score = None, -np.inf
    for i, c in enumerate(d.candidates):
        if c.kind == "hop" and d.mask[i]:
            score = d.feats[i, 0] + d.feats[i, 1]
            if score > best_score:
                best, best_score = i, score
    return best


def _top_k_index(d: A.Decision) -> int:
    """Ablation curator: highest question-similarity affordable snippet, no stop and no price rule."""
    scores = np.where(d.mask[:-1], d.feats[:, 0], -np.inf)
    return int(np.argmax(scores))


def _static_subgraph(state: EpisodeState, depth: int) -> None:
    """Ablation architect: add the full neighborhood of the anchors up to ``depth`` hops."""
    g = state.g
    layer = list(state.anchors)
    seen = set(layer)
    for _ in range(depth):
        nxt = []
        for v in layer:
            for nb in g.neighbors(v, "both"):
                if nb.triple in state.edges:
                    continue
                if not state.can_afford("edge", 1) or (state.config.lat_counts_all_actions and not state.can_afford("lat", 1)):
                    state.stop("architect", "budget")
                    return
                state.add_edge(nb.triple, agent="architect", static=True)
                if nb.entity not in seen:
                    seen.add(nb.entity)
                    nxt.append(nb.entity)
        layer = nxt
    state.stop("architect", "static")


def play_episode(
    state: EpisodeState,
    policy: Any,
    rng: np.random.Generator,
    greedy: bool = False,
    hook: DecisionHook | None = None,
    ablation: str | None = None,
) -> int:
    """Run edit -> traverse -> curate rounds until terminal; returns the number of policy decisions."""
    cfg = state.config
    last_actions = np.tile(A.NOOP_ACTION, (3, 1))
    decisions = 0
    weights = np.asarray(getattr(policy, "fusion_weights", np.full(4, 0.25)), dtype=float)

    pending: list[tuple] = []

    def decide(agent_idx: int, d: A.Decision) -> int:
        nonlocal decisions
        glob = A.global_features(state) if hook is not None else None
        idx, logp = policy.decide(d, state, rng, greedy)
        if not d.mask[idx]:
            raise RuntimeError(f"{d.agent} chose masked action {idx}")
        decisions += 1
        if hook is not None:
            joint = last_actions.copy()
            joint[agent_idx] = d.critic_feats[idx]
            pending.append((agent_idx, d, glob, joint, idx, logp, state.counters.as_array()))
        return idx

    def flush() -> None:
        while pending:
            agent_idx, d, glob, joint, idx, logp, before = pending.pop()
            hook(agent_idx, d, glob, joint, idx, logp, state.counters.as_array() - before)

    while not state.is_terminal():
        state.round += 1
        # (1) architect
        if not state.stopped["architect"]:
            if ablation == "no_architect":
                _static_subgraph(state, max(cfg.horizon // 2, 1))
            else:
                for e in range(cfg.edits_per_round):
                    d = A.architect_decision(state, weights, cfg.edits_per_round - e, greedy=greedy)
                    if d.only_stop():
                        state.stop("architect", "forced")
                        break
                    idx = decide(0, d)
                    choice = None if idx == d.stop_index else d.candidates[idx]
                    A.architect_apply(state, choice, greedy=greedy)
                    last_actions[0] = d.critic_feats[idx]
                    flush()
                    if state.stopped["architect"]:
                        break
        # (2) navigator
        if not state.stopped["navigator"]:
            state.current = A.navigator_start(state)
            state.path = []
            state.tried = set()
            for _ in range(2 * cfg.horizon + 1):
                if not state.can_afford("lat", 1):
                    A.navigator_finalize(state, "budget", final=True)
                    break
                if len(state.path) >= cfg.horizon:
                    A.navigator_finalize(state, "horizon", final=False)
                    break
                d = A.navigator_decision(state)
                if d.only_stop():
                    final = not state.path and state.stopped["architect"]
                    A.navigator_finalize(state, "forced", final=final)
                    break
                if ablation == "no_navigator":
                    idx = _greedy_hop_index(d)
                    if idx is None:
                        A.navigator_finalize(state, "greedy_end", final=False)
                        break
                else:
                    idx = decide(1, d)
                choice = None if idx == d.stop_index else d.candidates[idx]
                outcome = A.navigator_apply(state, choice)
                last_actions[1] = d.critic_feats[idx]
                flush()
                if outcome in ("stop", "segment_end"):
                    break
            else:
                A.navigator_finalize(state, "step_limit", final=False)
        # (3) curator
        if not state.stopped["curator"]:
            for s in range(cfg.selections_per_round):
                d = A.curator_decision(state, cfg.selections_per_round - s,
                                       greedy=greedy and ablation != "no_curator")
                if d.only_stop():
                    if state.stopped["architect"] and state.stopped["navigator"]:
                        state.stop("curator", "forced")
                    break
                if ablation == "no_curator":
                    idx = _top_k_index(d)
                else:
                    idx = decide(2, d)
                choice = None if idx == d.stop_index else d.candidates[idx]
                A.curator_apply(state, choice)
                last_actions[2] = d.critic_feats[idx]
                flush()
                if state.stopped["curator"]:
                    break
    return decisions


def run_episode(
    g: KnowledgeGraph,
    example: QAExample,
    policy: Any,
    mode: str = "cap",
    budgets: Budgets | None = None,
    prices: Prices | None = None,
    seed: int = 0,
    greedy: bool = True,
    config: EpisodeConfig | None = None,
    ablation: str | None = None,
    hook: DecisionHook | None = None,
) -> EpisodeResult:
    state = new_episode(
        g, example.question, mode=mode,
        budgets=budgets if budgets is not None else (GENEROUS if mode == "cap" else None),
        prices=prices if prices is not None else Prices(), seed=seed, config=config,
        anchors=example.anchor_ids(g),
    )
    rng = np.random.default_rng(seed)
    n = play_episode(state, policy, rng, greedy=greedy, hook=hook, ablation=ablation)
    em = reader_oracle(state.selected.values(), example)
    return EpisodeResult(state, em, state.counters, n)


# --- evaluation -----------------------------------------------------------

@dataclass
class EvalReport:
    n: int
    em: float
    c_edge: float
    c_lat: float
    c_tok: float
    norm_latency: float
    norm_edges: float
    norm_tokens: float
    feasibility: float
    viol_edge: float
    viol_lat: float
    viol_tok: float
    any_violation: float
    budgets: dict[str, int] = field(default_factory=dict)
    reference: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def csv_header(self) -> str:
        return ",".join(k for k in self.to_dict() if k not in ("budgets", "reference"))

    def csv_row(self) -> str:
        d = self.to_dict()
        return ",".join(_fmt(d[k]) for k in d if k not in ("budgets", "reference"))


def _fmt(x: Any) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else float("inf")
    return a / b


def aggregate(costs: np.ndarray, ems: Sequence[int], budgets: Budgets, reference: dict[str, float] | None = None) -> EvalReport:
    """Build a report from per-episode costs (n, 3) and EMs; feasibility is judged against ``budgets``."""
    costs = np.asarray(costs, dtype=float).reshape(-1, 3)
    beta = budgets.as_array()
    viol = np.maximum(0.0, costs - beta) / np.maximum(beta, 1.0)
    feasible = np.all(costs <= beta, axis=1)
    mean = costs.mean(axis=0)
    ref = reference or {"c_edge": mean[0], "c_lat": mean[1], "c_tok": mean[2]}
    return EvalReport(
        n=len(costs), em=float(np.mean(ems)),
        c_edge=float(mean[0]), c_lat=float(mean[1]), c_tok=float(mean[2]),
        norm_latency=_ratio(mean[1], ref["c_lat"]), norm_edges=_ratio(mean[0], ref["c_edge"]),
        norm_tokens=_ratio(mean[2], ref["c_tok"]),
        feasibility=float(feasible.mean()),
        viol_edge=float(viol[:, 0].mean()), viol_lat=float(viol[:, 1].mean()), viol_tok=float(viol[:, 2].mean()),
        any_violation=float((~feasible).mean()),
        budgets=asdict(budgets), reference={k: float(v) for k, v in ref.items()},
    )


def evaluate(
    policy: Any,
    dataset: Dataset,
    mode: str = "cap",
    budgets: Budgets | None = None,
    prices: Prices | None = None,
    n: int | None = None,
    reference: dict[str, float] | None = None,
    seed: int = 0,
    greedy: bool = True,
    config: EpisodeConfig | None = None,
    ablation: str | None = None,
    traces: list[dict[str, Any]] | None = None,
) -> EvalReport:
    """Run ``n`` episodes and aggregate; normalized columns divide by ``reference`` means.

    Without a reference, the same policy is first run with generous cap budgets
    and that run plays the reference role.
    """
    exs = dataset.examples
    n = len(exs) if n is None else n
    if n < 1:
        raise ValueError("n must be >= 1")
    order = np.arange(len(exs)) if n >= len(exs) else np.random.default_rng(seed).permutation(len(exs))[:n]
    order = [int(order[i % len(order)]) for i in range(n)]
    budgets = budgets if budgets is not None else GENEROUS
    costs, ems = [], []
    for k, i in enumerate(order):
        res = run_episode(dataset.graph, exs[i], policy, mode, budgets if mode == "cap" else None, prices,
                          seed=seed * 100_003 + k, greedy=greedy, config=config, ablation=ablation)
        costs.append(res.counters.as_array())
        ems.append(res.em)
        if traces is not None:
            traces.append(res.trace)
    if reference is None:
        reference = reference_means(policy, dataset, order, seed, greedy, config)
    return aggregate(np.array(costs), ems, budgets, reference)


def reference_means(policy: Any, dataset: Dataset, order: Sequence[int], seed: int = 0, greedy: bool = True,
                    config: EpisodeConfig | None = None) -> dict[str, float]:
    costs = [
        run_episode(dataset.graph, dataset.examples[i], policy, "cap", GENEROUS, None,
                    seed=seed * 100_003 + k, greedy=greedy, config=config).counters.as_array()
        for k, i in enumerate(order)
    ]
    m = np.mean(costs, axis=0)
    return {"c_edge": float(m[0]), "c_lat": float(m[1]), "c_tok": float(m[2])}
