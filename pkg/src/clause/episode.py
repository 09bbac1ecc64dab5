"""Per-query episode state: subgraph, frontier, paths, curated set, budgets, trace."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .kg import GraphError, KnowledgeGraph
from .scoring import QuestionScorer
from .text import tokenize, whitespace_count

RESOURCES = ("edge", "lat", "tok")
AGENTS = ("architect", "navigator", "curator")
TRACE_VERSION = 1


class BudgetError(RuntimeError):
    """A charge would overflow a cap; the caller failed to mask the action."""


class AuditError(RuntimeError):
    def __init__(self, index: int, message: str):
        super().__init__(f"trace audit failed at event {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class Budgets:
    edge: int
    lat: int
    tok: int

    def __post_init__(self) -> None:
        if min(self.edge, self.lat, self.tok) < 0:
            raise ValueError("budgets must be >= 0")

    def get(self, k: str) -> int:
        return getattr(self, k)

    def as_array(self) -> np.ndarray:
        return np.array([self.edge, self.lat, self.tok], dtype=float)


@dataclass(frozen=True)
class Prices:
    edge: float = 0.0
    lat: float = 0.0
    tok: float = 0.0

    def __post_init__(self) -> None:
        if min(self.edge, self.lat, self.tok) < 0:
            raise ValueError("prices must be >= 0")

    def get(self, k: str) -> float:
        return getattr(self, k)

    def as_array(self) -> np.ndarray:
        return np.array([self.edge, self.lat, self.tok], dtype=float)


GENEROUS = Budgets(64, 64, 4096)


@dataclass
class CostCounters:
    edge: int = 0
    lat: int = 0
    tok: int = 0

    def get(self, k: str) -> int:
        return getattr(self, k)

    def as_array(self) -> np.ndarray:
        return np.array([self.edge, self.lat, self.tok], dtype=float)

    def as_dict(self) -> dict[str, int]:
        return {"edge": self.edge, "lat": self.lat, "tok": self.tok}


@dataclass(frozen=True)
class EpisodeConfig:
    k_max: int = 16
    horizon: int = 4
    edits_per_round: int = 2
    selections_per_round: int = 2
    max_rounds: int = 8
    max_paths: int = 4
    redundancy_weight: float = 0.5
    price_token_scale: int = 256
    lat_counts_all_actions: bool = False


@dataclass(frozen=True)
class Snippet:
    id: str
    text: str
    tok: int
    provenance: tuple[int, ...]
    kind: str  # "triple" or "path"


@dataclass
class TraceEvent:
    kind: str
    agent: str
    round: int
    payload: dict[str, Any]
    cost: dict[str, int] = field(default_factory=lambda: {"edge": 0, "lat": 0, "tok": 0})

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "agent": self.agent, "round": self.round, "payload": self.payload, "cost": dict(self.cost)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TraceEvent":
        cost = d.get("cost", {})
        return cls(d["kind"], d["agent"], int(d["round"]), dict(d.get("payload", {})),
                   {k: int(cost.get(k, 0)) for k in RESOURCES})


# A path step: (triple id, from node, to node)
Hop = tuple[int, int, int]


class EpisodeState:
    """s_t = (q, G_t, F_t, pool, b_t) plus counters, stop flags and the trace."""

    def __init__(
        self,
        g: KnowledgeGraph,
        question: str,
        anchors: Sequence[int],
        mode: str,
        budgets: Budgets,
        prices: Prices,
        config: EpisodeConfig,
        seed: int = 0,
    ):
        self.g = g
        self.question = question
        self.q_tokens = tokenize(question)
        self.anchors = tuple(dict.fromkeys(int(a) for a in anchors))
        self.mode = mode
        self.budgets = budgets
        self.prices = prices
        self.config = config
        self.seed = seed
        self.scorer = QuestionScorer(g, self.q_tokens)
        self.edges: dict[int, None] = {}
        self._endpoint_refs: Counter[int] = Counter()
        self.frontier: dict[int, None] = dict.fromkeys(self.anchors)
        self.depth: dict[int, int] = {a: 0 for a in self.anchors}
        self.path: list[Hop] = []
        self.tried: set[int] = set()  # triples hopped in the open segment, never re-entered
        self.current: int | None = None
        self.paths: list[tuple[Hop, ...]] = []
        self.selected: dict[str, Snippet] = {}
        self.round = 0
        self.counters = CostCounters()
        self.stopped = {a: False for a in AGENTS}
        self.trace: list[TraceEvent] = []

    # --- derived views -----------------------------------------------------

    @property
    def cap_mode(self) -> bool:
        return self.mode == "cap"

    @property
    def nodes(self) -> set[int]:
        return set(self.anchors) | set(self._endpoint_refs)

    def remaining(self, k: str) -> float:
        """Units of resource k still available (inf in price mode)."""
        if not self.cap_mode:
            return float("inf")
        return self.budgets.get(k) - self.counters.get(k)

    def budget_vector(self) -> np.ndarray:
        """b_t: remaining fractions per resource followed by the current prices."""
        if self.cap_mode:
            frac = [(self.budgets.get(k) - self.counters.get(k)) / max(self.budgets.get(k), 1) for k in RESOURCES]
        else:
            frac = [1.0, 1.0, 1.0]
        return np.concatenate([np.array(frac), self.prices.as_array()])

    def exhausted(self) -> bool:
        return self.cap_mode and any(self.counters.get(k) >= self.budgets.get(k) for k in RESOURCES)

    def is_terminal(self) -> bool:
        return all(self.stopped.values()) or self.exhausted() or self.round >= self.config.max_rounds

    def can_afford(self, k: str, amount: int) -> bool:
        return not self.cap_mode or self.counters.get(k) + amount <= self.budgets.get(k)

    def selected_provenance(self) -> set[int]:
        return {t for s in self.selected.values() for t in s.provenance}

    def protected_edges(self) -> set[int]:
        """Edges that may not be deleted: referenced by S, by Pi, or by the open path."""
        keep = self.selected_provenance()
        keep.update(t for p in self.paths for t, _, _ in p)
        keep.update(t for t, _, _ in self.path)
        return keep

    # --- primitive mutations (all record trace events) ---------------------

    def log(self, kind: str, agent: str, payload: dict[str, Any], cost: dict[str, int] | None = None) -> TraceEvent:
        ev = TraceEvent(kind, agent, self.round, payload, {k: 0 for k in RESOURCES} | (cost or {}))
        self.trace.append(ev)
        return ev

    def charge(self, resource: str, amount: int) -> "EpisodeState":
        if resource not in RESOURCES:
            raise ValueError(f"unknown resource {resource!r}")
        if amount <= 0:
            raise ValueError("charge amount must be positive")
        if not self.can_afford(resource, amount):
            raise BudgetError(
                f"{resource} cap overflow: {self.counters.get(resource)} + {amount} > {self.budgets.get(resource)}"
            )
        setattr(self.counters, resource, self.counters.get(resource) + amount)
        return self

    def _charge_costs(self, costs: dict[str, int]) -> None:
        for k, amt in costs.items():
            if amt > 0 and not self.can_afford(k, amt):
                raise BudgetError(f"{k} cap overflow: {self.counters.get(k)} + {amt} > {self.budgets.get(k)}")
        for k, amt in costs.items():
            if amt > 0:
                self.charge(k, amt)

    def _action_costs(self, primary: str, amount: int = 1) -> dict[str, int]:
        costs = {primary: amount}
        if self.config.lat_counts_all_actions and primary != "lat":
            costs["lat"] = costs.get("lat", 0) + 1
        return costs

    def add_edge(self, tid: int, agent: str = "architect", **extra: Any) -> None:
        if tid in self.edges:
            raise GraphError(f"triple {tid} already in subgraph")
        t = self.g.triple(tid)
        costs = self._action_costs("edge")
        self._charge_costs(costs)
        self.edges[tid] = None
        base = min(self.depth.get(t.subject, 99), self.depth.get(t.object, 99))
        for v in (t.subject, t.object):
            self._endpoint_refs[v] += 1
            if v not in self.frontier:
                self.frontier[v] = None
            self.depth[v] = min(self.depth.get(v, base + 1), base + 1)
        self.log("edit", agent, {"op": "add", "triple": tid, "names": self.triple_names(tid), **extra}, costs)

    def delete_edge(self, tid: int, agent: str = "architect", **extra: Any) -> None:
        if tid not in self.edges:
            raise GraphError(f"triple {tid} not in subgraph")
        t = self.g.triple(tid)
        costs = self._action_costs("edge")
        self._charge_costs(costs)
        del self.edges[tid]
        for v in (t.subject, t.object):
            self._endpoint_refs[v] -= 1
            if self._endpoint_refs[v] == 0:
                del self._endpoint_refs[v]
                if v not in self.anchors:
                    self.frontier.pop(v, None)
                    self.depth.pop(v, None)
        self.log("edit", agent, {"op": "delete", "triple": tid, "names": self.triple_names(tid), **extra}, costs)

    def hop(self, tid: int, agent: str = "navigator") -> None:
        if self.current is None:
            raise GraphError("navigator has no current node")
        if tid not in self.edges:
            raise GraphError(f"hop along triple {tid} outside the subgraph")
        t = self.g.triple(tid)
        if self.current == t.subject:
            nxt = t.object
        elif self.current == t.object:
            nxt = t.subject
        else:
            raise GraphError(f"triple {tid} is not incident to current node {self.current}")
        if len(self.path) >= self.config.horizon:
            raise GraphError("path horizon exceeded")
        self._charge_costs({"lat": 1})
        self.path.append((tid, self.current, nxt))
        self.tried.add(tid)
        self.log("hop", agent, {"triple": tid, "from": self.current, "to": nxt,
                                "names": self.triple_names(tid),
                                "from_name": self.g.entity_names[self.current],
                                "to_name": self.g.entity_names[nxt]}, {"lat": 1})
        self.current = nxt

    def backtrack(self, agent: str = "navigator") -> None:
        if not self.path:
            raise GraphError("nothing to backtrack")
        self._charge_costs({"lat": 1})
        tid, src, dst = self.path.pop()
        self.log("backtrack", agent, {"triple": tid, "from": dst, "to": src}, {"lat": 1})
        self.current = src

    def select(self, snippet: Snippet, agent: str = "curator", **extra: Any) -> None:
        if snippet.id in self.selected:
            raise GraphError(f"snippet {snippet.id} already selected")
        missing = [t for t in snippet.provenance if t not in self.edges]
        if missing:
            raise GraphError(f"snippet {snippet.id} provenance {missing} not in subgraph")
        costs = self._action_costs("tok", snippet.tok)
        self._charge_costs(costs)
        self.selected[snippet.id] = snippet
        self.log("curate", agent, {"snippet": snippet.id, "text": snippet.text,
                                   "provenance": list(snippet.provenance), "tok": snippet.tok, **extra}, costs)

    def stop(self, agent: str, reason: str = "policy", final: bool = True, **extra: Any) -> None:
        if final:
            self.stopped[agent] = True
        self.log("stop", agent, {"reason": reason, "final": final, **extra})

    def triple_names(self, tid: int) -> list[str]:
        t = self.g.triple(tid)
        return [self.g.entity_names[t.subject], self.g.relation_names[t.relation], self.g.entity_names[t.object]]

    # --- serialization -----------------------------------------------------

    def final_summary(self) -> dict[str, Any]:
        return {
            "counters": self.counters.as_dict(),
            "subgraph": sorted(self.edges),
            "selected": list(self.selected),
        }

    def trace_document(self, extra: dict[str, Any] | None = None) -> dict[str, Any]:
        doc = {
            "version": TRACE_VERSION,
            "question": self.question,
            "events": [e.to_dict() for e in self.trace],
            "final": self.final_summary(),
        }
        if extra:
            doc["final"].update(extra)
        return doc


def new_episode(
    g: KnowledgeGraph,
    question: str,
    mode: str = "cap",
    budgets: Budgets | None = None,
    prices: Prices | None = None,
    seed: int = 0,
    config: EpisodeConfig | None = None,
    anchors: Sequence[int] | None = None,
) -> EpisodeState:
    """Start an episode with G_0 = anchors only, F_0 = anchors, zero counters."""
    if g.n_entities == 0:
        raise GraphError("empty graph")
    if not tokenize(question):
        raise GraphError("empty question")
    if mode not in ("cap", "price"):
        raise ValueError(f"mode must be 'cap' or 'price', got {mode!r}")
    if mode == "cap" and budgets is None:
        raise ValueError("cap mode requires budgets")
    if mode == "price" and prices is None:
        raise ValueError("price mode requires prices")
    budgets = budgets or GENEROUS
    prices = prices or Prices()
    if anchors is None:
        anchors = g.match_anchors(question)
    for a in anchors:
        g.check_entity(a)
    state = EpisodeState(g, question, anchors, mode, budgets, prices, config or EpisodeConfig(), seed)
    state.log("init", "system", {
        "question": question,
        "anchors": list(state.anchors),
        "anchor_names": [g.entity_names[a] for a in state.anchors],
        "mode": mode,
        "budgets": asdict(budgets),
        "prices": asdict(prices),
        "lat_counts_all_actions": state.config.lat_counts_all_actions,
    })
    return state


def _expected_costs(ev: TraceEvent, lat_all: bool) -> dict[str, int]:
    exp = {k: 0 for k in RESOURCES}
    if ev.kind == "edit":
        exp["edge"] = 1
        exp["lat"] = 1 if lat_all else 0
    elif ev.kind in ("hop", "backtrack"):
        exp["lat"] = 1
    elif ev.kind == "curate":
        exp["tok"] = int(ev.payload.get("tok", -1))
        exp["lat"] = 1 if lat_all else 0
    return exp


def _replay(events: Sequence[TraceEvent], g: KnowledgeGraph | None) -> tuple[CostCounters, set[int], list[str]]:
    if not events or events[0].kind != "init":
        raise AuditError(0, "trace must begin with an init event")
    init = events[0].payload
    lat_all = bool(init.get("lat_counts_all_actions", False))
    budgets = init.get("budgets")
    cap = init.get("mode") == "cap"
    counters = CostCounters()
    edges: set[int] = set()
    selected: list[str] = []
    for i, ev in enumerate(events[1:], start=1):
        p = ev.payload
        exp = _expected_costs(ev, lat_all)
        if ev.cost != exp:
            raise AuditError(i, f"cost delta {ev.cost} does not match {ev.kind} rule {exp}")
        if ev.kind == "edit":
            tid = int(p["triple"])
            if g is not None:
                if not 0 <= tid < g.n_triples:
                    raise AuditError(i, f"unknown triple {tid}")
                t = g.triple(tid)
                names = [g.entity_names[t.subject], g.relation_names[t.relation], g.entity_names[t.object]]
                if "names" in p and list(p["names"]) != names:
                    raise AuditError(i, f"triple {tid} names do not match the graph")
            if p["op"] == "add":
                if tid in edges:
                    raise AuditError(i, f"add of triple {tid} already present")
                edges.add(tid)
            elif p["op"] == "delete":
                if tid not in edges:
                    raise AuditError(i, f"delete of absent triple {tid}")
                edges.discard(tid)
            else:
                raise AuditError(i, f"unknown edit op {p['op']!r}")
        elif ev.kind in ("hop", "backtrack"):
            if int(p["triple"]) not in edges:
                raise AuditError(i, f"{ev.kind} along triple {p['triple']} outside the subgraph")
        elif ev.kind == "curate":
            prov = [int(t) for t in p["provenance"]]
            if not prov or any(t not in edges for t in prov):
                raise AuditError(i, f"curated snippet {p.get('snippet')} has unresolvable provenance {prov}")
            text = p.get("text", "")
            if whitespace_count(text) != int(p["tok"]):
                raise AuditError(i, "token count does not match snippet text")
            if g is not None:
                from .agents import textualize_provenance  # local: agents imports this module
                if textualize_provenance(g, prov, p.get("snippet", "")).text != text:
                    raise AuditError(i, "snippet text does not match the graph")
            if p["snippet"] in selected:
                raise AuditError(i, f"snippet {p['snippet']} selected twice")
            selected.append(p["snippet"])
        elif ev.kind == "stop":
            pass
        elif ev.kind == "init":
            raise AuditError(i, "duplicate init event")
        else:
            raise AuditError(i, f"unknown event kind {ev.kind!r}")
        for k in RESOURCES:
            setattr(counters, k, counters.get(k) + ev.cost[k])
            if cap and budgets is not None and counters.get(k) > int(budgets[k]):
                raise AuditError(i, f"{k} cap exceeded during replay")
    return counters, edges, selected


def load_trace(trace: dict[str, Any] | str | Path | Sequence[TraceEvent]) -> tuple[list[TraceEvent], dict[str, Any] | None]:
    if isinstance(trace, (str, Path)):
        trace = json.loads(Path(trace).read_text(encoding="utf-8"))
    if isinstance(trace, dict):
        return [TraceEvent.from_dict(e) for e in trace["events"]], trace.get("final")
    return list(trace), None


def replay_trace(g: KnowledgeGraph | None, trace: dict[str, Any] | str | Path | Sequence[TraceEvent]) -> tuple[CostCounters, set[int]]:
    """Rebuild final counters and subgraph from the events alone.

    With ``g`` given, triple ids, names and snippet texts are checked against the
    graph. A trace document carrying a ``final`` section is also compared to it.
    """
    events, final = load_trace(trace)
    counters, edges, selected = _replay(events, g)
    if final is not None:
        if final.get("counters") != counters.as_dict():
            raise AuditError(len(events), f"replayed counters {counters.as_dict()} != recorded {final.get('counters')}")
        if sorted(final.get("subgraph", [])) != sorted(edges):
            raise AuditError(len(events), "replayed subgraph differs from the recorded one")
        if "selected" in final and list(final["selected"]) != selected:
            raise AuditError(len(events), "replayed selection differs from the recorded one")
    return counters, edges


def save_trace(doc: dict[str, Any], path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def counters_from_trace(events: Iterable[TraceEvent]) -> CostCounters:
    c = CostCounters()
    for ev in events:
        for k in RESOURCES:
            setattr(c, k, c.get(k) + ev.cost[k])
    return c
