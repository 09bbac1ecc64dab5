"""Architect (edit), Navigator (traverse) and Curator (curate) decision procedures.

Each agent exposes a ``*_decision`` builder returning the masked candidate set
with actor features, and an ``*_apply`` function that executes a choice with
cost attribution. The stop action is always the last index of a decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .episode import EpisodeState, GraphError, Hop, Snippet
from .kg import KnowledgeGraph
from .text import embed_text, pool, sim01, tokenize, whitespace_count

ARCH_FEATS = 11
NAV_FEATS = 9
CUR_FEATS = 8
ACTION_FEATS = 13  # critic-side action encoding: padded features + is_stop + is_noop
GLOBAL_FEATS = 38
ARCH_OBS = GLOBAL_FEATS + 2
NAV_OBS = 58
CUR_OBS = GLOBAL_FEATS + 2
PRICE_MODE_COST_SCALE = np.array([16.0, 32.0, 256.0])
MAX_REWARD = 1.0  # terminal task reward of a correct episode


@dataclass
class EditCandidate:
    action: str  # "add" | "delete"
    triple: int
    features: np.ndarray
    fused: float
    shaped_gain: float


@dataclass
class HopCandidate:
    kind: str  # "hop" | "backtrack"
    triple: int
    source: int
    target: int
    direction: str  # "out" | "in" for hops, "" for backtrack


@dataclass
class Decision:
    """A masked candidate set presented to one agent; stop is index ``len(candidates)``."""

    agent: str
    obs: np.ndarray
    feats: np.ndarray  # (n, F)
    offsets: np.ndarray  # (n,) fixed additive logit terms
    mask: np.ndarray  # (n + 1,) bool, stop last
    candidates: list[Any]
    critic_feats: np.ndarray = field(default_factory=lambda: np.zeros((1, ACTION_FEATS)))

    @property
    def n(self) -> int:
        return len(self.candidates)

    @property
    def stop_index(self) -> int:
        return len(self.candidates)

    def only_stop(self) -> bool:
        return not bool(self.mask[:-1].any())


def action_features(agent: str, feats: np.ndarray) -> np.ndarray:
    """Critic action encoding for every candidate plus a trailing stop row."""
    n = len(feats)
    out = np.zeros((n + 1, ACTION_FEATS))
    out[:n, : feats.shape[1]] = feats
    out[n, ACTION_FEATS - 2] = 1.0
    return out


NOOP_ACTION = np.zeros(ACTION_FEATS)
NOOP_ACTION[ACTION_FEATS - 1] = 1.0


# --- text -----------------------------------------------------------------

def textualize_triple(g: KnowledgeGraph, tid: int) -> str:
    t = g.triple(tid)
    return f"{g.entity_names[t.subject]} --- {g.relation_names[t.relation]}: {g.entity_names[t.object]}"


def textualize(g: KnowledgeGraph, item: int | Sequence[Hop] | Sequence[int]) -> Snippet:
    """A triple id becomes ``subject --- relation: object``; a path joins its hops with `` ; ``."""
    if isinstance(item, (int, np.integer)):
        tid = int(item)
        text = textualize_triple(g, tid)
        return Snippet(f"t:{tid}", text, whitespace_count(text), (tid,), "triple")
    hops = [h[0] if isinstance(h, tuple) else int(h) for h in item]
    if not hops:
        raise GraphError("cannot textualize an empty path")
    text = " ; ".join(textualize_triple(g, t) for t in hops)
    return Snippet("p:" + "-".join(map(str, hops)), text, whitespace_count(text), tuple(hops), "path")


def textualize_provenance(g: KnowledgeGraph, provenance: Sequence[int], snippet_id: str) -> Snippet:
    if snippet_id.startswith("p:"):
        return textualize(g, list(provenance))
    if len(provenance) != 1:
        raise GraphError(f"triple snippet {snippet_id} must have one provenance triple")
    return textualize(g, int(provenance[0]))


def _token_set(state: EpisodeState, key: Any, text: str) -> frozenset[str]:
    cache = state.__dict__.setdefault("_tokset", {})
    if key not in cache:
        cache[key] = frozenset(tokenize(text))
    return cache[key]


# --- global state summary -------------------------------------------------

def _coverage(q: frozenset[str], parts: list[frozenset[str]]) -> float:
    if not q or not parts:
        return 0.0
    seen = frozenset().union(*parts)
    return len(q & seen) / len(q)


def global_features(state: EpisodeState) -> np.ndarray:
    """Fixed-length summary of (G_t, F_t, pool, costs, prices, question)."""
    cfg = state.config
    g = state.g
    q = frozenset(state.q_tokens)
    cost = state.counters.as_array()
    if state.cap_mode:
        frac_used = cost / np.maximum(state.budgets.as_array(), 1.0)
    else:
        frac_used = cost / PRICE_MODE_COST_SCALE
    bt = state.budget_vector()
    edge_toks = [_token_set(state, ("t", t), textualize_triple(g, t)) for t in state.edges]
    sel_toks = [_token_set(state, s.id, s.text) for s in state.selected.values()]
    path_toks = [_token_set(state, ("t", t), textualize_triple(g, t)) for p in state.paths for t, _, _ in p]
    parts = [
        np.log1p(len(state.nodes)) / 5.0,
        np.log1p(len(state.edges)) / 5.0,
        np.log1p(len(state.frontier)) / 5.0,
        len(state.paths) / cfg.max_paths,
        len(state.selected) / 8.0,
        *frac_used,
        *bt,
        *pool(state.scorer.q_emb),
        state.round / cfg.max_rounds,
        *(float(state.stopped[a]) for a in ("architect", "navigator", "curator")),
        _coverage(q, edge_toks),
        _coverage(q, sel_toks),
        _coverage(q, path_toks),
        1.0 if state.cap_mode else 0.0,
    ]
    return np.array(parts, dtype=float)


# --- architect ------------------------------------------------------------

def architect_candidates(state: EpisodeState, weights: Sequence[float] | np.ndarray, k_max: int | None = None) -> list[EditCandidate]:
    """Top add candidates bordering the frontier, plus the lowest-scored deletable edges."""
    k_max = state.config.k_max if k_max is None else k_max
    g = state.g
    w = np.asarray(weights, dtype=float)
    lam = state.prices.edge
    adds = sorted({t for v in state.frontier for t in g.incident(v) if t not in state.edges})
    out: list[EditCandidate] = []
    if adds:
        phi = state.scorer.features(adds)
        fused = phi @ w
        row = {t: i for i, t in enumerate(adds)}
        # Interleave per-node rankings so edges around newly reached nodes are
        # not crowded out by a high-degree anchor.
        queues = []
        for v in sorted(state.frontier):
            ts = sorted((t for t in g.incident(v) if t in row), key=lambda t: (-fused[row[t]], t))
            if ts:
                queues.append(ts)
        order: list[int] = []
        seen: set[int] = set()
        depth = 0
        while len(order) < k_max and any(depth < len(q) for q in queues):
            layer = [q[depth] for q in queues if depth < len(q) and q[depth] not in seen]
            for t in sorted(layer, key=lambda t: (-fused[row[t]], t)):
                if len(order) < k_max and t not in seen:
                    seen.add(t)
                    order.append(row[t])
            depth += 1
        out += [EditCandidate("add", adds[i], phi[i], float(fused[i]), float(fused[i]) - lam) for i in order]
    protected = state.protected_edges()
    dels = sorted(t for t in state.edges if t not in protected)
    if dels:
        phi = state.scorer.features(dels)
        fused = phi @ w
        order = sorted(range(len(dels)), key=lambda i: (fused[i], dels[i]))[: k_max // 2]
        out += [EditCandidate("delete", dels[i], phi[i], float(fused[i]), -float(fused[i]) - lam) for i in order]
    return out


def _architect_feats(state: EpisodeState, cands: list[EditCandidate]) -> np.ndarray:
    g = state.g
    sc = state.scorer
    H = state.config.horizon
    anchors = set(state.anchors)
    nodes = state.nodes
    rows = []
    for c in cands:
        t = g.triple(c.triple)
        known = [v for v in (t.subject, t.object) if v in state.depth]
        depth = min((state.depth[v] for v in known), default=H)
        new_end = float(any(v not in nodes for v in (t.subject, t.object)))
        rows.append([
            *c.features,
            1.0 if c.action == "delete" else 0.0,
            float(t.subject in anchors or t.object in anchors),
            sc.rel_in_question[t.relation],
            sc.rel_position[t.relation],
            depth / H,
            new_end,
            float(sc.rel_rank[t.relation] == depth + 1),
        ])
    return np.array(rows, dtype=float).reshape(-1, ARCH_FEATS)


def architect_decision(state: EpisodeState, weights: Sequence[float] | np.ndarray, edits_left: int,
                       greedy: bool = False) -> Decision:
    """Masked edit decision; ``greedy`` also masks edits whose shaped gain is not positive."""
    cands = architect_candidates(state, weights)
    feats = _architect_feats(state, cands)
    afford = state.can_afford("edge", 1) and (not state.config.lat_counts_all_actions or state.can_afford("lat", 1))
    mask = np.ones(len(cands) + 1, dtype=bool)
    mask[:-1] = afford and edits_left > 0
    if greedy:
        mask[:-1] &= np.array([c.shaped_gain > 0.0 for c in cands], dtype=bool)
    n_add = sum(c.action == "add" for c in cands)
    obs = np.concatenate([global_features(state), [n_add / state.config.k_max, (len(cands) - n_add) / state.config.k_max]])
    return Decision("architect", obs, feats, np.zeros(len(cands)), mask, cands, action_features("architect", feats))


def architect_apply(state: EpisodeState, choice: EditCandidate | None, greedy: bool = False) -> str:
    """Apply an edit or stop. Returns the effective action ("add", "delete" or "stop").

    In greedy mode an edit is accepted only with positive shaped gain; otherwise the architect stops.
    """
    if choice is None:
        state.stop("architect", "policy")
        return "stop"
    if greedy and choice.shaped_gain <= 0.0:
        state.stop("architect", "gain<=price", shaped_gain=round(choice.shaped_gain, 12))
        return "stop"
    extra = {"fused": round(choice.fused, 12), "shaped_gain": round(choice.shaped_gain, 12)}
    if choice.action == "add":
        state.add_edge(choice.triple, **extra)
    elif choice.action == "delete":
        state.delete_edge(choice.triple, **extra)
    else:
        raise ValueError(f"unknown edit action {choice.action!r}")
    return choice.action


# --- navigator ------------------------------------------------------------

def navigator_start(state: EpisodeState) -> int:
    """Most question-similar frontier node (lowest id on ties)."""
    nodes = sorted(state.frontier) or sorted(state.anchors)
    sims = state.scorer.ent_sim
    return max(nodes, key=lambda v: (sims[v], -v))


def navigator_candidates(state: EpisodeState) -> list[HopCandidate]:
    if state.current is None:
        return []
    g = state.g
    on_path = {state.current} | {src for _, src, _ in state.path}
    used = {t for t, _, _ in state.path}
    hops: list[HopCandidate] = []
    if len(state.path) < state.config.horizon:
        for nb in g.neighbors(state.current, "both"):
            if nb.triple in state.edges and nb.triple not in used and nb.triple not in state.tried \
                    and nb.entity not in on_path:
                hops.append(HopCandidate("hop", nb.triple, state.current, nb.entity, nb.direction))
    if len(hops) > state.config.k_max:
        sc = state.scorer
        g_tr = g.triples
        hops.sort(key=lambda h: -(sc.rel_sim[g_tr[h.triple, 1]] + sc.ent_sim[h.target]))
        hops = hops[: state.config.k_max]
    if state.path:
        tid, src, dst = state.path[-1]
        hops.append(HopCandidate("backtrack", tid, dst, src, ""))
    return hops


def _path_relations(state: EpisodeState) -> set[int]:
    return {int(state.g.triples[t, 1]) for t, _, _ in state.path}


def _navigator_feats(state: EpisodeState, cands: list[HopCandidate]) -> np.ndarray:
    sc = state.scorer
    g = state.g
    used = _path_relations(state)
    H = state.config.horizon
    rows = []
    for c in cands:
        r = int(g.triples[c.triple, 1])
        rows.append([
            sc.rel_sim[r],
            sc.ent_sim[c.target],
            1.0 if c.direction == "out" else 0.0,
            1.0 if c.kind == "backtrack" else 0.0,
            float(sc.rel_in_question[r] > 0 and r not in used),
            sc.rel_position[r],
            sc.deg[c.target],
            (len(state.path) + 1) / H,
            float(c.kind == "hop" and sc.rel_rank[r] == len(state.path) + 1),
        ])
    return np.array(rows, dtype=float).reshape(-1, NAV_FEATS)


def navigator_observe(state: EpisodeState, n_candidates: int | None = None) -> np.ndarray:
    """[q(16), current node(16), path summary(16), |p|/H, remaining(3), prices(3), |A|/K, |Pi|/max, round]."""
    g = state.g
    cfg = state.config
    cur = state.current if state.current is not None else state.anchors[0]
    if state.path:
        rel = np.mean([g.relation_embeddings[g.triples[t, 1]] for t, _, _ in state.path], axis=0)
        summary = pool(rel)
    else:
        summary = np.zeros(16)
    if n_candidates is None:
        n_candidates = len(navigator_candidates(state))
    bt = state.budget_vector()
    return np.concatenate([
        pool(state.scorer.q_emb),
        pool(g.entity_embeddings[cur]),
        summary,
        [len(state.path) / cfg.horizon],
        bt[:3],
        bt[3:],
        [n_candidates / cfg.k_max, len(state.paths) / cfg.max_paths, state.round / cfg.max_rounds],
    ])


def navigator_decision(state: EpisodeState) -> Decision:
    cands = navigator_candidates(state)
    feats = _navigator_feats(state, cands)
    mask = np.ones(len(cands) + 1, dtype=bool)
    mask[:-1] = state.can_afford("lat", 1)
    obs = navigator_observe(state, len(cands))
    return Decision("navigator", obs, feats, np.zeros(len(cands)), mask, cands, action_features("navigator", feats))


def navigator_finalize(state: EpisodeState, reason: str, final: bool) -> None:
    """Close the open path segment; record it in Pi when new and non-empty."""
    path = tuple(state.path)
    recorded = False
    if path and path not in state.paths and len(state.paths) < state.config.max_paths:
        state.paths.append(path)
        recorded = True
    if len(state.paths) >= state.config.max_paths:
        final = True
    state.stop("navigator", reason, final=final, path=[t for t, _, _ in path], recorded=recorded)
    state.path = []
    state.tried = set()
    state.current = None


def navigator_apply(state: EpisodeState, choice: HopCandidate | None) -> str:
    """Apply one navigator action. Returns "hop", "backtrack", "segment_end" or "stop"."""
    if choice is None:
        final = not state.path
        navigator_finalize(state, "policy", final=final)
        return "stop" if final else "segment_end"
    if choice.kind == "backtrack":
        state.backtrack()
        return "backtrack"
    if choice.source != state.current:
        raise GraphError("hop source is not the current node")
    nbrs = {nb.triple for nb in state.g.neighbors(state.current, "both")}
    if choice.triple not in nbrs or choice.triple not in state.edges:
        raise GraphError(f"hop to non-neighbor via triple {choice.triple}")
    state.hop(choice.triple)
    return "hop"


# --- curator --------------------------------------------------------------

def build_pool(state: EpisodeState) -> list[Snippet]:
    """Unselected snippets from current subgraph triples and discovered paths."""
    snippets: dict[str, Snippet] = {}
    cache = state.__dict__.setdefault("_snip", {})
    for t in sorted(state.edges):
        key = ("t", t)
        if key not in cache:
            cache[key] = textualize(state.g, t)
        snippets[cache[key].id] = cache[key]
    for p in state.paths:
        key = ("p", p)
        if key not in cache:
            cache[key] = textualize(state.g, list(p))
        snippets[cache[key].id] = cache[key]
    return [s for sid, s in snippets.items() if sid not in state.selected]


def _snippet_emb(state: EpisodeState, s: Snippet) -> np.ndarray:
    cache = state.__dict__.setdefault("_semb", {})
    if s.id not in cache:
        cache[s.id] = embed_text(s.text, state.g.dim)
    return cache[s.id]


def redundancy(state: EpisodeState, s: Snippet) -> float:
    """max over selected snippets of sim01(text(c), text(s)); 0 when nothing is selected."""
    if not state.selected:
        return 0.0
    e = _snippet_emb(state, s)
    return max(sim01(e, _snippet_emb(state, o)) for o in state.selected.values())


def _curator_feats(state: EpisodeState, pool_: list[Snippet]) -> tuple[np.ndarray, np.ndarray]:
    q = frozenset(state.q_tokens)
    covered = state.selected_provenance()
    sel_toks = [_token_set(state, s.id, s.text) for s in state.selected.values()]
    base_cov = _coverage(q, sel_toks)
    tok_scale = state.budgets.tok if state.cap_mode else state.config.price_token_scale
    tok_scale = max(tok_scale, 1)
    rows, red = [], []
    for s in pool_:
        r = redundancy(state, s)
        red.append(r)
        gain = _coverage(q, sel_toks + [_token_set(state, s.id, s.text)]) - base_cov
        rows.append([
            sim01(state.scorer.q_emb, _snippet_emb(state, s)),
            s.tok / tok_scale,
            state.prices.tok,
            sum(t in covered for t in s.provenance) / len(s.provenance),
            1.0 if s.kind == "path" else 0.0,
            r,
            gain,
            len(s.provenance) / state.config.horizon,
        ])
    return np.array(rows, dtype=float).reshape(-1, CUR_FEATS), np.array(red, dtype=float)


def curator_candidates(
    state: EpisodeState, base_score: Callable[[np.ndarray], np.ndarray] | None = None
) -> list[tuple[Snippet, float]]:
    """Feasible unselected snippets with marginal score base - mu * redundancy.

    ``base_score`` maps the (n, CUR_FEATS) feature matrix to scores; the default
    uses question relevance (the first feature).
    """
    pool_ = [s for s in build_pool(state) if state.can_afford("tok", s.tok)]
    feats, red = _curator_feats(state, pool_)
    base = feats[:, 0] if base_score is None else np.asarray(base_score(feats), dtype=float)
    marg = base - state.config.redundancy_weight * red
    return list(zip(pool_, marg.tolist()))


def curator_decision(state: EpisodeState, selections_left: int, greedy: bool = False) -> Decision:
    """Masked selection decision; ``greedy`` also masks snippets whose token charge alone reaches the task reward."""
    pool_ = build_pool(state)
    feats, red = _curator_feats(state, pool_)
    mask = np.ones(len(pool_) + 1, dtype=bool)
    lat_ok = not state.config.lat_counts_all_actions or state.can_afford("lat", 1)
    mask[:-1] = [selections_left > 0 and lat_ok and state.can_afford("tok", s.tok) for s in pool_]
    if greedy:
        mask[:-1] &= np.array([state.prices.tok * s.tok < MAX_REWARD for s in pool_], dtype=bool)
    obs = np.concatenate([global_features(state), [len(pool_) / 16.0, float(mask[:-1].sum()) / 16.0]])
    offsets = -state.config.redundancy_weight * red
    return Decision("curator", obs, feats, offsets, mask, pool_, action_features("curator", feats))


def curator_apply(state: EpisodeState, choice: Snippet | None) -> str:
    if choice is None:
        state.stop("curator", "policy")
        return "stop"
    state.select(choice)
    return "select"
