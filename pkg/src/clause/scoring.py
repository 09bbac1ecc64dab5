"""Edge features for question-conditioned expansion and their fused score."""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kg import GraphError, KnowledgeGraph
from .text import embed_text, sim01, tokenize

NEIGHBOR_CAP = 8


@dataclass(frozen=True)
class EdgeFeatures:
    phi_ent: float
    phi_rel: float
    phi_nbr: float
    phi_deg: float

    def as_array(self) -> np.ndarray:
        return np.array([self.phi_ent, self.phi_rel, self.phi_nbr, self.phi_deg])


def fused_score(features: EdgeFeatures | np.ndarray, weights: Sequence[float] | np.ndarray) -> float:
    phi = features.as_array() if isinstance(features, EdgeFeatures) else np.asarray(features, dtype=float)
    return float(np.dot(phi, np.asarray(weights, dtype=float)))


def degree_prior(degree: int | np.ndarray) -> float | np.ndarray:
    return 1.0 / (1.0 + np.log1p(degree))


def neighbor_sample(g: KnowledgeGraph, v: int) -> list[int]:
    """The first NEIGHBOR_CAP distinct neighbors of ``v`` in adjacency order."""
    out: list[int] = []
    for nb in g.neighbors(v, "both"):
        if nb.entity not in out:
            out.append(nb.entity)
            if len(out) == NEIGHBOR_CAP:
                break
    return out


def edge_features(q: str | Sequence[str], tid: int, g: KnowledgeGraph) -> EdgeFeatures:
    """Scalar reference path; episode code uses :class:`QuestionScorer` instead."""
    t = g.triple(tid)
    qv = embed_text(q, g.dim)
    names = g.entity_names
    phi_ent = max(sim01(qv, embed_text(names[t.subject], g.dim)), sim01(qv, embed_text(names[t.object], g.dim)))
    phi_rel = sim01(qv, embed_text(g.relation_names[t.relation], g.dim))
    nbrs = neighbor_sample(g, t.object)
    phi_nbr = float(np.mean([sim01(qv, embed_text(names[n], g.dim)) for n in nbrs])) if nbrs else 0.0
    phi_deg = 1.0 / (1.0 + math.log(1.0 + int(g.degree[t.object])))
    return EdgeFeatures(phi_ent, phi_rel, phi_nbr, phi_deg)


_NEIGHBOR_TABLES: "weakref.WeakKeyDictionary[KnowledgeGraph, tuple[np.ndarray, np.ndarray]]" = weakref.WeakKeyDictionary()


def _neighbor_table(g: KnowledgeGraph) -> tuple[np.ndarray, np.ndarray]:
    table = _NEIGHBOR_TABLES.get(g)
    if table is None:
        idx = np.zeros((g.n_entities, NEIGHBOR_CAP), dtype=np.int64)
        cnt = np.zeros(g.n_entities, dtype=np.int64)
        for v in range(g.n_entities):
            nbrs = neighbor_sample(g, v)
            idx[v, : len(nbrs)] = nbrs
            cnt[v] = len(nbrs)
        table = (idx, cnt)
        _NEIGHBOR_TABLES[g] = table
    return table


def _sim01_rows(mat: np.ndarray, qv: np.ndarray) -> np.ndarray:
    # Rows of mat and qv are unit-norm or zero.
    if not np.any(qv):
        return np.full(len(mat), 0.5)
    dots = mat @ qv
    zero = ~np.any(mat, axis=1)
    out = np.clip(0.5 * (1.0 + dots), 0.0, 1.0)
    out[zero] = 0.5
    return out


class QuestionScorer:
    """Per-question cache of similarities, so edge features are table lookups."""

    def __init__(self, g: KnowledgeGraph, question: str | Sequence[str]):
        self.g = g
        self.tokens = tokenize(question) if isinstance(question, str) else tokenize(" ".join(question))
        self.q_emb = embed_text(self.tokens, g.dim)
        self.ent_sim = _sim01_rows(g.entity_embeddings, self.q_emb)
        self.rel_sim = _sim01_rows(g.relation_embeddings, self.q_emb)
        idx, cnt = _neighbor_table(g)
        summed = np.where(np.arange(NEIGHBOR_CAP)[None, :] < cnt[:, None], self.ent_sim[idx], 0.0).sum(axis=1)
        self.nbr = np.divide(summed, cnt, out=np.zeros(g.n_entities), where=cnt > 0)
        self.deg = degree_prior(g.degree)
        qset = self.tokens
        self.rel_position = np.zeros(g.n_relations)
        self.rel_in_question = np.zeros(g.n_relations)
        self.rel_rank = np.zeros(g.n_relations, dtype=np.int64)  # 1-based mention order, 0 if absent
        # rel_position is the mention rank among relations named in the question,
        # scaled to (0, 1]: the first-named relation of a two-hop question gets 0.5.
        found = [(pos, r) for r, toks in enumerate(g.relation_tokens) if (pos := _find(qset, toks)) >= 0]
        for rank, (_, r) in enumerate(sorted(found)):
            self.rel_in_question[r] = 1.0
            self.rel_position[r] = (rank + 1) / len(found)
            self.rel_rank[r] = rank + 1

    def features(self, tids: Sequence[int] | np.ndarray) -> np.ndarray:
        """(n, 4) matrix of [phi_ent, phi_rel, phi_nbr, phi_deg]."""
        tids = np.asarray(tids, dtype=np.int64)
        if len(tids) and (tids.min() < 0 or tids.max() >= self.g.n_triples):
            raise GraphError("invalid triple id")
        t = self.g.triples[tids]
        s, r, o = t[:, 0], t[:, 1], t[:, 2]
        return np.stack(
            [np.maximum(self.ent_sim[s], self.ent_sim[o]), self.rel_sim[r], self.nbr[o], self.deg[o]], axis=1
        ).reshape(-1, 4)

    def text_sim(self, text: str) -> float:
        return sim01(self.q_emb, embed_text(text, self.g.dim))


def _find(hay: Sequence[str], needle: Sequence[str]) -> int:
    n = len(needle)
    if n == 0:
        return -1
    for i in range(len(hay) - n + 1):
        if tuple(hay[i:i + n]) == tuple(needle):
            return i
    return -1
