"""Immutable typed triple store with adjacency, alias, and name indexes."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .text import DEFAULT_DIM, embed_text, tokenize

Direction = Literal["out", "in", "both"]

ALIAS_RELATION = "IS_ALIAS_OF"


class GraphError(ValueError):
    pass


class ParseError(GraphError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Triple:
    subject: int
    relation: int
    object: int


@dataclass(frozen=True)
class Neighbor:
    relation: int
    entity: int
    direction: str  # "out" or "in"
    triple: int


@dataclass(eq=False)
class KnowledgeGraph:
    """K = (V, R, E). Build with :func:`load_triples` or :meth:`from_triples`."""

    entity_names: list[str]
    relation_names: list[str]
    triples: np.ndarray  # (m, 3) int64, rows unique
    aliases: dict[str, int] = field(default_factory=dict)
    dim: int = DEFAULT_DIM

    def __post_init__(self) -> None:
        n = len(self.entity_names)
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        self._entity_index = {name.casefold(): i for i, name in enumerate(self.entity_names)}
        self._relation_index = {name.casefold(): i for i, name in enumerate(self.relation_names)}
        self._triple_index = {tuple(map(int, t)): i for i, t in enumerate(self.triples)}
        out_adj: list[list[Neighbor]] = [[] for _ in range(n)]
        in_adj: list[list[Neighbor]] = [[] for _ in range(n)]
        for tid, (s, r, o) in enumerate(self.triples.tolist()):
            out_adj[s].append(Neighbor(r, o, "out", tid))
            in_adj[o].append(Neighbor(r, s, "in", tid))
        for lst in (*out_adj, *in_adj):
            lst.sort(key=lambda nb: (nb.relation, nb.entity, nb.triple))
        self._out = [tuple(x) for x in out_adj]
        self._in = [tuple(x) for x in in_adj]
        self.degree = np.array([len(self._out[v]) + len(self._in[v]) for v in range(n)], dtype=np.int64)

    @classmethod
    def from_triples(
        cls,
        named: Iterable[tuple[str, str, str]],
        aliases: Iterable[tuple[str, str]] = (),
        dim: int = DEFAULT_DIM,
    ) -> "KnowledgeGraph":
        """Build from (subject, relation, object) name triples; duplicates collapse."""
        ents: dict[str, int] = {}
        ent_names: list[str] = []
        rels: dict[str, int] = {}
        rel_names: list[str] = []

        def intern(name: str, index: dict[str, int], names: list[str]) -> int:
            key = name.casefold()
            if key not in index:
                index[key] = len(names)
                names.append(name)
            return index[key]

        seen: dict[tuple[int, int, int], None] = {}
        for s, r, o in named:
            key = (intern(s, ents, ent_names), intern(r, rels, rel_names), intern(o, ents, ent_names))
            seen.setdefault(key, None)
        alias_map: dict[str, int] = {}
        for alias, canonical in aliases:
            if canonical.casefold() not in ents:
                raise GraphError(f"alias target {canonical!r} is not an entity")
            alias_map[alias.casefold()] = ents[canonical.casefold()]
        arr = np.array(list(seen), dtype=np.int64).reshape(-1, 3)
        return cls(ent_names, rel_names, arr, alias_map, dim)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    @property
    def n_triples(self) -> int:
        return len(self.triples)

    def triple(self, tid: int) -> Triple:
        if not 0 <= tid < self.n_triples:
            raise GraphError(f"unknown triple id {tid}")
        s, r, o = self.triples[tid]
        return Triple(int(s), int(r), int(o))

    def triple_id(self, s: int, r: int, o: int) -> int | None:
        return self._triple_index.get((s, r, o))

    def entity_id(self, name: str) -> int:
        key = name.casefold()
        if key in self._entity_index:
            return self._entity_index[key]
        if key in self.aliases:
            return self.aliases[key]
        raise GraphError(f"unknown entity {name!r}")

    def relation_id(self, name: str) -> int:
        try:
            return self._relation_index[name.casefold()]
        except KeyError:
            raise GraphError(f"unknown relation {name!r}") from None

    def check_entity(self, v: int) -> None:
        if not 0 <= v < self.n_entities:
            raise GraphError(f"invalid entity id {v}")

    def neighbors(self, v: int, direction: Direction = "both") -> tuple[Neighbor, ...]:
        """Adjacent (relation, entity) pairs sorted by relation id then entity id.

        ``both`` is the out-list followed by the in-list.
        """
        self.check_entity(v)
        if direction == "out":
            return self._out[v]
        if direction == "in":
            return self._in[v]
        if direction == "both":
            return self._out[v] + self._in[v]
        raise GraphError(f"bad direction {direction!r}")

    def incident(self, v: int) -> list[int]:
        return [nb.triple for nb in self.neighbors(v, "both")]

    # --- anchoring ---------------------------------------------------------

    @cached_property
    def _name_tokens(self) -> dict[tuple[str, ...], int]:
        table: dict[tuple[str, ...], int] = {}
        for i, name in enumerate(self.entity_names):
            toks = tuple(tokenize(name))
            if toks:
                table.setdefault(toks, i)
        for alias, i in self.aliases.items():
            toks = tuple(tokenize(alias))
            if toks:
                table.setdefault(toks, i)
        return table

    @cached_property
    def _max_name_len(self) -> int:
        return max((len(k) for k in self._name_tokens), default=0)

    def match_anchors(self, question: str | Sequence[str]) -> list[int]:
        """Entities named in the question, longest match first, else the most similar one."""
        toks = tokenize(question) if isinstance(question, str) else tokenize(" ".join(question))
        if not toks:
            raise GraphError("empty question")
        if self.n_entities == 0:
            raise GraphError("empty graph")
        table = self._name_tokens
        found: list[int] = []
        i = 0
        while i < len(toks):
            for n in range(min(self._max_name_len, len(toks) - i), 0, -1):
                ent = table.get(tuple(toks[i:i + n]))
                if ent is not None:
                    if ent not in found:
                        found.append(ent)
                    i += n
                    break
            else:
                i += 1
        if found:
            return found
        sims = self.entity_embeddings @ embed_text(toks, self.dim)
        return [int(np.argmax(sims))]

    # --- cached embeddings -------------------------------------------------

    @cached_property
    def entity_embeddings(self) -> np.ndarray:
        return np.stack([embed_text(n, self.dim) for n in self.entity_names]) if self.entity_names else np.zeros((0, self.dim))

    @cached_property
    def relation_embeddings(self) -> np.ndarray:
        return np.stack([embed_text(n, self.dim) for n in self.relation_names]) if self.relation_names else np.zeros((0, self.dim))

    @cached_property
    def relation_tokens(self) -> list[tuple[str, ...]]:
        return [tuple(tokenize(n)) for n in self.relation_names]


def _parse_lines(lines: Iterable[str]) -> list[tuple[str, str, str]]:
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\r\n").split("|")
        if len(parts) != 3:
            raise ParseError(lineno, f"expected 3 '|'-separated fields, got {len(parts)}")
        s, r, o = (p.strip() for p in parts)
        if not (s and r and o):
            raise ParseError(lineno, "empty field")
        rows.append((s, r, o))
    return rows


def load_triples(
    source: str | Path | Iterable[str],
    aliases: str | Path | Iterable[str] | None = None,
    dim: int = DEFAULT_DIM,
) -> KnowledgeGraph:
    """Parse ``subject|relation|object`` lines (a path, a text blob, or an iterable of lines)."""
    rows = _parse_lines(_lines(source))
    if not rows:
        raise GraphError("empty graph")
    alias_pairs: list[tuple[str, str]] = []
    if aliases is not None:
        for alias, rel, canonical in _parse_lines(_lines(aliases)):
            if rel != ALIAS_RELATION:
                raise GraphError(f"alias file relation must be {ALIAS_RELATION}, got {rel!r}")
            alias_pairs.append((alias, canonical))
    return KnowledgeGraph.from_triples(rows, alias_pairs, dim)


def _lines(source: str | Path | Iterable[str]) -> Iterable[str]:
    if isinstance(source, Path):
        return source.read_text(encoding="utf-8").splitlines()
    if isinstance(source, str):
        if "\n" not in source and "|" not in source and Path(source).exists():
            return Path(source).read_text(encoding="utf-8").splitlines()
        return source.splitlines()
    return source


def dump_triples(g: KnowledgeGraph) -> str:
    lines = [
        f"{g.entity_names[s]}|{g.relation_names[r]}|{g.entity_names[o]}"
        for s, r, o in g.triples.tolist()
    ]
    return "\n".join(lines) + "\n"
