"""Immutable in-memory knowledge graph with interned ids and adjacency indexes."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
import logging
from pathlib import Path
import re
from typing import Iterable, Iterator

from .errors import ParseError, UnknownEntity
from .types import EntityRef, Literal, RelationRef, Triple

logger = logging.getLogger(__name__)

GRAPH_FORMATS = ("tsv", "ntriples")
DIRECTIONS = ("out", "in", "both")

_LITERAL = re.compile(r'^"(?P<raw>.*)"\^\^<?(?P<kind>date|number|string)>?$')
_NT_TERM = r'(<[^>]*>|"(?:[^"\\]|\\.)*"\^\^<?\w+>?)'
_NT_LINE = re.compile(rf"^{_NT_TERM}\s+<([^>]+)>\s+{_NT_TERM}\s*\.\s*$")


@dataclass(frozen=True)
class GraphStats:
    entities: int
    literals: int
    relations: int
    triples: int
    duplicates: int

    def to_dict(self) -> dict[str, int]:
        return {
            "entities": self.entities,
            "literals": self.literals,
            "relations": self.relations,
            "triples": self.triples,
            "duplicates": self.duplicates,
        }


class KnowledgeGraph:
    """Read-only triple store. Build with GraphBuilder or load_graph."""

    def __init__(
        self,
        *,
        entities: tuple[EntityRef, ...],
        relations: tuple[RelationRef, ...],
        triples: tuple[Triple, ...],
        duplicates: int = 0,
    ) -> None:
        self.entities = entities
        self.relations = relations
        self.triples = triples
        self.duplicates = duplicates

        out_index: dict[int, list[int]] = {}
        in_index: dict[int, list[int]] = {}
        for idx, triple in enumerate(triples):
            out_index.setdefault(triple.head, []).append(idx)
            in_index.setdefault(triple.tail, []).append(idx)
        self.out_index: dict[int, tuple[int, ...]] = {
            eid: tuple(sorted(ids, key=lambda i: (triples[i].relation, triples[i].tail, i)))
            for eid, ids in out_index.items()
        }
        self.in_index: dict[int, tuple[int, ...]] = {
            eid: tuple(sorted(ids, key=lambda i: (triples[i].relation, triples[i].head, i)))
            for eid, ids in in_index.items()
        }
        self._by_label: dict[str, list[int]] = {}
        for entity in entities:
            self._by_label.setdefault(entity.label.casefold(), []).append(entity.id)

    @property
    def stats(self) -> GraphStats:
        literals = sum(1 for e in self.entities if e.is_literal)
        return GraphStats(
            entities=len(self.entities) - literals,
            literals=literals,
            relations=len(self.relations),
            triples=len(self.triples),
            duplicates=self.duplicates,
        )

    def entity(self, eid: int) -> EntityRef:
        if not 0 <= eid < len(self.entities):
            raise UnknownEntity(eid)
        return self.entities[eid]

    def find_by_label(self, label: str) -> list[int]:
        return list(self._by_label.get(label.casefold(), ()))

    def triple_indices(self, e: int, direction: str = "both") -> tuple[int, ...]:
        self.entity(e)
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if direction == "out":
            return self.out_index.get(e, ())
        if direction == "in":
            return self.in_index.get(e, ())

        def other(idx: int) -> int:
            t = self.triples[idx]
            return t.tail if t.head == e else t.head

        merged = set(self.out_index.get(e, ())) | set(self.in_index.get(e, ()))
        return tuple(sorted(merged, key=lambda i: (self.triples[i].relation, other(i), i)))

    def neighbors(self, e: int, direction: str = "both") -> list[Triple]:
        return [self.triples[idx] for idx in self.triple_indices(e, direction)]

    def adjacent(self, e: int) -> Iterator[int]:
        for idx in self.triple_indices(e, "both"):
            t = self.triples[idx]
            yield t.tail if t.head == e else t.head

    def hop_distance(self, a: int, b: int, cap: int) -> int | None:
        self.entity(a)
        self.entity(b)
        if cap < 0:
            raise ValueError("cap must be >= 0")
        if a == b:
            return 0
        seen = {a}
        frontier = deque([(a, 0)])
        while frontier:
            node, dist = frontier.popleft()
            if dist >= cap:
                continue
            for nxt in self.adjacent(node):
                if nxt == b:
                    return dist + 1
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append((nxt, dist + 1))
        return None

    def render_triple(self, idx: int) -> tuple[str, str, str]:
        t = self.triples[idx]
        return (self.entities[t.head].label, self.relations[t.relation].label, self.entities[t.tail].label)


class GraphBuilder:
    """Interns labels in first-appearance order and drops duplicate triples."""

    def __init__(self) -> None:
        self._entity_ids: dict[tuple[str, str | None], int] = {}
        self._entities: list[dict] = []
        self._relation_ids: dict[str, int] = {}
        self._relations: list[dict] = []
        self._triples: list[Triple] = []
        self._seen: set[Triple] = set()
        self.duplicates = 0

    def entity(self, label: str, literal: Literal | None = None) -> int:
        key = (label, literal.kind if literal else None)
        eid = self._entity_ids.get(key)
        if eid is None:
            eid = len(self._entities)
            self._entity_ids[key] = eid
            self._entities.append({"label": label, "tags": set(), "literal": literal})
        return eid

    def relation(self, label: str) -> int:
        rid = self._relation_ids.get(label)
        if rid is None:
            rid = len(self._relations)
            self._relation_ids[label] = rid
            self._relations.append({"label": label, "cluster": None})
        return rid

    def add_type(self, label: str, tag: str) -> None:
        self._entities[self.entity(label)]["tags"].add(tag)

    def set_cluster(self, relation: str, cluster: str) -> None:
        self._relations[self.relation(relation)]["cluster"] = cluster

    def add(self, head: str, relation: str, tail: str | Literal) -> bool:
        h = self.entity(head)
        r = self.relation(relation)
        t = self.entity(tail.raw, tail) if isinstance(tail, Literal) else self.entity(tail)
        triple = Triple(h, r, t)
        if triple in self._seen:
            self.duplicates += 1
            logger.warning("duplicate triple dropped: %s / %s / %s", head, relation, tail)
            return False
        self._seen.add(triple)
        self._triples.append(triple)
        return True

    def build(self) -> KnowledgeGraph:
        entities = tuple(
            EntityRef(id=idx, label=row["label"], type_tags=frozenset(row["tags"]), literal=row["literal"])
            for idx, row in enumerate(self._entities)
        )
        relations = tuple(
            RelationRef(id=idx, label=row["label"], cluster_label=row["cluster"])
            for idx, row in enumerate(self._relations)
        )
        return KnowledgeGraph(
            entities=entities,
            relations=relations,
            triples=tuple(self._triples),
            duplicates=self.duplicates,
        )


def graph_from_triples(triples: Iterable[tuple[str, str, str]], types: dict[str, Iterable[str]] | None = None) -> KnowledgeGraph:
    builder = GraphBuilder()
    for head, relation, tail in triples:
        builder.add(head, relation, tail)
    for label, tags in (types or {}).items():
        for tag in tags:
            builder.add_type(label, tag)
    return builder.build()


def _parse_tail(text: str, line_no: int) -> str | Literal:
    match = _LITERAL.match(text)
    if match is None:
        return text
    try:
        return Literal(kind=match.group("kind"), raw=match.group("raw"))
    except ValueError as e:
        raise ParseError(line_no, str(e)) from e


def _nt_term(term: str, line_no: int) -> str | Literal:
    if term.startswith("<"):
        value = term[1:-1].strip()
        if not value:
            raise ParseError(line_no, "empty IRI")
        return value
    return _parse_tail(term, line_no)


def _load_tsv(lines: Iterable[str], builder: GraphBuilder) -> None:
    for line_no, line in enumerate(lines, start=1):
        text = line.rstrip("\n").rstrip("\r")
        if not text.strip() or text.lstrip().startswith("#"):
            continue
        fields = text.split("\t")
        if len(fields) != 3 or not all(f.strip() for f in fields):
            raise ParseError(line_no, "expected head<TAB>relation<TAB>tail")
        head, relation, tail = (f.strip() for f in fields)
        if head == "@type":
            builder.add_type(relation, tail)
        elif head == "@cluster":
            builder.set_cluster(relation, tail)
        else:
            builder.add(head, relation, _parse_tail(tail, line_no))


def _load_ntriples(lines: Iterable[str], builder: GraphBuilder) -> None:
    for line_no, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        match = _NT_LINE.match(text)
        if match is None:
            raise ParseError(line_no, "expected <head> <relation> <tail> .")
        head = _nt_term(match.group(1), line_no)
        if isinstance(head, Literal):
            raise ParseError(line_no, "literal in head position")
        builder.add(head, match.group(2).strip(), _nt_term(match.group(3), line_no))


def load_graph(path: str | Path, format: str | None = None) -> KnowledgeGraph:
    """Load a TSV (`.kg`, `.tsv`) or N-Triples subset (`.nt`) file."""
    path = Path(path)
    fmt = format or ("ntriples" if path.suffix.lower() == ".nt" else "tsv")
    if fmt not in GRAPH_FORMATS:
        raise ValueError(f"format must be one of {GRAPH_FORMATS}")
    builder = GraphBuilder()
    with path.open("r", encoding="utf-8") as handle:
        if fmt == "tsv":
            _load_tsv(handle, builder)
        else:
            _load_ntriples(handle, builder)
    graph = builder.build()
    logger.info("loaded %s: %s", path.name, graph.stats.to_dict())
    return graph
