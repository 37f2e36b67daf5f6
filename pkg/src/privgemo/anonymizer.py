"""Session pseudonyms, anonymized subgraph views, structure sanitization and reversal."""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field
from decimal import ROUND_FLOOR, Decimal
import hashlib
import hmac
import logging
import math
import random
import re
import secrets
from typing import Iterable, Iterator

import networkx as nx

from .boundary import BoundaryGuard
from .config import PrivacyPolicy
from .errors import BudgetInfeasible, CoarsenError, MappingSealed, UnknownToken
from .kg_store import KnowledgeGraph
from .types import Literal, RawSubgraph, ReasoningPath, TopicEntitySet, parse_decimal, parse_iso_prefix

logger = logging.getLogger(__name__)

ENTITY_PREFIX = "ent_"
LITERAL_PREFIX = "lit_"
RELATION_PREFIX = "rel_"
SUPERNODE_PREFIX = "sup_"
TOKEN_HEX = 8
TOKEN_PATTERN = re.compile(r"(?<!\w)(?:ent|lit|rel|sup)_[0-9a-f]{8}(?:_\d+)?(?!\w)")


class SessionMapping:
    """Per-question keyed pseudonym table.

    Tokens are HMAC-SHA256 of the raw label under a fresh 32-byte secret,
    truncated to 8 hex chars. The secret never leaves this object and is
    overwritten on close.
    """

    def __init__(self, secret: bytes | None = None) -> None:
        self._secret = bytearray(secret if secret is not None else secrets.token_bytes(32))
        self.entity_forward: dict[int, str] = {}
        self.entity_inverse: dict[str, int] = {}
        self.relation_forward: dict[int, str] = {}
        self.relation_inverse: dict[str, int] = {}
        self.supernodes: dict[str, frozenset[int]] = {}
        self.sealed = False
        self.zeroized = False
        self._taken: set[str] = set()

    def _check_live(self) -> None:
        if self.zeroized:
            raise MappingSealed("session secret has been zeroized")

    def _keyed(self, label: str) -> str:
        self._check_live()
        return hmac.new(bytes(self._secret), label.encode("utf-8"), hashlib.sha256).hexdigest()[:TOKEN_HEX]

    def _claim(self, base: str) -> str:
        if self.sealed:
            raise MappingSealed(f"cannot mint {base!r}: mapping is sealed")
        token, n = base, 1
        while token in self._taken:
            n += 1
            token = f"{base}_{n}"
        self._taken.add(token)
        return token

    def rng(self, purpose: str) -> random.Random:
        self._check_live()
        digest = hmac.new(bytes(self._secret), purpose.encode("utf-8"), hashlib.sha256).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def mint_entity(self, eid: int, label: str, *, literal: bool = False, keep_raw: bool = False) -> str:
        if eid in self.entity_forward:
            return self.entity_forward[eid]
        prefix = LITERAL_PREFIX if literal else ENTITY_PREFIX
        token = self._claim(label if keep_raw else prefix + self._keyed(label))
        self.entity_forward[eid] = token
        self.entity_inverse[token] = eid
        return token

    def mint_relation(self, rid: int, label: str, *, keep_raw: bool = False) -> str:
        if rid in self.relation_forward:
            return self.relation_forward[rid]
        token = self._claim(label if keep_raw else RELATION_PREFIX + self._keyed(label))
        self.relation_forward[rid] = token
        self.relation_inverse[token] = rid
        return token

    def mint_supernode(self, members: Iterable[int], labels: Iterable[str]) -> str:
        member_set = frozenset(members)
        token = self._claim(SUPERNODE_PREFIX + self._keyed("\x1f".join(sorted(labels))))
        self.supernodes[token] = member_set
        return token

    def seal(self) -> None:
        self.sealed = True

    def is_raw(self, eid: int) -> bool:
        token = self.entity_forward.get(eid)
        return token is not None and not TOKEN_PATTERN.fullmatch(token)

    def entity_members(self, token: str) -> frozenset[int]:
        if token in self.entity_inverse:
            return frozenset({self.entity_inverse[token]})
        if token in self.supernodes:
            return self.supernodes[token]
        raise UnknownToken(token)

    def relation_id(self, token: str) -> int:
        try:
            return self.relation_inverse[token]
        except KeyError as e:
            raise UnknownToken(token) from e

    def zeroize(self) -> None:
        for idx in range(len(self._secret)):
            self._secret[idx] = 0
        self.zeroized = True

    close = zeroize

    def __enter__(self) -> "SessionMapping":
        return self

    def __exit__(self, *exc: object) -> None:
        self.zeroize()

    def __del__(self) -> None:
        try:
            self.zeroize()
        except Exception:
            pass


def build_mapping(sub: RawSubgraph, policy: PrivacyPolicy, *, secret: bytes | None = None) -> SessionMapping:
    """Mint tokens for every entity and relation of the subgraph.

    At ratio 0 every token is the raw label. Below ratio 1 a secret-seeded
    sample of non-anchor entities keeps its raw label; a kept label that
    contains an anonymized one is anonymized as well.
    """
    if not sub.entity_ids:
        raise ValueError("subgraph is empty")
    g = sub.graph
    mapping = SessionMapping(secret)
    ids = sorted(sub.entity_ids)
    anchors = set(sub.anchors)

    if policy.plaintext:
        keep = set(ids)
    else:
        candidates = [eid for eid in ids if eid not in anchors]
        count = min(len(candidates), int(round((1.0 - policy.anonymization_ratio) * len(ids))))
        keep = set(mapping.rng("keep-raw").sample(candidates, count)) if count else set()
        while keep:
            guard = BoundaryGuard(g.entities[eid].label for eid in ids if eid not in keep)
            leaking = {eid for eid in keep if guard.find(g.entities[eid].label)}
            if not leaking:
                break
            keep -= leaking

    for eid in ids:
        entity = g.entities[eid]
        mapping.mint_entity(eid, entity.label, literal=entity.is_literal, keep_raw=eid in keep)
    for rid in sorted({g.triples[idx].relation for idx in sub.triple_ids}):
        mapping.mint_relation(rid, g.relations[rid].label, keep_raw=policy.plaintext)
    return mapping


def _format_decimal(value: Decimal) -> str:
    text = format(value.normalize(), "f")
    return text if text != "-0" else "0"


def coarsen_literal(lit: Literal, policy: PrivacyPolicy) -> Literal:
    if lit.kind == "date":
        try:
            year, month, day = parse_iso_prefix(lit.raw)
        except ValueError as e:
            raise CoarsenError(str(e)) from e
        if policy.date_granularity == "year" or month is None:
            return Literal("date", f"{year:04d}")
        if policy.date_granularity == "month" or day is None:
            return Literal("date", f"{year:04d}-{month:02d}")
        return Literal("date", f"{year:04d}-{month:02d}-{day:02d}")
    if lit.kind == "number":
        try:
            value = parse_decimal(lit.raw)
        except ValueError as e:
            raise CoarsenError(str(e)) from e
        width = Decimal(str(policy.number_bucket_width))
        k = (value / width).to_integral_value(rounding=ROUND_FLOOR)
        return Literal("string", f"[{_format_decimal(k * width)},{_format_decimal((k + 1) * width)})")
    return lit


@dataclass(frozen=True)
class AnonEntity:
    token: str
    type_tags: tuple[str, ...]
    members: frozenset[int]
    is_anchor: bool = False
    value: str | None = None

    @property
    def is_supernode(self) -> bool:
        return len(self.members) > 1


@dataclass(frozen=True)
class AnonTriple:
    head: str
    relation: str
    tail: str
    support: frozenset[int]


@dataclass(frozen=True)
class AnchorSketch:
    token: str
    degree_bucket: str
    type_histogram: tuple[tuple[str, int], ...]
    radius: int


@dataclass(frozen=True)
class StructureSketch:
    anchors: tuple[AnchorSketch, ...]
    entity_count: int
    triple_count: int

    def render(self) -> list[str]:
        lines = [f"# view entities={self.entity_count} triples={self.triple_count}"]
        for anchor in self.anchors:
            types = ",".join(f"{tag}:{n}" for tag, n in anchor.type_histogram) or "-"
            lines.append(
                f"# anchor {anchor.token} degree={anchor.degree_bucket} radius={anchor.radius} types={types}"
            )
        return lines


def degree_bucket(degree: int) -> str:
    if degree <= 1:
        return str(degree)
    if degree <= 3:
        return "2-3"
    if degree <= 7:
        return "4-7"
    return "8+"


@dataclass
class AnonymizedView:
    """Pseudonymized working subgraph; the only graph the remote channel ever sees."""

    entities: dict[str, AnonEntity]
    triples: tuple[AnonTriple, ...]
    anchors: tuple[str, ...]
    relation_support: dict[str, frozenset[int]]
    raw_entity_count: int
    sketch: StructureSketch | None = None
    adjacency: dict[str, tuple[int, ...]] = field(init=False)

    def __post_init__(self) -> None:
        missing = [a for a in self.anchors if a not in self.entities]
        if missing:
            raise ValueError(f"anchors missing from view: {missing}")
        adjacency: dict[str, list[int]] = {token: [] for token in self.entities}
        for idx, triple in enumerate(self.triples):
            adjacency[triple.head].append(idx)
            if triple.tail != triple.head:
                adjacency[triple.tail].append(idx)
        self.adjacency = {token: tuple(ids) for token, ids in adjacency.items()}
        if self.sketch is None:
            self.sketch = build_sketch(self)

    def neighbors(self, token: str) -> Iterator[tuple[AnonTriple, str]]:
        for idx in self.adjacency.get(token, ()):
            triple = self.triples[idx]
            yield triple, triple.tail if triple.head == token else triple.head

    @property
    def supernodes(self) -> dict[str, frozenset[int]]:
        return {token: e.members for token, e in self.entities.items() if e.is_supernode}

    @property
    def reduction_ratio(self) -> float:
        if self.raw_entity_count == 0:
            return 0.0
        return 1.0 - len(self.entities) / self.raw_entity_count

    def token_for_raw(self, eid: int) -> str | None:
        for token, entity in self.entities.items():
            if eid in entity.members:
                return token
        return None

    def to_graph(self) -> nx.MultiGraph:
        graph = nx.MultiGraph()
        graph.add_nodes_from(self.entities)
        for idx, triple in enumerate(self.triples):
            graph.add_edge(triple.head, triple.tail, key=idx)
        return graph

    def serialize(self) -> str:
        assert self.sketch is not None
        lines = list(self.sketch.render())
        for token in sorted(self.entities):
            entity = self.entities[token]
            if entity.value is not None:
                lines.append(f"# literal {token} {entity.value}")
            if entity.type_tags:
                lines.append(f"# type {token} {','.join(entity.type_tags)}")
            if entity.is_supernode:
                lines.append(f"# group {token} size={len(entity.members)}")
        lines.extend(sorted(f"{t.head}\t{t.relation}\t{t.tail}" for t in self.triples))
        return "\n".join(lines)


def raw_dictionary(sub: RawSubgraph, mapping: SessionMapping, shown_relations: Iterable[str] = ()) -> list[str]:
    """Labels that must never reach the remote channel in this session."""
    g = sub.graph
    shown = set(shown_relations)
    labels = [g.entities[eid].label for eid in sorted(sub.entity_ids) if not mapping.is_raw(eid)]
    labels.extend(
        g.relations[rid].label
        for rid in sorted(mapping.relation_forward)
        if g.relations[rid].label not in shown
    )
    return labels


def semantic_anonymize(
    sub: RawSubgraph,
    mapping: SessionMapping,
    policy: PrivacyPolicy,
    anchor_order: tuple[int, ...] | None = None,
) -> AnonymizedView:
    """Pseudonymize every entity, coarsen literals and render relations per relation_mode."""
    g = sub.graph
    entity_dictionary = BoundaryGuard(
        g.entities[eid].label for eid in sorted(sub.entity_ids) if not mapping.is_raw(eid)
    )

    def render_relation(rid: int) -> str:
        relation = g.relations[rid]
        token = mapping.relation_forward[rid]
        if policy.plaintext:
            return relation.label
        if policy.relation_mode == "utility":
            rendered = relation.label
        else:
            rendered = relation.cluster_label or token
        return token if entity_dictionary.find(rendered) else rendered

    def visible_tags(tags: Iterable[str]) -> tuple[str, ...]:
        if not policy.expose_type_tags:
            return ()
        return tuple(sorted(tag for tag in tags if not entity_dictionary.find(tag)))

    anchors = anchor_order or sub.anchors
    anchor_set = set(anchors)
    entities: dict[str, AnonEntity] = {}
    for eid in sorted(sub.entity_ids):
        raw = g.entities[eid]
        token = mapping.entity_forward[eid]
        value = coarsen_literal(raw.literal, policy).raw if raw.literal is not None and raw.literal.kind != "string" else None
        tags = visible_tags(raw.type_tags)
        if raw.literal is not None:
            tags = tuple(sorted(set(tags) | {f"literal:{raw.literal.kind}"}))
        entities[token] = AnonEntity(token=token, type_tags=tags, members=frozenset({eid}), is_anchor=eid in anchor_set, value=value)

    relation_support: dict[str, set[int]] = {}
    merged: dict[tuple[str, str, str], set[int]] = {}
    for idx in sub.triple_ids:
        triple = g.triples[idx]
        rendered = render_relation(triple.relation)
        relation_support.setdefault(rendered, set()).add(triple.relation)
        key = (mapping.entity_forward[triple.head], rendered, mapping.entity_forward[triple.tail])
        merged.setdefault(key, set()).add(idx)
    triples = tuple(
        AnonTriple(head=h, relation=r, tail=t, support=frozenset(support))
        for (h, r, t), support in sorted(merged.items(), key=lambda item: min(item[1]))
    )
    return AnonymizedView(
        entities=entities,
        triples=triples,
        anchors=tuple(mapping.entity_forward[eid] for eid in anchors),
        relation_support={label: frozenset(ids) for label, ids in relation_support.items()},
        raw_entity_count=len(sub.entity_ids),
    )


def _cluster_key(view: AnonymizedView, token: str) -> tuple:
    incident = Counter()
    for triple, _ in view.neighbors(token):
        if triple.head == token:
            incident[("out", triple.relation)] += 1
        if triple.tail == token:
            incident[("in", triple.relation)] += 1
    entity = view.entities[token]
    return (entity.type_tags, entity.value, tuple(sorted(incident.items())))


def _rebuild(view: AnonymizedView, entities: dict[str, AnonEntity], rename: dict[str, str]) -> AnonymizedView:
    merged: dict[tuple[str, str, str], set[int]] = {}
    for triple in view.triples:
        head = rename.get(triple.head, triple.head)
        tail = rename.get(triple.tail, triple.tail)
        if head not in entities or tail not in entities:
            continue
        merged.setdefault((head, triple.relation, tail), set()).update(triple.support)
    triples = tuple(
        AnonTriple(head=h, relation=r, tail=t, support=frozenset(support))
        for (h, r, t), support in sorted(merged.items(), key=lambda item: min(item[1]))
    )
    relations = {t.relation for t in triples}
    return AnonymizedView(
        entities=entities,
        triples=triples,
        anchors=view.anchors,
        relation_support={k: v for k, v in view.relation_support.items() if k in relations},
        raw_entity_count=view.raw_entity_count,
    )


def _cluster(view: AnonymizedView, mapping: SessionMapping, graph: KnowledgeGraph, min_size: int) -> AnonymizedView:
    groups: dict[tuple, list[str]] = {}
    for token, entity in view.entities.items():
        if not entity.is_anchor:
            groups.setdefault(_cluster_key(view, token), []).append(token)
    rename: dict[str, str] = {}
    entities = {token: entity for token, entity in view.entities.items()}
    for tokens in groups.values():
        if len(tokens) < min_size:
            continue
        members = frozenset().union(*(view.entities[t].members for t in tokens))
        sup = mapping.mint_supernode(members, (graph.entities[eid].label for eid in members))
        first = view.entities[tokens[0]]
        for token in tokens:
            rename[token] = sup
            entities.pop(token)
        entities[sup] = AnonEntity(token=sup, type_tags=first.type_tags, members=members, value=first.value)
    if not rename:
        return view
    ordered = dict(sorted(entities.items(), key=lambda item: min(item[1].members)))
    logger.debug("clustered %d entities into %d groups", len(rename), len(set(rename.values())))
    return _rebuild(view, ordered, rename)


def _anchor_partition(graph: nx.MultiGraph, anchors: tuple[str, ...]) -> frozenset[frozenset[str]]:
    parts: list[frozenset[str]] = []
    for component in nx.connected_components(graph):
        inside = frozenset(a for a in anchors if a in component)
        if inside:
            parts.append(inside)
    return frozenset(parts)


def _prune(view: AnonymizedView, budget: int) -> AnonymizedView:
    anchors = view.anchors
    if budget < len(set(anchors)):
        raise BudgetInfeasible(f"node budget {budget} below anchor count {len(set(anchors))}")
    entities = dict(view.entities)
    current = view
    while len(entities) > budget:
        graph = current.to_graph()
        dist = nx.multi_source_dijkstra_path_length(graph, set(anchors))

        def order(token: str) -> tuple[float, int]:
            return (dist.get(token, math.inf), min(entities[token].members))

        non_anchor = [t for t in entities if not entities[t].is_anchor]
        leaves = [t for t in non_anchor if len(set(graph.neighbors(t)) - {t}) <= 1]
        if leaves:
            victim = max(leaves, key=order)
        else:
            baseline = _anchor_partition(graph, anchors)
            victim = None
            for token in sorted(non_anchor, key=order, reverse=True):
                trial = graph.copy()
                trial.remove_node(token)
                if _anchor_partition(trial, anchors) == baseline:
                    victim = token
                    break
            if victim is None:
                raise BudgetInfeasible(
                    f"cannot reach {budget} entities without disconnecting anchors ({len(entities)} left)"
                )
        entities.pop(victim)
        graph.remove_node(victim)
        for component in list(nx.connected_components(graph)):
            if not any(a in component for a in anchors):
                for token in component:
                    entities.pop(token, None)
        current = _rebuild(current, entities, {})
    return current


def build_sketch(view: AnonymizedView) -> StructureSketch:
    anchors: list[AnchorSketch] = []
    for anchor in dict.fromkeys(view.anchors):
        seen = {anchor: 0}
        frontier = deque([anchor])
        while frontier:
            node = frontier.popleft()
            for _, other in view.neighbors(node):
                if other not in seen:
                    seen[other] = seen[node] + 1
                    frontier.append(other)
        histogram: Counter[str] = Counter()
        for token in seen:
            histogram.update(view.entities[token].type_tags)
        anchors.append(
            AnchorSketch(
                token=anchor,
                degree_bucket=degree_bucket(len(view.adjacency.get(anchor, ()))),
                type_histogram=tuple(sorted(histogram.items())),
                radius=max(seen.values()),
            )
        )
    return StructureSketch(anchors=tuple(anchors), entity_count=len(view.entities), triple_count=len(view.triples))


def sanitize_structure(
    view: AnonymizedView,
    anchors: tuple[str, ...],
    policy: PrivacyPolicy,
    *,
    mapping: SessionMapping,
    graph: KnowledgeGraph,
) -> AnonymizedView:
    """Cluster structurally identical entities, prune to the node budget, rebuild the sketch."""
    missing = [a for a in anchors if a not in view.entities]
    if missing:
        raise ValueError(f"anchors missing from view: {missing}")
    if policy.sanitize:
        view = _cluster(view, mapping, graph, policy.cluster_min_size)
        view = _prune(view, policy.node_budget)
    view.sketch = build_sketch(view)
    logger.info(
        "view: %d -> %d entities (reduction %.2f), %d triples",
        view.raw_entity_count,
        len(view.entities),
        view.reduction_ratio,
        len(view.triples),
    )
    return view


@dataclass
class PrivateSession:
    """Everything one question needs on the privacy side of the pipeline."""

    subgraph: RawSubgraph
    mapping: SessionMapping
    view: AnonymizedView
    guard: BoundaryGuard
    topic_tokens: tuple[str, ...]
    entity_labels: tuple[str, ...]
    topics: TopicEntitySet = field(default_factory=TopicEntitySet)

    def close(self) -> None:
        self.mapping.zeroize()


def build_view(
    sub: RawSubgraph,
    topics: TopicEntitySet,
    policy: PrivacyPolicy,
    *,
    secret: bytes | None = None,
) -> PrivateSession:
    mapping = build_mapping(sub, policy, secret=secret)
    view = semantic_anonymize(sub, mapping, policy, topics.ids)
    view = sanitize_structure(view, view.anchors, policy, mapping=mapping, graph=sub.graph)
    mapping.seal()
    labels = raw_dictionary(sub, mapping, shown_relations=view.relation_support)
    labels.extend(t.mention for t in topics if not mapping.is_raw(t.entity_id))
    g = sub.graph
    return PrivateSession(
        subgraph=sub,
        mapping=mapping,
        view=view,
        guard=BoundaryGuard(labels),
        topic_tokens=view.anchors,
        entity_labels=tuple(g.entities[eid].label for eid in sorted(sub.entity_ids)),
        topics=topics,
    )


def anonymize_text(text: str, replacements: dict[str, str]) -> str:
    """Replace each raw label (longest first, case-insensitive, word-bounded) with its token."""
    table = {label.casefold(): token for label, token in replacements.items() if label and label != token}
    if not table:
        return text
    ordered = sorted(table, key=lambda s: (-len(s), s))
    pattern = re.compile(r"(?<!\w)(?:" + "|".join(re.escape(s) for s in ordered) + r")(?!\w)", re.IGNORECASE)
    return pattern.sub(lambda m: table[m.group(0).casefold()], text)


def question_replacements(session: PrivateSession, topics: TopicEntitySet) -> dict[str, str]:
    g = session.subgraph.graph
    replacements: dict[str, str] = {}
    for eid in sorted(session.subgraph.entity_ids):
        if session.mapping.is_raw(eid):
            continue
        token = session.view.token_for_raw(eid) or session.mapping.entity_forward[eid]
        replacements.setdefault(g.entities[eid].label, token)
    for rid, token in session.mapping.relation_forward.items():
        label = g.relations[rid].label
        if label not in session.view.relation_support and label != token:
            replacements.setdefault(label, token)
    for topic in topics:
        token = session.view.token_for_raw(topic.entity_id)
        if token is not None and not session.mapping.is_raw(topic.entity_id):
            replacements.setdefault(topic.mention, token)
    return replacements


def deanonymize_text(text: str, mapping: SessionMapping, graph: KnowledgeGraph) -> str:
    def restore(match: re.Match[str]) -> str:
        token = match.group(0)
        if token in mapping.relation_inverse:
            return graph.relations[mapping.relation_inverse[token]].label
        members = mapping.entity_members(token)
        return " or ".join(graph.entities[eid].label for eid in sorted(members))

    return TOKEN_PATTERN.sub(restore, text)


def deanonymize_path(
    path: ReasoningPath,
    view: AnonymizedView,
    graph: KnowledgeGraph,
    cap: int = 64,
) -> list[tuple[int, ...]]:
    """Concrete raw triple sequences an anonymized path stands for (supernodes expanded)."""
    for token in path.nodes:
        if token not in view.entities:
            raise UnknownToken(token)
    out: list[tuple[int, ...]] = []

    def expand(i: int, at: int | None, acc: list[int]) -> None:
        if len(out) >= cap:
            return
        if i == len(path.triples):
            out.append(tuple(acc))
            return
        triple = path.triples[i]
        forward = triple.head == path.nodes[i] and triple.tail == path.nodes[i + 1]
        for idx in sorted(triple.support):
            raw = graph.triples[idx]
            start, end = (raw.head, raw.tail) if forward else (raw.tail, raw.head)
            if at is not None and start != at:
                continue
            expand(i + 1, end, acc + [idx])

    expand(0, None, [])
    return out


def deanonymize(
    item: str | ReasoningPath,
    mapping: SessionMapping,
    graph: KnowledgeGraph,
    view: AnonymizedView | None = None,
) -> str | list[tuple[int, ...]]:
    if isinstance(item, ReasoningPath):
        if view is None:
            raise ValueError("a view is required to expand paths")
        return deanonymize_path(item, view, graph)
    return deanonymize_text(item, mapping, graph)
