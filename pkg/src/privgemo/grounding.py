"""Question grounding: mention extraction, entity alignment and subgraph detection."""

from __future__ import annotations

from collections import deque
import logging
import threading
from typing import TYPE_CHECKING

import numpy as np

from .embedder import HashingEmbedder
from .errors import NoAlignment
from .kg_store import KnowledgeGraph
from .templates import MentionsReply
from .types import Question, RawSubgraph, TopicEntity, TopicEntitySet

if TYPE_CHECKING:
    from .gateway import GatewaySession

logger = logging.getLogger(__name__)

SIMILARITY_FLOOR = 0.35


def extract_mentions(q: Question | str, hand: "GatewaySession", node_id: int | None = None) -> list[str]:
    text = q.text if isinstance(q, Question) else q
    if not text or not text.strip():
        raise ValueError("question text must be non-empty")
    reply = hand.hand_call("extract_mentions", {"question": text}, node_id)
    assert isinstance(reply, MentionsReply)
    mentions: list[str] = []
    for mention in reply.mentions:
        mention = mention.strip()
        if mention and mention not in mentions:
            mentions.append(mention)
    return mentions


class LabelIndex:
    """Embedding matrix over the graph's non-literal entity labels, built on first use."""

    def __init__(self, graph: KnowledgeGraph, embedder: HashingEmbedder) -> None:
        self.graph = graph
        self.embedder = embedder
        self._ids: np.ndarray | None = None
        self._matrix: np.ndarray | None = None
        self._lock = threading.Lock()

    def _build(self) -> tuple[np.ndarray, np.ndarray]:
        with self._lock:
            if self._matrix is None:
                named = [e for e in self.graph.entities if not e.is_literal]
                self._ids = np.array([e.id for e in named], dtype=np.int64)
                self._matrix = self.embedder.embed_many([e.label for e in named])
            return self._ids, self._matrix

    def best(self, mention: str) -> tuple[int, float] | None:
        ids, matrix = self._build()
        if ids.size == 0:
            return None
        scores = matrix @ self.embedder.embed(mention)
        # argmax returns the first maximum, i.e. the lowest entity id on ties.
        idx = int(np.argmax(scores))
        return int(ids[idx]), float(scores[idx])


def align_mentions(
    mentions: list[str],
    g: KnowledgeGraph,
    embedder: HashingEmbedder,
    top_k: int = 5,
    *,
    floor: float = SIMILARITY_FLOOR,
    index: LabelIndex | None = None,
) -> TopicEntitySet:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    index = index or LabelIndex(g, embedder)
    best: dict[int, TopicEntity] = {}
    for mention in mentions:
        exact = [eid for eid in g.find_by_label(mention) if not g.entity(eid).is_literal]
        if exact:
            eid, score = min(exact), 1.0
        else:
            hit = index.best(mention)
            if hit is None or hit[1] < floor:
                logger.info("mention %r dropped below similarity floor", mention)
                continue
            eid, score = hit
        current = best.get(eid)
        if current is None or score > current.score:
            best[eid] = TopicEntity(entity_id=eid, mention=mention, score=round(score, 6))
    if not best:
        raise NoAlignment(f"no mention aligned above {floor}: {mentions!r}")
    ordered = sorted(best.values(), key=lambda t: (-t.score, t.entity_id))
    return TopicEntitySet(entities=tuple(ordered[:top_k]))


def detect_subgraph(g: KnowledgeGraph, t: TopicEntitySet, d_max: int) -> RawSubgraph:
    """Union of the d_max-hop balls around the anchors, with the triples among them."""
    if len(t) == 0:
        raise ValueError("topic entity set must be non-empty")
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    distance: dict[int, int] = {}
    frontier: deque[int] = deque()
    for anchor in t.ids:
        g.entity(anchor)
        distance[anchor] = 0
        frontier.append(anchor)
    while frontier:
        node = frontier.popleft()
        if distance[node] >= d_max:
            continue
        for nxt in g.adjacent(node):
            if nxt not in distance:
                distance[nxt] = distance[node] + 1
                frontier.append(nxt)
    members = frozenset(distance)
    triple_ids = sorted(
        {
            idx
            for eid in members
            for idx in g.out_index.get(eid, ())
            if g.triples[idx].tail in members
        }
    )
    return RawSubgraph(
        graph=g,
        entity_ids=members,
        triple_ids=tuple(triple_ids),
        anchors=t.ids,
        radius=d_max,
    )
