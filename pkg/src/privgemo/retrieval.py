"""Indicator-guided path exploration over the anonymized view, and evidence pruning."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
import logging
import math
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .anonymizer import AnonTriple, AnonymizedView, SessionMapping, deanonymize_text
from .config import SearchLimits
from .embedder import HashingEmbedder
from .errors import GatewayError, MalformedModelOutput, NoAlignment, UnknownToken
from .grounding import LabelIndex, align_mentions, extract_mentions
from .kg_store import KnowledgeGraph
from .templates import FollowUpReply, PredictionReply, RankReply
from .types import CandidatePool, ExposureKind, Indicator, Phase, ReasoningPath

if TYPE_CHECKING:
    from .gateway import GatewaySession

logger = logging.getLogger(__name__)

Partial = tuple[tuple[str, ...], tuple[AnonTriple, ...]]
Scorer = Callable[[Partial], float]

PREDICT_LIMIT = 3
PROMPT_PATH_LIMIT = 10


def _partial_text(partial: Partial, anchors: Sequence[str]) -> str:
    nodes, triples = partial
    roles = {token: f"TOPIC_{idx}" for idx, token in enumerate(anchors, start=1)}
    parts = [roles.get(nodes[0], "X")]
    for triple, node in zip(triples, nodes[1:]):
        parts.append(triple.relation)
        parts.append(roles.get(node, "X"))
    return " -- ".join(parts)


def _relevance_scorer(
    embedder: HashingEmbedder | None,
    target: str | None,
    anchors: Sequence[str],
) -> Scorer | None:
    if embedder is None or not target:
        return None
    goal = embedder.embed(target)

    def score(partial: Partial) -> float:
        return float(np.dot(embedder.embed(_partial_text(partial, anchors)), goal))

    return score


def _beam(partials: list[Partial], width: int | None, score: Scorer | None) -> list[Partial]:
    if width is None or len(partials) <= width:
        return partials
    if score is None:
        return partials[:width]
    ranked = sorted(partials, key=lambda p: (-round(score(p), 12), _partial_text(p, ()), p[0]))
    return ranked[:width]


def _layers(
    view: AnonymizedView,
    start: str,
    depth: int,
    *,
    stop: str | None,
    forbidden: frozenset[str],
    width: int | None,
    score: Scorer | None,
) -> list[list[Partial]]:
    """Simple partial paths from `start`, one list per length; `stop` may only end a path."""
    layers: list[list[Partial]] = [[((start,), ())]]
    for _ in range(depth):
        grown: list[Partial] = []
        for nodes, triples in layers[-1]:
            end = nodes[-1]
            if stop is not None and end == stop:
                continue
            for triple, other in view.neighbors(end):
                if other in nodes or other in forbidden:
                    continue
                grown.append((nodes + (other,), triples + (triple,)))
        layers.append(_beam(grown, width, score))
    return layers


def _segments(
    view: AnonymizedView,
    source: str,
    target: str,
    max_len: int,
    forbidden: frozenset[str],
    width: int | None,
    score: Scorer | None,
) -> list[Partial]:
    """All simple source-target paths up to max_len, met in the middle.

    A path of length l is split into a forward half of ceil(l/2) edges and a
    backward half of floor(l/2) edges, so each path is produced exactly once.
    """
    half_f = math.ceil(max_len / 2)
    half_b = max_len // 2
    forward = _layers(view, source, half_f, stop=target, forbidden=forbidden, width=width, score=score)
    backward = _layers(view, target, half_b, stop=source, forbidden=forbidden, width=width, score=score)
    found: list[Partial] = []
    for f in range(1, half_f + 1):
        for b in (f - 1, f):
            if b > half_b or f + b > max_len:
                continue
            by_end: dict[str, list[Partial]] = {}
            for partial in backward[b]:
                by_end.setdefault(partial[0][-1], []).append(partial)
            for nodes, triples in forward[f]:
                for b_nodes, b_triples in by_end.get(nodes[-1], ()):
                    if len(set(nodes) & set(b_nodes)) != 1:
                        continue
                    found.append((nodes + tuple(reversed(b_nodes))[1:], triples + tuple(reversed(b_triples))))
    return found


def tree_bibfs(
    view: AnonymizedView,
    anchors: Sequence[str],
    d: int,
    w_beam: int | None,
    q: str | None = None,
    i: Indicator | str | None = None,
    embedder: HashingEmbedder | None = None,
) -> list[ReasoningPath]:
    """Paths visiting every anchor in order with m*(d-1) < length <= m*d.

    Consecutive anchors are joined by simple segments whose interior avoids
    every anchor; segments may share nodes. With one anchor this is the set of
    simple paths of length d rooted at it. `w_beam=None` disables pruning.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    anchors = list(dict.fromkeys(anchors))
    if not anchors or any(a not in view.entities for a in anchors):
        return []
    m = len(anchors)
    relevance = i.sketch(i.anchor_tokens) if isinstance(i, Indicator) else (i or q)
    score = _relevance_scorer(embedder, relevance, anchors) if w_beam is not None else None
    lo, hi = m * (d - 1), m * d
    covered = frozenset(anchors)

    if m == 1:
        layers = _layers(view, anchors[0], d, stop=None, forbidden=frozenset(), width=w_beam, score=score)
        return [ReasoningPath(triples=t, nodes=n, covered_anchors=covered) for n, t in layers[d]]

    anchor_set = frozenset(anchors)
    segment_cap = m * d - (m - 2)
    segments: list[list[Partial]] = []
    for source, target in zip(anchors, anchors[1:]):
        segs = _segments(view, source, target, segment_cap, anchor_set - {source, target}, w_beam, score)
        if not segs:
            return []
        segments.append(segs)

    paths: list[ReasoningPath] = []

    def chain(idx: int, nodes: tuple[str, ...], triples: tuple[AnonTriple, ...]) -> None:
        if idx == len(segments):
            if lo < len(triples) <= hi:
                paths.append(ReasoningPath(triples=triples, nodes=nodes, covered_anchors=covered))
            return
        for seg_nodes, seg_triples in segments[idx]:
            if len(triples) + len(seg_triples) > hi:
                continue
            chain(idx + 1, nodes + seg_nodes[1:], triples + seg_triples)

    chain(0, (anchors[0],), ())
    return paths


def fuzzy_select(
    paths: Sequence[ReasoningPath],
    indicator_text: str,
    mem_paths: Sequence[str],
    alpha: float,
    w1: int,
    embedder: HashingEmbedder,
    topic_tokens: Sequence[str],
) -> list[tuple[ReasoningPath, float]]:
    """Blend of indicator similarity and best memory-template similarity; top w1 by score.

    Paths are embedded in role-placeholder form (`TOPIC_1 -- r -- X -- r -- ANS`), the
    form of stored templates, not as the `{e0} -> r1 -> {e1}` chain. Ties fall back to
    the chain serialization.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be within [0, 1]")
    if w1 < 1:
        raise ValueError("w1 must be >= 1")
    if not paths:
        return []
    templates = embedder.embed_many([p.template(tuple(topic_tokens)) for p in paths])
    indicator_sim = templates @ embedder.embed(indicator_text)
    if mem_paths:
        memory_sim = (templates @ embedder.embed_many(list(mem_paths)).T).max(axis=1)
    else:
        memory_sim = np.zeros(len(paths))
    scores = alpha * indicator_sim + (1.0 - alpha) * memory_sim
    order = sorted(range(len(paths)), key=lambda k: (-round(float(scores[k]), 12), paths[k].serialize()))
    return [(paths[k], float(scores[k])) for k in order[:w1]]


def brain_select(
    scored: Sequence[tuple[ReasoningPath, float]],
    q_anon: str,
    indicator_text: str,
    w_max: int,
    session: "GatewaySession | None",
    *,
    split_question: str = "",
    node_id: int | None = None,
) -> list[ReasoningPath]:
    """Let the remote model pick w_max paths; score order fills gaps and covers every failure."""
    if not scored:
        return []
    fallback = [path for path, _ in scored[:w_max]]
    if session is None or not session.brain_available:
        return fallback
    lookup = {f"P{idx}": path for idx, (path, _) in enumerate(scored, start=1)}
    fields = {
        "question": q_anon,
        "indicator": indicator_text,
        "split_question": split_question or q_anon,
        "candidates": [f"{pid}: {path.serialize()}" for pid, path in lookup.items()],
        "limit": w_max,
    }
    try:
        reply = session.brain_call("rank_paths", fields, node_id)
    except MalformedModelOutput as e:
        logger.warning("path ranking reply unusable, keeping score order: %s", e)
        return fallback
    except GatewayError as e:
        logger.warning("path ranking unavailable, keeping score order: %s", e)
        return fallback
    assert isinstance(reply, RankReply)
    chosen: list[ReasoningPath] = []
    for item in sorted(reply.top_paths, key=lambda r: r.rank):
        path = lookup.get(item.path_id.strip())
        if path is None:
            logger.debug("ignoring unknown path id %r", item.path_id)
        elif path not in chosen:
            chosen.append(path)
    for path in fallback:
        if len(chosen) >= w_max:
            break
        if path not in chosen:
            chosen.append(path)
    return chosen[:w_max]


@dataclass
class ExplorationContext:
    """What one node's exploration step needs; anon fields are safe for the remote channel."""

    view: AnonymizedView
    mapping: SessionMapping
    graph: KnowledgeGraph
    limits: SearchLimits
    embedder: HashingEmbedder
    session: "GatewaySession"
    topic_tokens: tuple[str, ...]
    indicator: Indicator
    anon_question: str
    split_question: str
    raw_question: str
    raw_split_question: str
    depth: int
    start_depth: int = 1
    memory_templates: tuple[str, ...] = ()
    node_id: int | None = None
    aligner: LabelIndex | None = None
    counters: Counter[str] = field(default_factory=Counter)

    @cached_property
    def labels(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for token, entity in self.view.entities.items():
            out[token] = " or ".join(self.graph.entities[eid].label for eid in sorted(entity.members))
        return out

    @property
    def indicator_text(self) -> str:
        return self.indicator.sketch(self.indicator.anchor_tokens)

    def record_exploration(self, phase: Phase, count: int) -> None:
        self.session.transcript.record(
            "exploration",
            f"{phase.value}@d={self.depth}",
            node_id=self.node_id,
            paths=count,
        )


def _explore(ctx: ExplorationContext, anchors: Sequence[str], depths: range) -> list[ReasoningPath]:
    found: dict[ReasoningPath, None] = {}
    for d in depths:
        paths = tree_bibfs(
            ctx.view,
            anchors,
            d,
            ctx.limits.beam_width,
            ctx.anon_question,
            ctx.indicator,
            ctx.embedder,
        )
        ctx.session.ledger.record(ExposureKind.KG_EXPANSION, sum(p.length for p in paths), ctx.node_id)
        for path in paths:
            found.setdefault(path, None)
    return list(found)


def evidence_pruning(
    paths: Sequence[ReasoningPath],
    ctx: ExplorationContext,
    phase: Phase,
    *,
    topic_tokens: Sequence[str] | None = None,
    predicted: frozenset[str] = frozenset(),
) -> CandidatePool:
    limits = ctx.limits
    scored = fuzzy_select(
        paths,
        ctx.indicator_text,
        ctx.memory_templates,
        limits.alpha,
        limits.w1,
        ctx.embedder,
        topic_tokens or ctx.topic_tokens,
    )
    if len(scored) > limits.w_max:
        if limits.brain_select:
            selected = brain_select(
                scored,
                ctx.anon_question,
                ctx.indicator.render(),
                limits.w_max,
                ctx.session,
                split_question=ctx.split_question,
                node_id=ctx.node_id,
            )
        else:
            selected = [path for path, _ in scored[: limits.w_max]]
    else:
        selected = [path for path, _ in scored]
    score_of = {path: score for path, score in scored}
    return CandidatePool(
        phase=phase,
        paths=selected,
        depth_used=ctx.depth,
        scores=[score_of[path] for path in selected],
        predicted_tokens=predicted,
    )


def explore_topic(ctx: ExplorationContext) -> CandidatePool:
    paths = _explore(ctx, ctx.indicator.anchor_tokens or ctx.topic_tokens, range(ctx.start_depth, ctx.depth + 1))
    ctx.record_exploration(Phase.TOPIC, len(paths))
    return evidence_pruning(paths, ctx, Phase.TOPIC)


def _empty(ctx: ExplorationContext, phase: Phase) -> CandidatePool:
    ctx.record_exploration(phase, 0)
    return CandidatePool(phase=phase, paths=[], depth_used=ctx.depth, scores=[])


def _follow_up_query(ctx: ExplorationContext, pool_t: CandidatePool) -> str | None:
    use_brain = ctx.limits.followup_channel == "brain" and ctx.session.brain_available
    try:
        if use_brain:
            reply = ctx.session.brain_call(
                "follow_up",
                {
                    "question": ctx.anon_question,
                    "topic_entities": list(ctx.topic_tokens),
                    "indicator": ctx.indicator.render(),
                    "split_question": ctx.split_question,
                    "paths": [p.serialize() for p in pool_t.paths],
                },
                ctx.node_id,
            )
            assert isinstance(reply, FollowUpReply)
            return deanonymize_text(reply.query, ctx.mapping, ctx.graph)
        labels = ctx.labels
        reply = ctx.session.hand_call(
            "follow_up",
            {
                "question": ctx.raw_question,
                "topic_entities": [labels[t] for t in ctx.topic_tokens],
                "indicator": ctx.indicator.render(labels),
                "split_question": ctx.raw_split_question,
                "paths": [p.serialize(labels) for p in pool_t.paths],
            },
            ctx.node_id,
        )
        assert isinstance(reply, FollowUpReply)
        return reply.query
    except UnknownToken as e:
        logger.warning("follow-up used an unknown token %s; skipping", e)
    except (GatewayError, MalformedModelOutput) as e:
        logger.warning("follow-up generation failed: %s", e)
    return None


def explore_refine(ctx: ExplorationContext, pool_t: CandidatePool) -> CandidatePool:
    """Search again from the entities named in a follow-up question."""
    query = _follow_up_query(ctx, pool_t)
    if not query:
        return _empty(ctx, Phase.REFINE)
    try:
        mentions = extract_mentions(query, ctx.session, ctx.node_id)
        topics = align_mentions(
            mentions,
            ctx.graph,
            ctx.embedder,
            ctx.limits.top_k,
            floor=ctx.limits.similarity_floor,
            index=ctx.aligner,
        )
    except (NoAlignment, GatewayError, MalformedModelOutput, ValueError) as e:
        logger.info("follow-up produced no anchors: %s", e)
        return _empty(ctx, Phase.REFINE)
    position = {mention: idx for idx, mention in enumerate(mentions)}
    anchors: list[str] = []
    for topic in sorted(topics, key=lambda t: (position.get(t.mention, len(position)), t.entity_id)):
        token = ctx.view.token_for_raw(topic.entity_id)
        if token is not None and token not in anchors:
            anchors.append(token)
    if not anchors:
        return _empty(ctx, Phase.REFINE)
    paths = _explore(ctx, anchors, range(1, ctx.depth + 1))
    ctx.record_exploration(Phase.REFINE, len(paths))
    return evidence_pruning(paths, ctx, Phase.REFINE, topic_tokens=anchors)


def explore_predict(ctx: ExplorationContext, pools: Sequence[CandidatePool]) -> CandidatePool:
    """Add up to three model-predicted bridge entities to the anchor set and search again."""
    prior = list(dict.fromkeys(path for pool in pools for path in pool.paths))[:PROMPT_PATH_LIMIT]
    fields = {
        "question": ctx.anon_question,
        "topic_entities": list(ctx.topic_tokens),
        "indicator": ctx.indicator.render(),
        "split_question": ctx.split_question,
        "paths": [p.serialize() for p in prior],
    }
    base = list(ctx.indicator.anchor_tokens or ctx.topic_tokens)
    targets: list[str] = []
    try:
        if ctx.session.brain_available:
            reply = ctx.session.brain_call("predict_targets", fields, ctx.node_id)
        else:
            reply = ctx.session.hand_call("predict_targets", fields, ctx.node_id)
        assert isinstance(reply, PredictionReply)
        for prediction in reply.predictions[:PREDICT_LIMIT]:
            token = prediction.target.strip().strip("{}").strip()
            if token not in ctx.view.entities:
                ctx.counters["dropped_predictions"] += 1
                logger.info("dropping predicted token not in view: %r", token)
            elif token not in base and token not in targets:
                targets.append(token)
    except (GatewayError, MalformedModelOutput) as e:
        logger.warning("prediction failed, exploring from topic anchors only: %s", e)
    anchors = base + targets
    paths = _explore(ctx, anchors, range(1, ctx.depth + 1))
    ctx.record_exploration(Phase.PREDICT, len(paths))
    return evidence_pruning(paths, ctx, Phase.PREDICT, topic_tokens=anchors, predicted=frozenset(targets))
