"""Dual-model reasoning controller: memory gate, question analysis, node loop and answer synthesis."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import StrEnum
from functools import cached_property
import logging
import re
from typing import Sequence

from .anonymizer import (
    TOKEN_PATTERN,
    PrivateSession,
    anonymize_text,
    build_view,
    deanonymize_path,
    deanonymize_text,
    question_replacements,
)
from .config import EngineConfig
from .embedder import HashingEmbedder
from .errors import (
    GatewayError,
    LeakageGuardError,
    MalformedModelOutput,
    NoAlignment,
    NoTopicEntities,
    UnknownToken,
)
from .gateway import GatewaySession, ModelGateway
from .grounding import LabelIndex, align_mentions, detect_subgraph, extract_mentions
from .kg_store import KnowledgeGraph
from .memory import (
    ExperienceArtifacts,
    ExperienceMemory,
    ExperienceOutcome,
    RetrievedExperience,
    init_policy,
    next_step,
)
from .retrieval import ExplorationContext, explore_predict, explore_refine, explore_topic
from .templates import (
    AnalysisReply,
    DelegationReply,
    ExperienceSummaryReply,
    FinalAnswerReply,
    NextStepReply,
    RefineReply,
    SufficiencyReply,
)
from .types import (
    PHASE_ORDER,
    AnswerSource,
    CandidatePool,
    Indicator,
    IndicatorSource,
    NodeState,
    NodeStatus,
    Phase,
    Question,
    ReasoningPath,
    RunResult,
    TopicEntitySet,
    TrajectoryStep,
    topic_placeholders,
)

logger = logging.getLogger(__name__)

_PLACEHOLDER = re.compile(r"\{?TOPIC_(\d+)\}?")
EXPERIENCE_PROMPT_LIMIT = 5


class GateDecision(StrEnum):
    CALL_BRAIN = "call_brain"
    REUSE_MEMORY = "reuse_memory"
    LOCAL_ANALYSIS = "local_analysis"


def gate_brain_usage(records: Sequence[RetrievedExperience], threshold: float = 0.85) -> GateDecision:
    """Reuse memory when the best hybrid match is a confident prior success."""
    if not records:
        return GateDecision.CALL_BRAIN
    best = max(records, key=lambda item: (item.score, item.record.hit_count))
    if best.score >= threshold and best.record.outcome.sufficient:
        return GateDecision.REUSE_MEMORY
    return GateDecision.CALL_BRAIN


@dataclass(frozen=True)
class QuestionAnalysis:
    indicator: Indicator
    split_questions: tuple[str, ...]
    raw_split_questions: tuple[str, ...]
    d_predict: int
    warnings: tuple[str, ...] = ()
    source: IndicatorSource = IndicatorSource.FALLBACK
    reused_record: str | None = None


@dataclass
class ReasoningTree:
    """Root holds the full question; one child per split question, visited in analysis order."""

    nodes: dict[int, NodeState] = field(default_factory=dict)
    parent: dict[int, int | None] = field(default_factory=dict)
    children: dict[int, list[int]] = field(default_factory=dict)
    anon_questions: dict[int, str] = field(default_factory=dict)

    def add(self, question: str, anon_question: str, *, depth: int, mode: Phase, parent: int | None = None) -> NodeState:
        node_id = len(self.nodes)
        node = NodeState(node_id=node_id, question=question, depth=depth, mode=mode)
        self.nodes[node_id] = node
        self.parent[node_id] = parent
        self.children[node_id] = []
        self.anon_questions[node_id] = anon_question
        if parent is not None:
            self.children[parent].append(node_id)
        return node

    @property
    def root(self) -> NodeState:
        return self.nodes[0]

    def verified(self) -> list[NodeState]:
        return [node for node in self.nodes.values() if node.status == NodeStatus.VERIFIED]


def placeholder_text(text: str, topic_tokens: Sequence[str]) -> str:
    """Session-independent form: topic tokens become TOPIC_i, any other token becomes ENTITY."""
    roles = topic_placeholders(tuple(topic_tokens))
    for token in sorted(roles, key=len, reverse=True):
        text = re.sub(rf"(?<!\w){re.escape(token)}(?!\w)", roles[token], text)
    return TOKEN_PATTERN.sub("ENTITY", text)


def fill_placeholders(text: str, topic_tokens: Sequence[str]) -> str:
    def repl(match: re.Match[str]) -> str:
        idx = int(match.group(1))
        if not 1 <= idx <= len(topic_tokens):
            raise ValueError(f"placeholder TOPIC_{idx} has no topic entity")
        return topic_tokens[idx - 1]

    return _PLACEHOLDER.sub(repl, text)


def render_experience(records: Sequence[RetrievedExperience]) -> list[str]:
    lines: list[str] = []
    for item in records[:EXPERIENCE_PROMPT_LIMIT]:
        record = item.record
        status = "success" if record.outcome.sufficient else "warning"
        steps = " > ".join(step.render() for step in record.trajectory)
        lines.append(
            f"[{status} {item.score:.2f}] indicator: {record.anon_indicator}; "
            f"paths: {' | '.join(record.path_templates) or '-'}; trajectory: {steps or '-'}"
        )
    return lines


@dataclass
class RunContext:
    """Per-question state shared by the analysis step and every node of the tree."""

    graph: KnowledgeGraph
    private: PrivateSession
    session: GatewaySession
    config: EngineConfig
    embedder: HashingEmbedder
    aligner: LabelIndex
    raw_question: str
    anon_question: str
    records: list[RetrievedExperience]
    phases: tuple[Phase, ...]
    counters: Counter[str] = field(default_factory=Counter)

    @property
    def topic_tokens(self) -> tuple[str, ...]:
        return self.private.topic_tokens

    @cached_property
    def labels(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for token, entity in self.private.view.entities.items():
            out[token] = " or ".join(self.graph.entities[eid].label for eid in sorted(entity.members))
        return out

    @property
    def memory_templates(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(t for item in self.records for t in item.record.path_templates))


def _analysis_from_reply(
    reply: AnalysisReply,
    run: RunContext,
    *,
    local: bool,
) -> QuestionAnalysis:
    tokens = run.topic_tokens
    if local:
        label_of = {token: run.labels[token] for token in tokens}
        token_of = {label: token for token, label in label_of.items()}
        parsed = Indicator.parse(reply.indicator, tuple(label_of.values()), IndicatorSource.HAND)
        indicator = parsed.with_tokens(token_of)
        raw_splits = tuple(q.strip() for q in reply.split_questions if q.strip())
        replacements = question_replacements(run.private, run.private.topics)
        anon_splits = tuple(anonymize_text(q, replacements) for q in raw_splits)
    else:
        indicator = Indicator.parse(reply.indicator, tokens, IndicatorSource.BRAIN)
        anon_splits = tuple(q.strip() for q in reply.split_questions if q.strip())
        raw: list[str] = []
        for q in anon_splits:
            try:
                raw.append(deanonymize_text(q, run.private.mapping, run.graph))
            except UnknownToken:
                logger.info("split question used an unknown token; keeping the full question")
                raw.append(run.raw_question)
        raw_splits = tuple(raw)
    if reply.d_predict is not None and reply.d_predict != indicator.d_predict:
        logger.debug("reply D_predict %s differs from indicator distance %s", reply.d_predict, indicator.d_predict)
    return QuestionAnalysis(
        indicator=indicator,
        split_questions=anon_splits,
        raw_split_questions=raw_splits,
        d_predict=min(indicator.d_predict, run.config.search.d_max),
        warnings=tuple(reply.warnings),
        source=indicator.source,
    )


def _fallback_analysis(run: RunContext) -> QuestionAnalysis:
    d_max = run.config.search.d_max
    indicator = Indicator.fallback(run.topic_tokens, d_max)
    return QuestionAnalysis(
        indicator=indicator,
        split_questions=(),
        raw_split_questions=(),
        d_predict=d_max,
        source=IndicatorSource.FALLBACK,
    )


def _reuse_analysis(run: RunContext) -> QuestionAnalysis | None:
    for item in sorted(run.records, key=lambda r: -r.score):
        record = item.record
        if not record.outcome.sufficient:
            continue
        try:
            text = fill_placeholders(record.anon_indicator, run.topic_tokens)
            indicator = Indicator.parse(text, run.topic_tokens, IndicatorSource.MEMORY)
            anon_splits = tuple(fill_placeholders(q, run.topic_tokens) for q in record.split_questions)
            raw_splits = tuple(deanonymize_text(q, run.private.mapping, run.graph) for q in anon_splits)
        except (ValueError, UnknownToken) as e:
            logger.info("stored indicator %s does not fit this question: %s", record.record_id, e)
            continue
        return QuestionAnalysis(
            indicator=indicator,
            split_questions=anon_splits,
            raw_split_questions=raw_splits,
            d_predict=min(indicator.d_predict, run.config.search.d_max),
            source=IndicatorSource.MEMORY,
            reused_record=record.record_id,
        )
    return None


def question_analysis(run: RunContext, decision: GateDecision) -> QuestionAnalysis:
    """Indicator and split questions from memory, the remote model or the local model."""
    if decision == GateDecision.REUSE_MEMORY:
        reused = _reuse_analysis(run)
        if reused is not None:
            return reused
        decision = GateDecision.CALL_BRAIN if run.session.brain_available else GateDecision.LOCAL_ANALYSIS

    local = decision == GateDecision.LOCAL_ANALYSIS or not run.session.brain_available
    experience = render_experience(run.records)
    if local:
        template_id = "analyze_question_hand"
        fields = {
            "question": run.raw_question,
            "topic_entities": [run.labels[t] for t in run.topic_tokens],
            "experience": experience,
        }
    else:
        template_id = "analyze_question_brain"
        fields = {
            "question": run.anon_question,
            "topic_entities": list(run.topic_tokens),
            "subgraph_sketch": run.private.view.serialize(),
            "experience": experience,
        }

    attempts = run.config.controller.max_retries + 1
    for attempt in range(1, attempts + 1):
        try:
            reply = run.session.call("hand" if local else "brain", template_id, fields)
            assert isinstance(reply, AnalysisReply)
            return _analysis_from_reply(reply, run, local=local)
        except (MalformedModelOutput, ValueError) as e:
            logger.warning("question analysis attempt %d/%d unusable: %s", attempt, attempts, e)
        except GatewayError as e:
            logger.warning("question analysis unavailable: %s", e)
            break
    run.counters["analysis_fallbacks"] += 1
    return _fallback_analysis(run)


@dataclass
class GroundedFacts:
    """Raw facts behind a candidate pool, as the local model sees them."""

    facts: list[str]
    fact_index: dict[str, int]
    chains: list[str]
    chain_paths: list[tuple[ReasoningPath, tuple[int, ...]]]


def ground_pool(pool: CandidatePool, run: RunContext) -> GroundedFacts:
    facts: list[str] = []
    index: dict[str, int] = {}
    chains: list[str] = []
    chain_paths: list[tuple[ReasoningPath, tuple[int, ...]]] = []
    for path in pool.paths:
        try:
            expansions = deanonymize_path(path, run.private.view, run.graph, run.config.search.expansion_cap)
        except UnknownToken as e:
            logger.warning("candidate path references unknown token %s", e)
            continue
        for triple_ids in expansions:
            rendered: list[str] = []
            for idx in triple_ids:
                head, relation, tail = run.graph.render_triple(idx)
                fact = f"({head}, {relation}, {tail})"
                rendered.append(fact)
                if fact not in index:
                    index[fact] = idx
                    facts.append(fact)
            chains.append("; ".join(rendered))
            chain_paths.append((path, triple_ids))
    return GroundedFacts(facts=facts, fact_index=index, chains=chains, chain_paths=chain_paths)


def should_prune(node: NodeState, d_max: int, phases: Sequence[Phase]) -> bool:
    """Two or more failures at the maximal depth that between them cover every enabled mode."""
    at_max = [step for step in node.failures if step.depth >= d_max]
    return len(at_max) >= 2 and set(phases) <= {step.mode for step in at_max}


def _policy_step(node: NodeState, run: RunContext) -> tuple[Phase, int] | None | str:
    """Ask the local model for the next move; None means use the memory ladder, "prune" stops."""
    d_max = run.config.search.d_max
    try:
        reply = run.session.hand_call(
            "next_step_policy",
            {
                "question": node.question,
                "current_step": TrajectoryStep(node.mode, node.depth).render(),
                "failures": [step.render() for step in node.failures],
                "experience": render_experience(run.records),
                "max_depth": d_max,
            },
            node.node_id,
        )
    except (GatewayError, MalformedModelOutput) as e:
        logger.info("exploration policy unavailable: %s", e)
        return None
    assert isinstance(reply, NextStepReply)
    if reply.decision == "PRUNE_NODE":
        return "prune"
    if reply.decision == "EXPAND_NEXT_DEPTH":
        return node.mode, min(node.depth + 1, d_max)
    if reply.selected_method is None or Phase(reply.selected_method) not in run.phases:
        return None
    depth = reply.next_depth if reply.next_depth is not None else node.depth
    return Phase(reply.selected_method), max(1, min(depth, d_max))


def node_verification_loop(
    node: NodeState,
    run: RunContext,
    analysis: QuestionAnalysis,
    *,
    split_question: str,
) -> NodeState:
    """Explore, ground, refine and check one node until it is Verified or Pruned."""
    limits = run.config.search
    d_max = limits.d_max
    useful = run.config.memory.useful_score
    node.mode, node.depth = init_policy(
        run.records, analysis.d_predict, d_max, useful_score=useful, phases=run.phases
    )
    pools: dict[Phase, CandidatePool] = {}
    max_iterations = len(run.phases) * d_max

    for _ in range(max_iterations):
        node.iterations += 1
        step = TrajectoryStep(node.mode, node.depth)
        node.trajectory.append(step)
        ctx = ExplorationContext(
            view=run.private.view,
            mapping=run.private.mapping,
            graph=run.graph,
            limits=limits,
            embedder=run.embedder,
            session=run.session,
            topic_tokens=run.topic_tokens,
            indicator=analysis.indicator,
            anon_question=run.anon_question,
            split_question=split_question,
            raw_question=run.raw_question,
            raw_split_question=node.question,
            depth=node.depth,
            memory_templates=run.memory_templates,
            node_id=node.node_id,
            aligner=run.aligner,
            counters=run.counters,
        )
        try:
            if node.mode == Phase.TOPIC:
                pool = explore_topic(ctx)
            elif node.mode == Phase.REFINE:
                pool = explore_refine(ctx, pools.get(Phase.TOPIC) or CandidatePool(phase=Phase.TOPIC))
            else:
                pool = explore_predict(ctx, list(pools.values()))
            pools[node.mode] = pool
            node.candidates = list(pool.paths)
            verdict = _verify(node, pool, run)
        except GatewayError as e:
            node.status = NodeStatus.PRUNED
            node.prune_reason = f"gateway: {e}"
            logger.warning("node %d pruned: %s", node.node_id, e)
            break
        run.session.transcript.record(
            "node_step",
            step.render(),
            node_id=node.node_id,
            candidates=len(pool.paths),
            verified=verdict,
        )
        if verdict:
            node.status = NodeStatus.VERIFIED
            node.verified_phase = node.mode
            break

        node.failures.append(step)
        if should_prune(node, d_max, run.phases):
            node.status = NodeStatus.PRUNED
            node.prune_reason = "repeated failures at maximal depth"
            break
        suggestion = _policy_step(node, run) if run.config.controller.hand_policy else None
        if suggestion == "prune":
            node.status = NodeStatus.PRUNED
            node.prune_reason = "exploration policy"
            break
        if suggestion is None:
            hint = next_step(
                run.records,
                node,
                d_predict=analysis.d_predict,
                d_max=d_max,
                useful_score=useful,
                phases=run.phases,
            )
            if hint.prune:
                node.status = NodeStatus.PRUNED
                node.prune_reason = hint.reason
                break
            node.mode, node.depth = hint.mode, hint.depth
        else:
            node.mode, node.depth = suggestion
    else:
        node.status = NodeStatus.PRUNED
        node.prune_reason = "iteration budget"
    logger.info("node %d %s after %d iterations", node.node_id, node.status.value, node.iterations)
    return node


def _verify(node: NodeState, pool: CandidatePool, run: RunContext) -> bool:
    grounded = ground_pool(pool, run)
    if not grounded.facts:
        return False
    refine = run.session.hand_call(
        "refine_paths",
        {
            "question": run.raw_question,
            "split_question": node.question,
            "paths": grounded.chains,
            "facts": grounded.facts,
        },
        node.node_id,
    )
    assert isinstance(refine, RefineReply)
    verified = [f.strip() for f in refine.verified_facts if f.strip() in grounded.fact_index]
    verified = list(dict.fromkeys(verified))
    if not verified:
        return False
    check = run.session.hand_call(
        "check_sufficiency",
        {"question": run.raw_question, "split_question": node.question, "facts": verified},
        node.node_id,
    )
    assert isinstance(check, SufficiencyReply)
    if not check.sufficient_split:
        node.summary = check.missing or refine.missing
        return False
    cited = [f.strip() for f in check.evidence if f.strip() in verified] or verified
    evidence = tuple(dict.fromkeys(grounded.fact_index[f] for f in cited))
    kept = set(evidence)
    node.evidence = evidence
    node.split_answer = tuple(check.split_answer or refine.split_answer)
    node.sufficient_main = check.sufficient_main
    node.main_answer = tuple(check.main_answer)
    node.summary = "; ".join(cited)
    node.verified_paths = list(
        dict.fromkeys(path for path, triple_ids in grounded.chain_paths if set(triple_ids) <= kept)
    )
    run.counters["predicted_on_path"] += int(
        any(token in path.nodes for path in node.verified_paths for token in pool.predicted_tokens)
    )
    return True


def globally_sufficient(tree: ReasoningTree) -> bool:
    if any(node.status == NodeStatus.VERIFIED and node.sufficient_main for node in tree.nodes.values()):
        return True
    children = tree.children[0]
    if not children:
        return tree.root.status == NodeStatus.VERIFIED
    return all(tree.nodes[c].status == NodeStatus.VERIFIED for c in children)


def classify_answers(
    answers: Sequence[str],
    evidence_labels: set[str],
    predicted_on_path: bool,
) -> tuple[AnswerSource, list[str]]:
    if not answers:
        return AnswerSource.NONE, []
    ungrounded = [a for a in answers if a.casefold() not in evidence_labels]
    if ungrounded:
        return AnswerSource.KG_INSPIRED_LLM, ungrounded
    if predicted_on_path:
        return AnswerSource.LLM_INSPIRED_KG, []
    return AnswerSource.KG_ONLY, []


class PrivGemoEngine:
    """Answers questions over one graph; safe to share across threads, one run per call."""

    def __init__(
        self,
        graph: KnowledgeGraph,
        gateway: ModelGateway,
        config: EngineConfig | None = None,
        memory: ExperienceMemory | None = None,
        *,
        embedder: HashingEmbedder | None = None,
    ) -> None:
        self.graph = graph
        self.gateway = gateway
        self.config = config or EngineConfig()
        self.embedder = embedder or HashingEmbedder(self.config.embedder.dim, self.config.embedder.ngram)
        if memory is None and self.config.memory.enabled:
            memory = ExperienceMemory(self.config.memory, self.embedder)
        self.memory = memory if self.config.memory.enabled else None
        self.aligner = LabelIndex(graph, self.embedder)
        self.phases = tuple(p for p in PHASE_ORDER if p.value in self.config.controller.phases)

    def _ground(self, q: Question, session: GatewaySession) -> TopicEntitySet:
        limits = self.config.search
        try:
            mentions = extract_mentions(q, session)
            if not mentions:
                raise NoTopicEntities(f"no entity mentions found in {q.text!r}")
            return align_mentions(
                mentions,
                self.graph,
                self.embedder,
                limits.top_k,
                floor=limits.similarity_floor,
                index=self.aligner,
            )
        except NoAlignment as e:
            raise NoTopicEntities(str(e)) from e

    def run(self, question: Question | str, *, question_id: str | None = None, secret: bytes | None = None) -> RunResult:
        q = question if isinstance(question, Question) else Question(id=question_id or "q", text=question)
        cfg = self.config
        session = self.gateway.session(max_brain_calls=cfg.controller.max_brain_calls)
        topics = self._ground(q, session)
        sub = detect_subgraph(self.graph, topics, cfg.search.d_max)
        private = build_view(sub, topics, cfg.privacy, secret=secret)
        try:
            session.arm(private.guard)
            return self._run_private(q, session, private)
        finally:
            private.close()

    def _run_private(self, q: Question, session: GatewaySession, private: PrivateSession) -> RunResult:
        cfg = self.config
        topics = private.topics
        anon_question = anonymize_text(q.text, question_replacements(private, topics))
        topic_tokens = private.topic_tokens
        key_indicator = Indicator.fallback(topic_tokens, cfg.search.d_max).sketch(topic_tokens)
        memory_question = placeholder_text(anon_question, topic_tokens)

        records: list[RetrievedExperience] = []
        if self.memory is not None:
            records, _ = self.memory.retrieve(
                memory_question, key_indicator, cfg.privacy, gate_threshold=cfg.controller.gate_threshold
            )
        run = RunContext(
            graph=self.graph,
            private=private,
            session=session,
            config=cfg,
            embedder=self.embedder,
            aligner=self.aligner,
            raw_question=q.text,
            anon_question=anon_question,
            records=records,
            phases=self.phases,
        )

        decision = gate_brain_usage(records, cfg.controller.gate_threshold)
        if decision == GateDecision.CALL_BRAIN:
            if not session.brain_available:
                decision = GateDecision.LOCAL_ANALYSIS
            elif cfg.controller.llm_gate:
                decision = self._delegate(run)
        session.transcript.record("gate", decision.value, records=len(records))

        analysis = question_analysis(run, decision)
        session.transcript.record(
            "analysis",
            analysis.indicator.render(),
            source=analysis.source.value,
            d_predict=analysis.d_predict,
            splits=len(analysis.split_questions),
        )

        tree = ReasoningTree()
        root = tree.add(q.text, anon_question, depth=1, mode=Phase.TOPIC)
        node_verification_loop(root, run, analysis, split_question=anon_question)
        if not (root.status == NodeStatus.VERIFIED and root.sufficient_main):
            for raw_split, anon_split in zip(analysis.raw_split_questions, analysis.split_questions):
                child = tree.add(raw_split, anon_split, depth=1, mode=Phase.TOPIC, parent=root.node_id)
                node_verification_loop(child, run, analysis, split_question=anon_split)

        answers: list[str] = []
        evidence_ids: list[int] = []
        source = AnswerSource.NONE
        model_knowledge: list[str] = []
        sufficient = globally_sufficient(tree)
        if sufficient:
            for node in tree.verified():
                evidence_ids.extend(idx for idx in node.evidence if idx not in evidence_ids)
            answers = self._final_answer(q, tree, evidence_ids, session)
            labels = {
                self.graph.entities[eid].label.casefold()
                for idx in evidence_ids
                for eid in (self.graph.triples[idx].head, self.graph.triples[idx].tail)
            }
            source, model_knowledge = classify_answers(answers, labels, run.counters["predicted_on_path"] > 0)
            sufficient = bool(answers)
        if not sufficient:
            answers, source, model_knowledge = [], AnswerSource.NONE, []

        verified_node = next(iter(tree.verified()), None)
        trajectory_node = verified_node or root
        memory_written = False
        if sufficient and self.memory is not None:
            memory_written = self._write_back(run, tree, analysis, key_indicator, memory_question, source)

        ledger = session.ledger.summary()
        result = RunResult(
            question_id=q.id,
            question=q.text,
            answers=answers,
            sufficient=sufficient,
            answer_source=source,
            evidence=[self.graph.render_triple(idx) for idx in evidence_ids],
            exposure=ledger,
            brain_calls=session.brain_calls,
            brain_analysis_calls=session.calls_by_template["analyze_question_brain"],
            hand_calls=session.hand_calls,
            node_statuses={nid: node.status.value for nid, node in tree.nodes.items()},
            reduction_ratio=private.view.reduction_ratio,
            entities_before=private.view.raw_entity_count,
            entities_after=len(private.view.entities),
            gate_decision=decision.value,
            model_knowledge_answers=model_knowledge,
            trajectory=[step.render() for step in trajectory_node.trajectory],
            memory_written=memory_written,
            transcript=session.transcript,
        )
        logger.info(
            "question %s answered=%s source=%s brain_calls=%d",
            q.id,
            sufficient,
            source.value,
            session.brain_calls,
        )
        return result

    def _delegate(self, run: RunContext) -> GateDecision:
        try:
            reply = run.session.hand_call(
                "delegate_analysis",
                {
                    "question": run.raw_question,
                    "topic_entities": [run.labels[t] for t in run.topic_tokens],
                    "memory_hint": render_experience(run.records),
                },
            )
        except (GatewayError, MalformedModelOutput) as e:
            logger.info("delegation gate unavailable, calling the remote model: %s", e)
            return GateDecision.CALL_BRAIN
        assert isinstance(reply, DelegationReply)
        return GateDecision.LOCAL_ANALYSIS if reply.analysis_mode == "HAND" else GateDecision.CALL_BRAIN

    def _final_answer(
        self,
        q: Question,
        tree: ReasoningTree,
        evidence_ids: list[int],
        session: GatewaySession,
    ) -> list[str]:
        facts = ["({}, {}, {})".format(*self.graph.render_triple(idx)) for idx in evidence_ids]
        sub_answers = [
            f"{node.question}: {', '.join(node.split_answer)}" for node in tree.verified() if node.split_answer
        ]
        try:
            reply = session.hand_call("final_answer", {"question": q.text, "facts": facts, "sub_answers": sub_answers})
        except (GatewayError, MalformedModelOutput) as e:
            logger.warning("final answer generation failed: %s", e)
            return []
        assert isinstance(reply, FinalAnswerReply)
        return list(dict.fromkeys(a.strip() for a in reply.answers if a.strip()))

    def _write_back(
        self,
        run: RunContext,
        tree: ReasoningTree,
        analysis: QuestionAnalysis,
        key_indicator: str,
        memory_question: str,
        source: AnswerSource,
    ) -> bool:
        assert self.memory is not None
        tokens = run.topic_tokens
        verified = tree.verified()
        templates = tuple(
            dict.fromkeys(path.template(tokens) for node in verified for path in node.verified_paths)
        )
        trajectory = tuple(verified[0].trajectory) if verified else ()
        failures = tuple(dict.fromkeys(step.render() for node in tree.nodes.values() for step in node.failures))
        constraints: tuple[str, ...] = ()
        warnings = analysis.warnings
        if self.config.memory.hand_summary:
            try:
                reply = run.session.hand_call(
                    "summarize_experience",
                    {
                        "indicator": analysis.indicator.sketch(tokens),
                        "trajectory": [step.render() for step in trajectory],
                        "path_templates": list(templates),
                    },
                )
                assert isinstance(reply, ExperienceSummaryReply)
                constraints = tuple(reply.constraints)
                warnings = warnings + tuple(reply.warnings)
            except (GatewayError, MalformedModelOutput) as e:
                logger.info("experience summary skipped: %s", e)
        artifacts = ExperienceArtifacts(
            key_indicator=key_indicator,
            anon_indicator=analysis.indicator.sketch(tokens),
            split_questions=tuple(placeholder_text(q, tokens) for q in analysis.split_questions),
            d_predict=analysis.d_predict,
            trajectory=trajectory,
            path_templates=templates,
            outcome=ExperienceOutcome(
                sufficient=True,
                failure_notes=failures,
                warnings=tuple(placeholder_text(w, tokens) for w in warnings),
                answer_source=source.value,
            ),
            constraints=tuple(placeholder_text(c, tokens) for c in constraints),
        )
        try:
            record = self.memory.write_back(memory_question, artifacts, self.config.privacy, run.private.entity_labels)
        except LeakageGuardError as e:
            logger.warning("experience not stored: %s", e)
            run.session.transcript.record("memory_refused", str(e))
            return False
        if record is not None:
            run.session.transcript.record("memory_write", record.record_id)
        return record is not None
