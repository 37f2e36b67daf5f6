"""Core datatypes shared across grounding, retrieval and control."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date
from decimal import Decimal, InvalidOperation
from enum import StrEnum
import re
from typing import TYPE_CHECKING, Any, Iterator

if TYPE_CHECKING:
    from .kg_store import KnowledgeGraph

LITERAL_KINDS = ("date", "number", "string")
_ISO_PREFIX = re.compile(r"^(\d{4})(?:-(\d{2})(?:-(\d{2}))?)?(?:[T ].*)?$")


def parse_iso_prefix(raw: str) -> tuple[int, int | None, int | None]:
    match = _ISO_PREFIX.match(raw.strip())
    if match is None:
        raise ValueError(f"not an ISO-8601 date prefix: {raw!r}")
    year = int(match.group(1))
    month = int(match.group(2)) if match.group(2) else None
    day = int(match.group(3)) if match.group(3) else None
    # Validates month/day ranges.
    date(year, month or 1, day or 1)
    return year, month, day


def parse_decimal(raw: str) -> Decimal:
    try:
        value = Decimal(raw.strip())
    except InvalidOperation as e:
        raise ValueError(f"not a decimal number: {raw!r}") from e
    if not value.is_finite():
        raise ValueError(f"not a finite number: {raw!r}")
    return value


@dataclass(frozen=True)
class Literal:
    """Typed tail value; kept apart from named entities so it can be coarsened."""

    kind: str
    raw: str

    def __post_init__(self) -> None:
        if self.kind not in LITERAL_KINDS:
            raise ValueError(f"literal kind must be one of {LITERAL_KINDS}")
        if self.kind == "date":
            parse_iso_prefix(self.raw)
        elif self.kind == "number":
            parse_decimal(self.raw)

    def render(self) -> str:
        return f'"{self.raw}"^^{self.kind}'


@dataclass(frozen=True)
class EntityRef:
    id: int
    label: str
    type_tags: frozenset[str] = frozenset()
    literal: Literal | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("entity label must be non-empty")

    @property
    def is_literal(self) -> bool:
        return self.literal is not None


@dataclass(frozen=True)
class RelationRef:
    id: int
    label: str
    cluster_label: str | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("relation label must be non-empty")


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    gold_answers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.text or not self.text.strip():
            raise ValueError("question text must be non-empty")


@dataclass(frozen=True)
class TopicEntity:
    entity_id: int
    mention: str
    score: float


@dataclass(frozen=True)
class TopicEntitySet:
    """Aligned anchors, ordered by score descending then entity id."""

    entities: tuple[TopicEntity, ...] = ()

    def __post_init__(self) -> None:
        ids = [item.entity_id for item in self.entities]
        if len(ids) != len(set(ids)):
            raise ValueError("topic entity set contains duplicate ids")

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(item.entity_id for item in self.entities)

    def __len__(self) -> int:
        return len(self.entities)

    def __iter__(self) -> Iterator[TopicEntity]:
        return iter(self.entities)


@dataclass(frozen=True)
class RawSubgraph:
    graph: "KnowledgeGraph"
    entity_ids: frozenset[int]
    triple_ids: tuple[int, ...]
    anchors: tuple[int, ...]
    radius: int

    def triples(self) -> list[Triple]:
        return [self.graph.triples[idx] for idx in self.triple_ids]

    def labels(self) -> list[str]:
        return [self.graph.entities[eid].label for eid in sorted(self.entity_ids)]


class Phase(StrEnum):
    TOPIC = "Topic"
    REFINE = "Refine"
    PREDICT = "Predict"


PHASE_ORDER: tuple[Phase, ...] = (Phase.TOPIC, Phase.REFINE, Phase.PREDICT)


class IndicatorSource(StrEnum):
    BRAIN = "brain"
    HAND = "hand"
    MEMORY = "memory"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class IndicatorSlot:
    value: str
    anchor: bool


INDICATOR_SEPARATOR = " -- "
_INDICATOR_SPLIT = re.compile(r"\s+(?:--|—|->|→)\s+")


@dataclass(frozen=True)
class Indicator:
    """Ordered anchor/placeholder chain with the predicted answer slot."""

    slots: tuple[IndicatorSlot, ...]
    relations: tuple[str, ...]
    answer_slot_index: int
    d_predict: int
    source: IndicatorSource

    def __post_init__(self) -> None:
        if not self.slots:
            raise ValueError("indicator needs at least one slot")
        if len(self.relations) != len(self.slots) - 1:
            raise ValueError("indicator needs one relation between consecutive slots")
        if not 0 <= self.answer_slot_index < len(self.slots):
            raise ValueError("answer_slot_index out of range")
        if self.d_predict < 1:
            raise ValueError("d_predict must be >= 1")
        anchors = self.anchor_tokens
        if len(anchors) != len(set(anchors)):
            raise ValueError("each anchor token may appear in one slot only")

    @property
    def anchor_tokens(self) -> tuple[str, ...]:
        return tuple(slot.value for slot in self.slots if slot.anchor)

    @classmethod
    def build(
        cls,
        slots: tuple[IndicatorSlot, ...],
        relations: tuple[str, ...],
        source: IndicatorSource,
        answer_slot_index: int | None = None,
    ) -> "Indicator":
        if answer_slot_index is None:
            placeholders = [idx for idx, slot in enumerate(slots) if not slot.anchor]
            answer_slot_index = placeholders[-1] if placeholders else len(slots) - 1
        anchor_positions = [idx for idx, slot in enumerate(slots) if slot.anchor]
        distance = max((abs(answer_slot_index - pos) for pos in anchor_positions), default=1)
        return cls(
            slots=slots,
            relations=relations,
            answer_slot_index=answer_slot_index,
            d_predict=max(1, distance),
            source=source,
        )

    @classmethod
    def parse(cls, text: str, topic_tokens: tuple[str, ...], source: IndicatorSource) -> "Indicator":
        """Parse `A -- rel -- ?x -- rel -- B`; raises ValueError on a chain that does not fit."""
        parts = [part.strip() for part in _INDICATOR_SPLIT.split(text.strip()) if part.strip()]
        if len(parts) % 2 == 0:
            raise ValueError("indicator must alternate slot and relation")
        lookup = {token.lower(): token for token in topic_tokens}
        slots: list[IndicatorSlot] = []
        for raw_slot in parts[0::2]:
            token = lookup.get(raw_slot.lower())
            if token is not None:
                slots.append(IndicatorSlot(value=token, anchor=True))
            elif raw_slot.startswith("?"):
                slots.append(IndicatorSlot(value=raw_slot, anchor=False))
            else:
                raise ValueError(f"slot {raw_slot!r} is neither a topic entity nor a placeholder")
        seen = [slot.value for slot in slots if slot.anchor]
        if sorted(seen) != sorted(topic_tokens):
            raise ValueError("indicator must mention every topic entity exactly once")
        if all(slot.anchor for slot in slots):
            raise ValueError("indicator has no answer placeholder")
        return cls.build(tuple(slots), tuple(parts[1::2]), source)

    @classmethod
    def fallback(cls, topic_tokens: tuple[str, ...], d_max: int) -> "Indicator":
        """Anchors in topic order followed by the answer, predicted at full depth."""
        slots = tuple(IndicatorSlot(value=token, anchor=True) for token in topic_tokens)
        slots = slots + (IndicatorSlot(value="?answer", anchor=False),)
        relations = tuple("?" for _ in range(len(slots) - 1))
        return cls(
            slots=slots,
            relations=relations,
            answer_slot_index=len(slots) - 1,
            d_predict=max(1, d_max),
            source=IndicatorSource.FALLBACK,
        )

    def render(self, labels: dict[str, str] | None = None) -> str:
        parts: list[str] = []
        for idx, slot in enumerate(self.slots):
            if idx:
                parts.append(self.relations[idx - 1])
            parts.append(labels.get(slot.value, slot.value) if labels and slot.anchor else slot.value)
        return INDICATOR_SEPARATOR.join(parts)

    def sketch(self, topic_tokens: tuple[str, ...]) -> str:
        """Session-independent form with TOPIC_i placeholders."""
        return self.render(topic_placeholders(topic_tokens))

    def with_tokens(self, mapping: dict[str, str]) -> "Indicator":
        slots = tuple(
            IndicatorSlot(value=mapping.get(slot.value, slot.value), anchor=slot.anchor) for slot in self.slots
        )
        return Indicator(
            slots=slots,
            relations=self.relations,
            answer_slot_index=self.answer_slot_index,
            d_predict=self.d_predict,
            source=self.source,
        )


def topic_placeholders(topic_tokens: tuple[str, ...]) -> dict[str, str]:
    return {token: f"TOPIC_{idx}" for idx, token in enumerate(topic_tokens, start=1)}


@dataclass(frozen=True)
class ReasoningPath:
    """Connected walk over anonymized triples; nodes has one more item than triples."""

    triples: tuple[Any, ...]
    nodes: tuple[str, ...]
    covered_anchors: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if not self.triples:
            raise ValueError("a reasoning path has at least one triple")
        if len(self.nodes) != len(self.triples) + 1:
            raise ValueError("nodes must have exactly one more item than triples")
        for idx, triple in enumerate(self.triples):
            ends = {triple.head, triple.tail}
            if self.nodes[idx] not in ends or self.nodes[idx + 1] not in ends:
                raise ValueError("consecutive triples must share an entity")

    @property
    def length(self) -> int:
        return len(self.triples)

    def serialize(self, labels: dict[str, str] | None = None) -> str:
        def show(token: str) -> str:
            return "{" + (labels.get(token, token) if labels else token) + "}"

        parts = [show(self.nodes[0])]
        for idx, triple in enumerate(self.triples):
            forward = triple.head == self.nodes[idx] and triple.tail == self.nodes[idx + 1]
            arrow = "->" if forward else "<-"
            parts.append(f"{arrow} {triple.relation} {arrow}")
            parts.append(show(self.nodes[idx + 1]))
        return " ".join(parts)

    def template(self, topic_tokens: tuple[str, ...]) -> str:
        """Role-placeholder form: anchors as TOPIC_i, the open end as ANS, the rest as X."""
        roles = topic_placeholders(topic_tokens)
        parts: list[str] = []
        last = len(self.nodes) - 1
        for idx, node in enumerate(self.nodes):
            if idx:
                parts.append(str(self.triples[idx - 1].relation))
            if node in roles:
                parts.append(roles[node])
            elif idx == last:
                parts.append("ANS")
            else:
                parts.append("X")
        return INDICATOR_SEPARATOR.join(parts)


@dataclass
class CandidatePool:
    phase: Phase
    paths: list[ReasoningPath] = field(default_factory=list)
    depth_used: int = 0
    scores: list[float] | None = None
    predicted_tokens: frozenset[str] = frozenset()

    def __len__(self) -> int:
        return len(self.paths)


class NodeStatus(StrEnum):
    ACTIVE = "Active"
    VERIFIED = "Verified"
    PRUNED = "Pruned"


class AnswerSource(StrEnum):
    KG_ONLY = "kg_only"
    LLM_INSPIRED_KG = "llm_inspired_kg"
    KG_INSPIRED_LLM = "kg_inspired_llm"
    NONE = "none"


class ExposureKind(StrEnum):
    KG_EXPANSION = "kg_expansion"
    BRAIN_CALL = "brain_call"


@dataclass(frozen=True)
class ExposureEvent:
    kind: ExposureKind
    payload_size: int
    node_id: int | None = None

    def __post_init__(self) -> None:
        if self.payload_size < 0:
            raise ValueError("payload_size must be >= 0")


@dataclass(frozen=True)
class TrajectoryStep:
    mode: Phase
    depth: int

    def render(self) -> str:
        return f"{self.mode.value}@d={self.depth}"

    @classmethod
    def parse(cls, text: str) -> "TrajectoryStep":
        match = re.match(r"^\s*(Topic|Refine|Predict)\s*@\s*(?:d\s*=\s*)?(\d+)\s*$", text)
        if match is None:
            raise ValueError(f"not a trajectory step: {text!r}")
        return cls(mode=Phase(match.group(1)), depth=int(match.group(2)))


@dataclass
class NodeState:
    """Per-node reasoning state; evidence holds raw triple ids."""

    node_id: int
    question: str
    depth: int
    mode: Phase
    status: NodeStatus = NodeStatus.ACTIVE
    candidates: list[ReasoningPath] = field(default_factory=list)
    evidence: tuple[int, ...] = ()
    summary: str = ""
    split_answer: tuple[str, ...] = ()
    sufficient_main: bool = False
    main_answer: tuple[str, ...] = ()
    verified_phase: Phase | None = None
    verified_paths: list[ReasoningPath] = field(default_factory=list)
    trajectory: list[TrajectoryStep] = field(default_factory=list)
    failures: list[TrajectoryStep] = field(default_factory=list)
    iterations: int = 0
    prune_reason: str | None = None


@dataclass
class RunResult:
    question_id: str
    question: str
    answers: list[str]
    sufficient: bool
    answer_source: AnswerSource
    evidence: list[tuple[str, str, str]]
    exposure: dict[str, int]
    brain_calls: int
    brain_analysis_calls: int
    hand_calls: int
    node_statuses: dict[int, str]
    reduction_ratio: float
    entities_before: int
    entities_after: int
    gate_decision: str
    model_knowledge_answers: list[str] = field(default_factory=list)
    trajectory: list[str] = field(default_factory=list)
    memory_written: bool = False
    transcript: Any = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "answers": list(self.answers),
            "sufficient": self.sufficient,
            "answer_source": self.answer_source.value,
            "model_knowledge_answers": list(self.model_knowledge_answers),
            "evidence": [list(fact) for fact in self.evidence],
            "exposure": dict(self.exposure),
            "brain_calls": self.brain_calls,
            "brain_analysis_calls": self.brain_analysis_calls,
            "hand_calls": self.hand_calls,
            "node_statuses": {str(k): v for k, v in self.node_statuses.items()},
            "reduction_ratio": self.reduction_ratio,
            "entities_before": self.entities_before,
            "entities_after": self.entities_after,
            "gate_decision": self.gate_decision,
            "trajectory": list(self.trajectory),
            "memory_written": self.memory_written,
        }
