"""Privacy-aware experience memory: records, exact vector search, hot buffer and write-back."""

from __future__ import annotations

from contextlib import AbstractContextManager
from dataclasses import dataclass, field
from datetime import datetime, timezone
import json
import logging
from pathlib import Path
import re
import threading
from typing import TYPE_CHECKING, Any, Iterable, Iterator, Sequence
import uuid

import numpy as np

from .boundary import BoundaryGuard
from .config import MemoryConfig, PrivacyPolicy
from .embedder import HashingEmbedder, top_k
from .errors import LeakageGuardError
from .types import PHASE_ORDER, NodeState, Phase, TrajectoryStep

if TYPE_CHECKING:
    from .memory_store import MemoryStore

logger = logging.getLogger(__name__)

EXEMPLARS_PATH = Path(__file__).resolve().parent / "fixtures" / "exemplars.json"
_WS = re.compile(r"\s+")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def normalize_template(text: str) -> str:
    return _WS.sub(" ", text.strip())


@dataclass(frozen=True)
class ExperienceOutcome:
    sufficient: bool
    failure_notes: tuple[str, ...] = ()
    warnings: tuple[str, ...] = ()
    answer_source: str = ""


@dataclass
class ExperienceRecord:
    """One reusable reasoning episode. Everything but the vectors and counters is sealed at rest."""

    record_id: str
    key_indicator: str
    anon_indicator: str
    split_questions: tuple[str, ...]
    d_predict: int
    trajectory: tuple[TrajectoryStep, ...]
    path_templates: tuple[str, ...]
    outcome: ExperienceOutcome
    q_embedding: np.ndarray
    i_embedding: np.ndarray
    policy_tag: str
    hit_count: int = 0
    last_access: int = 0
    created_at: str = field(default_factory=_utc_now)
    constraints: tuple[str, ...] = ()
    payload_sealed: bool = False

    def __post_init__(self) -> None:
        if self.hit_count < 0:
            raise ValueError("hit_count must be >= 0")
        if self.q_embedding.shape != self.i_embedding.shape:
            raise ValueError("question and indicator embeddings must share a dimension")

    @property
    def merge_key(self) -> tuple[tuple[str, ...], str]:
        return tuple(sorted({normalize_template(t) for t in self.path_templates})), normalize_template(
            self.anon_indicator
        )

    def texts(self) -> list[str]:
        return [
            self.key_indicator,
            self.anon_indicator,
            *self.split_questions,
            *self.path_templates,
            *self.constraints,
            *self.outcome.failure_notes,
            *self.outcome.warnings,
        ]

    def payload(self) -> dict[str, Any]:
        return {
            "key_indicator": self.key_indicator,
            "anon_indicator": self.anon_indicator,
            "split_questions": list(self.split_questions),
            "d_predict": self.d_predict,
            "trajectory": [step.render() for step in self.trajectory],
            "path_templates": list(self.path_templates),
            "constraints": list(self.constraints),
            "outcome": {
                "sufficient": self.outcome.sufficient,
                "failure_notes": list(self.outcome.failure_notes),
                "warnings": list(self.outcome.warnings),
                "answer_source": self.outcome.answer_source,
            },
        }

    @classmethod
    def from_payload(
        cls,
        payload: dict[str, Any],
        *,
        record_id: str,
        q_embedding: np.ndarray,
        i_embedding: np.ndarray,
        policy_tag: str,
        hit_count: int = 0,
        last_access: int = 0,
        created_at: str | None = None,
        payload_sealed: bool = False,
    ) -> "ExperienceRecord":
        outcome = payload.get("outcome") or {}
        return cls(
            record_id=record_id,
            key_indicator=str(payload.get("key_indicator", "")),
            anon_indicator=str(payload.get("anon_indicator", "")),
            split_questions=tuple(payload.get("split_questions", [])),
            d_predict=int(payload.get("d_predict", 1)),
            trajectory=tuple(TrajectoryStep.parse(s) for s in payload.get("trajectory", [])),
            path_templates=tuple(payload.get("path_templates", [])),
            outcome=ExperienceOutcome(
                sufficient=bool(outcome.get("sufficient", False)),
                failure_notes=tuple(outcome.get("failure_notes", [])),
                warnings=tuple(outcome.get("warnings", [])),
                answer_source=str(outcome.get("answer_source", "")),
            ),
            q_embedding=np.asarray(q_embedding, dtype=np.float64),
            i_embedding=np.asarray(i_embedding, dtype=np.float64),
            policy_tag=policy_tag,
            hit_count=hit_count,
            last_access=last_access,
            created_at=created_at or _utc_now(),
            constraints=tuple(payload.get("constraints", [])),
            payload_sealed=payload_sealed,
        )


@dataclass(frozen=True)
class RetrievedExperience:
    record: ExperienceRecord
    score: float
    buffer_score: float


@dataclass(frozen=True)
class ControlHints:
    skip_brain: bool = False
    init_mode: Phase = Phase.TOPIC
    init_depth: int | None = None
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperienceArtifacts:
    key_indicator: str
    anon_indicator: str
    split_questions: tuple[str, ...]
    d_predict: int
    trajectory: tuple[TrajectoryStep, ...]
    path_templates: tuple[str, ...]
    outcome: ExperienceOutcome
    constraints: tuple[str, ...] = ()


@dataclass(frozen=True)
class NextStepSuggestion:
    mode: Phase
    depth: int
    prune: bool = False
    reason: str = "default"


class ExperiencePool:
    """Records plus two stacked embedding matrices searched exactly."""

    def __init__(self, dim: int, cap: int = 10_000) -> None:
        self.dim = dim
        self.cap = cap
        self._records: list[ExperienceRecord] = []
        self._q = np.zeros((0, dim))
        self._i = np.zeros((0, dim))
        self._lock = threading.RLock()
        self.clock = 0

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self) -> Iterator[ExperienceRecord]:
        with self._lock:
            return iter(list(self._records))

    def get(self, record_id: str) -> ExperienceRecord | None:
        with self._lock:
            for record in self._records:
                if record.record_id == record_id:
                    return record
        return None

    def tick(self) -> int:
        with self._lock:
            self.clock += 1
            return self.clock

    def add(self, record: ExperienceRecord) -> None:
        if record.q_embedding.shape != (self.dim,):
            raise ValueError(f"embedding dimension {record.q_embedding.shape} != ({self.dim},)")
        with self._lock:
            self._records.append(record)
            self._q = np.vstack([self._q, record.q_embedding])
            self._i = np.vstack([self._i, record.i_embedding])
            self.clock = max(self.clock, record.last_access)

    def remove(self, record_ids: Iterable[str]) -> list[ExperienceRecord]:
        drop = set(record_ids)
        with self._lock:
            keep = [idx for idx, r in enumerate(self._records) if r.record_id not in drop]
            removed = [r for r in self._records if r.record_id in drop]
            self._records = [self._records[idx] for idx in keep]
            self._q = self._q[keep] if keep else np.zeros((0, self.dim))
            self._i = self._i[keep] if keep else np.zeros((0, self.dim))
        return removed

    def exclusive(self) -> AbstractContextManager[bool]:
        """The pool's write lock, for read-modify-write sequences spanning several calls."""
        return self._lock

    def hybrid_scores(self, q_vec: np.ndarray, i_vec: np.ndarray, lambda_q: float, lambda_i: float) -> np.ndarray:
        with self._lock:
            return lambda_q * (self._q @ q_vec) + lambda_i * (self._i @ i_vec)

    def score_snapshot(
        self, q_vec: np.ndarray, i_vec: np.ndarray, lambda_q: float, lambda_i: float
    ) -> tuple[list[ExperienceRecord], np.ndarray]:
        """Records and their hybrid scores, taken under one lock so the two line up."""
        with self._lock:
            return list(self._records), lambda_q * (self._q @ q_vec) + lambda_i * (self._i @ i_vec)

    def record_hits(self, records: Iterable[ExperienceRecord], tick: int) -> None:
        with self._lock:
            for record in records:
                record.hit_count += 1
                record.last_access = tick

    def records_snapshot(self) -> list[ExperienceRecord]:
        with self._lock:
            return list(self._records)

    def find_merge(self, record: ExperienceRecord) -> ExperienceRecord | None:
        key = record.merge_key
        with self._lock:
            for existing in self._records:
                if existing.merge_key == key and existing.policy_tag == record.policy_tag:
                    return existing
        return None

    def prune_low_value(self) -> list[ExperienceRecord]:
        with self._lock:
            excess = len(self._records) - self.cap
            if excess <= 0:
                return []
            ranked = sorted(self._records, key=lambda r: (r.hit_count, r.last_access, r.created_at))
            return self.remove(r.record_id for r in ranked[:excess])


@dataclass
class BufferEntry:
    last_access: int
    buffer_score: float


class HighFreqBuffer:
    """Recently used record ids; the lowest buffer score is evicted first."""

    def __init__(self, capacity: int = 1000) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._entries: dict[str, BufferEntry] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._entries

    def ids(self) -> list[str]:
        with self._lock:
            return list(self._entries)

    def touch(self, record_id: str, buffer_score: float, tick: int) -> None:
        with self._lock:
            self._entries[record_id] = BufferEntry(last_access=tick, buffer_score=buffer_score)
            while len(self._entries) > self.capacity:
                victim = min(self._entries, key=lambda k: (self._entries[k].buffer_score, self._entries[k].last_access))
                del self._entries[victim]

    def discard(self, record_id: str) -> None:
        with self._lock:
            self._entries.pop(record_id, None)


def hit_bonus(count: int) -> float:
    return count / (count + 1.0)


def buffer_score(score: float, hits: int, config: MemoryConfig) -> float:
    return config.lambda_sim * score + config.lambda_hit * hit_bonus(hits)


def _useful(records: Sequence[RetrievedExperience], threshold: float) -> list[RetrievedExperience]:
    return [r for r in records if r.score >= threshold]


def init_policy(
    records: Sequence[RetrievedExperience],
    d_predict: int,
    d_max: int,
    *,
    useful_score: float = 0.85,
    phases: Sequence[Phase] = PHASE_ORDER,
) -> tuple[Phase, int]:
    if d_predict < 1:
        raise ValueError("d_predict must be >= 1")
    default = (Phase.TOPIC, min(d_predict, d_max))
    for item in _useful(records, useful_score):
        record = item.record
        if record.outcome.sufficient and record.trajectory:
            first = record.trajectory[0]
            if first.mode in phases:
                return first.mode, max(1, min(first.depth, d_max))
    return default


def default_transition(
    mode: Phase,
    depth: int,
    d_predict: int,
    d_max: int,
    phases: Sequence[Phase] = PHASE_ORDER,
) -> tuple[Phase, int]:
    """Deepen Topic up to min(d_predict, d_max); afterwards rotate through the enabled modes."""
    cap = min(d_predict, d_max)
    if mode == Phase.TOPIC and depth < cap:
        return Phase.TOPIC, depth + 1
    ordered = [p for p in PHASE_ORDER if p in phases]
    nxt = ordered[(ordered.index(mode) + 1) % len(ordered)] if mode in ordered else ordered[0]
    return nxt, min(depth + 1, d_max)


def next_step(
    records: Sequence[RetrievedExperience],
    node: NodeState,
    *,
    d_predict: int,
    d_max: int,
    useful_score: float = 0.85,
    phases: Sequence[Phase] = PHASE_ORDER,
) -> NextStepSuggestion:
    """Replay a matching success, switch mode on a known dead end, prune on a failed record.

    Successful runs carry the steps that failed on the way in `failure_notes`;
    hitting one of those switches to the next enabled mode instead of deepening.
    """
    current = TrajectoryStep(node.mode, node.depth)
    rendered = current.render()
    useful = _useful(records, useful_score)
    for item in useful:
        record = item.record
        if not record.outcome.sufficient and (
            rendered in record.outcome.failure_notes or rendered in record.outcome.warnings
        ):
            mode, depth = default_transition(node.mode, node.depth, d_predict, d_max, phases)
            return NextStepSuggestion(mode, depth, prune=True, reason=f"warning {record.record_id}")
    for item in useful:
        record = item.record
        if not record.outcome.sufficient:
            continue
        steps = list(record.trajectory)
        if current in steps:
            idx = steps.index(current)
            if idx + 1 < len(steps) and steps[idx + 1].mode in phases:
                step = steps[idx + 1]
                return NextStepSuggestion(step.mode, max(1, min(step.depth, d_max)), reason=f"replay {record.record_id}")
    for item in useful:
        record = item.record
        if record.outcome.sufficient and rendered in record.outcome.failure_notes:
            # d_predict=depth forces the ladder past further deepening
            mode, depth = default_transition(node.mode, node.depth, node.depth, d_max, phases)
            return NextStepSuggestion(mode, depth, reason=f"dead end {record.record_id}")
    mode, depth = default_transition(node.mode, node.depth, d_predict, d_max, phases)
    return NextStepSuggestion(mode, depth)


def get_exp(
    pool: ExperiencePool,
    buffer: HighFreqBuffer,
    q_text: str,
    indicator_text: str,
    policy: PrivacyPolicy,
    w_exp: int,
    embedder: HashingEmbedder,
    config: MemoryConfig,
    *,
    gate_threshold: float = 0.85,
) -> tuple[list[RetrievedExperience], ControlHints]:
    """Top-w_exp compatible records by buffer score, with control hints; bumps their hit counts.

    Candidates are the w_exp nearest compatible records by hybrid score plus every
    compatible record held in the hot buffer; the union is ranked by buffer score.
    """
    if w_exp < 1:
        raise ValueError("w_exp must be >= 1")
    records, scores = pool.score_snapshot(
        embedder.embed(q_text), embedder.embed(indicator_text), config.lambda_q, config.lambda_i
    )
    if not records:
        return [], ControlHints()
    compatible = np.array(
        [policy.compatible_with(r.policy_tag, config.ratio_tolerance) for r in records],
        dtype=bool,
    )
    if not compatible.any():
        return [], ControlHints()
    k = min(w_exp, int(compatible.sum()))
    nearest = top_k(np.where(compatible, scores, -np.inf), k)
    buffered = set(buffer.ids())
    hot = [idx for idx, r in enumerate(records) if r.record_id in buffered and compatible[idx]]
    candidates = np.union1d(nearest, np.array(hot, dtype=np.int64))

    hits = np.array([hit_bonus(records[idx].hit_count) for idx in candidates])
    ranked = config.lambda_sim * scores[candidates] + config.lambda_hit * hits
    order = [int(candidates[pos]) for pos in top_k(ranked, k)]
    ranked_by_idx = dict(zip(candidates.tolist(), ranked.tolist()))

    tick = pool.tick()
    out = [
        RetrievedExperience(record=records[idx], score=float(scores[idx]), buffer_score=float(ranked_by_idx[idx]))
        for idx in order
    ]
    pool.record_hits((item.record for item in out), tick)
    for item in out:
        buffer.touch(item.record.record_id, buffer_score(item.score, item.record.hit_count, config), tick)

    best = out[0] if out else None
    warnings = tuple(
        w
        for item in _useful(out, config.useful_score)
        for w in item.record.outcome.failure_notes + item.record.outcome.warnings
    )
    hints = ControlHints(
        skip_brain=bool(best and best.record.outcome.sufficient and best.score >= gate_threshold),
        init_mode=Phase.TOPIC,
        init_depth=None,
        warnings=warnings,
    )
    for item in _useful(out, config.useful_score):
        if item.record.outcome.sufficient and item.record.trajectory:
            first = item.record.trajectory[0]
            hints = ControlHints(hints.skip_brain, first.mode, first.depth, warnings)
            break
    return out, hints


def scan_for_leaks(texts: Iterable[str], labels: Iterable[str]) -> None:
    guard = BoundaryGuard(labels)
    for text in texts:
        hit = guard.find(text)
        if hit is not None:
            raise LeakageGuardError(f"raw label {hit!r} found in experience record")


def write_back_if_success(
    pool: ExperiencePool,
    buffer: HighFreqBuffer,
    q_text: str,
    artifacts: ExperienceArtifacts,
    policy: PrivacyPolicy,
    *,
    embedder: HashingEmbedder,
    config: MemoryConfig,
    leak_labels: Iterable[str],
    store: "MemoryStore | None" = None,
) -> ExperienceRecord | None:
    if not artifacts.outcome.sufficient:
        return None
    record = ExperienceRecord(
        record_id=uuid.uuid4().hex,
        key_indicator=artifacts.key_indicator,
        anon_indicator=artifacts.anon_indicator,
        split_questions=artifacts.split_questions,
        d_predict=artifacts.d_predict,
        trajectory=artifacts.trajectory,
        path_templates=tuple(normalize_template(t) for t in artifacts.path_templates),
        outcome=artifacts.outcome,
        q_embedding=np.array(embedder.embed(q_text)),
        i_embedding=np.array(embedder.embed(artifacts.key_indicator)),
        policy_tag=policy.fingerprint(),
        constraints=artifacts.constraints,
    )
    scan_for_leaks(record.texts(), leak_labels)

    with pool.exclusive():
        existing = pool.find_merge(record)
        tick = pool.tick()
        if existing is not None:
            existing.hit_count += 1
            existing.last_access = tick
            buffer.touch(existing.record_id, buffer_score(1.0, existing.hit_count, config), tick)
            if store is not None:
                store.update_stats(existing)
            logger.info("merged experience into %s", existing.record_id)
            return existing
        record.last_access = tick
        pool.add(record)
        buffer.touch(record.record_id, buffer_score(1.0, record.hit_count, config), tick)
        if store is not None:
            store.append(record)
        removed = pool.prune_low_value()
        for dropped in removed:
            buffer.discard(dropped.record_id)
        if store is not None and removed:
            store.delete(r.record_id for r in removed)
    logger.info("stored experience %s (%d templates)", record.record_id, len(record.path_templates))
    return record


def load_exemplars(embedder: HashingEmbedder, path: Path = EXEMPLARS_PATH) -> list[ExperienceRecord]:
    with path.open("r", encoding="utf-8") as handle:
        rows = json.load(handle)
    records: list[ExperienceRecord] = []
    for row in rows:
        records.append(
            ExperienceRecord.from_payload(
                row,
                record_id=str(row["record_id"]),
                q_embedding=np.array(embedder.embed(row["question"])),
                i_embedding=np.array(embedder.embed(row["key_indicator"])),
                policy_tag=str(row.get("policy_tag", "utility:1.00")),
            )
        )
    return records


class ExperienceMemory:
    """Pool, buffer and optional persistent store behind one interface."""

    def __init__(
        self,
        config: MemoryConfig,
        embedder: HashingEmbedder,
        store: "MemoryStore | None" = None,
    ) -> None:
        self.config = config
        self.embedder = embedder
        self.store = store
        self.pool = ExperiencePool(embedder.dim, config.pool_cap)
        self.buffer = HighFreqBuffer(config.buffer_capacity)
        if store is not None:
            for record in store.load_all():
                self.pool.add(record)
        if len(self.pool) == 0 and config.seed_exemplars:
            for record in load_exemplars(embedder):
                self.pool.add(record)
                if store is not None:
                    store.append(record)
            logger.info("seeded %d cold-start exemplars", len(self.pool))

    def __len__(self) -> int:
        return len(self.pool)

    def retrieve(
        self,
        q_text: str,
        indicator_text: str,
        policy: PrivacyPolicy,
        *,
        gate_threshold: float = 0.85,
    ) -> tuple[list[RetrievedExperience], ControlHints]:
        records, hints = get_exp(
            self.pool,
            self.buffer,
            q_text,
            indicator_text,
            policy,
            self.config.w_exp,
            self.embedder,
            self.config,
            gate_threshold=gate_threshold,
        )
        if self.store is not None:
            for item in records:
                self.store.update_stats(item.record)
        return records, hints

    def write_back(
        self,
        q_text: str,
        artifacts: ExperienceArtifacts,
        policy: PrivacyPolicy,
        leak_labels: Iterable[str],
    ) -> ExperienceRecord | None:
        return write_back_if_success(
            self.pool,
            self.buffer,
            q_text,
            artifacts,
            policy,
            embedder=self.embedder,
            config=self.config,
            leak_labels=leak_labels,
            store=self.store,
        )
