"""Question-suite evaluation: exact-match Hits@1, call counts, exposure and node reduction."""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
import re
import string
import threading
from typing import Any, Callable, Sequence

from .config import EngineConfig
from .controller import PrivGemoEngine
from .embedder import HashingEmbedder
from .errors import PrivGemoError
from .gateway import build_gateway
from .kg_store import KnowledgeGraph, load_graph
from .memory import ExperienceMemory
from .memory_store import MemoryStore
from .scripted import FIXTURES_DIR
from .types import AnswerSource, Question
from .validation import validate_question_record

logger = logging.getLogger(__name__)

BRAIN_CALL_BUCKETS: tuple[tuple[int, int], ...] = ((0, 3), (3, 6), (6, 9), (9, 12))
_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans({ch: " " for ch in string.punctuation})


def normalize_answer(text: str) -> str:
    lowered = text.casefold().translate(_PUNCT)
    return " ".join(_ARTICLES.sub(" ", lowered).split())


def exact_match(prediction: str, gold: Sequence[str]) -> bool:
    target = normalize_answer(prediction)
    return bool(target) and any(target == normalize_answer(g) for g in gold)


def call_bucket(calls: int) -> str:
    if calls == 0:
        return "0"
    for low, high in BRAIN_CALL_BUCKETS:
        if low < calls <= high:
            return f"({low},{high}]"
    return f">{BRAIN_CALL_BUCKETS[-1][1]}"


@dataclass(frozen=True)
class QuestionCase:
    question: Question
    graph: str | None = None
    scenario: str | None = None


@dataclass
class QuestionOutcome:
    question_id: str
    question: str
    answers: list[str]
    gold: list[str]
    matched: bool
    answer_source: str
    brain_calls: int = 0
    hand_calls: int = 0
    exposure_events: int = 0
    reduction_ratio: float = 0.0
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "question_id": self.question_id,
            "question": self.question,
            "answers": list(self.answers),
            "gold": list(self.gold),
            "matched": self.matched,
            "answer_source": self.answer_source,
            "brain_calls": self.brain_calls,
            "hand_calls": self.hand_calls,
            "exposure_events": self.exposure_events,
            "reduction_ratio": round(self.reduction_ratio, 6),
            "error": self.error,
        }


@dataclass
class EvalReport:
    outcomes: list[QuestionOutcome] = field(default_factory=list)
    ratio: float | None = None

    @property
    def total(self) -> int:
        return len(self.outcomes)

    @property
    def hits_at_1(self) -> float | None:
        if not self.outcomes:
            return None
        return sum(1 for o in self.outcomes if o.matched) / len(self.outcomes)

    def _mean(self, values: list[float]) -> float:
        if not values:
            return 0.0
        return sum(values) / len(values)

    @property
    def mean_brain_calls(self) -> float:
        return self._mean([o.brain_calls for o in self.outcomes])

    @property
    def mean_hand_calls(self) -> float:
        return self._mean([o.hand_calls for o in self.outcomes])

    @property
    def mean_reduction(self) -> float:
        return self._mean([o.reduction_ratio for o in self.outcomes if o.error is None])

    def source_counts(self) -> dict[str, int]:
        counts = Counter(o.answer_source for o in self.outcomes)
        return {source.value: counts.get(source.value, 0) for source in AnswerSource}

    def brain_call_histogram(self) -> dict[str, int]:
        keys = ["0", *(f"({lo},{hi}]" for lo, hi in BRAIN_CALL_BUCKETS), f">{BRAIN_CALL_BUCKETS[-1][1]}"]
        counts = Counter(call_bucket(o.brain_calls) for o in self.outcomes)
        return {key: counts.get(key, 0) for key in keys}

    def hits_text(self) -> str:
        hits = self.hits_at_1
        return "n/a" if hits is None else f"{hits:.4f}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "ratio": self.ratio,
            "questions": self.total,
            "hits_at_1": self.hits_at_1,
            "mean_brain_calls": round(self.mean_brain_calls, 6),
            "mean_hand_calls": round(self.mean_hand_calls, 6),
            "mean_reduction": round(self.mean_reduction, 6),
            "answer_sources": self.source_counts(),
            "brain_call_histogram": self.brain_call_histogram(),
            "outcomes": [o.to_dict() for o in self.outcomes],
        }


def load_questions(path: str | Path) -> list[QuestionCase]:
    """One JSON object per line with id, text and gold answers; graph and scenario are optional."""
    cases: list[QuestionCase] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {line_no}: invalid JSON: {e.msg}") from e
            ok, errors = validate_question_record(payload)
            if not ok:
                raise ValueError(f"line {line_no}: " + "; ".join(errors))
            cases.append(
                QuestionCase(
                    question=Question(
                        id=str(payload["id"]),
                        text=str(payload["text"]),
                        gold_answers=tuple(str(a) for a in payload.get("answers", [])),
                    ),
                    graph=payload.get("graph"),
                    scenario=payload.get("scenario"),
                )
            )
    return cases


class EngineFactory:
    """Builds one engine per case; graphs are cached and the experience memory is shared."""

    def __init__(
        self,
        config: EngineConfig,
        *,
        graph_path: str | Path | None = None,
        mock: str | None = None,
        store: MemoryStore | None = None,
        base_dir: Path | None = None,
    ) -> None:
        self.config = config
        self.graph_path = Path(graph_path) if graph_path else None
        self.mock = mock
        self.base_dir = base_dir
        self._graphs: dict[Path, KnowledgeGraph] = {}
        self._lock = threading.Lock()
        self.memory: ExperienceMemory | None = None
        if config.memory.enabled:
            embedder = HashingEmbedder(config.embedder.dim, config.embedder.ngram)
            self.memory = ExperienceMemory(config.memory, embedder, store)

    def _resolve_graph(self, case: QuestionCase) -> Path:
        if case.graph:
            candidate = Path(case.graph)
            for base in (self.base_dir, FIXTURES_DIR):
                if not candidate.is_absolute() and base is not None and (base / candidate).exists():
                    return (base / candidate).resolve()
            return candidate.resolve()
        if self.graph_path is None:
            raise ValueError(f"question {case.question.id} names no graph and none was given")
        return self.graph_path.resolve()

    def graph(self, path: Path) -> KnowledgeGraph:
        with self._lock:
            if path not in self._graphs:
                self._graphs[path] = load_graph(path)
            return self._graphs[path]

    def __call__(self, case: QuestionCase) -> PrivGemoEngine:
        graph = self.graph(self._resolve_graph(case))
        scenario = case.scenario or self.mock
        gateway = build_gateway(self.config, scenario=scenario) if scenario else build_gateway(self.config)
        embedder = self.memory.embedder if self.memory is not None else None
        return PrivGemoEngine(graph, gateway, self.config, self.memory, embedder=embedder)


def run_case(case: QuestionCase, factory: Callable[[QuestionCase], PrivGemoEngine]) -> QuestionOutcome:
    q = case.question
    try:
        result = factory(case).run(q)
    except (PrivGemoError, ValueError, OSError) as e:
        logger.warning("question %s failed: %s", q.id, e)
        return QuestionOutcome(
            question_id=q.id,
            question=q.text,
            answers=[],
            gold=list(q.gold_answers),
            matched=False,
            answer_source=AnswerSource.NONE.value,
            error=f"{type(e).__name__}: {e}",
        )
    top = result.answers[0] if result.answers else ""
    return QuestionOutcome(
        question_id=q.id,
        question=q.text,
        answers=list(result.answers),
        gold=list(q.gold_answers),
        matched=exact_match(top, q.gold_answers),
        answer_source=result.answer_source.value,
        brain_calls=result.brain_calls,
        hand_calls=result.hand_calls,
        exposure_events=result.exposure["brain_calls"] + result.exposure["kg_expansions"],
        reduction_ratio=result.reduction_ratio,
    )


def evaluate(
    cases: Sequence[QuestionCase],
    factory: Callable[[QuestionCase], PrivGemoEngine],
    *,
    workers: int = 1,
    ratio: float | None = None,
) -> EvalReport:
    """Run every case; failures count as misses. Outcomes keep input order whatever the pool size."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1:
        outcomes = [run_case(case, factory) for case in cases]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(lambda case: run_case(case, factory), cases))
    return EvalReport(outcomes=outcomes, ratio=ratio)


def sweep_ratios(
    cases: Sequence[QuestionCase],
    config: EngineConfig,
    ratios: Sequence[float],
    *,
    graph_path: str | Path | None = None,
    mock: str | None = None,
    base_dir: Path | None = None,
    workers: int = 1,
) -> list[EvalReport]:
    """One report per anonymization ratio, each with a fresh in-process memory."""
    reports: list[EvalReport] = []
    for ratio in ratios:
        cfg = config.with_values({"privacy.anonymization_ratio": ratio})
        factory = EngineFactory(cfg, graph_path=graph_path, mock=mock, base_dir=base_dir)
        reports.append(evaluate(cases, factory, workers=workers, ratio=ratio))
    return reports


def write_report(report: EvalReport | list[EvalReport], path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload: Any = [r.to_dict() for r in report] if isinstance(report, list) else report.to_dict()
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
