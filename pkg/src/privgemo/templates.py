"""Prompt template registry and the reply contracts each template parses into."""

from __future__ import annotations

from dataclasses import dataclass
import json
import re
from typing import Any, Literal, Mapping

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import MalformedModelOutput

Channel = Literal["brain", "hand"]


class _Reply(BaseModel):
    model_config = ConfigDict(extra="ignore")


class MentionsReply(_Reply):
    mentions: list[str] = Field(default_factory=list)


class DelegationReply(_Reply):
    analysis_mode: Literal["HAND", "BRAIN"] = "BRAIN"
    complexity: str = "medium"
    privacy_risk: str = "medium"
    reason: str = ""


class AnalysisReply(_Reply):
    indicator: str = Field(min_length=1)
    split_questions: list[str] = Field(default_factory=list)
    d_predict: int | None = Field(default=None, alias="D_predict")
    warnings: list[str] = Field(default_factory=list)

    model_config = ConfigDict(extra="ignore", populate_by_name=True)


class NextStepReply(_Reply):
    decision: Literal["EXPAND_NEXT_DEPTH", "SWITCH_METHOD", "PRUNE_NODE"]
    selected_method: Literal["Topic", "Refine", "Predict"] | None = None
    next_depth: int | None = None
    reason: str = ""


class FollowUpReply(_Reply):
    missing: str = ""
    query: str = Field(min_length=1)
    reasoning: str = ""


class Prediction(_Reply):
    target: str = Field(min_length=1)
    path_pattern: list[str] = Field(default_factory=list)
    reason: str = ""


class PredictionReply(_Reply):
    predictions: list[Prediction] = Field(default_factory=list)


class RankedPath(_Reply):
    rank: int = 0
    path_id: str = Field(min_length=1)
    score: float = 0.0
    reason: str = ""


class RankReply(_Reply):
    top_paths: list[RankedPath] = Field(default_factory=list)


class RefineReply(_Reply):
    verified_facts: list[str] = Field(default_factory=list)
    split_answer: list[str] = Field(default_factory=list)
    is_sufficient: bool = False
    missing: str = ""


class SufficiencyReply(_Reply):
    sufficient_split: bool = False
    split_answer: list[str] = Field(default_factory=list)
    evidence: list[str] = Field(default_factory=list)
    sufficient_main: bool = False
    main_answer: list[str] = Field(default_factory=list)
    missing: str = ""


class FinalAnswerReply(_Reply):
    answers: list[str] = Field(default_factory=list, alias="answer")
    explanation: str = ""
    cited_facts: list[str] = Field(default_factory=list)

    model_config = ConfigDict(extra="ignore", populate_by_name=True)


class ExperienceSummaryReply(_Reply):
    tpl_path: str = ""
    constraints: list[str] = Field(default_factory=list)
    warnings: list[str] = Field(default_factory=list)


@dataclass(frozen=True)
class TemplateSpec:
    template_id: str
    channels: tuple[Channel, ...]
    instruction: str
    fields: tuple[str, ...]
    reply_model: type[_Reply]
    answer_stage: bool = False
    line_format: bool = False

    def render(self, values: Mapping[str, Any]) -> str:
        missing = [name for name in self.fields if name not in values]
        if missing:
            raise KeyError(f"template {self.template_id!r} missing fields: {', '.join(missing)}")
        blocks = [self.instruction.strip()]
        for name in self.fields:
            blocks.append(f"{name.replace('_', ' ').title()}:\n{_render_value(values[name])}")
        return "\n\n".join(blocks)


def _render_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return "\n".join(f"- {item}" for item in value) if value else "(none)"
    if isinstance(value, Mapping):
        return json.dumps(dict(value), sort_keys=True, ensure_ascii=False)
    return str(value)


_JSON_ONLY = "Reply with a single JSON object and nothing else."

TEMPLATES: dict[str, TemplateSpec] = {
    spec.template_id: spec
    for spec in (
        TemplateSpec(
            "extract_mentions",
            ("hand",),
            "List the named entities mentioned in the question, in order of appearance. "
            f'{_JSON_ONLY} Shape: {{"mentions": ["..."]}}',
            ("question",),
            MentionsReply,
        ),
        TemplateSpec(
            "delegate_analysis",
            ("hand",),
            "Decide whether this question can be analysed locally (HAND) or needs the remote planner (BRAIN). "
            f'{_JSON_ONLY} Shape: {{"analysis_mode": "HAND|BRAIN", "complexity": "...", '
            '"privacy_risk": "...", "reason": "..."}',
            ("question", "topic_entities", "memory_hint"),
            DelegationReply,
        ),
        TemplateSpec(
            "analyze_question_brain",
            ("brain",),
            "Plan how to answer the question over a knowledge graph. Build an indicator chain "
            "`A -- relation -- ?x -- relation -- B` that uses every topic entity exactly once and "
            "contains at least one `?` placeholder for the answer. Optionally split the question "
            f'into simpler sub-questions. {_JSON_ONLY} Shape: {{"indicator": "...", '
            '"split_questions": ["..."], "D_predict": 2, "warnings": []}',
            ("question", "topic_entities", "subgraph_sketch", "experience"),
            AnalysisReply,
        ),
        TemplateSpec(
            "analyze_question_hand",
            ("hand",),
            "Plan how to answer the question over a knowledge graph. Build an indicator chain "
            "`A -- relation -- ?x -- relation -- B` that uses every topic entity exactly once and "
            f'contains a `?` placeholder for the answer. {_JSON_ONLY} Shape: {{"indicator": "...", '
            '"split_questions": ["..."], "D_predict": 2, "warnings": []}',
            ("question", "topic_entities", "experience"),
            AnalysisReply,
        ),
        TemplateSpec(
            "next_step_policy",
            ("hand",),
            "The current exploration failed to answer the sub-question. Choose what to do next. "
            f'{_JSON_ONLY} Shape: {{"decision": "EXPAND_NEXT_DEPTH|SWITCH_METHOD|PRUNE_NODE", '
            '"selected_method": "Topic|Refine|Predict", "next_depth": 2, "reason": "..."}',
            ("question", "current_step", "failures", "experience", "max_depth"),
            NextStepReply,
        ),
        TemplateSpec(
            "follow_up",
            ("brain", "hand"),
            "The retrieved paths do not answer the question yet. Say what is missing and write one "
            "follow-up question that mentions the entities to search from. Answer with three lines:\n"
            "Missing: ...\nQuery: ...\nReasoning: ...",
            ("question", "topic_entities", "indicator", "split_question", "paths"),
            FollowUpReply,
            line_format=True,
        ),
        TemplateSpec(
            "predict_targets",
            ("brain", "hand"),
            "From the entities visible in the paths, predict up to three entities likely to lie on "
            f'the answer path. Use their tokens verbatim. {_JSON_ONLY} Shape: {{"predictions": '
            '[{"target": "...", "path_pattern": ["..."], "reason": "..."}]}',
            ("question", "topic_entities", "indicator", "split_question", "paths"),
            PredictionReply,
        ),
        TemplateSpec(
            "rank_paths",
            ("brain",),
            "Rank the candidate paths by how well they answer the question. Refer to paths by id. "
            f'{_JSON_ONLY} Shape: {{"top_paths": [{{"rank": 1, "path_id": "P1", "score": 0.9, '
            '"reason": "..."}]}',
            ("question", "indicator", "split_question", "candidates", "limit"),
            RankReply,
        ),
        TemplateSpec(
            "refine_paths",
            ("hand",),
            "Check each fact against the sub-question and keep only the facts needed to answer it. "
            f'{_JSON_ONLY} Shape: {{"verified_facts": ["(h, r, t)"], "split_answer": ["..."], '
            '"is_sufficient": true, "missing": ""}',
            ("question", "split_question", "paths", "facts"),
            RefineReply,
        ),
        TemplateSpec(
            "check_sufficiency",
            ("hand",),
            "Decide whether the facts answer the sub-question and whether they already answer the "
            f'main question. {_JSON_ONLY} Shape: {{"sufficient_split": true, "split_answer": ["..."], '
            '"evidence": ["(h, r, t)"], "sufficient_main": false, "main_answer": [], "missing": ""}',
            ("question", "split_question", "facts"),
            SufficiencyReply,
        ),
        TemplateSpec(
            "final_answer",
            ("hand",),
            "Answer the question from the facts. Cite the facts you used. "
            f'{_JSON_ONLY} Shape: {{"answer": ["..."], "explanation": "...", "cited_facts": ["(h, r, t)"]}}',
            ("question", "facts", "sub_answers"),
            FinalAnswerReply,
            answer_stage=True,
        ),
        TemplateSpec(
            "summarize_experience",
            ("hand",),
            "Summarise the successful reasoning as an entity-free path template with TOPIC_i, X and "
            f'ANS placeholders. {_JSON_ONLY} Shape: {{"tpl_path": "...", "constraints": [], "warnings": []}}',
            ("indicator", "trajectory", "path_templates"),
            ExperienceSummaryReply,
        ),
    )
}


def get_template(template_id: str) -> TemplateSpec:
    try:
        return TEMPLATES[template_id]
    except KeyError as e:
        raise KeyError(f"unknown template: {template_id}") from e


_LINE = re.compile(r"^\s*(missing|query|reasoning)\s*:\s*(.*)$", re.IGNORECASE)


def _loads_lenient(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        start = text.find("{")
        end = text.rfind("}")
        if start == -1 or end <= start:
            return None
        try:
            return json.loads(text[start : end + 1])
        except json.JSONDecodeError:
            return None


def _parse_lines(spec: TemplateSpec, text: str) -> dict[str, str]:
    found: dict[str, str] = {}
    for line in text.splitlines():
        match = _LINE.match(line)
        if match:
            found[match.group(1).lower()] = match.group(2).strip()
    if not found:
        payload = _loads_lenient(text)
        if isinstance(payload, dict):
            return {str(k).lower(): v for k, v in payload.items()}
        raise MalformedModelOutput(spec.template_id, "no Missing/Query/Reasoning lines", text)
    return found


def parse_reply(template_id: str, text: str) -> _Reply:
    """Strict parse first, then one lenient pass over the outermost JSON object."""
    spec = get_template(template_id)
    model = spec.reply_model
    if spec.line_format:
        try:
            return model.model_validate(_parse_lines(spec, text))
        except ValidationError as e:
            raise MalformedModelOutput(template_id, str(e), text) from e
    try:
        return model.model_validate_json(text)
    except ValidationError:
        pass
    payload = _loads_lenient(text)
    if not isinstance(payload, dict):
        raise MalformedModelOutput(template_id, "reply is not a JSON object", text)
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        raise MalformedModelOutput(template_id, str(e), text) from e
