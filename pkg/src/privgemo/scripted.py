"""Deterministic scripted backends for offline runs and tests.

A scenario is a small JSON document describing how a cooperative model would
answer one question. Replies are a pure function of (template, fields) and
the scenario, so runs replay identically.
"""

from __future__ import annotations

import json
from pathlib import Path
import re
from typing import Any, Mapping

from .adapters.base import ChatCompletion, ChatRequest

FIXTURES_DIR = Path(__file__).resolve().parent / "fixtures"
SCENARIO_DIR = FIXTURES_DIR / "scenarios"

_FACT = re.compile(r"^\((?P<h>.+?), (?P<r>[^\s,]+), (?P<t>.+)\)$")
_PATH_NODE = re.compile(r"\{([^}]*)\}")
_PATH_STEP = re.compile(r"(->|<-) (\S+) (?:->|<-)")
_CANDIDATE = re.compile(r"^(P\d+):\s*(.*)$")


def load_scenario(ref: str | Path) -> dict[str, Any]:
    """Load a scenario by path, or by name from the bundled scenario directory."""
    path = Path(ref)
    if not path.exists():
        candidate = SCENARIO_DIR / (path.name if path.suffix == ".json" else f"{path.name}.json")
        if not candidate.exists():
            raise FileNotFoundError(f"scenario not found: {ref}")
        path = candidate
    with path.open("r", encoding="utf-8") as handle:
        payload = json.load(handle)
    if not isinstance(payload, dict):
        raise ValueError("scenario must be a JSON object")
    return payload


def parse_fact(text: str) -> tuple[str, str, str] | None:
    match = _FACT.match(text.strip())
    if match is None:
        return None
    return match.group("h"), match.group("r"), match.group("t")


def _fill_topics(text: str, topics: list[str]) -> str:
    for idx, value in enumerate(topics, start=1):
        text = text.replace(f"{{TOPIC_{idx}}}", value)
    return text


def apply_answer_rule(rule: Mapping[str, Any] | None, facts: list[str]) -> list[str]:
    """Pick answers out of rendered facts: the head or tail of facts using one relation."""
    if not rule:
        return []
    parsed = [f for f in (parse_fact(text) for text in facts) if f is not None]
    relations = {r for _, r, _ in parsed}
    if any(req not in relations for req in rule.get("require", [])):
        return []
    position = rule.get("position", "tail")
    values: list[str] = []
    for head, relation, tail in parsed:
        if relation == rule.get("relation"):
            value = head if position == "head" else tail
            if value not in values:
                values.append(value)
    if not values:
        return []
    select = rule.get("select", "all")
    if select == "max":
        return [max(values)]
    if select == "first":
        return [values[0]]
    return values


def _path_nodes_and_steps(serialized: str) -> tuple[list[str], list[tuple[str, str]]]:
    return _PATH_NODE.findall(serialized), _PATH_STEP.findall(serialized)


class ScriptedBackend:
    """Plays one channel of a scenario."""

    def __init__(self, scenario: Mapping[str, Any], channel: str = "hand") -> None:
        self.scenario = dict(scenario)
        self.channel = channel
        self.calls = 0

    def __call__(self, request: ChatRequest) -> ChatCompletion:
        self.calls += 1
        handler = getattr(self, f"_{request.template_id}", None)
        if request.template_id in self.scenario.get("malformed", []):
            text = "I am not sure how to format this."
        elif handler is None:
            text = "{}"
        else:
            reply = handler(dict(request.fields))
            text = reply if isinstance(reply, str) else json.dumps(reply, ensure_ascii=False)
        return ChatCompletion(
            raw_text=text,
            prompt_tokens=len(request.prompt) // 4 + 1,
            completion_tokens=len(text) // 4 + 1,
        )

    def _extract_mentions(self, fields: dict[str, Any]) -> dict[str, Any]:
        text = str(fields.get("question", ""))
        found = [
            m
            for m in self.scenario.get("mentions", [])
            if re.search(rf"(?<!\w){re.escape(m)}(?!\w)", text, re.IGNORECASE)
        ]
        return {"mentions": found}

    def _delegate_analysis(self, fields: dict[str, Any]) -> dict[str, Any]:
        return {"analysis_mode": self.scenario.get("delegate", "BRAIN"), "reason": "scripted"}

    def _analysis(self, fields: dict[str, Any]) -> dict[str, Any]:
        analysis = self.scenario.get("analysis") or {}
        topics = [str(t) for t in fields.get("topic_entities", [])]
        indicator = analysis.get("indicator")
        if not indicator:
            indicator = " -- ? -- ".join(f"{{TOPIC_{i}}}" for i in range(1, len(topics) + 1)) + " -- ? -- ?answer"
        return {
            "indicator": _fill_topics(indicator, topics),
            "split_questions": [_fill_topics(q, topics) for q in analysis.get("split_questions", [])],
            "D_predict": analysis.get("d_predict"),
            "warnings": list(analysis.get("warnings", [])),
        }

    _analyze_question_brain = _analysis
    _analyze_question_hand = _analysis

    def _next_step_policy(self, fields: dict[str, Any]) -> dict[str, Any]:
        return dict(self.scenario.get("policy") or {"decision": "EXPAND_NEXT_DEPTH", "reason": "scripted"})

    def _follow_up(self, fields: dict[str, Any]) -> str:
        follow = self.scenario.get("follow_up") or {}
        topics = [str(t) for t in fields.get("topic_entities", [])]
        query = _fill_topics(follow.get("query", ""), topics) or str(fields.get("question", ""))
        return (
            f"Missing: {follow.get('missing', 'more context')}\n"
            f"Query: {query}\n"
            f"Reasoning: {follow.get('reasoning', 'scripted follow-up')}"
        )

    def _predict_targets(self, fields: dict[str, Any]) -> dict[str, Any]:
        rule = self.scenario.get("predict") or {}
        targets: list[str] = []
        for serialized in fields.get("paths", []):
            nodes, steps = _path_nodes_and_steps(str(serialized))
            for idx, (arrow, relation) in enumerate(steps):
                if relation != rule.get("relation") or idx + 1 >= len(nodes):
                    continue
                head, tail = (nodes[idx], nodes[idx + 1]) if arrow == "->" else (nodes[idx + 1], nodes[idx])
                target = head if rule.get("position") == "head" else tail
                if target not in targets:
                    targets.append(target)
        return {"predictions": [{"target": t, "reason": "scripted"} for t in targets[:3]]}

    def _rank_paths(self, fields: dict[str, Any]) -> dict[str, Any]:
        prefer = list((self.scenario.get("rank") or {}).get("prefer", []))
        entries = []
        for line in fields.get("candidates", []):
            match = _CANDIDATE.match(str(line))
            if match:
                entries.append((match.group(1), match.group(2)))
        ranked = sorted(
            enumerate(entries),
            key=lambda item: (not any(rel in item[1][1] for rel in prefer), item[0]),
        )
        limit = int(fields.get("limit", len(ranked)) or len(ranked))
        return {
            "top_paths": [
                {"rank": rank, "path_id": pid, "score": 1.0 / rank, "reason": "scripted"}
                for rank, (_, (pid, _)) in enumerate(ranked[:limit], start=1)
            ]
        }

    def _refine_paths(self, fields: dict[str, Any]) -> dict[str, Any]:
        facts = [str(f) for f in fields.get("facts", [])]
        if self.scenario.get("always_insufficient"):
            return {"verified_facts": facts, "is_sufficient": False, "missing": "scripted"}
        answers = apply_answer_rule(self.scenario.get("answer"), facts)
        if not answers:
            return {"verified_facts": facts, "is_sufficient": False, "missing": "no matching fact"}
        kept: list[str] = []
        for chain in fields.get("paths", []):
            chain_facts = [part.strip() for part in str(chain).split("; ") if part.strip()]
            ends = {value for f in chain_facts if (p := parse_fact(f)) for value in (p[0], p[2])}
            if any(answer in ends for answer in answers):
                kept.extend(f for f in chain_facts if f not in kept)
        return {"verified_facts": kept or facts, "split_answer": answers, "is_sufficient": True}

    def _check_sufficiency(self, fields: dict[str, Any]) -> dict[str, Any]:
        facts = [str(f) for f in fields.get("facts", [])]
        if self.scenario.get("always_insufficient"):
            return {"sufficient_split": False, "sufficient_main": False, "missing": "scripted"}
        answers = apply_answer_rule(self.scenario.get("answer"), facts)
        ok = bool(answers)
        return {
            "sufficient_split": ok,
            "split_answer": answers,
            "evidence": facts if ok else [],
            "sufficient_main": ok and not self.scenario.get("split_only", False),
            "main_answer": answers if ok else [],
            "missing": "" if ok else "no matching fact",
        }

    def _final_answer(self, fields: dict[str, Any]) -> dict[str, Any]:
        facts = [str(f) for f in fields.get("facts", [])]
        answers = list(self.scenario.get("final_override", [])) or apply_answer_rule(self.scenario.get("answer"), facts)
        rule = self.scenario.get("answer") or {}
        cited = [f for f in facts if (p := parse_fact(f)) and p[1] == rule.get("relation")]
        return {"answer": answers, "explanation": "scripted", "cited_facts": cited}

    def _summarize_experience(self, fields: dict[str, Any]) -> dict[str, Any]:
        templates = [str(t) for t in fields.get("path_templates", [])]
        return {"tpl_path": templates[0] if templates else "", "constraints": [], "warnings": []}
