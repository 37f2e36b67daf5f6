"""Config and question-record validation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from .settings import Settings

CONFIG_SECTIONS = {"privacy", "search", "memory", "controller", "brain", "hand", "embedder", "generation"}
QUESTION_KEYS = {"id", "text"}


def _schema_path(name: str) -> Path:
    return Settings.load().schema_dir / name


def load_json_file(path: Path) -> dict[str, Any]:
    with path.open("r", encoding="utf-8") as handle:
        payload = json.load(handle)
    if not isinstance(payload, dict):
        raise ValueError("JSON payload must be an object")
    return payload


def _schema_errors(payload: Any, schema_path: Path) -> list[str] | None:
    """None when jsonschema or the schema file is unavailable."""
    try:
        import jsonschema  # type: ignore

        with schema_path.open("r", encoding="utf-8") as handle:
            schema = json.load(handle)
    except Exception:
        return None
    errors: list[str] = []
    validator = jsonschema.Draft202012Validator(schema)
    for err in validator.iter_errors(payload):
        path = ".".join(str(part) for part in err.path)
        errors.append(f"{path}: {err.message}" if path else err.message)
    return errors


def validate_config_payload(payload: dict[str, Any], schema_path: Path | None = None) -> tuple[bool, list[str]]:
    errors = _schema_errors(payload, schema_path or _schema_path("engine_config.schema.json"))
    if errors is not None:
        return len(errors) == 0, errors

    errors = []
    unknown = sorted(set(payload) - CONFIG_SECTIONS)
    if unknown:
        errors.append(f"Unknown sections: {', '.join(unknown)}")
    for section in CONFIG_SECTIONS & set(payload):
        if not isinstance(payload[section], dict):
            errors.append(f"{section} must be an object")
    privacy = payload.get("privacy")
    if isinstance(privacy, dict) and "ratio" in privacy:
        ratio = privacy["ratio"]
        if not isinstance(ratio, (int, float)) or not 0 <= ratio <= 1:
            errors.append("privacy.ratio must be a number within [0, 1]")
    return len(errors) == 0, errors


def validate_question_record(payload: Any, schema_path: Path | None = None) -> tuple[bool, list[str]]:
    errors = _schema_errors(payload, schema_path or _schema_path("question_record.schema.json"))
    if errors is not None:
        return len(errors) == 0, errors

    errors = []
    if not isinstance(payload, dict):
        return False, ["question record must be an object"]
    missing = sorted(QUESTION_KEYS - set(payload))
    if missing:
        errors.append(f"Missing required keys: {', '.join(missing)}")
    text = payload.get("text")
    if "text" in payload and (not isinstance(text, str) or not text.strip()):
        errors.append("text must be a non-empty string")
    answers = payload.get("answers", [])
    if not isinstance(answers, list) or not all(isinstance(a, str) for a in answers):
        errors.append("answers must be a list of strings")
    return len(errors) == 0, errors
