"""Per-run event log and exposure accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timezone
import hashlib
import json
from pathlib import Path
import threading
from typing import Any

from .types import ExposureEvent, ExposureKind


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class TranscriptEvent:
    seq: int
    kind: str
    template_id: str | None
    payload: str
    created_at: str
    node_id: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "template_id": self.template_id,
            "payload": self.payload,
            "created_at": self.created_at,
            "node_id": self.node_id,
            "meta": dict(self.meta),
        }


class Transcript:
    """Ordered record of what crossed each channel during one run.

    Brain payloads are kept verbatim (they are already anonymized); local
    channel payloads are reduced to a digest so raw labels never land in an
    exported log.
    """

    def __init__(self) -> None:
        self._events: list[TranscriptEvent] = []
        self._lock = threading.Lock()

    def record(
        self,
        kind: str,
        payload: str = "",
        *,
        template_id: str | None = None,
        node_id: int | None = None,
        keep_payload: bool = True,
        **meta: Any,
    ) -> TranscriptEvent:
        with self._lock:
            event = TranscriptEvent(
                seq=len(self._events),
                kind=kind,
                template_id=template_id,
                payload=payload if keep_payload else f"sha256:{digest(payload)}",
                created_at=_utc_now(),
                node_id=node_id,
                meta=meta,
            )
            self._events.append(event)
        return event

    @property
    def events(self) -> list[TranscriptEvent]:
        with self._lock:
            return list(self._events)

    def of_kind(self, kind: str) -> list[TranscriptEvent]:
        return [event for event in self.events if event.kind == kind]

    def brain_payloads(self) -> list[str]:
        return [event.payload for event in self.of_kind("brain_call")]

    def to_list(self) -> list[dict[str, Any]]:
        return [event.to_dict() for event in self.events]

    def write(self, path: str | Path) -> Path:
        """One JSON object per line, in event order."""
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", encoding="utf-8") as handle:
            for event in self.to_list():
                handle.write(json.dumps(event, ensure_ascii=False) + "\n")
        return out


class ExposureLedger:
    """Counts remote calls and KG expansions; one event per occurrence."""

    def __init__(self) -> None:
        self._events: list[ExposureEvent] = []
        self._lock = threading.Lock()

    def record(self, kind: ExposureKind, payload_size: int, node_id: int | None = None) -> ExposureEvent:
        event = ExposureEvent(kind=kind, payload_size=max(0, payload_size), node_id=node_id)
        with self._lock:
            self._events.append(event)
        return event

    @property
    def events(self) -> list[ExposureEvent]:
        with self._lock:
            return list(self._events)

    def count(self, kind: ExposureKind) -> int:
        return sum(1 for event in self.events if event.kind == kind)

    def total_payload(self, kind: ExposureKind) -> int:
        return sum(event.payload_size for event in self.events if event.kind == kind)

    def summary(self) -> dict[str, int]:
        return {
            "brain_calls": self.count(ExposureKind.BRAIN_CALL),
            "brain_payload": self.total_payload(ExposureKind.BRAIN_CALL),
            "kg_expansions": self.count(ExposureKind.KG_EXPANSION),
            "kg_expansion_payload": self.total_payload(ExposureKind.KG_EXPANSION),
        }
