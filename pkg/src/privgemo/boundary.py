"""Raw-label scanner guarding everything sent over the remote channel."""

from __future__ import annotations

import logging
import re
from typing import Any, Iterable, Mapping

from .errors import BoundaryViolation

logger = logging.getLogger(__name__)

MIN_LABEL_LENGTH = 4
STOP_WORDS = frozenset(
    {"what", "which", "when", "where", "with", "that", "this", "from", "have", "does", "about", "there"}
)


class BoundaryGuard:
    """Case-insensitive, word-bounded search for any label of the session's raw dictionary."""

    def __init__(self, labels: Iterable[str], *, min_length: int = MIN_LABEL_LENGTH) -> None:
        kept: dict[str, str] = {}
        exempt: set[str] = set()
        for label in labels:
            text = label.strip()
            if not text:
                continue
            if len(text) < min_length or text.casefold() in STOP_WORDS:
                exempt.add(text)
                continue
            kept.setdefault(text.casefold(), text)
        self.exempt = sorted(exempt)
        if self.exempt:
            logger.warning("boundary scan skips %d short or common labels", len(self.exempt))
        self._labels = kept
        ordered = sorted(kept.values(), key=lambda s: (-len(s), s))
        self._pattern = (
            re.compile(r"(?<!\w)(?:" + "|".join(re.escape(s) for s in ordered) + r")(?!\w)", re.IGNORECASE)
            if ordered
            else None
        )

    def __len__(self) -> int:
        return len(self._labels)

    def __contains__(self, label: str) -> bool:
        return label.strip().casefold() in self._labels

    def find(self, text: str) -> str | None:
        if self._pattern is None or not text:
            return None
        match = self._pattern.search(text)
        if match is None:
            return None
        return self._labels.get(match.group(0).casefold(), match.group(0))

    def scan(self, value: Any) -> str | None:
        if isinstance(value, str):
            return self.find(value)
        if isinstance(value, Mapping):
            for key, item in value.items():
                hit = self.scan(key) or self.scan(item)
                if hit:
                    return hit
            return None
        if isinstance(value, (list, tuple, set, frozenset)):
            for item in value:
                hit = self.scan(item)
                if hit:
                    return hit
            return None
        return None

    def check(self, template_id: str, fields: Mapping[str, Any]) -> None:
        hit = self.scan(fields)
        if hit is not None:
            raise BoundaryViolation(template_id, hit)
