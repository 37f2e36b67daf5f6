"""Base backend for chat-completion style model channels."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Mapping


@dataclass(frozen=True)
class ChatRequest:
    channel: str
    template_id: str
    prompt: str
    fields: Mapping[str, Any] = field(default_factory=dict)
    system: str = ""
    temperature: float = 0.4
    max_tokens: int = 256


@dataclass(frozen=True)
class ChatCompletion:
    raw_text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


class BaseChatBackend(ABC):
    """Base class for backends that talk to a real model endpoint."""

    def __init__(
        self,
        *,
        model: str,
        api_key: str | None = None,
        timeout_s: float = 60.0,
    ) -> None:
        self.model = model
        self.api_key = api_key or ""
        self.timeout_s = timeout_s

    def _make_completion(self, *, raw_text: str, prompt_tokens: int, completion_tokens: int) -> ChatCompletion:
        return ChatCompletion(
            raw_text=raw_text,
            prompt_tokens=int(prompt_tokens or 0),
            completion_tokens=int(completion_tokens or 0),
        )

    @abstractmethod
    def __call__(self, request: ChatRequest) -> ChatCompletion:
        """Send one prompt and return the completion."""
        ...
