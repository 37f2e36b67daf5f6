"""Anthropic messages API backend."""

from __future__ import annotations

import os

from .base import BaseChatBackend, ChatCompletion, ChatRequest


class AnthropicChatBackend(BaseChatBackend):
    def __init__(
        self,
        *,
        model: str = "claude-3-5-sonnet-20241022",
        api_key: str | None = None,
        key_env: str = "PRIVGEMO_BRAIN_KEY",
        timeout_s: float = 60.0,
    ) -> None:
        api_key = api_key or os.environ.get(key_env, "")
        if not api_key:
            raise ValueError(f"API key required. Set {key_env} or pass api_key=...")
        super().__init__(model=model, api_key=api_key, timeout_s=timeout_s)
        self._client = None

    @property
    def _anthropic(self):
        if self._client is None:
            try:
                import anthropic
            except ImportError as e:
                raise ImportError(
                    "anthropic package required. Install with: pip install privgemo[anthropic]"
                ) from e
            self._client = anthropic.Anthropic(api_key=self.api_key, timeout=self.timeout_s)
        return self._client

    def __call__(self, request: ChatRequest) -> ChatCompletion:
        response = self._anthropic.messages.create(
            model=self.model,
            max_tokens=request.max_tokens,
            system=request.system or "",
            messages=[{"role": "user", "content": request.prompt}],
            temperature=request.temperature,
        )
        raw_text = ""
        for block in response.content:
            if hasattr(block, "text"):
                raw_text += block.text
        return self._make_completion(
            raw_text=raw_text,
            prompt_tokens=response.usage.input_tokens,
            completion_tokens=response.usage.output_tokens,
        )
