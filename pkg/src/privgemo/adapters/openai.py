"""OpenAI-compatible chat-completions backend (hosted API or a local server)."""

from __future__ import annotations

import os

from .base import BaseChatBackend, ChatCompletion, ChatRequest


class OpenAIChatBackend(BaseChatBackend):
    """Works against api.openai.com or any server exposing /v1/chat/completions."""

    def __init__(
        self,
        *,
        model: str = "gpt-4o-mini",
        api_key: str | None = None,
        key_env: str = "PRIVGEMO_BRAIN_KEY",
        base_url: str | None = None,
        timeout_s: float = 60.0,
    ) -> None:
        api_key = api_key or os.environ.get(key_env, "")
        if not api_key:
            if base_url is None:
                raise ValueError(f"API key required. Set {key_env} or pass api_key=...")
            # Local servers usually ignore the key but the SDK insists on one.
            api_key = "local"
        super().__init__(model=model, api_key=api_key, timeout_s=timeout_s)
        self.base_url = base_url
        self._client = None

    @property
    def _openai(self):
        if self._client is None:
            try:
                from openai import OpenAI
            except ImportError as e:
                raise ImportError(
                    "openai package required. Install with: pip install privgemo[openai]"
                ) from e
            self._client = OpenAI(api_key=self.api_key, base_url=self.base_url, timeout=self.timeout_s)
        return self._client

    def __call__(self, request: ChatRequest) -> ChatCompletion:
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": request.prompt})

        response = self._openai.chat.completions.create(
            model=self.model,
            max_tokens=request.max_tokens,
            messages=messages,
            temperature=request.temperature,
        )
        choice = response.choices[0]
        usage = response.usage
        return self._make_completion(
            raw_text=choice.message.content or "",
            prompt_tokens=getattr(usage, "prompt_tokens", 0),
            completion_tokens=getattr(usage, "completion_tokens", 0),
        )
