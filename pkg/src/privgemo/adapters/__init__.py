"""Model backends for the remote and local channels."""

from .anthropic import AnthropicChatBackend
from .base import BaseChatBackend, ChatCompletion, ChatRequest
from .openai import OpenAIChatBackend

__all__ = [
    "AnthropicChatBackend",
    "BaseChatBackend",
    "ChatCompletion",
    "ChatRequest",
    "OpenAIChatBackend",
]
