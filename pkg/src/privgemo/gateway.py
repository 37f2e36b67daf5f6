"""Model gateway: routes templated prompts to the remote or local channel."""

from __future__ import annotations

from collections import Counter
import logging
from pathlib import Path
from typing import Any, Callable, Mapping

from pydantic import BaseModel

from .adapters.base import ChatCompletion, ChatRequest
from .boundary import BoundaryGuard
from .config import BackendConfig, EngineConfig, GenerationConfig
from .errors import BrainBudgetExhausted, GatewayError, PrivGemoError
from .templates import get_template, parse_reply
from .transcript import ExposureLedger, Transcript
from .types import ExposureKind

logger = logging.getLogger(__name__)

Backend = Callable[[ChatRequest], ChatCompletion]

SYSTEM_PROMPT = (
    "You help answer questions over a knowledge graph. Entity names may be replaced by opaque "
    "tokens; keep tokens exactly as written and never guess what they stand for."
)


class ModelGateway:
    """Holds the two backends; per-run state lives in a GatewaySession."""

    def __init__(
        self,
        *,
        hand: Backend,
        brain: Backend | None = None,
        generation: GenerationConfig | None = None,
    ) -> None:
        self.hand = hand
        self.brain = brain
        self.generation = generation or GenerationConfig()

    def session(
        self,
        *,
        max_brain_calls: int = 12,
        transcript: Transcript | None = None,
        ledger: ExposureLedger | None = None,
    ) -> "GatewaySession":
        return GatewaySession(
            self,
            max_brain_calls=max_brain_calls,
            transcript=transcript or Transcript(),
            ledger=ledger or ExposureLedger(),
        )


class GatewaySession:
    """Per-run view of the gateway with its boundary guard, counters and logs.

    Remote calls are refused until `arm` installs the boundary guard built
    from the session's raw dictionary.
    """

    def __init__(
        self,
        gateway: ModelGateway,
        *,
        max_brain_calls: int,
        transcript: Transcript,
        ledger: ExposureLedger,
    ) -> None:
        self.gateway = gateway
        self.max_brain_calls = max_brain_calls
        self.transcript = transcript
        self.ledger = ledger
        self.guard: BoundaryGuard | None = None
        self.brain_calls = 0
        self.hand_calls = 0
        self.calls_by_template: Counter[str] = Counter()
        self.prompt_tokens = 0
        self.completion_tokens = 0

    def arm(self, guard: BoundaryGuard) -> None:
        self.guard = guard

    @property
    def has_brain(self) -> bool:
        return self.gateway.brain is not None

    @property
    def brain_available(self) -> bool:
        return self.has_brain and self.brain_calls < self.max_brain_calls

    def _temperature(self, answer_stage: bool) -> float:
        gen = self.gateway.generation
        return gen.answer_temperature if answer_stage else gen.explore_temperature

    def _send(self, backend: Backend, request: ChatRequest) -> ChatCompletion:
        try:
            completion = backend(request)
        except PrivGemoError:
            raise
        except Exception as e:
            raise GatewayError(f"{request.channel} backend failed on {request.template_id}: {e}") from e
        self.prompt_tokens += completion.prompt_tokens
        self.completion_tokens += completion.completion_tokens
        return completion

    def brain_call(self, template_id: str, fields: Mapping[str, Any], node_id: int | None = None) -> BaseModel:
        spec = get_template(template_id)
        if "brain" not in spec.channels:
            raise ValueError(f"template {template_id!r} is not allowed on the remote channel")
        if self.gateway.brain is None:
            raise GatewayError("no remote channel configured")
        if self.brain_calls >= self.max_brain_calls:
            raise BrainBudgetExhausted(f"remote call cap of {self.max_brain_calls} reached")
        if self.guard is None:
            raise GatewayError("remote channel used before the boundary guard was armed")
        self.guard.check(template_id, fields)

        prompt = spec.render(fields)
        request = ChatRequest(
            channel="brain",
            template_id=template_id,
            prompt=prompt,
            fields=dict(fields),
            system=SYSTEM_PROMPT,
            temperature=self._temperature(spec.answer_stage),
            max_tokens=self.gateway.generation.max_tokens,
        )
        self.brain_calls += 1
        self.calls_by_template[template_id] += 1
        self.ledger.record(ExposureKind.BRAIN_CALL, len(prompt), node_id)
        self.transcript.record("brain_call", prompt, template_id=template_id, node_id=node_id)
        completion = self._send(self.gateway.brain, request)
        self.transcript.record("brain_reply", completion.raw_text, template_id=template_id, node_id=node_id)
        logger.debug("brain %s -> %d chars", template_id, len(completion.raw_text))
        return parse_reply(template_id, completion.raw_text)

    def hand_call(self, template_id: str, fields: Mapping[str, Any], node_id: int | None = None) -> BaseModel:
        spec = get_template(template_id)
        if "hand" not in spec.channels:
            raise ValueError(f"template {template_id!r} is not allowed on the local channel")
        prompt = spec.render(fields)
        request = ChatRequest(
            channel="hand",
            template_id=template_id,
            prompt=prompt,
            fields=dict(fields),
            system=SYSTEM_PROMPT,
            temperature=self._temperature(spec.answer_stage),
            max_tokens=self.gateway.generation.max_tokens,
        )
        self.hand_calls += 1
        self.calls_by_template[template_id] += 1
        self.transcript.record("hand_call", prompt, template_id=template_id, node_id=node_id, keep_payload=False)
        completion = self._send(self.gateway.hand, request)
        return parse_reply(template_id, completion.raw_text)

    def call(self, channel: str, template_id: str, fields: Mapping[str, Any], node_id: int | None = None) -> BaseModel:
        if channel == "brain":
            return self.brain_call(template_id, fields, node_id)
        return self.hand_call(template_id, fields, node_id)


def _real_backend(cfg: BackendConfig, generation: GenerationConfig) -> Backend:
    if cfg.provider == "anthropic":
        from .adapters.anthropic import AnthropicChatBackend

        return AnthropicChatBackend(model=cfg.model, key_env=cfg.key_env, timeout_s=generation.timeout_s)
    if cfg.provider == "openai":
        from .adapters.openai import OpenAIChatBackend

        return OpenAIChatBackend(
            model=cfg.model,
            key_env=cfg.key_env,
            base_url=cfg.endpoint,
            timeout_s=generation.timeout_s,
        )
    raise GatewayError(f"provider {cfg.provider!r} needs a scenario; use --mock")


def build_gateway(config: EngineConfig, *, scenario: Mapping[str, Any] | str | Path | None = None) -> ModelGateway:
    """Real backends from config, or scripted ones when a scenario is given."""
    if scenario is not None:
        from .scripted import ScriptedBackend, load_scenario

        payload = load_scenario(scenario) if isinstance(scenario, (str, Path)) else dict(scenario)
        brain = ScriptedBackend(payload, "brain") if config.brain.enabled else None
        return ModelGateway(hand=ScriptedBackend(payload, "hand"), brain=brain, generation=config.generation)
    try:
        hand = _real_backend(config.hand, config.generation)
        brain = _real_backend(config.brain, config.generation) if config.brain.enabled else None
    except ValueError as e:
        raise GatewayError(str(e)) from e
    return ModelGateway(hand=hand, brain=brain, generation=config.generation)
