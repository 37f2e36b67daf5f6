"""Exception hierarchy shared by the engine, gateway and harness."""

from __future__ import annotations


class PrivGemoError(Exception):
    """Base class for every error raised by privgemo."""


class ConfigError(PrivGemoError):
    """Invalid configuration file, key or override."""


class ParseError(PrivGemoError):
    """Malformed line in a graph file."""

    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class UnknownEntity(PrivGemoError, KeyError):
    """Entity id not present in the graph."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown entity"


class NoAlignment(PrivGemoError):
    """Every mention fell below the alignment similarity floor."""


class NoTopicEntities(PrivGemoError):
    """The question produced no usable topic entity."""


class CoarsenError(PrivGemoError, ValueError):
    """Literal could not be parsed for coarsening."""


class BudgetInfeasible(PrivGemoError):
    """Node budget too small to keep the anchors connected."""


class MappingSealed(PrivGemoError):
    """A token was requested from a sealed session mapping."""


class UnknownToken(PrivGemoError, KeyError):
    """Pseudonym token not present in the session mapping."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown token"


class BoundaryViolation(PrivGemoError):
    """A raw label reached the remote channel. Always a bug, never retried."""

    def __init__(self, template_id: str, label: str) -> None:
        super().__init__(f"raw label {label!r} in brain payload for template {template_id!r}")
        self.template_id = template_id
        self.label = label


class LeakageGuardError(PrivGemoError):
    """A raw label was found in an experience template; the write is refused."""


class GatewayError(PrivGemoError):
    """Backend unreachable, timed out or not configured."""


class BrainBudgetExhausted(GatewayError):
    """The per-run cap on remote calls has been reached."""


class MalformedModelOutput(PrivGemoError):
    """A model reply did not match the template's reply contract."""

    def __init__(self, template_id: str, detail: str, raw_text: str = "") -> None:
        super().__init__(f"{template_id}: {detail}")
        self.template_id = template_id
        self.raw_text = raw_text


class MemoryKeyError(PrivGemoError):
    """Memory encryption key file missing or unreadable."""
