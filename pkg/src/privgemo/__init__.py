"""Privacy-preserving knowledge-graph question answering with a remote and a local model."""

from .config import EngineConfig, PrivacyPolicy, SearchLimits, load_config
from .controller import GateDecision, PrivGemoEngine, gate_brain_usage
from .errors import PrivGemoError
from .gateway import ModelGateway, build_gateway
from .kg_store import KnowledgeGraph, load_graph
from .memory import ExperienceMemory
from .types import AnswerSource, Question, RunResult

__all__ = [
    "AnswerSource",
    "EngineConfig",
    "ExperienceMemory",
    "GateDecision",
    "KnowledgeGraph",
    "ModelGateway",
    "PrivGemoEngine",
    "PrivGemoError",
    "PrivacyPolicy",
    "Question",
    "RunResult",
    "SearchLimits",
    "build_gateway",
    "gate_brain_usage",
    "load_config",
    "load_graph",
]
