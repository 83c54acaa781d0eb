"""Energy-aware frequency control and routing for prefill/decode-disaggregated LLM serving."""

from .core import (
    DEFAULT_LADDER_2L,
    DEFAULT_LADDER_5L,
    FrequencyLadder,
    InstanceSnapshot,
    PhaseKind,
    Request,
    SloProfile,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LADDER_2L",
    "DEFAULT_LADDER_5L",
    "FrequencyLadder",
    "InstanceSnapshot",
    "PhaseKind",
    "Request",
    "SloProfile",
    "__version__",
]
