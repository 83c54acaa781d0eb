"""Shared domain types and errors.

Units used everywhere: time in milliseconds, power in watts, energy in joules,
frequency in integer MHz, lengths in tokens.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

FrequencyMHz = int

DEFAULT_LADDER_2L: tuple[int, ...] = (1005, 1410)
DEFAULT_LADDER_5L: tuple[int, ...] = (1005, 1095, 1200, 1305, 1410)


class PdsimError(Exception):
    """Base class for all library errors."""


class ValidationError(PdsimError, ValueError):
    """Input data violates a type invariant."""


class ContractViolation(PdsimError, ValueError):
    """A caller broke an operation's precondition."""


class ModelCoverageError(PdsimError, KeyError):
    """A latency model was queried at a frequency it was not calibrated for."""

    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class CalibrationError(PdsimError, ValueError):
    """Profiling data cannot produce a well-posed fit."""


class ScenarioError(PdsimError, RuntimeError):
    """A simulation scenario cannot make progress."""


class ConfigError(PdsimError, ValueError):
    """Configuration file failed validation; message carries the field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class IngestionError(PdsimError, ValueError):
    """A trace or profile file could not be parsed."""


class ExportError(PdsimError, OSError):
    """A report or artifact could not be written."""


class PhaseKind(str, enum.Enum):
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass(frozen=True)
class Request:
    id: int
    arrival_ms: float
    input_len: int
    output_len: int

    def __post_init__(self) -> None:
        if self.arrival_ms < 0:
            raise ValidationError(f"request {self.id}: arrival_ms must be >= 0, got {self.arrival_ms}")
        if self.input_len < 1:
            raise ValidationError(f"request {self.id}: input_len must be >= 1, got {self.input_len}")
        if self.output_len < 1:
            raise ValidationError(f"request {self.id}: output_len must be >= 1, got {self.output_len}")


@dataclass(frozen=True)
class FrequencyLadder:
    levels: tuple[int, ...]

    def __post_init__(self) -> None:
        _check_levels(self.levels)

    @property
    def min(self) -> int:
        return self.levels[0]

    @property
    def max(self) -> int:
        return self.levels[-1]

    def __iter__(self):
        return iter(self.levels)

    def __len__(self) -> int:
        return len(self.levels)

    def __contains__(self, f: object) -> bool:
        return f in self.levels

    def to_list(self) -> list[int]:
        return list(self.levels)


def _check_levels(levels: Sequence[int]) -> None:
    if len(levels) < 2:
        raise ValidationError(f"frequency ladder needs at least 2 levels, got {list(levels)}")
    for f in levels:
        if isinstance(f, bool) or not isinstance(f, int) or f <= 0:
            raise ValidationError(f"frequency levels must be positive integers (MHz), got {f!r}")
    for lo, hi in zip(levels, levels[1:]):
        if hi == lo:
            raise ValidationError(f"duplicate frequency level {lo} in {list(levels)}")
        if hi < lo:
            raise ValidationError(f"frequency ladder must be strictly increasing, {lo} precedes {hi}")


def validate_ladder(levels: Iterable[int]) -> FrequencyLadder:
    """Build a ladder, rejecting empty, single-level, duplicate or unsorted input."""
    return FrequencyLadder(tuple(levels))


@dataclass(frozen=True)
class SloProfile:
    ttft_ms: float
    itl_ms: float

    def __post_init__(self) -> None:
        if not self.ttft_ms > 0 or not self.itl_ms > 0:
            raise ValidationError(f"SLO thresholds must be positive, got {self.ttft_ms}/{self.itl_ms}")


@dataclass(frozen=True)
class InstanceSnapshot:
    """Load metrics the controller and router read from one instance.

    ``max_wait_ms`` is the waiting time of the oldest request in the candidate
    batch; ``queue_len`` counts requests that cannot join the pending batch.
    """

    instance_id: int
    phase: PhaseKind
    queue_len: int
    max_wait_ms: float
    n_req: int
    n_kv: int
    n_bt: int
    current_freq: int

    def __post_init__(self) -> None:
        for name in ("queue_len", "n_req", "n_kv", "n_bt"):
            if getattr(self, name) < 0:
                raise ValidationError(f"snapshot {name} must be >= 0")
        if self.max_wait_ms < 0:
            raise ValidationError("snapshot max_wait_ms must be >= 0")
        if self.phase is PhaseKind.DECODE and self.n_bt != self.n_req:
            raise ValidationError(f"decode snapshot requires n_bt == n_req, got {self.n_bt} != {self.n_req}")


def decode_snapshot(
    instance_id: int, n_req: int, n_kv: int, current_freq: int, queue_len: int = 0
) -> InstanceSnapshot:
    return InstanceSnapshot(
        instance_id=instance_id,
        phase=PhaseKind.DECODE,
        queue_len=queue_len,
        max_wait_ms=0.0,
        n_req=n_req,
        n_kv=n_kv,
        n_bt=n_req,
        current_freq=current_freq,
    )


def prefill_snapshot(
    instance_id: int,
    n_bt: int,
    max_wait_ms: float,
    current_freq: int,
    queue_len: int = 0,
    n_req: int = 1,
) -> InstanceSnapshot:
    return InstanceSnapshot(
        instance_id=instance_id,
        phase=PhaseKind.PREFILL,
        queue_len=queue_len,
        max_wait_ms=max_wait_ms,
        n_req=n_req,
        n_kv=n_bt,
        n_bt=n_bt,
        current_freq=current_freq,
    )
