"""SLO-aware per-iteration frequency selection for one phase.

A backlog forces the maximum frequency. Otherwise the controller predicts the
iteration latency at every ladder level and picks the lowest level whose
prediction fits the SLO budget; prefill budgets are reduced by the time the
oldest batched request has already waited.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .core import (
    ContractViolation,
    FrequencyLadder,
    InstanceSnapshot,
    ModelCoverageError,
    PhaseKind,
    SloProfile,
    ValidationError,
)
from .latency_model import ItlModel, TtftModel, predict_itl, predict_ttft


@dataclass(frozen=True)
class ControllerConfig:
    ladder: FrequencyLadder
    slo: SloProfile
    phase: PhaseKind
    control_interval_ms: float = 0.0
    freq_set_overhead_ms: float = 3.0
    blocking_overhead: bool = False

    def __post_init__(self) -> None:
        if self.control_interval_ms < 0:
            raise ValidationError("control_interval_ms must be >= 0")
        if self.freq_set_overhead_ms < 0:
            raise ValidationError("freq_set_overhead_ms must be >= 0")


def slo_budget(cfg: ControllerConfig, snapshot: InstanceSnapshot) -> float:
    if snapshot.phase is not cfg.phase:
        raise ContractViolation(f"{cfg.phase.value} controller given a {snapshot.phase.value} snapshot")
    if cfg.phase is PhaseKind.PREFILL:
        return max(0.0, cfg.slo.ttft_ms - snapshot.max_wait_ms)
    return cfg.slo.itl_ms


def _check_coverage(cfg: ControllerConfig, ttft_model: TtftModel | None, itl_model: ItlModel | None) -> None:
    if cfg.phase is PhaseKind.PREFILL:
        if ttft_model is None:
            raise ModelCoverageError("prefill controller needs a TTFT model")
        missing = [f for f in cfg.ladder if f not in ttft_model.coeffs]
        kind = "TTFT"
    else:
        if itl_model is None:
            raise ModelCoverageError("decode controller needs an ITL model")
        missing = [f for f in cfg.ladder if (f, 0) not in itl_model.coeffs]
        kind = "ITL"
    if missing:
        raise ModelCoverageError(f"{kind} model is not calibrated for ladder levels {missing}")


def predicted_latency(
    cfg: ControllerConfig, snapshot: InstanceSnapshot, f: int, ttft_model: TtftModel | None, itl_model: ItlModel | None
) -> float:
    if cfg.phase is PhaseKind.PREFILL:
        return predict_ttft(ttft_model, f, snapshot.n_bt)
    return predict_itl(itl_model, f, snapshot.n_req, snapshot.n_kv)


def select_frequency(
    cfg: ControllerConfig,
    snapshot: InstanceSnapshot,
    ttft_model: TtftModel | None = None,
    itl_model: ItlModel | None = None,
) -> int:
    _check_coverage(cfg, ttft_model, itl_model)
    budget = slo_budget(cfg, snapshot)
    levels = cfg.ladder.levels
    if snapshot.queue_len > 0:
        return levels[-1]
    if (snapshot.n_bt if cfg.phase is PhaseKind.PREFILL else snapshot.n_req) == 0:
        return levels[0]
    for f in levels:
        if predicted_latency(cfg, snapshot, f, ttft_model, itl_model) <= budget:
            return f
    return levels[-1]


def maybe_select(
    cfg: ControllerConfig,
    now_ms: float,
    last_decision_ms: Optional[float],
    snapshot: InstanceSnapshot,
    ttft_model: TtftModel | None = None,
    itl_model: ItlModel | None = None,
) -> Optional[int]:
    """Window-gated selection; ``None`` means keep the current frequency.

    ``last_decision_ms=None`` marks a controller that has not decided yet.
    """
    if last_decision_ms is not None:
        if now_ms < last_decision_ms:
            raise ContractViolation(f"now_ms={now_ms} precedes last decision at {last_decision_ms}")
        if cfg.control_interval_ms > 0 and now_ms - last_decision_ms < cfg.control_interval_ms:
            return None
    return select_frequency(cfg, snapshot, ttft_model, itl_model)


class FrequencyController:
    """One controller per instance; the only state is the last decision time."""

    def __init__(self, cfg: ControllerConfig, ttft_model: TtftModel | None, itl_model: ItlModel | None):
        _check_coverage(cfg, ttft_model, itl_model)
        self.cfg = cfg
        self.ttft_model = ttft_model
        self.itl_model = itl_model
        self.last_decision_ms: Optional[float] = None

    def select(self, snapshot: InstanceSnapshot) -> int:
        return select_frequency(self.cfg, snapshot, self.ttft_model, self.itl_model)

    def decide(self, now_ms: float, snapshot: InstanceSnapshot) -> Optional[int]:
        f = maybe_select(self.cfg, now_ms, self.last_decision_ms, snapshot, self.ttft_model, self.itl_model)
        if f is not None:
            self.last_decision_ms = now_ms
        return f
