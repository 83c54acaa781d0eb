"""Instantaneous GPU power as a function of frequency, phase and load.

Dynamic power grows as ``f ** (1 + alpha)`` and with a saturating
utilization ``load / (load + u_half)``; the total is clipped at TDP. Idle
instances draw ``p_idle`` regardless of the set frequency.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import ContractViolation, PhaseKind, ValidationError


@dataclass(frozen=True)
class PowerParams:
    p_idle: float = 60.0
    tdp: float = 400.0
    alpha: float = 0.5
    phase_scale: dict[PhaseKind, float] = field(
        default_factory=lambda: {PhaseKind.PREFILL: 1.0, PhaseKind.DECODE: 0.7}
    )
    # prefill load is batched tokens, decode load is running requests
    u_half: dict[PhaseKind, float] = field(
        default_factory=lambda: {PhaseKind.PREFILL: 1024.0, PhaseKind.DECODE: 64.0}
    )
    f_ref: int = 1410

    def __post_init__(self) -> None:
        if not 0 < self.p_idle < self.tdp:
            raise ValidationError(f"need 0 < p_idle < tdp, got p_idle={self.p_idle}, tdp={self.tdp}")
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if self.f_ref <= 0:
            raise ValidationError("f_ref must be positive")
        for phase in PhaseKind:
            s = self.phase_scale.get(phase)
            if s is None or not 0 < s <= 1.5:
                raise ValidationError(f"phase_scale[{phase.value}] must be in (0, 1.5], got {s}")
            u = self.u_half.get(phase)
            if u is None or not u > 0:
                raise ValidationError(f"u_half[{phase.value}] must be > 0, got {u}")

    def to_dict(self) -> dict:
        return {
            "p_idle": self.p_idle,
            "tdp": self.tdp,
            "alpha": self.alpha,
            "phase_scale": {p.value: self.phase_scale[p] for p in PhaseKind},
            "u_half": {p.value: self.u_half[p] for p in PhaseKind},
            "f_ref": self.f_ref,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PowerParams":
        return cls(
            p_idle=float(d["p_idle"]),
            tdp=float(d["tdp"]),
            alpha=float(d["alpha"]),
            phase_scale={PhaseKind(k): float(v) for k, v in d["phase_scale"].items()},
            u_half={PhaseKind(k): float(v) for k, v in d["u_half"].items()},
            f_ref=int(d["f_ref"]),
        )


def utilization(params: PowerParams, phase: PhaseKind, load: float) -> float:
    return load / (load + params.u_half[phase])


def busy_power(params: PowerParams, f: int, phase: PhaseKind, load: float) -> float:
    """Power in watts while executing a batch of ``load`` at frequency ``f``."""
    if load < 0:
        raise ContractViolation(f"load must be >= 0, got {load}")
    dynamic = (
        params.phase_scale[phase]
        * utilization(params, phase, load)
        * (params.tdp - params.p_idle)
        * (f / params.f_ref) ** (1.0 + params.alpha)
    )
    return min(params.tdp, params.p_idle + dynamic)


def interval_energy(power_w: float, duration_ms: float) -> float:
    """Joules drawn at ``power_w`` for ``duration_ms``."""
    if duration_ms < 0:
        raise ContractViolation(f"duration must be >= 0, got {duration_ms}")
    return power_w * duration_ms / 1000.0
