"""Request routing: round-robin for prefill, state-space what-if for decode.

For each decode instance the router asks the frequency controller which
level it would pick now and after hypothetically admitting the request. An
instance "crosses" when that choice would rise. Instances that stay put are
preferred unless the gap to the best crossing instance exceeds ``delta_mhz``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .core import ConfigError, ContractViolation, InstanceSnapshot, PhaseKind, Request, ValidationError
from .freq_controller import ControllerConfig, select_frequency
from .latency_model import ItlModel


class RoutePolicy(str, enum.Enum):
    ECOROUTE = "ecoroute"
    ROUND_ROBIN = "round_robin"


@dataclass(frozen=True)
class RouteConfig:
    policy: RoutePolicy = RoutePolicy.ECOROUTE
    # None means unbounded: always prefer an instance whose frequency is unchanged
    delta_mhz: Optional[float] = 150.0

    def __post_init__(self) -> None:
        if self.delta_mhz is not None and self.delta_mhz < 0:
            raise ValidationError(f"delta_mhz must be >= 0 or unbounded, got {self.delta_mhz}")


@dataclass
class RouterState:
    rr_cursor: int = 0


@dataclass(frozen=True)
class WhatIfResult:
    instance_id: int
    f_now: int
    f_after: int

    @property
    def crossed(self) -> bool:
        return self.f_after > self.f_now


class DecodeCase(enum.IntEnum):
    """Which branch of the decode routing rule fired."""

    UNIQUE_LOW = 1
    TIE_ROUND_ROBIN = 2
    AVOID_RAISE = 3
    IMBALANCE_GUARD = 4
    ALL_CROSS = 5
    ROUND_ROBIN_POLICY = 0


def route_prefill(state: RouterState, n_instances: int) -> int:
    if n_instances < 1:
        raise ConfigError("cluster.n_prefill", "need at least one prefill instance")
    chosen = state.rr_cursor % n_instances
    state.rr_cursor = (chosen + 1) % n_instances
    return chosen


def whatif(
    snapshot: InstanceSnapshot, request: Request, controller: ControllerConfig, itl_model: ItlModel
) -> WhatIfResult:
    if snapshot.phase is not PhaseKind.DECODE:
        raise ContractViolation("what-if analysis applies to decode snapshots only")
    f_now = select_frequency(controller, snapshot, None, itl_model)
    n_req = snapshot.n_req + 1
    after = replace(snapshot, n_req=n_req, n_bt=n_req, n_kv=snapshot.n_kv + request.input_len + 1)
    f_after = select_frequency(controller, after, None, itl_model)
    return WhatIfResult(snapshot.instance_id, f_now, f_after)


def _round_robin_pick(state: RouterState, candidates: Sequence[int], n: int) -> int:
    """First candidate position at or after the cursor, cyclically."""
    cursor = state.rr_cursor % n
    chosen = min(candidates, key=lambda pos: (pos - cursor) % n)
    state.rr_cursor = (chosen + 1) % n
    return chosen


def _argmin(values: Sequence[int], positions: Sequence[int]) -> list[int]:
    best = min(values[p] for p in positions)
    return [p for p in positions if values[p] == best]


def decode_choice(
    state: RouterState, cfg: RouteConfig, results: Sequence[WhatIfResult]
) -> tuple[int, DecodeCase]:
    """Pick a position in ``results`` and report the case that decided it."""
    n = len(results)
    if n == 0:
        raise ConfigError("cluster.n_decode", "need at least one decode instance")
    if cfg.policy is RoutePolicy.ROUND_ROBIN:
        chosen = state.rr_cursor % n
        state.rr_cursor = (chosen + 1) % n
        return chosen, DecodeCase.ROUND_ROBIN_POLICY

    f_now = [r.f_now for r in results]
    f_after = [r.f_after for r in results]
    stay = [i for i, r in enumerate(results) if not r.crossed]
    cross = [i for i, r in enumerate(results) if r.crossed]
    everyone = list(range(n))

    if not cross:
        candidates = _argmin(f_now, stay)
        case = DecodeCase.UNIQUE_LOW if len(candidates) == 1 else DecodeCase.TIE_ROUND_ROBIN
    elif stay:
        gap = min(f_now[i] for i in stay) - min(f_after[i] for i in cross)
        if cfg.delta_mhz is None or gap <= cfg.delta_mhz:
            candidates, case = _argmin(f_now, stay), DecodeCase.AVOID_RAISE
        else:
            candidates, case = _argmin(f_now, everyone), DecodeCase.IMBALANCE_GUARD
    else:
        candidates, case = _argmin(f_after, everyone), DecodeCase.ALL_CROSS
    return _round_robin_pick(state, candidates, n), case


def route_decode(
    state: RouterState,
    cfg: RouteConfig,
    snapshots: Sequence[InstanceSnapshot],
    request: Request,
    controller: ControllerConfig,
    itl_model: ItlModel,
) -> int:
    """Return the ``instance_id`` of the decode instance that takes ``request``."""
    if not snapshots:
        raise ConfigError("cluster.n_decode", "need at least one decode instance")
    if cfg.policy is RoutePolicy.ROUND_ROBIN:
        pos, _ = decode_choice(state, cfg, [WhatIfResult(s.instance_id, 0, 0) for s in snapshots])
    else:
        results = [whatif(s, request, controller, itl_model) for s in snapshots]
        pos, _ = decode_choice(state, cfg, results)
    return snapshots[pos].instance_id
