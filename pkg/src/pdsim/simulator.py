"""Deterministic discrete-event simulation of a prefill/decode-disaggregated cluster.

Requests arrive at prefill instances (round-robin), are batched FCFS under a
token budget, and produce their first token when the prefill batch ends. The
router then hands each request to a decode instance, which admits it at the
next iteration boundary once its KV footprint fits and runs continuous
batching until the request's output is complete. Each instance integrates
power over a gap-free timeline of busy and idle segments.
"""

from __future__ import annotations

import enum
import heapq
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calibration import Calibration
from .core import (
    ContractViolation,
    PhaseKind,
    Request,
    ScenarioError,
    ValidationError,
    decode_snapshot,
    prefill_snapshot,
)
from .freq_controller import ControllerConfig, FrequencyController
from .latency_model import predict_itl, predict_ttft
from .power_model import busy_power, interval_energy
from .router import DecodeCase, RouteConfig, RouterState, WhatIfResult, decode_choice, route_prefill, whatif


@dataclass(frozen=True)
class ClusterConfig:
    n_prefill: int = 2
    n_decode: int = 2
    max_batch_tokens: int = 8192
    kv_capacity_tokens: int = 400_000
    kv_transfer_ms: float = 0.0
    exec_noise_sigma: float = 0.0
    seed: int = 0
    # extend every instance's timeline with idle time up to this point
    horizon_ms: Optional[float] = None

    def __post_init__(self) -> None:
        if self.n_prefill < 1 or self.n_decode < 1:
            raise ValidationError("cluster needs at least one prefill and one decode instance")
        if self.max_batch_tokens <= 0 or self.kv_capacity_tokens <= 0:
            raise ValidationError("batch and KV budgets must be > 0")
        if self.kv_transfer_ms < 0 or self.exec_noise_sigma < 0:
            raise ValidationError("kv_transfer_ms and exec_noise_sigma must be >= 0")


class EventKind(enum.IntEnum):
    # value order is the tie-break order for simultaneous events
    ARRIVAL = 0
    KV_TRANSFER_DONE = 1
    PREFILL_DONE = 2
    DECODE_ITER_DONE = 3
    FREQ_APPLIED = 4


@dataclass
class Segment:
    start_ms: float
    end_ms: float
    power_w: float
    freq_mhz: int
    n_req: int
    n_kv: int
    busy: bool

    @property
    def energy_j(self) -> float:
        return interval_energy(self.power_w, self.end_ms - self.start_ms)


@dataclass
class InstanceTrace:
    phase: PhaseKind
    index: int
    segments: list[Segment] = field(default_factory=list)
    iterations: int = 0
    freq_changes: int = 0

    @property
    def energy_j(self) -> float:
        return sum(s.energy_j for s in self.segments)

    @property
    def label(self) -> str:
        return f"{self.phase.value[0].upper()}{self.index}"


@dataclass
class RequestRecord:
    id: int
    arrival_ms: float
    input_len: int
    output_len: int
    prefill_instance: int = -1
    decode_instance: int = -1
    prefill_start_ms: float = float("nan")
    prefill_end_ms: float = float("nan")
    # decode iteration index (on decode_instance) at which the request was admitted
    decode_start_iter: int = -1
    token_times_ms: np.ndarray = field(default_factory=lambda: np.empty(0))

    @property
    def ttft_ms(self) -> float:
        return self.prefill_end_ms - self.arrival_ms

    @property
    def itls_ms(self) -> np.ndarray:
        return np.diff(self.token_times_ms)


@dataclass
class SimResult:
    requests: list[RequestRecord]
    instances: list[InstanceTrace]
    horizon_ms: float
    p_idle_w: float
    energy_j: float
    ttft_prediction_pairs: np.ndarray
    itl_prediction_pairs: np.ndarray
    event_counts: dict[str, int]
    route_cases: dict[str, int]

    def phase_instances(self, phase: PhaseKind) -> list[InstanceTrace]:
        return [t for t in self.instances if t.phase is phase]

    def phase_energy_j(self, phase: PhaseKind) -> float:
        return sum(t.energy_j for t in self.phase_instances(phase))


# ---------------------------------------------------------------- instances


class _Instance:
    def __init__(self, phase: PhaseKind, index: int, freq: int, controller: Optional[FrequencyController], rng):
        self.trace = InstanceTrace(phase, index)
        self.index = index
        self.freq = freq
        self.controller = controller
        self.rng = rng
        self.busy = False
        self.idle_since = 0.0

    def open_busy(self, now: float, p_idle: float) -> None:
        if now > self.idle_since:
            self.trace.segments.append(Segment(self.idle_since, now, p_idle, self.freq, 0, 0, False))
        self.busy = True

    def close_busy(self, now: float) -> None:
        self.busy = False
        self.idle_since = now

    def noise(self, sigma: float) -> float:
        return float(self.rng.lognormal(0.0, sigma)) if sigma > 0 else 1.0


class _Prefill(_Instance):
    def __init__(self, *args):
        super().__init__(*args)
        self.queue: deque[int] = deque()
        self.batch: list[int] = []
        self.batch_tokens = 0


class _Decode(_Instance):
    def __init__(self, *args):
        super().__init__(*args)
        self.pending: deque[tuple[float, int]] = deque()  # (ready_ms, rid), FCFS
        self.k = 0  # completed iterations
        self.iter_end_ms: list[float] = []
        self.n_req = 0
        self.base_kv = 0  # sum of (input_len + 1) over running requests
        self.start_sum = 0  # sum of admission iteration index over running requests
        self.reserved = 0  # sum of final KV footprints over running requests
        self.finish: list[tuple[int, int]] = []  # heap of (finish iteration, rid)
        self.exec_n = 0

    @property
    def n_kv(self) -> int:
        return self.base_kv + self.n_req * self.k - self.start_sum


def form_prefill_batch(queue: deque, input_len: Sequence[int] | dict, max_batch_tokens: int) -> tuple[list[int], int]:
    """Pop requests FCFS while the batch stays within ``max_batch_tokens``.

    The head request is always taken, so an oversize request runs alone.
    """
    if not queue:
        raise ContractViolation("cannot form a prefill batch from an empty queue")
    batch = [queue.popleft()]
    n_bt = input_len[batch[0]]
    while queue and n_bt + input_len[queue[0]] <= max_batch_tokens:
        rid = queue.popleft()
        batch.append(rid)
        n_bt += input_len[rid]
    return batch, n_bt


# --------------------------------------------------------------- simulation


class Simulation:
    def __init__(
        self,
        cluster: ClusterConfig,
        workload: Sequence[Request],
        prefill_ctrl: ControllerConfig,
        decode_ctrl: ControllerConfig,
        route: RouteConfig,
        calibration: Calibration,
        static_freq: Optional[int] = None,
    ):
        if prefill_ctrl.phase is not PhaseKind.PREFILL or decode_ctrl.phase is not PhaseKind.DECODE:
            raise ValidationError("controller configs must be (prefill, decode)")
        for ctrl in (prefill_ctrl, decode_ctrl):
            missing = calibration.covers(ctrl.ladder)
            if missing:
                raise ValidationError(f"calibration does not cover ladder levels {missing}")
            if static_freq is not None and static_freq not in ctrl.ladder:
                raise ValidationError(f"static frequency {static_freq} MHz is not on the ladder {ctrl.ladder.to_list()}")
        if any(b.arrival_ms < a.arrival_ms for a, b in zip(workload, workload[1:])):
            raise ContractViolation("workload must be sorted by arrival time")
        for r in workload:
            if r.input_len + r.output_len > cluster.kv_capacity_tokens:
                raise ScenarioError(
                    f"request {r.id} needs {r.input_len + r.output_len} KV tokens, "
                    f"more than the per-instance capacity {cluster.kv_capacity_tokens}"
                )

        self.cluster = cluster
        self.cal = calibration
        self.power = calibration.power
        self.prefill_ctrl = prefill_ctrl
        self.decode_ctrl = decode_ctrl
        self.route = route
        self.static_freq = static_freq
        self.requests = list(workload)
        self.records = [RequestRecord(r.id, r.arrival_ms, r.input_len, r.output_len) for r in self.requests]
        self.in_len = [r.input_len for r in self.requests]
        self.out_len = [r.output_len for r in self.requests]
        self.decode_start_k = [0] * len(self.requests)

        seeds = np.random.SeedSequence(cluster.seed).spawn(cluster.n_prefill + cluster.n_decode)
        self.prefill = [
            _Prefill(PhaseKind.PREFILL, i, self._initial_freq(prefill_ctrl), self._controller(prefill_ctrl),
                     np.random.default_rng(seeds[i]))
            for i in range(cluster.n_prefill)
        ]
        self.decode = [
            _Decode(PhaseKind.DECODE, i, self._initial_freq(decode_ctrl), self._controller(decode_ctrl),
                    np.random.default_rng(seeds[cluster.n_prefill + i]))
            for i in range(cluster.n_decode)
        ]
        self.prefill_router = RouterState()
        self.decode_router = RouterState()
        self.events: list = []
        self._seq = 0
        self.now = 0.0
        self.event_counts: Counter = Counter()
        self.route_cases: Counter = Counter()
        self.ttft_pairs: list[tuple[float, float]] = []
        self.itl_pairs: list[tuple[float, float]] = []

    def _initial_freq(self, ctrl: ControllerConfig) -> int:
        return self.static_freq if self.static_freq is not None else ctrl.ladder.max

    def _controller(self, ctrl: ControllerConfig) -> Optional[FrequencyController]:
        if self.static_freq is not None:
            return None
        return FrequencyController(ctrl, self.cal.ttft, self.cal.itl)

    def _push(self, time: float, kind: EventKind, ident: int, payload=None) -> None:
        heapq.heappush(self.events, (time, int(kind), ident, self._seq, payload))
        self._seq += 1

    # ----------------------------------------------------------- main loop

    def run(self) -> SimResult:
        for idx, r in enumerate(self.requests):
            self._push(r.arrival_ms, EventKind.ARRIVAL, r.id, idx)
        handlers = {
            EventKind.ARRIVAL: self._on_arrival,
            EventKind.KV_TRANSFER_DONE: self._on_kv_transfer,
            EventKind.PREFILL_DONE: self._on_prefill_done,
            EventKind.DECODE_ITER_DONE: self._on_decode_done,
            EventKind.FREQ_APPLIED: self._on_freq_applied,
        }
        while self.events:
            time, kind, ident, _, payload = heapq.heappop(self.events)
            self.now = time
            kind = EventKind(kind)
            self.event_counts[kind.name] += 1
            handlers[kind](ident, payload)
            # start new work only after every event stamped with this time has landed
            if not self.events or self.events[0][0] > time:
                self._dispatch()
        return self._finish()

    def _dispatch(self) -> None:
        for inst in self.prefill:
            if not inst.busy and inst.queue:
                self._start_prefill(inst)
        for inst in self.decode:
            if not inst.busy and (inst.n_req or (inst.pending and inst.pending[0][0] <= self.now)):
                self._start_decode(inst)

    # ------------------------------------------------------------ handlers

    def _on_arrival(self, rid: int, idx: int) -> None:
        p = route_prefill(self.prefill_router, len(self.prefill))
        self.records[idx].prefill_instance = p
        self.prefill[p].queue.append(idx)

    def _on_kv_transfer(self, d: int, payload) -> None:
        pass  # the request is already in the pending queue; _dispatch picks it up

    def _choose_frequency(self, inst: _Instance, snapshot) -> int:
        if inst.controller is None:
            return inst.freq
        f = inst.controller.decide(self.now, snapshot)
        return inst.freq if f is None else f

    def _apply(self, inst: _Instance, new_freq: int, ctrl: ControllerConfig, kind_payload) -> bool:
        """Set the frequency; return True if execution waits for a blocking change."""
        if new_freq not in ctrl.ladder:
            raise ContractViolation(f"frequency {new_freq} MHz is not on the ladder")
        changed = new_freq != inst.freq
        inst.freq = new_freq
        if changed:
            inst.trace.freq_changes += 1
        if changed and ctrl.blocking_overhead and ctrl.freq_set_overhead_ms > 0:
            stall_end = self.now + ctrl.freq_set_overhead_ms
            inst.trace.segments.append(Segment(self.now, stall_end, self.power.p_idle, new_freq, 0, 0, True))
            self._push(stall_end, EventKind.FREQ_APPLIED, kind_payload[0], kind_payload)
            return True
        return False

    def _on_freq_applied(self, ident: int, payload) -> None:
        phase, idx = payload[1], payload[2]
        if phase is PhaseKind.PREFILL:
            self._exec_prefill(self.prefill[idx])
        else:
            self._exec_decode(self.decode[idx])

    # ------------------------------------------------------------- prefill

    def _start_prefill(self, inst: _Prefill) -> None:
        inst.open_busy(self.now, self.power.p_idle)
        batch, n_bt = form_prefill_batch(inst.queue, self.in_len, self.cluster.max_batch_tokens)
        inst.batch, inst.batch_tokens = batch, n_bt
        oldest_wait = self.now - self.records[batch[0]].arrival_ms
        snap = prefill_snapshot(inst.index, n_bt, oldest_wait, inst.freq, queue_len=len(inst.queue), n_req=len(batch))
        f = self._choose_frequency(inst, snap)
        if not self._apply(inst, f, self.prefill_ctrl, (inst.index, PhaseKind.PREFILL, inst.index)):
            self._exec_prefill(inst)

    def _exec_prefill(self, inst: _Prefill) -> None:
        predicted = predict_ttft(self.cal.ttft, inst.freq, inst.batch_tokens)
        duration = predicted * inst.noise(self.cluster.exec_noise_sigma)
        if self.cluster.exec_noise_sigma > 0:
            self.ttft_pairs.append((predicted, duration))
        power = busy_power(self.power, inst.freq, PhaseKind.PREFILL, inst.batch_tokens)
        end = self.now + duration
        inst.trace.segments.append(Segment(self.now, end, power, inst.freq, len(inst.batch), inst.batch_tokens, True))
        inst.trace.iterations += 1
        for idx in inst.batch:
            self.records[idx].prefill_start_ms = self.now
        self._push(end, EventKind.PREFILL_DONE, inst.index, inst.index)

    def _on_prefill_done(self, ident: int, p: int) -> None:
        inst = self.prefill[p]
        batch, inst.batch = inst.batch, []
        inst.close_busy(self.now)
        ready = self.now + self.cluster.kv_transfer_ms
        for idx in batch:
            rec = self.records[idx]
            rec.prefill_end_ms = self.now
            d = self._route_decode(idx)
            rec.decode_instance = d
            self.decode[d].pending.append((ready, idx))
        if self.cluster.kv_transfer_ms > 0:
            for d in sorted({self.records[idx].decode_instance for idx in batch}):
                self._push(ready, EventKind.KV_TRANSFER_DONE, d, None)

    # -------------------------------------------------------------- decode

    def decode_projection(self, inst: _Decode) -> tuple[int, int, int]:
        """(n_req, n_kv, queue_len) once every pending request that fits is admitted."""
        n_req, n_kv, reserved = inst.n_req, inst.n_kv, inst.reserved
        cap = self.cluster.kv_capacity_tokens
        fitted = 0
        for _, idx in inst.pending:
            need = self.in_len[idx] + self.out_len[idx]
            if reserved + need > cap:
                break
            reserved += need
            fitted += 1
            if self.out_len[idx] > 1:
                n_req += 1
                n_kv += self.in_len[idx] + 1
        return n_req, n_kv, len(inst.pending) - fitted

    def _route_decode(self, idx: int) -> int:
        req = self.requests[idx]
        snaps = []
        for inst in self.decode:
            n_req, n_kv, queue = self.decode_projection(inst)
            snaps.append(decode_snapshot(inst.index, n_req, n_kv, inst.freq, queue_len=queue))
        if len(snaps) == 1:
            return 0
        if self.route.policy.value == "round_robin":
            results = [WhatIfResult(s.instance_id, 0, 0) for s in snaps]
        else:
            results = [whatif(s, req, self.decode_ctrl, self.cal.itl) for s in snaps]
        pos, case = decode_choice(self.decode_router, self.route, results)
        self.route_cases[case.name] += 1
        return snaps[pos].instance_id

    def _admit(self, inst: _Decode) -> None:
        cap = self.cluster.kv_capacity_tokens
        while inst.pending and inst.pending[0][0] <= self.now:
            idx = inst.pending[0][1]
            need = self.in_len[idx] + self.out_len[idx]
            if inst.reserved + need > cap:
                break
            inst.pending.popleft()
            remaining = self.out_len[idx] - 1
            self.decode_start_k[idx] = inst.k
            if remaining == 0:
                continue  # the prefill already produced the only token
            inst.reserved += need
            inst.n_req += 1
            inst.base_kv += self.in_len[idx] + 1
            inst.start_sum += inst.k
            heapq.heappush(inst.finish, (inst.k + remaining, idx))

    def _start_decode(self, inst: _Decode) -> None:
        self._admit(inst)
        if inst.n_req == 0:
            return
        inst.open_busy(self.now, self.power.p_idle)
        blocked = len(inst.pending)
        snap = decode_snapshot(inst.index, inst.n_req, inst.n_kv, inst.freq, queue_len=blocked)
        f = self._choose_frequency(inst, snap)
        if not self._apply(inst, f, self.decode_ctrl, (inst.index, PhaseKind.DECODE, inst.index)):
            self._exec_decode(inst)

    def _exec_decode(self, inst: _Decode) -> None:
        n_req, n_kv = inst.n_req, inst.n_kv
        predicted = predict_itl(self.cal.itl, inst.freq, n_req, n_kv)
        duration = predicted * inst.noise(self.cluster.exec_noise_sigma)
        if self.cluster.exec_noise_sigma > 0:
            self.itl_pairs.append((predicted, duration))
        power = busy_power(self.power, inst.freq, PhaseKind.DECODE, n_req)
        end = self.now + duration
        inst.trace.segments.append(Segment(self.now, end, power, inst.freq, n_req, n_kv, True))
        inst.trace.iterations += 1
        self._push(end, EventKind.DECODE_ITER_DONE, inst.index, inst.index)

    def _on_decode_done(self, ident: int, d: int) -> None:
        inst = self.decode[d]
        inst.k += 1
        inst.iter_end_ms.append(self.now)
        while inst.finish and inst.finish[0][0] == inst.k:
            _, idx = heapq.heappop(inst.finish)
            inst.n_req -= 1
            inst.base_kv -= self.in_len[idx] + 1
            inst.start_sum -= self.decode_start_k[idx]
            inst.reserved -= self.in_len[idx] + self.out_len[idx]
        inst.close_busy(self.now)

    # -------------------------------------------------------------- finish

    def _finish(self) -> SimResult:
        end = self.now
        if self.cluster.horizon_ms is not None:
            end = max(end, self.cluster.horizon_ms)
        for inst in [*self.prefill, *self.decode]:
            if end > inst.idle_since:
                inst.trace.segments.append(Segment(inst.idle_since, end, self.power.p_idle, inst.freq, 0, 0, False))
        for idx, rec in enumerate(self.records):
            m = rec.output_len - 1
            tokens = [rec.prefill_end_ms]
            if m > 0:
                k0 = self.decode_start_k[idx]
                tokens.extend(self.decode[rec.decode_instance].iter_end_ms[k0 : k0 + m])
            rec.token_times_ms = np.asarray(tokens, dtype=float)
            rec.decode_start_iter = self.decode_start_k[idx]
        instances = [inst.trace for inst in [*self.prefill, *self.decode]]
        return SimResult(
            requests=self.records,
            instances=instances,
            horizon_ms=end,
            p_idle_w=self.power.p_idle,
            energy_j=sum(t.energy_j for t in instances),
            ttft_prediction_pairs=np.asarray(self.ttft_pairs, dtype=float).reshape(-1, 2),
            itl_prediction_pairs=np.asarray(self.itl_pairs, dtype=float).reshape(-1, 2),
            event_counts={k.name: self.event_counts.get(k.name, 0) for k in EventKind},
            route_cases={c.name: self.route_cases.get(c.name, 0) for c in DecodeCase},
        )


def run(
    cluster: ClusterConfig,
    workload: Sequence[Request],
    prefill_ctrl: ControllerConfig,
    decode_ctrl: ControllerConfig,
    route: RouteConfig,
    calibration: Calibration,
    static_freq: Optional[int] = None,
) -> SimResult:
    """Simulate ``workload`` to quiescence.

    ``static_freq`` pins every instance to one ladder level and disables the
    frequency controllers (the fixed-frequency baseline).
    """
    return Simulation(cluster, workload, prefill_ctrl, decode_ctrl, route, calibration, static_freq).run()
