"""SLO attainment, energy and throughput summaries of a simulation, plus export."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ExportError, PhaseKind, SloProfile
from .simulator import RequestRecord, SimResult

TIMESERIES_HEADER = ("time_ms", "instance", "phase", "freq_mhz", "n_req", "n_kv", "power_w")
PERCENTILES = (50, 90, 99)


class ItlMode(str, enum.Enum):
    """How a request's inter-token latencies are reduced to one value for ISAR."""

    MEAN = "mean"
    MAX = "max"
    P99 = "p99"


@dataclass
class MetricsReport:
    tsar: float
    isar: float
    request_count: int
    output_tokens: int
    horizon_ms: float
    throughput_tps: float
    energy_j: float
    energy_by_phase_j: dict[str, float]
    energy_by_instance_j: dict[str, float]
    ttft_percentiles_ms: dict[str, float]
    itl_percentiles_ms: dict[str, float]
    itl_mode: str = ItlMode.MEAN.value
    predictor_mae_ms: Optional[dict[str, float]] = None
    # (time_ms, instance, phase, freq_mhz, n_req, n_kv, power_w), one row per timeline segment
    time_series: list[list] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("time_series")
        return d


def request_itl(rec: RequestRecord, mode: ItlMode = ItlMode.MEAN) -> Optional[float]:
    """Per-request ITL aggregate; ``None`` for single-token requests."""
    gaps = rec.itls_ms
    if gaps.size == 0:
        return None
    if mode is ItlMode.MEAN:
        return float(gaps.mean())
    if mode is ItlMode.MAX:
        return float(gaps.max())
    return float(np.percentile(gaps, 99))


def ttft_met(records: Iterable[RequestRecord], slo: SloProfile) -> np.ndarray:
    return np.array([r.ttft_ms <= slo.ttft_ms for r in records], dtype=bool)


def itl_met(records: Iterable[RequestRecord], slo: SloProfile, mode: ItlMode = ItlMode.MEAN) -> np.ndarray:
    # a request with no inter-token gaps cannot violate the ITL objective
    out = []
    for r in records:
        v = request_itl(r, mode)
        out.append(v is None or v <= slo.itl_ms)
    return np.array(out, dtype=bool)


def _percentiles(values: np.ndarray) -> dict[str, float]:
    if values.size == 0:
        return {"mean": 0.0, **{f"p{p}": 0.0 for p in PERCENTILES}}
    return {"mean": float(values.mean()), **{f"p{p}": float(np.percentile(values, p)) for p in PERCENTILES}}


def _mae(pairs: np.ndarray) -> float:
    return float(np.abs(pairs[:, 1] - pairs[:, 0]).mean()) if pairs.size else 0.0


def compute_report(
    result: SimResult,
    slo: SloProfile,
    itl_mode: ItlMode = ItlMode.MEAN,
    horizon_ms: Optional[float] = None,
) -> MetricsReport:
    """Summarize ``result``.

    ``horizon_ms`` beyond the simulated horizon extends every instance with
    idle time, so runs of different length can be compared on equal footing.
    """
    horizon = result.horizon_ms if horizon_ms is None else max(horizon_ms, result.horizon_ms)
    pad_ms = horizon - result.horizon_ms
    pad_j = result.p_idle_w * pad_ms / 1000.0

    by_instance = {t.label: t.energy_j + pad_j for t in result.instances}
    by_phase = {
        phase.value: sum(by_instance[t.label] for t in result.phase_instances(phase)) for phase in PhaseKind
    }
    recs = result.requests
    n = len(recs)
    tokens = int(sum(r.token_times_ms.size for r in recs))
    ttfts = np.array([r.ttft_ms for r in recs], dtype=float)
    itls = np.concatenate([r.itls_ms for r in recs]) if recs else np.empty(0)

    mae = None
    if result.ttft_prediction_pairs.size or result.itl_prediction_pairs.size:
        mae = {"ttft": _mae(result.ttft_prediction_pairs), "itl": _mae(result.itl_prediction_pairs)}

    rows = []
    for t in result.instances:
        for s in t.segments:
            rows.append([s.start_ms, t.index, t.phase.value, s.freq_mhz, s.n_req, s.n_kv, s.power_w])
        if pad_ms > 0:
            last = t.segments[-1].freq_mhz if t.segments else 0
            rows.append([result.horizon_ms, t.index, t.phase.value, last, 0, 0, result.p_idle_w])

    return MetricsReport(
        tsar=float(ttft_met(recs, slo).mean()) if n else 1.0,
        isar=float(itl_met(recs, slo, itl_mode).mean()) if n else 1.0,
        request_count=n,
        output_tokens=tokens,
        horizon_ms=horizon,
        throughput_tps=tokens / (horizon / 1000.0) if horizon > 0 else 0.0,
        energy_j=sum(by_instance.values()),
        energy_by_phase_j=by_phase,
        energy_by_instance_j=by_instance,
        ttft_percentiles_ms=_percentiles(ttfts),
        itl_percentiles_ms=_percentiles(itls),
        itl_mode=itl_mode.value,
        predictor_mae_ms=mae,
        time_series=rows,
    )


# --------------------------------------------------------- scenario probes


def window_attainment(
    result: SimResult, slo: SloProfile, windows: Sequence[tuple[float, float]]
) -> float:
    """TSAR over requests arriving inside any of ``windows`` (half-open)."""
    recs = [r for r in result.requests if any(a <= r.arrival_ms < b for a, b in windows)]
    return float(ttft_met(recs, slo).mean()) if recs else 1.0


def high_freq_fraction(result: SimResult, phase: PhaseKind, start_ms: float, end_ms: float, low_mhz: int) -> float:
    """Share of instance-time in [start, end) spent executing above ``low_mhz``."""
    total = high = 0.0
    for t in result.phase_instances(phase):
        for s in t.segments:
            lo, hi = max(start_ms, s.start_ms), min(end_ms, s.end_ms)
            if hi > lo:
                total += hi - lo
                if s.busy and s.freq_mhz > low_mhz:
                    high += hi - lo
    return high / total if total > 0 else 0.0


def boundary_fraction(result: SimResult, threshold: int) -> float:
    """Share of decode-busy time during which some decode instance has n_req <= threshold.

    Decode-busy means at least one decode instance is executing; an idle
    instance counts as holding zero requests.
    """
    traces = result.phase_instances(PhaseKind.DECODE)
    cuts = sorted({x for t in traces for s in t.segments for x in (s.start_ms, s.end_ms)})
    cursor = [0] * len(traces)
    good = busy_time = 0.0
    for a, b in zip(cuts, cuts[1:]):
        loads, busy = [], False
        for i, t in enumerate(traces):
            segs = t.segments
            while cursor[i] < len(segs) and segs[cursor[i]].end_ms <= a:
                cursor[i] += 1
            if cursor[i] < len(segs):
                s = segs[cursor[i]]
                loads.append(s.n_req if s.busy else 0)
                busy |= s.busy
            else:
                loads.append(0)
        if busy:
            busy_time += b - a
            if min(loads) <= threshold:
                good += b - a
    return good / busy_time if busy_time > 0 else 1.0


# ------------------------------------------------------------------ export


def to_json(report: MetricsReport) -> str:
    return json.dumps(asdict(report), indent=2) + "\n"


def from_json(text: str) -> MetricsReport:
    return MetricsReport(**json.loads(text))


def to_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMESERIES_HEADER)
    w.writerows(report.time_series)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ExportError(f"{path}: cannot write ({exc.strerror})") from exc


def export(report: MetricsReport, out_dir: str | Path, stem: str = "report") -> list[Path]:
    """Write ``<stem>.json`` and ``<stem>_timeseries.csv`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"{out}: cannot create directory ({exc.strerror})") from exc
    json_path, csv_path = out / f"{stem}.json", out / f"{stem}_timeseries.csv"
    _write(json_path, to_json(report))
    _write(csv_path, to_csv(report))
    return [json_path, csv_path]
