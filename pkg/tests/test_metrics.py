import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdsim import metrics
from pdsim.calibration import default_calibration
from pdsim.core import ExportError, PhaseKind, Request, SloProfile, validate_ladder
from pdsim.freq_controller import ControllerConfig
from pdsim.metrics import ItlMode, compute_report
from pdsim.router import RouteConfig
from pdsim.simulator import ClusterConfig, InstanceTrace, RequestRecord, Segment, SimResult, run

CAL = default_calibration()
SLO = SloProfile(600, 60)
LADDER = validate_ladder([1005, 1410])


def record(rid, arrival, ttft, gaps=()):
    end = arrival + ttft
    tokens = np.concatenate([[end], end + np.cumsum(gaps)]) if len(gaps) else np.array([end])
    return RequestRecord(rid, arrival, 10, len(tokens), 0, 0, arrival, end, 0, tokens)


def hand_result(records, instances=()):
    return SimResult(
        requests=list(records),
        instances=list(instances),
        horizon_ms=1000.0,
        p_idle_w=60.0,
        energy_j=sum(t.energy_j for t in instances),
        ttft_prediction_pairs=np.empty((0, 2)),
        itl_prediction_pairs=np.empty((0, 2)),
        event_counts={},
        route_cases={},
    )


@pytest.fixture(scope="module")
def simulated():
    rng = np.random.default_rng(0)
    arrivals = np.sort(rng.uniform(0, 10000, size=150))
    wl = [Request(i, float(a), int(rng.integers(20, 3000)), int(rng.integers(1, 200))) for i, a in enumerate(arrivals)]
    pre = ControllerConfig(LADDER, SLO, PhaseKind.PREFILL)
    dec = ControllerConfig(LADDER, SLO, PhaseKind.DECODE)
    return run(ClusterConfig(exec_noise_sigma=0.05), wl, pre, dec, RouteConfig(), CAL)


def test_three_of_four_meet_ttft():
    recs = [record(0, 0, 100), record(1, 0, 599), record(2, 0, 600), record(3, 0, 601)]
    assert compute_report(hand_result(recs), SLO).tsar == 0.75


def test_all_meet():
    recs = [record(i, 10 * i, 50, gaps=[20, 30]) for i in range(5)]
    rep = compute_report(hand_result(recs), SLO)
    assert (rep.tsar, rep.isar) == (1.0, 1.0)


def test_itl_modes():
    # gaps 10, 10, ..., 10, 200: mean 29, max 200
    rec = record(0, 0, 10, gaps=[10] * 9 + [200])
    res = hand_result([rec])
    assert compute_report(res, SLO, ItlMode.MEAN).isar == 1.0
    assert compute_report(res, SLO, ItlMode.MAX).isar == 0.0
    assert compute_report(res, SLO, ItlMode.P99).isar == 0.0
    assert metrics.request_itl(rec, ItlMode.P99) == pytest.approx(np.percentile([10] * 9 + [200], 99))


def test_single_token_request_meets_itl():
    assert compute_report(hand_result([record(0, 0, 10)]), SLO).isar == 1.0


def test_energy_matches_simulator(simulated):
    rep = compute_report(simulated, SLO)
    assert rep.energy_j == pytest.approx(simulated.energy_j, rel=1e-12)
    assert rep.energy_j == pytest.approx(sum(rep.energy_by_instance_j.values()), rel=1e-12)
    assert rep.energy_j == pytest.approx(sum(rep.energy_by_phase_j.values()), rel=1e-12)
    for t in simulated.instances:
        # per-instance energy is the sum over its iterations and idle gaps
        assert rep.energy_by_instance_j[t.label] == pytest.approx(sum(s.energy_j for s in t.segments))


def test_fractions_and_counts(simulated):
    rep = compute_report(simulated, SLO)
    assert 0 <= rep.tsar <= 1 and 0 <= rep.isar <= 1
    assert rep.request_count == len(simulated.requests)
    assert rep.output_tokens == sum(r.output_len for r in simulated.requests)
    assert rep.throughput_tps == pytest.approx(rep.output_tokens / (rep.horizon_ms / 1000))
    assert rep.predictor_mae_ms is not None and rep.predictor_mae_ms["itl"] > 0


def test_horizon_padding_adds_idle_energy(simulated):
    base = compute_report(simulated, SLO)
    padded = compute_report(simulated, SLO, horizon_ms=simulated.horizon_ms + 2000)
    assert padded.energy_j == pytest.approx(base.energy_j + len(simulated.instances) * 60.0 * 2.0)
    assert len(padded.time_series) == len(base.time_series) + len(simulated.instances)


@given(st.floats(1, 3000), st.floats(1, 3000), st.floats(1, 300), st.floats(1, 300))
def test_attainment_monotone_in_slo(simulated, t1, t2, i1, i2):
    tight = compute_report(simulated, SloProfile(min(t1, t2), min(i1, i2)))
    loose = compute_report(simulated, SloProfile(max(t1, t2), max(i1, i2)))
    assert loose.tsar >= tight.tsar and loose.isar >= tight.isar


# ------------------------------------------------------------------ export


def test_json_roundtrip(simulated):
    rep = compute_report(simulated, SLO)
    text = metrics.to_json(rep)
    again = metrics.from_json(text)
    assert again == rep
    assert metrics.to_json(again) == text


def test_json_field_order_is_stable(simulated):
    keys = list(json.loads(metrics.to_json(compute_report(simulated, SLO))))
    assert keys[:4] == ["tsar", "isar", "request_count", "output_tokens"]


def test_csv_rows_per_instance(simulated):
    rep = compute_report(simulated, SLO)
    lines = metrics.to_csv(rep).splitlines()
    assert lines[0] == "time_ms,instance,phase,freq_mhz,n_req,n_kv,power_w"
    assert len(lines) - 1 == sum(len(t.segments) for t in simulated.instances)
    for t in simulated.instances:
        rows = [r for r in rep.time_series if r[1] == t.index and r[2] == t.phase.value]
        assert len(rows) == len(t.segments)


def test_empty_simulation_report():
    pre = ControllerConfig(LADDER, SLO, PhaseKind.PREFILL)
    dec = ControllerConfig(LADDER, SLO, PhaseKind.DECODE)
    rep = compute_report(run(ClusterConfig(), [], pre, dec, RouteConfig(), CAL), SLO)
    assert metrics.to_csv(rep) == ",".join(metrics.TIMESERIES_HEADER) + "\n"
    assert (rep.request_count, rep.output_tokens, rep.energy_j, rep.throughput_tps) == (0, 0, 0.0, 0.0)
    assert rep.ttft_percentiles_ms == {"mean": 0.0, "p50": 0.0, "p90": 0.0, "p99": 0.0}


def test_export_writes_both_files(simulated, tmp_path):
    paths = metrics.export(compute_report(simulated, SLO), tmp_path / "out", "run")
    assert [p.name for p in paths] == ["run.json", "run_timeseries.csv"]
    assert all(p.stat().st_size > 0 for p in paths)


def test_export_failure_names_path(simulated, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ExportError, match="file"):
        metrics.export(compute_report(simulated, SLO), blocker / "sub")


# ------------------------------------------------------------------ probes


def _trace(phase, index, spans):
    return InstanceTrace(phase, index, [Segment(a, b, 100.0, f, n, n, busy) for a, b, f, n, busy in spans])


def test_window_attainment():
    recs = [record(0, 0, 100), record(1, 100, 900), record(2, 500, 900), record(3, 900, 100)]
    res = hand_result(recs)
    assert metrics.window_attainment(res, SLO, [(0, 200)]) == 0.5
    assert metrics.window_attainment(res, SLO, [(400, 600), (800, 1000)]) == 0.5
    assert metrics.window_attainment(res, SLO, [(2000, 3000)]) == 1.0


def test_high_freq_fraction():
    traces = [
        _trace(PhaseKind.PREFILL, 0, [(0, 100, 1410, 5, True), (100, 300, 1410, 0, False), (300, 400, 1005, 5, True)]),
        _trace(PhaseKind.PREFILL, 1, [(0, 400, 1410, 3, True)]),
    ]
    res = hand_result([], traces)
    # instance time 800 ms, busy above 1005 MHz for 100 + 400 ms
    assert metrics.high_freq_fraction(res, PhaseKind.PREFILL, 0, 400, 1005) == pytest.approx(500 / 800)
    assert metrics.high_freq_fraction(res, PhaseKind.PREFILL, 300, 400, 1005) == pytest.approx(100 / 200)


def test_boundary_fraction():
    traces = [
        _trace(PhaseKind.DECODE, 0, [(0, 100, 1410, 300, True), (100, 200, 1410, 260, True)]),
        _trace(PhaseKind.DECODE, 1, [(0, 50, 1005, 250, True), (50, 200, 1410, 270, True)]),
    ]
    res = hand_result([], traces)
    assert metrics.boundary_fraction(res, 256) == pytest.approx(50 / 200)
    idle = [_trace(PhaseKind.DECODE, 0, [(0, 100, 1005, 0, False)])]
    assert metrics.boundary_fraction(hand_result([], idle), 256) == 1.0
