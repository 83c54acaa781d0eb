import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pdsim.calibration import DEFAULT_CALIBRATION_LADDER, default_models
from pdsim.core import CalibrationError, ContractViolation, IngestionError, ModelCoverageError, PhaseKind
from pdsim.latency_model import (
    ItlModel,
    MonotonicityWarning,
    ProfileSample,
    TileConfig,
    TtftModel,
    check_itl_invariants,
    fit_itl,
    fit_ttft,
    predict_itl,
    predict_ttft,
    prefill_tile_index,
    read_profile_csv,
    synthesize_profile,
    tile_index,
    write_profile_csv,
)

TTFT, ITL = default_models()
LEVELS = list(DEFAULT_CALIBRATION_LADDER)


# ------------------------------------------------------------------ tiles


@pytest.mark.parametrize("n_req, tile", [(1, 0), (128, 0), (129, 1), (256, 1), (257, 2)])
def test_tile_index(n_req, tile):
    assert tile_index(n_req, TileConfig(tile_width=128)) == tile


def test_tile_index_rejects_zero():
    with pytest.raises(ContractViolation):
        tile_index(0)


def test_prefill_single_tile_by_default():
    assert prefill_tile_index(5000, TileConfig()) == 0
    cfg = TileConfig(prefill_tiling_enabled=True)
    assert prefill_tile_index(200, cfg) == 1
    assert prefill_tile_index(2001, cfg) == cfg.prefill_bulk_tile


# ----------------------------------------------------------------- TTFT


def test_predict_ttft_hand_evaluated():
    model = TtftModel({1005: ((0.24, 12.0),)})
    assert predict_ttft(model, 1005, 2000) == pytest.approx(492.0)
    assert predict_ttft(model, 1005, 1) == pytest.approx(0.24 + 12.0)


def test_default_ttft_regime_and_frequency_order():
    at_1005 = predict_ttft(TTFT, 1005, 2000)
    assert 100 <= at_1005 < 1000
    assert predict_ttft(TTFT, 1410, 2000) < at_1005


def test_predict_ttft_uncalibrated_frequency():
    with pytest.raises(ModelCoverageError, match="1234"):
        predict_ttft(TTFT, 1234, 10)


@given(st.sampled_from(LEVELS), st.integers(1, 20000), st.integers(1, 20000))
def test_ttft_is_affine(f, a, b):
    # three points on a line: equal slopes between (1, a) and (a, a + b)
    p1, pa, pab = (predict_ttft(TTFT, f, n) for n in (1, a, a + b))
    slope = (pab - pa) / b
    assert np.isclose(pa, p1 + slope * (a - 1), rtol=1e-9, atol=1e-9)


# ------------------------------------------------------------------ ITL


def test_predict_itl_hand_evaluated():
    model = ItlModel({(1005, 0): (0.05, 0.0002, 8.0)}, max_tile=0)
    assert predict_itl(model, 1005, 100, 20000) == pytest.approx(17.0)


def test_itl_staircase_at_128():
    step = 7.5
    model = ItlModel({(1005, 0): (0.05, 0.0002, 8.0), (1005, 1): (0.05, 0.0002, 8.0 + step)}, max_tile=1)
    jump = predict_itl(model, 1005, 129, 30000) - predict_itl(model, 1005, 128, 30000)
    assert jump == pytest.approx(0.05 + step)


def test_default_itl_gap_widens_with_batch():
    gaps = [predict_itl(ITL, 1005, n, n * 500) - predict_itl(ITL, 1410, n, n * 500) for n in (1, 64, 256, 512)]
    assert gaps[0] < 1.0
    assert all(a < b for a, b in zip(gaps, gaps[1:]))


def test_predict_itl_contracts():
    with pytest.raises(ContractViolation):
        predict_itl(ITL, 1005, 10, 9)
    with pytest.raises(ModelCoverageError):
        predict_itl(ITL, 999, 1, 1)


def test_default_itl_coefficients_valid():
    assert check_itl_invariants(ITL) == []


@given(st.sampled_from(LEVELS), st.integers(1, 4000), st.integers(1, 2000))
def test_tiles_beyond_max_are_clamped(f, n_req, kv_per_req):
    top = (ITL.max_tile + 1) * ITL.tile.tile_width
    n = top + n_req
    a2, b2, c2 = ITL.coeffs[(f, ITL.max_tile)]
    assert predict_itl(ITL, f, n, n * kv_per_req) == pytest.approx(a2 * n + b2 * n * kv_per_req + c2)


@given(st.integers(1, 2048), st.integers(1, 3000))
def test_itl_non_increasing_in_frequency(n_req, kv_per_req):
    preds = [predict_itl(ITL, f, n_req, n_req * kv_per_req) for f in LEVELS]
    assert all(b <= a for a, b in zip(preds, preds[1:]))


@given(st.sampled_from(LEVELS), st.integers(1, 15), st.integers(2, 3000))
def test_tile_boundary_never_steps_down(f, t, kv_per_req):
    n = t * 128
    n_kv = (n + 1) * kv_per_req
    assert predict_itl(ITL, f, n + 1, n_kv) >= predict_itl(ITL, f, n, n_kv)


@given(st.integers(1, 2048))
def test_prefill_more_frequency_sensitive_than_small_decode(n_bt):
    prefill_gain = 1 - predict_ttft(TTFT, 1410, n_bt) / predict_ttft(TTFT, 1005, n_bt)
    decode_gain = 1 - predict_itl(ITL, 1410, 8, 8 * 300) / predict_itl(ITL, 1005, 8, 8 * 300)
    assert decode_gain < prefill_gain


# -------------------------------------------------------------- fitting


def _profile(sigma=0.0, seed=0, per_cell=12):
    return synthesize_profile(TTFT, ITL, LEVELS, np.random.default_rng(seed), noise_sigma=sigma, per_cell=per_cell)


def test_fit_recovers_noiseless_coefficients():
    samples = _profile()
    ttft = fit_ttft(samples, LEVELS)
    itl = fit_itl(samples, LEVELS)
    for f in LEVELS:
        np.testing.assert_allclose(ttft.coeffs[f], TTFT.coeffs[f], rtol=1e-9)
    assert itl.max_tile == ITL.max_tile
    for key, coef in ITL.coeffs.items():
        np.testing.assert_allclose(itl.coeffs[key], coef, rtol=1e-9)


def test_fitted_model_reproduces_staircase():
    itl = fit_itl(_profile(), LEVELS)
    for f in LEVELS:
        for boundary in range(128, 128 * ITL.max_tile + 1, 128):
            for n in (boundary, boundary + 1):
                assert predict_itl(itl, f, n, n * 700) == pytest.approx(predict_itl(ITL, f, n, n * 700), rel=1e-9)


def test_fit_itl_collinear_cell_rejected():
    samples = [
        ProfileSample(PhaseKind.DECODE, 1005, n, n, 200 * n, predict_itl(ITL, 1005, n, 200 * n)) for n in range(1, 20)
    ]
    with pytest.raises(CalibrationError, match="1005 MHz, tile 0"):
        fit_itl(samples, [1005])


def test_fit_ttft_constant_n_bt_rejected():
    samples = [ProfileSample(PhaseKind.PREFILL, 1005, 512, 1, 512, 60.0 + i) for i in range(5)]
    with pytest.raises(CalibrationError, match="1005"):
        fit_ttft(samples, [1005])


def test_fit_missing_frequency_named():
    samples = [s for s in _profile() if s.freq != 1200]
    with pytest.raises(CalibrationError, match="1200"):
        fit_ttft(samples, LEVELS)
    with pytest.raises(CalibrationError, match="1200"):
        fit_itl(samples, LEVELS)


def test_missing_tile_inherits_lower_tile_plus_step():
    samples = [s for s in _profile() if not (s.phase is PhaseKind.DECODE and tile_index(s.n_req) == 2)]
    itl = fit_itl(samples, LEVELS, TileConfig(tile_step_ms=4.0))
    for f in LEVELS:
        a2, b2, c2 = itl.coeffs[(f, 1)]
        np.testing.assert_allclose(itl.coeffs[(f, 2)], (a2, b2, c2 + 4.0))


def test_fit_warns_when_faster_frequency_predicts_slower():
    samples = []
    for n in range(100, 3000, 200):
        samples.append(ProfileSample(PhaseKind.PREFILL, 1005, n, 1, n, 0.1 * n + 5))
        samples.append(ProfileSample(PhaseKind.PREFILL, 1410, n, 1, n, 0.2 * n + 5))
    with pytest.warns(MonotonicityWarning):
        fit_ttft(samples, [1005, 1410])


def test_fit_on_default_profile_does_not_warn():
    with warnings.catch_warnings():
        warnings.simplefilter("error", MonotonicityWarning)
        samples = _profile()
        fit_ttft(samples, LEVELS)
        fit_itl(samples, LEVELS)


# ------------------------------------------------------------ profile CSV


def test_profile_csv_roundtrip(tmp_path):
    samples = _profile(sigma=0.05, per_cell=3)
    path = tmp_path / "profile.csv"
    write_profile_csv(samples, path)
    assert path.read_text().splitlines()[0] == "phase,freq_mhz,n_bt,n_req,n_kv,latency_ms"
    assert read_profile_csv(path) == samples


def test_profile_csv_bad_header(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("phase,freq,n_bt\n")
    with pytest.raises(IngestionError, match=":1:"):
        read_profile_csv(path)


def test_profile_csv_bad_row_reports_line(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("phase,freq_mhz,n_bt,n_req,n_kv,latency_ms\nprefill,1005,10,1,10,5.0\ndecode,1005,x,1,1,2.0\n")
    with pytest.raises(IngestionError, match=":3:"):
        read_profile_csv(path)
