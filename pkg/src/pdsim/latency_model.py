"""Per-frequency linear latency predictors for prefill (TTFT) and decode (ITL).

Prefill iteration time is affine in the batched token count. Decode iteration
time is affine in the running request count and the resident KV tokens, with
separate coefficients for each batch-size tile so that the step in latency at
tile boundaries (multiples of ``tile_width``) is captured.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    CalibrationError,
    ContractViolation,
    FrequencyLadder,
    IngestionError,
    ModelCoverageError,
    PhaseKind,
    ValidationError,
)

PROFILE_HEADER = ["phase", "freq_mhz", "n_bt", "n_req", "n_kv", "latency_ms"]


class MonotonicityWarning(UserWarning):
    """Fitted coefficients predict a higher frequency to be slower."""


@dataclass(frozen=True)
class TileConfig:
    tile_width: int = 128
    prefill_tiling_enabled: bool = False
    prefill_tile_cutoff: int = 2000
    # c2 increment applied when a tile without profile data inherits from below
    tile_step_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.tile_width <= 0:
            raise ValidationError(f"tile_width must be > 0, got {self.tile_width}")
        if self.prefill_tile_cutoff < self.tile_width:
            raise ValidationError("prefill_tile_cutoff must be >= tile_width")
        if self.tile_step_ms < 0:
            raise ValidationError("tile_step_ms must be >= 0")

    @property
    def prefill_bulk_tile(self) -> int:
        """Index of the single tile used for batches above the cutoff."""
        return -(-self.prefill_tile_cutoff // self.tile_width)


@dataclass(frozen=True)
class ProfileSample:
    phase: PhaseKind
    freq: int
    n_bt: int
    n_req: int
    n_kv: int
    observed_latency_ms: float

    def __post_init__(self) -> None:
        if not self.observed_latency_ms > 0:
            raise ValidationError(f"observed latency must be > 0, got {self.observed_latency_ms}")


def tile_index(n_req: int, cfg: TileConfig | None = None) -> int:
    """Tile holding a batch of ``n_req`` requests: ``floor((n_req - 1) / width)``."""
    width = (cfg or TileConfig()).tile_width
    if n_req < 1:
        raise ContractViolation(f"tile_index needs n_req >= 1, got {n_req}")
    return (n_req - 1) // width


def prefill_tile_index(n_bt: int, cfg: TileConfig) -> int:
    if not cfg.prefill_tiling_enabled:
        return 0
    if n_bt > cfg.prefill_tile_cutoff:
        return cfg.prefill_bulk_tile
    return (n_bt - 1) // cfg.tile_width


@dataclass(frozen=True)
class TtftModel:
    """``coeffs[f][tile] = (a1, c1)``; a single tile unless prefill tiling is on."""

    coeffs: dict[int, tuple[tuple[float, float], ...]]
    tile: TileConfig = field(default_factory=TileConfig)
    mae_ms: dict[int, float] = field(default_factory=dict)

    @property
    def frequencies(self) -> list[int]:
        return sorted(self.coeffs)

    def predict(self, f: int, n_bt: int) -> float:
        return predict_ttft(self, f, n_bt)


@dataclass(frozen=True)
class ItlModel:
    """``coeffs[(f, tile)] = (a2, b2, c2)`` for tiles ``0..max_tile``."""

    coeffs: dict[tuple[int, int], tuple[float, float, float]]
    max_tile: int
    tile: TileConfig = field(default_factory=TileConfig)
    mae_ms: dict[int, float] = field(default_factory=dict)

    @property
    def frequencies(self) -> list[int]:
        return sorted({f for f, _ in self.coeffs})

    def predict(self, f: int, n_req: int, n_kv: int) -> float:
        return predict_itl(self, f, n_req, n_kv)


def predict_ttft(model: TtftModel, f: int, n_bt: int) -> float:
    try:
        tiles = model.coeffs[f]
    except KeyError:
        raise ModelCoverageError(f"TTFT model has no coefficients for {f} MHz") from None
    if n_bt < 1:
        raise ContractViolation(f"predict_ttft needs n_bt >= 1, got {n_bt}")
    a1, c1 = tiles[min(prefill_tile_index(n_bt, model.tile), len(tiles) - 1)]
    return a1 * n_bt + c1


def predict_itl(
    model: ItlModel, f: int, n_req: int, n_kv: int, cfg: TileConfig | None = None
) -> float:
    cfg = cfg or model.tile
    if n_req < 1:
        raise ContractViolation(f"predict_itl needs n_req >= 1, got {n_req}")
    if n_kv < n_req:
        raise ContractViolation(f"predict_itl needs n_kv >= n_req, got n_kv={n_kv} < n_req={n_req}")
    tile = min(tile_index(n_req, cfg), model.max_tile)
    try:
        a2, b2, c2 = model.coeffs[(f, tile)]
    except KeyError:
        raise ModelCoverageError(f"ITL model has no coefficients for {f} MHz") from None
    return a2 * n_req + b2 * n_kv + c2


# ---------------------------------------------------------------- fitting


def _lstsq(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    # column scaling keeps KV-sized regressors from dominating the conditioning
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    coef, *_ = np.linalg.lstsq(X / scale, y, rcond=None)
    return coef / scale


def _fit_ttft_cell(rows: list[ProfileSample], where: str) -> tuple[float, float]:
    n_bt = np.array([s.n_bt for s in rows], dtype=float)
    if len(rows) < 2 or np.unique(n_bt).size < 2:
        raise CalibrationError(f"{where}: need >= 2 samples with distinct n_bt, got {len(rows)}")
    y = np.array([s.observed_latency_ms for s in rows])
    a1, c1 = _lstsq(np.column_stack([n_bt, np.ones_like(n_bt)]), y)
    return float(a1), float(c1)


def fit_ttft(
    samples: Iterable[ProfileSample], ladder: FrequencyLadder | Sequence[int], cfg: TileConfig | None = None
) -> TtftModel:
    """Ordinary least squares of prefill latency on ``n_bt`` for every ladder level."""
    cfg = cfg or TileConfig()
    cells: dict[tuple[int, int], list[ProfileSample]] = defaultdict(list)
    for s in samples:
        if s.phase is PhaseKind.PREFILL:
            cells[(s.freq, prefill_tile_index(s.n_bt, cfg))].append(s)

    n_tiles = cfg.prefill_bulk_tile + 1 if cfg.prefill_tiling_enabled else 1
    coeffs: dict[int, tuple[tuple[float, float], ...]] = {}
    mae: dict[int, float] = {}
    for f in ladder:
        if not any(key[0] == f for key in cells):
            raise CalibrationError(f"no prefill samples for {f} MHz")
        tiles: list[tuple[float, float]] = []
        for t in range(n_tiles):
            rows = cells.get((f, t))
            if rows:
                a1, c1 = _fit_ttft_cell(rows, f"prefill {f} MHz tile {t}")
                if a1 <= 0:
                    raise CalibrationError(f"prefill {f} MHz tile {t}: fitted slope {a1:.4g} is not positive")
                tiles.append((a1, c1))
            elif tiles:
                a1, c1 = tiles[-1]
                tiles.append((a1, c1 + cfg.tile_step_ms))
            else:
                raise CalibrationError(f"prefill {f} MHz tile {t}: no samples and no lower tile to inherit")
        coeffs[f] = tuple(tiles)

    model = TtftModel(coeffs=coeffs, tile=cfg)
    for f in ladder:
        rows = [s for (ff, _), rs in cells.items() if ff == f for s in rs]
        mae[f] = float(np.mean([abs(predict_ttft(model, f, s.n_bt) - s.observed_latency_ms) for s in rows]))
    model = TtftModel(coeffs=coeffs, tile=cfg, mae_ms=mae)
    _warn_ttft_monotonicity(model)
    return model


def fit_itl(
    samples: Iterable[ProfileSample], ladder: FrequencyLadder | Sequence[int], cfg: TileConfig | None = None
) -> ItlModel:
    """Two-variable least squares per (frequency, tile) cell.

    Tiles without data inherit the nearest lower tile's coefficients with
    ``cfg.tile_step_ms`` added to the intercept.
    """
    cfg = cfg or TileConfig()
    cells: dict[tuple[int, int], list[ProfileSample]] = defaultdict(list)
    for s in samples:
        if s.phase is PhaseKind.DECODE:
            cells[(s.freq, tile_index(s.n_req, cfg))].append(s)
    ladder = list(ladder)
    for f in ladder:
        if not any(key[0] == f for key in cells):
            raise CalibrationError(f"no decode samples for {f} MHz")
    max_tile = max(t for f, t in cells if f in ladder)

    coeffs: dict[tuple[int, int], tuple[float, float, float]] = {}
    for f in ladder:
        for t in range(max_tile + 1):
            rows = cells.get((f, t))
            if rows:
                coeffs[(f, t)] = _fit_itl_cell(rows, f"decode cell ({f} MHz, tile {t})")
            elif t > 0:
                a2, b2, c2 = coeffs[(f, t - 1)]
                coeffs[(f, t)] = (a2, b2, c2 + cfg.tile_step_ms)
            else:
                raise CalibrationError(f"decode cell ({f} MHz, tile 0): no samples and no lower tile to inherit")

    model = ItlModel(coeffs=coeffs, max_tile=max_tile, tile=cfg)
    mae = {}
    for f in ladder:
        rows = [s for (ff, _), rs in cells.items() if ff == f for s in rs]
        mae[f] = float(np.mean([abs(predict_itl(model, f, s.n_req, s.n_kv) - s.observed_latency_ms) for s in rows]))
    model = ItlModel(coeffs=coeffs, max_tile=max_tile, tile=cfg, mae_ms=mae)
    _warn_itl_monotonicity(model)
    return model


def _fit_itl_cell(rows: list[ProfileSample], where: str) -> tuple[float, float, float]:
    if len(rows) < 3:
        raise CalibrationError(f"{where}: need >= 3 samples, got {len(rows)}")
    X = np.array([[s.n_req, s.n_kv, 1.0] for s in rows], dtype=float)
    scale = np.abs(X).max(axis=0)
    if np.linalg.matrix_rank(X / scale) < 3:
        raise CalibrationError(f"{where}: (n_req, n_kv) samples are collinear, design matrix is rank deficient")
    y = np.array([s.observed_latency_ms for s in rows])
    a2, b2, c2 = _lstsq(X, y)
    return float(a2), float(b2), float(c2)


def _warn_ttft_monotonicity(model: TtftModel) -> None:
    freqs = model.frequencies
    for lo, hi in zip(freqs, freqs[1:]):
        for t, ((a_lo, c_lo), (a_hi, c_hi)) in enumerate(zip(model.coeffs[lo], model.coeffs[hi])):
            if a_hi > a_lo or c_hi > c_lo:
                warnings.warn(
                    f"TTFT fit at {hi} MHz (tile {t}) is slower than at {lo} MHz", MonotonicityWarning, stacklevel=3
                )


def _warn_itl_monotonicity(model: ItlModel) -> None:
    freqs = model.frequencies
    w = model.tile.tile_width
    for t in range(model.max_tile + 1):
        for n_req in (t * w + 1, (t + 1) * w):
            for kv_per_req in (2, 512, 4096):
                n_kv = n_req * kv_per_req
                preds = [predict_itl(model, f, n_req, n_kv) for f in freqs]
                if any(b > a + 1e-9 for a, b in zip(preds, preds[1:])):
                    warnings.warn(
                        f"ITL fit is not monotone in frequency at n_req={n_req}, n_kv={n_kv}",
                        MonotonicityWarning,
                        stacklevel=3,
                    )
                    return


def check_itl_invariants(model: ItlModel) -> list[str]:
    """Return human-readable violations of the ITL coefficient invariants."""
    problems = []
    for (f, t), (a2, b2, c2) in sorted(model.coeffs.items()):
        if not a2 > 0:
            problems.append(f"({f} MHz, tile {t}): a2={a2:.4g} must be > 0")
        if b2 < 0:
            problems.append(f"({f} MHz, tile {t}): b2={b2:.4g} must be >= 0")
    return problems


# ------------------------------------------------------------ profile I/O


def read_profile_csv(path: str | Path) -> list[ProfileSample]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise IngestionError(f"{path}: cannot open profile ({exc.strerror})") from exc
    samples = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PROFILE_HEADER:
            raise IngestionError(f"{path}:1: expected header {','.join(PROFILE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(PROFILE_HEADER):
                raise IngestionError(f"{path}:{lineno}: expected {len(PROFILE_HEADER)} fields, got {len(row)}")
            try:
                phase = PhaseKind(row[0].strip().lower())
                freq, n_bt, n_req, n_kv = (int(v) for v in row[1:5])
                latency = float(row[5])
                if min(freq, n_bt, n_req, n_kv) < 0 or not math.isfinite(latency):
                    raise ValueError("negative count or non-finite latency")
                samples.append(ProfileSample(phase, freq, n_bt, n_req, n_kv, latency))
            except (ValueError, ValidationError) as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from exc
    return samples


def write_profile_csv(samples: Iterable[ProfileSample], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for s in samples:
            w.writerow([s.phase.value, s.freq, s.n_bt, s.n_req, s.n_kv, repr(s.observed_latency_ms)])


def synthesize_profile(
    ttft: TtftModel,
    itl: ItlModel,
    ladder: Sequence[int],
    rng: np.random.Generator,
    noise_sigma: float = 0.0,
    per_cell: int = 12,
    max_prefill_tokens: int = 8192,
    kv_per_req: tuple[int, int] = (64, 1600),
) -> list[ProfileSample]:
    """Draw profiling samples from known models, with optional lognormal noise.

    Every (frequency, tile) cell of ``itl`` receives ``per_cell`` decode
    samples, so ``fit_itl`` on the result sees the same tile range.
    """
    samples = []
    width = itl.tile.tile_width

    def noisy(v: float) -> float:
        if noise_sigma <= 0:
            return v
        return v * float(rng.lognormal(0.0, noise_sigma))

    for f in ladder:
        for n_bt in rng.integers(1, max_prefill_tokens + 1, size=per_cell * 4):
            n_bt = int(n_bt)
            samples.append(ProfileSample(PhaseKind.PREFILL, f, n_bt, 1, n_bt, noisy(predict_ttft(ttft, f, n_bt))))
        for t in range(itl.max_tile + 1):
            for _ in range(per_cell):
                n_req = int(rng.integers(t * width + 1, (t + 1) * width + 1))
                n_kv = int(n_req * rng.uniform(*kv_per_req))
                samples.append(
                    ProfileSample(PhaseKind.DECODE, f, n_req, n_req, n_kv, noisy(predict_itl(itl, f, n_req, n_kv)))
                )
    return samples
