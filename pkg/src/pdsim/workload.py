"""Workload generation: Poisson arrivals, phased segments, JSONL traces."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .core import ConfigError, ContractViolation, IngestionError, Request, ValidationError


# rejection sampling needs this share of draws to land inside the truncation window
MIN_TRUNCATION_MASS = 1e-3


class LengthFamily(str, enum.Enum):
    LOGNORMAL = "lognormal"
    FIXED = "fixed"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class LengthDist:
    family: LengthFamily
    mean: float
    std: float = 0.0
    min: int = 1
    max: int = 32768
    values: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.family is LengthFamily.EMPIRICAL:
            if not self.values:
                raise ValidationError("empirical length distribution needs values")
        elif not self.mean > 0:
            raise ValidationError(f"length mean must be > 0, got {self.mean}")
        if self.std < 0:
            raise ValidationError(f"length std must be >= 0, got {self.std}")
        if not 1 <= self.min <= self.max:
            raise ValidationError(f"need 1 <= min <= max, got [{self.min}, {self.max}]")
        if self.family is LengthFamily.LOGNORMAL and truncation_mass(self) < MIN_TRUNCATION_MASS:
            raise ValidationError(
                f"lognormal(mean={self.mean}, std={self.std}) puts almost no mass in [{self.min}, {self.max}]"
            )

    @classmethod
    def fixed(cls, n: int) -> "LengthDist":
        return cls(LengthFamily.FIXED, float(n), 0.0, min=1, max=max(n, 1))

    @classmethod
    def lognormal(cls, mean: float, std: float, lo: int = 1, hi: int = 32768) -> "LengthDist":
        return cls(LengthFamily.LOGNORMAL, mean, std, lo, hi)


@dataclass(frozen=True)
class PoissonSegment:
    rps: float
    duration_s: float
    input: LengthDist
    output: LengthDist

    def __post_init__(self) -> None:
        if not self.rps > 0:
            raise ValidationError(f"rps must be > 0, got {self.rps}")
        if not self.duration_s > 0:
            raise ValidationError(f"duration_s must be > 0, got {self.duration_s}")


@dataclass(frozen=True)
class PoissonSpec:
    segment: PoissonSegment
    seed: int = 0


@dataclass(frozen=True)
class PhasedSpec:
    segments: tuple[PoissonSegment, ...]
    seed: int = 0

    def boundaries_ms(self) -> list[tuple[float, float]]:
        out, t = [], 0.0
        for seg in self.segments:
            out.append((t, t + seg.duration_s * 1000.0))
            t += seg.duration_s * 1000.0
        return out


@dataclass(frozen=True)
class TraceSpec:
    path: str
    seed: int = 0


WorkloadSpec = Union[PoissonSpec, PhasedSpec, TraceSpec]


def lognormal_params(mean: float, std: float) -> tuple[float, float]:
    """Moment-matched ``(mu, sigma)`` of a lognormal with the given mean and std."""
    if not mean > 0:
        raise ContractViolation(f"lognormal mean must be > 0, got {mean}")
    if std < 0:
        raise ContractViolation(f"lognormal std must be >= 0, got {std}")
    sigma2 = math.log1p((std / mean) ** 2)
    return math.log(mean) - sigma2 / 2.0, math.sqrt(sigma2)


def truncation_mass(dist: LengthDist) -> float:
    """Probability that one rounded lognormal draw lands in ``[min, max]``."""
    mu, sigma = lognormal_params(dist.mean, dist.std)
    lo, hi = math.log(dist.min - 0.5) if dist.min > 1 else -math.inf, math.log(dist.max + 0.5)
    if sigma == 0:
        return 1.0 if lo <= mu < hi else 0.0

    def cdf(x: float) -> float:
        return 0.5 * (1.0 + math.erf((x - mu) / (sigma * math.sqrt(2.0))))

    return cdf(hi) - cdf(lo)


def sample_lengths(dist: LengthDist, n: int, rng: np.random.Generator) -> np.ndarray:
    if dist.family is LengthFamily.FIXED:
        return np.full(n, int(round(dist.mean)), dtype=np.int64)
    if dist.family is LengthFamily.EMPIRICAL:
        return rng.choice(np.asarray(dist.values, dtype=np.int64), size=n)
    mu, sigma = lognormal_params(dist.mean, dist.std)
    out = np.empty(n, dtype=np.int64)
    todo = np.arange(n)
    while todo.size:
        draw = np.rint(rng.lognormal(mu, sigma, size=todo.size)).astype(np.int64)
        ok = (draw >= dist.min) & (draw <= dist.max)
        out[todo[ok]] = draw[ok]
        todo = todo[~ok]
    return out


def _poisson_arrivals(rps: float, duration_ms: float, rng: np.random.Generator) -> np.ndarray:
    mean_gap = 1000.0 / rps
    chunks, t = [], 0.0
    while True:
        gaps = rng.exponential(mean_gap, size=max(16, int(duration_ms / mean_gap * 0.25) + 16))
        times = t + np.cumsum(gaps)
        inside = times[times < duration_ms]
        chunks.append(inside)
        if inside.size < times.size:
            break
        t = float(times[-1])
    return np.concatenate(chunks)


def _generate_segments(segments: Sequence[PoissonSegment], rng: np.random.Generator) -> list[Request]:
    requests: list[Request] = []
    offset = 0.0
    for seg in segments:
        duration_ms = seg.duration_s * 1000.0
        arrivals = _poisson_arrivals(seg.rps, duration_ms, rng) + offset
        ins = sample_lengths(seg.input, arrivals.size, rng)
        outs = sample_lengths(seg.output, arrivals.size, rng)
        base = len(requests)
        requests.extend(
            Request(base + i, float(a), int(x), int(y)) for i, (a, x, y) in enumerate(zip(arrivals, ins, outs))
        )
        offset += duration_ms
    return requests


def generate(spec: WorkloadSpec) -> list[Request]:
    """Materialize a workload; identical specs (including seed) give identical lists."""
    if isinstance(spec, TraceSpec):
        return load_trace(spec.path)
    rng = np.random.default_rng(spec.seed)
    if isinstance(spec, PoissonSpec):
        return _generate_segments([spec.segment], rng)
    return _generate_segments(spec.segments, rng)


# ------------------------------------------------------------------ traces


def load_trace(path: str | Path) -> list[Request]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read trace ({exc.strerror})") from exc
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("expected a JSON object")
            arrival = float(obj["arrival_ms"])
            in_len, out_len = obj["input_len"], obj["output_len"]
            if not (isinstance(in_len, int) and isinstance(out_len, int)):
                raise ValueError("input_len and output_len must be integers")
            rid = obj.get("id")
            if rid is not None and not isinstance(rid, int):
                raise ValueError("id must be an integer")
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestionError(f"{path}:{lineno}: {exc}") from exc
        if in_len < 1 or out_len < 1 or arrival < 0 or not math.isfinite(arrival):
            raise IngestionError(
                f"{path}:{lineno}: lengths must be >= 1 and arrival_ms >= 0 "
                f"(got input_len={in_len}, output_len={out_len}, arrival_ms={arrival})"
            )
        rows.append((arrival, in_len, out_len, rid, lineno))
    rows.sort(key=lambda r: (r[0], r[4]))
    have_ids = [r[3] for r in rows if r[3] is not None]
    if have_ids and len(have_ids) != len(rows):
        raise IngestionError(f"{path}: either every line carries an id or none does")
    if len(set(have_ids)) != len(have_ids):
        raise IngestionError(f"{path}: duplicate request ids")
    return [
        Request(rid if rid is not None else i, arrival, in_len, out_len)
        for i, (arrival, in_len, out_len, rid, _) in enumerate(rows)
    ]


def write_trace(requests: Sequence[Request], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for r in requests:
            fh.write(
                json.dumps({"id": r.id, "arrival_ms": r.arrival_ms, "input_len": r.input_len, "output_len": r.output_len})
                + "\n"
            )


def summarize(requests: Sequence[Request]) -> dict:
    if not requests:
        return {"count": 0, "input_mean": 0.0, "input_std": 0.0, "output_mean": 0.0, "output_std": 0.0}
    ins = np.array([r.input_len for r in requests], dtype=float)
    outs = np.array([r.output_len for r in requests], dtype=float)
    return {
        "count": len(requests),
        "input_mean": float(ins.mean()),
        "input_std": float(ins.std()),
        "output_mean": float(outs.mean()),
        "output_std": float(outs.std()),
    }


# ------------------------------------------------------------- JSON specs


def length_dist_from_dict(d: dict, where: str) -> LengthDist:
    if not isinstance(d, dict):
        raise ConfigError(where, "expected an object")
    try:
        family = LengthFamily(d.get("family", "lognormal"))
    except ValueError:
        raise ConfigError(f"{where}.family", f"unknown family {d.get('family')!r}") from None
    try:
        if family is LengthFamily.FIXED:
            return LengthDist.fixed(int(d["value"] if "value" in d else d["mean"]))
        if family is LengthFamily.EMPIRICAL:
            values = tuple(int(v) for v in d["values"])
            return LengthDist(family, float(np.mean(values)) if values else 0.0, 0.0, values=values,
                              min=min(values, default=1), max=max(values, default=1))
        return LengthDist(
            family, float(d["mean"]), float(d["std"]), int(d.get("min", 1)), int(d.get("max", 32768))
        )
    except KeyError as exc:
        raise ConfigError(f"{where}.{exc.args[0]}", "missing field") from None
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def length_dist_to_dict(dist: LengthDist) -> dict:
    if dist.family is LengthFamily.FIXED:
        return {"family": "fixed", "value": int(round(dist.mean))}
    if dist.family is LengthFamily.EMPIRICAL:
        return {"family": "empirical", "values": list(dist.values)}
    return {"family": "lognormal", "mean": dist.mean, "std": dist.std, "min": dist.min, "max": dist.max}


def _segment_from_dict(d: dict, where: str) -> PoissonSegment:
    for key in ("rps", "duration_s", "input", "output"):
        if key not in d:
            raise ConfigError(f"{where}.{key}", "missing field")
    try:
        return PoissonSegment(
            float(d["rps"]),
            float(d["duration_s"]),
            length_dist_from_dict(d["input"], f"{where}.input"),
            length_dist_from_dict(d["output"], f"{where}.output"),
        )
    except ConfigError:
        raise
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def workload_from_dict(d: dict, where: str = "workload", base_dir: Path | None = None) -> WorkloadSpec:
    if not isinstance(d, dict):
        raise ConfigError(where, "expected an object")
    kind = d.get("kind", "poisson")
    seed = int(d.get("seed", 0))
    if kind == "poisson":
        return PoissonSpec(_segment_from_dict(d, where), seed)
    if kind == "phased":
        segs = d.get("segments")
        if not segs:
            raise ConfigError(f"{where}.segments", "phased workload needs at least one segment")
        repeat = int(d.get("repeat", 1))
        parsed = [_segment_from_dict(s, f"{where}.segments[{i}]") for i, s in enumerate(segs)]
        return PhasedSpec(tuple(parsed * repeat), seed)
    if kind == "trace":
        if "path" not in d:
            raise ConfigError(f"{where}.path", "missing field")
        p = Path(d["path"])
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return TraceSpec(str(p), seed)
    raise ConfigError(f"{where}.kind", f"unknown workload kind {kind!r}")


def workload_to_dict(spec: WorkloadSpec) -> dict:
    def seg(s: PoissonSegment) -> dict:
        return {
            "rps": s.rps,
            "duration_s": s.duration_s,
            "input": length_dist_to_dict(s.input),
            "output": length_dist_to_dict(s.output),
        }

    if isinstance(spec, PoissonSpec):
        return {"kind": "poisson", **seg(spec.segment), "seed": spec.seed}
    if isinstance(spec, PhasedSpec):
        return {"kind": "phased", "segments": [seg(s) for s in spec.segments], "seed": spec.seed}
    return {"kind": "trace", "path": spec.path, "seed": spec.seed}
