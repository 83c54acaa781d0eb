"""Command-line entry point: scenario configs, subcommands and the comparison harness.

Every subcommand is deterministic: the same config (and ``--seed``) gives
byte-identical outputs. Environment variables only change where outputs go
(``PDSIM_OUT``) and how many arms run in parallel (``PDSIM_JOBS``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from .calibration import Calibration, calibration_to_dict, load_calibration
from .core import (
    ConfigError,
    ExportError,
    FrequencyLadder,
    PdsimError,
    PhaseKind,
    Request,
    SloProfile,
    ValidationError,
)
from .freq_controller import ControllerConfig
from .latency_model import TileConfig, fit_itl, fit_ttft, read_profile_csv
from .router import RouteConfig, RoutePolicy
from .simulator import ClusterConfig, SimResult, run
from .workload import (
    TraceSpec,
    WorkloadSpec,
    generate,
    summarize,
    workload_from_dict,
    write_trace,
)

SCENARIO_SCHEMA_VERSION = 1
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# ------------------------------------------------------------ scenario config


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    cluster: ClusterConfig
    prefill: ControllerConfig
    decode: ControllerConfig
    route: RouteConfig
    slo: SloProfile
    workload: WorkloadSpec
    calibration_path: str = "default"
    # None runs the adaptive controllers; an int pins every instance to that level
    static_mhz: Optional[int] = None
    itl_mode: metrics.ItlMode = metrics.ItlMode.MEAN
    sweep_ladder: Optional[FrequencyLadder] = None

    @property
    def ladder(self) -> FrequencyLadder:
        return self.decode.ladder


def bundled_path(name: str) -> Path:
    """Path of a file shipped in the package ``data`` directory."""
    return Path(str(resources.files("pdsim") / "data" / name))


def _check_keys(d: dict, where: str, allowed: Sequence[str]) -> None:
    if not isinstance(d, dict):
        raise ConfigError(where, "expected an object")
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{where}.{key}", f"unknown field (allowed: {', '.join(allowed)})")


def _build(where: str, fn: Callable, **kwargs):
    try:
        return fn(**kwargs)
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def _ladder(value, where: str) -> FrequencyLadder:
    if not isinstance(value, list) or not all(isinstance(v, int) for v in value):
        raise ConfigError(where, "expected a list of integer MHz levels")
    return _build(where, FrequencyLadder, levels=tuple(value))


def _resolve_lengths(seg: dict, where: str) -> dict:
    """Expand ``"lengths": "<preset>"`` into the preset's input/output distributions."""
    if "lengths" not in seg:
        return seg
    name = seg["lengths"]
    path = bundled_path(f"{name}.json")
    if not isinstance(name, str) or not path.is_file():
        raise ConfigError(f"{where}.lengths", f"unknown length preset {name!r}")
    preset = json.loads(path.read_text())
    out = {k: v for k, v in seg.items() if k != "lengths"}
    out.setdefault("input", preset["input"])
    out.setdefault("output", preset["output"])
    return out


def _workload(d: dict, where: str, base_dir: Path) -> WorkloadSpec:
    if not isinstance(d, dict):
        raise ConfigError(where, "expected an object")
    d = _resolve_lengths(d, where)
    if "segments" in d:
        d = {**d, "segments": [_resolve_lengths(s, f"{where}.segments[{i}]") for i, s in enumerate(d["segments"])]}
    return workload_from_dict(d, where, base_dir)


def _controller(d: dict, where: str, ladder: FrequencyLadder, slo: SloProfile, phase: PhaseKind) -> ControllerConfig:
    _check_keys(d, where, ("control_interval_ms", "freq_set_overhead_ms", "blocking_overhead"))
    return _build(where, ControllerConfig, ladder=ladder, slo=slo, phase=phase, **d)


def parse_scenario(doc: dict, base_dir: Path = Path("."), seed: Optional[int] = None) -> ScenarioConfig:
    """Validate a scenario document; errors carry the offending field path.

    ``seed`` overrides both the cluster seed and the workload seed.
    """
    _check_keys(
        doc,
        "config",
        ("schema_version", "name", "cluster", "ladder", "controller", "route", "slo", "workload",
         "calibration", "mode", "itl_mode", "sweep_ladder", "description"),
    )
    if doc.get("schema_version") != SCENARIO_SCHEMA_VERSION:
        raise ConfigError("config.schema_version", f"expected {SCENARIO_SCHEMA_VERSION}, got {doc.get('schema_version')!r}")
    for key in ("ladder", "slo", "workload"):
        if key not in doc:
            raise ConfigError(f"config.{key}", "missing field")

    cluster_doc = dict(doc.get("cluster", {}))
    _check_keys(cluster_doc, "config.cluster", tuple(ClusterConfig.__dataclass_fields__))
    if seed is not None:
        cluster_doc["seed"] = seed
    cluster = _build("config.cluster", ClusterConfig, **cluster_doc)

    ladder = _ladder(doc["ladder"], "config.ladder")
    _check_keys(doc["slo"], "config.slo", ("ttft_ms", "itl_ms"))
    slo = _build("config.slo", SloProfile, **doc["slo"])

    ctrl = doc.get("controller", {})
    if isinstance(ctrl, dict) and ({"prefill", "decode"} & set(ctrl)):
        _check_keys(ctrl, "config.controller", ("prefill", "decode"))
        pre_doc, dec_doc = ctrl.get("prefill", {}), ctrl.get("decode", {})
        pre_where, dec_where = "config.controller.prefill", "config.controller.decode"
    else:
        pre_doc = dec_doc = ctrl
        pre_where = dec_where = "config.controller"
    prefill = _controller(pre_doc, pre_where, ladder, slo, PhaseKind.PREFILL)
    decode = _controller(dec_doc, dec_where, ladder, slo, PhaseKind.DECODE)

    route_doc = doc.get("route", {})
    _check_keys(route_doc, "config.route", ("policy", "delta_mhz"))
    try:
        policy = RoutePolicy(route_doc.get("policy", "ecoroute"))
    except ValueError:
        raise ConfigError("config.route.policy", f"unknown policy {route_doc.get('policy')!r}") from None
    route = _build("config.route", RouteConfig, policy=policy, delta_mhz=route_doc.get("delta_mhz", 150.0))

    workload = _workload(doc["workload"], "config.workload", base_dir)
    if seed is not None and not isinstance(workload, TraceSpec):
        workload = replace(workload, seed=seed)

    mode = doc.get("mode", "adaptive")
    static = None
    if mode != "adaptive":
        if not isinstance(mode, dict) or set(mode) != {"static_mhz"}:
            raise ConfigError("config.mode", 'expected "adaptive" or {"static_mhz": <level>}')
        static = mode["static_mhz"]
        if static not in ladder:
            raise ConfigError("config.mode.static_mhz", f"{static!r} is not on the ladder {ladder.to_list()}")

    try:
        itl_mode = metrics.ItlMode(doc.get("itl_mode", "mean"))
    except ValueError:
        raise ConfigError("config.itl_mode", f"unknown ITL aggregation {doc.get('itl_mode')!r}") from None

    sweep = _ladder(doc["sweep_ladder"], "config.sweep_ladder") if "sweep_ladder" in doc else None

    cal_path = doc.get("calibration", "default")
    if cal_path != "default" and not Path(cal_path).is_absolute():
        cal_path = str(base_dir / cal_path)

    return ScenarioConfig(
        name=str(doc.get("name", "scenario")),
        cluster=cluster,
        prefill=prefill,
        decode=decode,
        route=route,
        slo=slo,
        workload=workload,
        calibration_path=cal_path,
        static_mhz=static,
        itl_mode=itl_mode,
        sweep_ladder=sweep,
    )


def load_scenario(path: str | Path, seed: Optional[int] = None) -> ScenarioConfig:
    """Load a scenario file; a bare name (``boundary_520``) resolves to a bundled scenario."""
    p = Path(path)
    if not p.exists() and p.suffix == "" and bundled_path(f"scenarios/{p.name}.json").is_file():
        p = bundled_path(f"scenarios/{p.name}.json")
    try:
        doc = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(str(p), f"cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(str(p), f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return parse_scenario(doc, p.parent, seed)


def bundled_scenarios() -> list[Path]:
    return sorted(Path(str(resources.files("pdsim") / "data" / "scenarios")).glob("*.json"))


# ------------------------------------------------------------------- running


def scenario_calibration(cfg: ScenarioConfig) -> Calibration:
    cal = load_calibration(cfg.calibration_path)
    ladders = [cfg.ladder] + ([cfg.sweep_ladder] if cfg.sweep_ladder else [])
    for ladder in ladders:
        missing = cal.covers(ladder)
        if missing:
            raise ConfigError("config.calibration", f"calibration has no coefficients for ladder levels {missing}")
    return cal


def run_arm(
    cfg: ScenarioConfig,
    workload: Sequence[Request],
    calibration: Calibration,
    static_mhz: Optional[int] = None,
    route: Optional[RouteConfig] = None,
    ladder: Optional[FrequencyLadder] = None,
) -> SimResult:
    """One simulation of ``cfg``'s cluster with optional overrides."""
    prefill, decode = cfg.prefill, cfg.decode
    if ladder is not None:
        prefill, decode = replace(prefill, ladder=ladder), replace(decode, ladder=ladder)
    return run(cfg.cluster, workload, prefill, decode, route or cfg.route, calibration, static_mhz)


def _run_job(job: tuple) -> SimResult:
    return run_arm(*job)


def _map_jobs(jobs: list[tuple], n_jobs: int) -> list[SimResult]:
    if n_jobs <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n_jobs, len(jobs))) as pool:
        return list(pool.map(_run_job, jobs))


def strict_interior_minimum(freqs: Sequence[int], energies: Sequence[float]) -> tuple[int, bool]:
    """Frequency of minimum energy and whether it is a strict interior minimum."""
    e = np.asarray(energies, dtype=float)
    i = int(np.argmin(e))
    unique = int(np.sum(e == e[i])) == 1
    return int(freqs[i]), bool(unique and 0 < i < len(e) - 1)


@dataclass
class SweepRow:
    freq_mhz: int
    energy_j: float
    prefill_energy_j: float
    decode_energy_j: float
    horizon_ms: float
    tsar: float
    isar: float


def sweep_scenario(cfg: ScenarioConfig, n_jobs: int = 1) -> tuple[list[SweepRow], int, bool]:
    """Static-frequency runs at every sweep level over one shared workload."""
    cal = scenario_calibration(cfg)
    ladder = cfg.sweep_ladder or cfg.ladder
    workload = generate(cfg.workload)
    results = _map_jobs([(cfg, workload, cal, f, None, ladder) for f in ladder], n_jobs)
    rows = []
    for f, res in zip(ladder, results):
        rep = metrics.compute_report(res, cfg.slo, cfg.itl_mode)
        rows.append(
            SweepRow(f, rep.energy_j, rep.energy_by_phase_j["prefill"], rep.energy_by_phase_j["decode"],
                     rep.horizon_ms, rep.tsar, rep.isar)
        )
    f_min, interior = strict_interior_minimum([r.freq_mhz for r in rows], [r.energy_j for r in rows])
    return rows, f_min, interior


COMPARE_ARMS = ("static_min", "static_max", "adaptive_round_robin", "adaptive_ecoroute")


def compare_scenario(cfg: ScenarioConfig, n_jobs: int = 1) -> dict[str, metrics.MetricsReport]:
    """The four comparison arms on one generated workload, reported over a common horizon."""
    cal = scenario_calibration(cfg)
    workload = generate(cfg.workload)
    rr = RouteConfig(RoutePolicy.ROUND_ROBIN, cfg.route.delta_mhz)
    eco = RouteConfig(RoutePolicy.ECOROUTE, cfg.route.delta_mhz)
    jobs = [
        (cfg, workload, cal, cfg.ladder.min, rr),
        (cfg, workload, cal, cfg.ladder.max, rr),
        (cfg, workload, cal, None, rr),
        (cfg, workload, cal, None, eco),
    ]
    results = _map_jobs(jobs, n_jobs)
    horizon = max(r.horizon_ms for r in results)
    return {
        arm: metrics.compute_report(res, cfg.slo, cfg.itl_mode, horizon_ms=horizon)
        for arm, res in zip(COMPARE_ARMS, results)
    }


# ------------------------------------------------------------------- output


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    try:
        path.write_text(buf.getvalue())
    except OSError as exc:
        raise ExportError(f"{path}: cannot write ({exc.strerror})") from exc


def _prepare_out(out: Path, names: Sequence[str], force: bool) -> None:
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise FileExistsError(f"{out / existing[0]} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _summary_rows(reports: dict[str, metrics.MetricsReport]) -> list[list]:
    rows = []
    for name, r in reports.items():
        rows.append([name, r.request_count, r.tsar, r.isar, r.energy_j, r.energy_by_phase_j["prefill"],
                     r.energy_by_phase_j["decode"], r.throughput_tps, r.ttft_percentiles_ms["p99"],
                     r.itl_percentiles_ms["p99"]])
    return rows


SUMMARY_HEADER = ("arm", "requests", "tsar", "isar", "energy_j", "prefill_energy_j", "decode_energy_j",
                  "throughput_tps", "ttft_p99_ms", "itl_p99_ms")


# --------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    cfg = load_scenario(args.config, args.seed)
    out = Path(args.out)
    _prepare_out(out, ["report.json", "report_timeseries.csv"], args.force)
    cal = scenario_calibration(cfg)
    res = run_arm(cfg, generate(cfg.workload), cal, cfg.static_mhz)
    report = metrics.compute_report(res, cfg.slo, cfg.itl_mode)
    metrics.export(report, out, "report")
    sys.stdout.write(_table(SUMMARY_HEADER, _summary_rows({cfg.name: report})))
    if args.plots:
        from . import figures

        figures.plot_timeseries(report, out / "timeseries.png")
    return EXIT_OK


SWEEP_HEADER = ("freq_mhz", "energy_j", "prefill_energy_j", "decode_energy_j", "horizon_ms", "tsar", "isar")


def cmd_sweep(args) -> int:
    cfg = load_scenario(args.config, args.seed)
    out = Path(args.out)
    _prepare_out(out, ["energy_vs_freq.csv", "sweep.json"], args.force)
    rows, f_min, interior = sweep_scenario(cfg, args.jobs)
    table = [[r.freq_mhz, r.energy_j, r.prefill_energy_j, r.decode_energy_j, r.horizon_ms, r.tsar, r.isar]
             for r in rows]
    _write_csv(out / "energy_vs_freq.csv", SWEEP_HEADER, table)
    (out / "sweep.json").write_text(
        json.dumps({"scenario": cfg.name, "minimum_mhz": f_min, "interior_minimum": interior}, indent=2) + "\n"
    )
    sys.stdout.write(_table(SWEEP_HEADER, table))
    sys.stdout.write(f"minimum_mhz\t{f_min}\ninterior_minimum\t{str(interior).lower()}\n")
    if args.plots:
        from . import figures

        figures.plot_sweep(rows, f_min, out / "energy_vs_freq.png")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_scenario(args.config, args.seed)
    out = Path(args.out)
    names = ["comparison.csv"] + [f"{a}.json" for a in COMPARE_ARMS]
    _prepare_out(out, names, args.force)
    reports = compare_scenario(cfg, args.jobs)
    rows = _summary_rows(reports)
    _write_csv(out / "comparison.csv", SUMMARY_HEADER, rows)
    for arm, rep in reports.items():
        metrics.export(rep, out, arm)
    sys.stdout.write(_table(SUMMARY_HEADER, rows))
    if args.plots:
        from . import figures

        figures.plot_compare(reports, out / "comparison.png")
    return EXIT_OK


def _read_ladder(path: str) -> FrequencyLadder:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(path, f"cannot read ladder ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(path, f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if isinstance(doc, dict):
        if "ladder" not in doc:
            raise ConfigError(f"{path}.ladder", "missing field")
        return _ladder(doc["ladder"], f"{path}.ladder")
    return _ladder(doc, path)


def cmd_fit(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    ladder = _read_ladder(args.ladder)
    samples = read_profile_csv(args.profile)
    tile = TileConfig(tile_width=args.tile_width)
    ttft = fit_ttft(samples, ladder, tile)
    itl = fit_itl(samples, ladder, tile)
    power = load_calibration(args.power).power
    cal = Calibration(ttft, itl, power, ladder.levels, f"fitted from {Path(args.profile).name}")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(calibration_to_dict(cal), indent=2) + "\n")
    rows = [[f, ttft.mae_ms[f], itl.mae_ms[f]] for f in ladder]
    sys.stdout.write(_table(("freq_mhz", "ttft_mae_ms", "itl_mae_ms"), rows))
    return EXIT_OK


def cmd_gen_workload(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    spec_path = Path(args.spec)
    if not spec_path.exists() and bundled_path(f"{args.spec}.json").is_file():
        spec_path = bundled_path(f"{args.spec}.json")
    try:
        doc = json.loads(spec_path.read_text())
    except OSError as exc:
        raise ConfigError(str(spec_path), f"cannot read spec ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(str(spec_path), f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    doc = {k: v for k, v in doc.items() if k != "name"}
    for key, value in (("rps", args.rps), ("duration_s", args.duration), ("seed", args.seed)):
        if value is not None:
            doc[key] = value
    spec = _workload(doc, "spec", spec_path.parent)
    requests = generate(spec)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(requests, out)
    stats = summarize(requests)
    sys.stdout.write(_table(tuple(stats), [list(stats.values())]))
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pdsim",
        description="Simulate frequency-scaled prefill/decode-disaggregated LLM serving. "
        "All subcommands are deterministic: a fixed config and --seed reproduce outputs byte for byte.",
    )
    sub = ap.add_subparsers(dest="command", required=True)
    default_out = os.environ.get("PDSIM_OUT", "out")
    default_jobs = int(os.environ.get("PDSIM_JOBS", "1"))

    def scenario_cmd(name: str, help_: str):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", "-c", required=True, help="scenario JSON, or the name of a bundled scenario")
        p.add_argument("--out", "-o", default=default_out, help="output directory (env PDSIM_OUT)")
        p.add_argument("--seed", type=int, default=None, help="override cluster and workload seeds")
        p.add_argument("--jobs", "-j", type=int, default=default_jobs, help="parallel arms (env PDSIM_JOBS)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--plots", action="store_true", help="also render PNG figures with matplotlib")
        return p

    scenario_cmd("simulate", "run one scenario and write a report").set_defaults(fn=cmd_simulate)
    scenario_cmd("sweep", "static-frequency energy sweep over the ladder").set_defaults(fn=cmd_sweep)
    scenario_cmd("compare", "static-min, static-max, adaptive+RR, adaptive+EcoRoute on one workload").set_defaults(
        fn=cmd_compare
    )

    p = sub.add_parser("fit", help="fit latency models from a profiling CSV")
    p.add_argument("--profile", required=True, help="CSV with header phase,freq_mhz,n_bt,n_req,n_kv,latency_ms")
    p.add_argument("--ladder", required=True, help='JSON list of MHz levels or {"ladder": [...]}')
    p.add_argument("--out", "-o", required=True, help="calibration JSON to write")
    p.add_argument("--power", default="default", help="calibration file to take power parameters from")
    p.add_argument("--tile-width", type=int, default=128)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_fit)

    p = sub.add_parser("gen-workload", help="materialize a workload spec as a JSONL trace")
    p.add_argument("--spec", required=True, help="workload spec JSON, or sharegpt_like / lmsys_like")
    p.add_argument("--out", "-o", required=True, help="JSONL trace to write")
    p.add_argument("--rps", type=float, default=None)
    p.add_argument("--duration", type=float, default=None, help="seconds")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_workload)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PdsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
