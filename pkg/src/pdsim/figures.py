"""Optional matplotlib figures rendered from exported report data."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import MetricsReport  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows: Sequence, f_min: int, path: str | Path) -> Path:
    """Total and per-phase energy against the static frequency."""
    f = np.array([r.freq_mhz for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(f, [r.energy_j / 1e3 for r in rows], "o-", label="total")
    ax.plot(f, [r.prefill_energy_j / 1e3 for r in rows], "s--", label="prefill")
    ax.plot(f, [r.decode_energy_j / 1e3 for r in rows], "^--", label="decode")
    ax.axvline(f_min, color="grey", lw=0.8, ls=":")
    ax.set_xlabel("frequency (MHz)")
    ax.set_ylabel("energy (kJ)")
    ax.legend()
    return _save(fig, Path(path))


def plot_compare(reports: dict[str, MetricsReport], path: str | Path) -> Path:
    """Energy per arm next to TSAR/ISAR."""
    arms = list(reports)
    x = np.arange(len(arms))
    fig, (ax_e, ax_s) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_e.bar(x - 0.2, [reports[a].energy_by_phase_j["prefill"] / 1e3 for a in arms], 0.4, label="prefill")
    ax_e.bar(x + 0.2, [reports[a].energy_by_phase_j["decode"] / 1e3 for a in arms], 0.4, label="decode")
    ax_e.set_ylabel("energy (kJ)")
    ax_e.legend()
    ax_s.bar(x - 0.2, [reports[a].tsar for a in arms], 0.4, label="TSAR")
    ax_s.bar(x + 0.2, [reports[a].isar for a in arms], 0.4, label="ISAR")
    ax_s.set_ylim(0, 1.05)
    ax_s.legend(loc="lower right")
    for ax in (ax_e, ax_s):
        ax.set_xticks(x, arms, rotation=20, ha="right", fontsize=8)
    return _save(fig, Path(path))


def plot_timeseries(report: MetricsReport, path: str | Path) -> Path:
    """Frequency and running-request count per instance over time."""
    rows = report.time_series
    fig, (ax_f, ax_n) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    keys = sorted({(r[2], r[1]) for r in rows})
    for phase, idx in keys:
        sel = [r for r in rows if r[2] == phase and r[1] == idx]
        t = np.array([r[0] for r in sel]) / 1e3
        label = f"{phase[0].upper()}{idx}"
        ax_f.step(t, [r[3] for r in sel], where="post", label=label, lw=0.8)
        if phase == "decode":
            ax_n.step(t, [r[4] for r in sel], where="post", label=label, lw=0.8)
    ax_f.set_ylabel("MHz")
    ax_f.legend(fontsize=7, ncol=4)
    ax_n.set_ylabel("decode n_req")
    ax_n.set_xlabel("time (s)")
    return _save(fig, Path(path))
