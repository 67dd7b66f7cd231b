"""Figures from a run directory (results.csv + summary.json)."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps the PNG bytes reproducible
PNG_META = {"Software": None}


def read_results(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(x) for x in row] for row in reader], dtype=float).reshape(-1, len(header))
    return {name: data[:, k] for k, name in enumerate(header)}


def _attack_marks(summary: dict) -> list[tuple[float, str]]:
    fired = summary.get("attack", {}).get("fired", [])
    return [(s["fired_s"], s["id"]) for s in fired]


def _mark(ax, marks) -> None:
    for t, label in marks:
        ax.axvline(t, color="0.4", lw=0.8, ls="--")
        ax.annotate(label, (t, 1.0), xycoords=("data", "axes fraction"), xytext=(3, -10),
                    textcoords="offset points", fontsize=7, color="0.3")


def render_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Write overview.png and voltages.png; returns the written paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = read_results(run_dir / "results.csv")
    summary_path = run_dir / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    marks = _attack_marks(summary)
    t = cols["t_s"]
    title = summary.get("scenario", run_dir.name)

    plt.rcParams.update({"font.size": 8, "axes.grid": True, "grid.alpha": 0.3})
    fig, axes = plt.subplots(4, 1, figsize=(7.0, 8.0), sharex=True, constrained_layout=True)
    ax = axes[0]
    ax.plot(t, cols["substation_p_kw"], color="k", lw=1.0, label="substation")
    ax.fill_between(t, -0.1 - cols["losses_kw"], 0.1 + cols["losses_kw"], color="tab:green", alpha=0.15,
                    label="deadband + losses")
    ax.set_ylabel("P [kW]")
    ax.legend(loc="upper left", fontsize=7)
    ax.set_title(title)
    ax = axes[1]
    ax.plot(t, cols["load_p_kw"], label="load", color="tab:red")
    ax.plot(t, cols["pv_p_kw"], label="pv", color="tab:orange")
    ax.plot(t, cols["bss_p_kw"], label="bss", color="tab:blue")
    ax.set_ylabel("P [kW]")
    ax.legend(loc="upper left", fontsize=7, ncol=3)
    ax = axes[2]
    ax.plot(t, cols["bss_soc"], color="tab:blue")
    ax.set_ylabel("SoC")
    ax = axes[3]
    ax.plot(t, cols["measurement_age_s"], color="tab:purple")
    ax.set_ylabel("meas. age [s]")
    ax.set_xlabel("t [s]")
    for ax in axes:
        _mark(ax, marks)
    overview = out_dir / "overview.png"
    fig.savefig(overview, dpi=120, metadata=PNG_META)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7.0, 3.0), constrained_layout=True)
    for name in sorted(k for k in cols if k.startswith("v_pu_")):
        ax.plot(t, cols[name], lw=0.9, label=f"bus {name[5:]}")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("|V| [pu]")
    ax.legend(loc="best", fontsize=6, ncol=4)
    _mark(ax, marks)
    voltages = out_dir / "voltages.png"
    fig.savefig(voltages, dpi=120, metadata=PNG_META)
    plt.close(fig)
    return [overview, voltages]
