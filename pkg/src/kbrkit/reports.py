"""Report emission: delimited result tables, plot-ready summaries, and figures.

Two CSV schemas are frozen (see README):

* results:   experiment,method,setting,run_id,seed,mse,wall_ms
* plot data: x,method,q25,median,q75

Figures are rendered with the Agg backend straight to PNG files alongside
the CSVs, one per experiment kind.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

RESULT_COLUMNS = ("experiment", "method", "setting", "run_id", "seed", "mse", "wall_ms")
PLOT_COLUMNS = ("x", "method", "q25", "median", "q75")

_METHOD_ORDER = {"iw": 0, "original": 1, "iw_true_ratio": 2, "ekf": 3, "pf": 4}


def _fmt(value) -> str:
    if isinstance(value, float):
        return str(float(value))
    return str(value)


def write_results_csv(path, rows) -> None:
    """Write result rows in the frozen schema; values beyond wall_ms are deterministic."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])


def summarize_rows(rows) -> list[dict]:
    """Per-(setting, method) quartile summary of the mse column.

    The x column carries the setting (dimension, dynamics name, or sample
    size); rows come back sorted for deterministic output.
    """
    groups: dict[tuple, list[float]] = defaultdict(list)
    for row in rows:
        groups[(row["setting"], row["method"])].append(float(row["mse"]))
    out = []
    for (setting, method), values in groups.items():
        q25, med, q75 = np.percentile(values, [25.0, 50.0, 75.0])
        out.append(
            {"x": setting, "method": method, "q25": float(q25), "median": float(med), "q75": float(q75)}
        )
    out.sort(key=lambda r: (_setting_key(r["x"]), _METHOD_ORDER.get(r["method"], 99), r["method"]))
    return out


def _setting_key(setting: str):
    try:
        return (0, float(setting), "")
    except ValueError:
        return (1, 0.0, setting)


def write_plot_csv(path, plot_rows) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_COLUMNS)
        for row in plot_rows:
            writer.writerow([_fmt(row[c]) for c in PLOT_COLUMNS])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_quartile_lines(plot_rows, path, xlabel: str, title: str, logx: bool = False) -> None:
    """Median line with an interquartile band per method over a numeric x-axis."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    methods = sorted({r["method"] for r in plot_rows}, key=lambda m: _METHOD_ORDER.get(m, 99))
    for method in methods:
        pts = sorted(
            [r for r in plot_rows if r["method"] == method], key=lambda r: float(r["x"])
        )
        xs = [float(r["x"]) for r in pts]
        ax.plot(xs, [r["median"] for r in pts], marker="o", label=method)
        ax.fill_between(xs, [r["q25"] for r in pts], [r["q75"] for r in pts], alpha=0.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    if logx:
        ax.set_xscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_method_boxes(rows, path, title: str) -> None:
    """Per-method box plot of the mse column (one setting per figure)."""
    plt = _pyplot()
    groups: dict[str, list[float]] = defaultdict(list)
    for row in rows:
        groups[row["method"]].append(float(row["mse"]))
    methods = sorted(groups, key=lambda m: _METHOD_ORDER.get(m, 99))
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.boxplot([groups[m] for m in methods], tick_labels=methods)
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_figures(command: str, rows, plot_rows, out_dir: Path) -> list[Path]:
    """Render the per-command figure(s) next to the CSV output; returns the paths."""
    out_dir = Path(out_dir)
    paths: list[Path] = []
    if command == "posterior-mean":
        p = out_dir / "posterior_mean.png"
        render_quartile_lines(plot_rows, p, xlabel="dimension", title="Posterior-mean MSE")
        paths.append(p)
    elif command == "kbf":
        for setting in sorted({r["setting"] for r in rows}):
            p = out_dir / f"kbf_{setting}.png"
            render_method_boxes(
                [r for r in rows if r["setting"] == setting], p, title=f"Filtering MSE ({setting})"
            )
            paths.append(p)
    elif command == "rate-study":
        p = out_dir / "rate_study.png"
        render_quartile_lines(
            plot_rows, p, xlabel="sample size", title="Ratio sup-norm error", logx=True
        )
        paths.append(p)
    return paths
