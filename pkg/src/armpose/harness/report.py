"""CSV and SVG curves: accuracy vs ADD threshold, AUC vs occlusion ratio."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..metrics import accuracy_curve


def read_add_column(samples_csv) -> np.ndarray:
    try:
        with open(samples_csv, newline="") as fh:
            return np.array([float(row["add_m"]) for row in csv.DictReader(fh)])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read ADD values from {samples_csv}: {exc}") from exc


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _plot(path, x, ys: dict, xlabel: str, ylabel: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed hash salt keeps SVG element ids stable across runs
    matplotlib.rcParams["svg.hashsalt"] = "armpose"
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for label, y in ys.items():
        ax.plot(x, y, marker="o" if len(x) < 20 else None, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    if len(ys) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def accuracy_report(samples_csvs: dict, out_prefix, max_threshold: float = 0.1) -> None:
    """``<prefix>.csv`` and ``<prefix>.svg`` with accuracy against ADD threshold per run."""
    curves = {}
    thresholds = None
    for label, path in samples_csvs.items():
        thresholds, acc = accuracy_curve(read_add_column(path), max_threshold)
        curves[label] = acc
    labels = list(curves)
    _write_csv(f"{out_prefix}.csv", ["threshold_m", *labels], [[t, *(curves[l][i] for l in labels)] for i, t in enumerate(thresholds)])
    _plot(f"{out_prefix}.svg", thresholds, curves, "ADD threshold (m)", "accuracy")


def occlusion_report(sweeps: dict, out_prefix) -> None:
    """``<prefix>.csv`` and ``<prefix>.svg`` with AUC against occlusion ratio per model."""
    ratios = [row["ratio"] for row in next(iter(sweeps.values()))]
    for label, sweep in sweeps.items():
        if [row["ratio"] for row in sweep] != ratios:
            raise DataError(f"sweep {label} uses different ratios")
    labels = list(sweeps)
    _write_csv(
        f"{out_prefix}.csv", ["ratio", *labels], [[r, *(sweeps[l][i]["auc"] for l in labels)] for i, r in enumerate(ratios)]
    )
    _plot(f"{out_prefix}.svg", ratios, {l: [row["auc"] for row in sweeps[l]] for l in labels}, "occlusion ratio", "AUC of ADD")
