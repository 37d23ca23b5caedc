"""Artifact emission: delimited output and rendered figures.

Every experiment writes a CSV of raw per-cell values next to an SVG figure
rendered with matplotlib (a heatmap with a unity contour for grid studies,
a histogram with a unity line for sweep studies).  Output is byte
deterministic for a fixed config and seed: floats are written with ``repr``
and the SVG backend runs with a fixed hash salt and no timestamp metadata.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "format_value",
    "write_csv",
    "write_json",
    "write_jsonl",
    "heatmap_svg",
    "histogram_svg",
]

matplotlib.rcParams["svg.hashsalt"] = "gacv"


def format_value(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: Path, fieldnames: Sequence[str], rows: Sequence[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([format_value(row[name]) for name in fieldnames])
    return path


def write_json(path: Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_jsonl(path: Path, records: Sequence[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def _save_deterministic(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def heatmap_svg(
    path: Path,
    x_values: Sequence[float],
    y_values: Sequence[float],
    grid: np.ndarray,
    xlabel: str,
    ylabel: str,
    title: str,
    unity_contour: bool = True,
) -> Path:
    """Ratio heatmap over a (x, y) grid with a red contour at ratio one.

    ``grid`` is indexed ``[y, x]``; NaN cells render blank.  The y axis is
    log scaled since sweep extents span decades.
    """
    grid = np.asarray(grid, dtype=float)
    fig, ax = plt.subplots(figsize=(8, 6))
    x = np.asarray(x_values, dtype=float)
    y = np.asarray(y_values, dtype=float)
    mesh = ax.pcolormesh(
        x, y, np.ma.masked_invalid(grid), shading="nearest", cmap="viridis"
    )
    fig.colorbar(mesh, ax=ax, label="variance ratio")
    if unity_contour and np.isfinite(grid).any():
        finite = grid[np.isfinite(grid)]
        if finite.min() < 1.0 < finite.max():
            ax.contour(x, y, grid, levels=[1.0], colors="red", linewidths=2.0)
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    return _save_deterministic(fig, path)


def histogram_svg(
    path: Path,
    series: Mapping[str, Sequence[float]],
    bins: int,
    xlabel: str,
    title: str,
    unity_line: bool = True,
) -> Path:
    """Overlaid ratio histograms, one bar series per label, unity line marked.

    Each non-empty bin is drawn as one bar patch tagged with a ``gid`` of the
    form ``label:bin-<index>`` so the emitted SVG structure can be inspected.
    """
    fig, ax = plt.subplots(figsize=(8, 6))
    finite_all = np.concatenate(
        [np.asarray(v, dtype=float)[np.isfinite(v)] for v in series.values()]
        or [np.empty(0)]
    )
    if finite_all.size:
        lo = min(finite_all.min(), 1.0)
        hi = max(finite_all.max(), 1.0)
        span = (hi - lo) or 1.0
        edges = np.linspace(lo - 0.02 * span, hi + 0.02 * span, bins + 1)
        for label, values in series.items():
            values = np.asarray(values, dtype=float)
            values = values[np.isfinite(values)]
            counts, _ = np.histogram(values, bins=edges)
            bars = ax.bar(
                0.5 * (edges[:-1] + edges[1:]),
                counts,
                width=np.diff(edges),
                alpha=0.55,
                label=label,
            )
            for idx, (count, patch) in enumerate(zip(counts, bars.patches)):
                if count > 0:
                    patch.set_gid(f"{label}:bin-{idx}")
                else:
                    patch.set_visible(False)
        ax.legend()
    if unity_line:
        ax.axvline(1.0, color="black", linewidth=2.0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.set_title(title)
    return _save_deterministic(fig, path)
