"""Confidence intervals, CSV helpers and SVG heatmaps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .mdp import GridMap

Z_95 = 1.96
_KNOWN_EXTS = (".csv", ".json", ".svg")


def with_ext(base, ext: str) -> Path:
    """``base`` with extension ``ext``; dots inside stems like ``DR_1.3`` are kept."""
    base = Path(base)
    if base.suffix in _KNOWN_EXTS:
        return base.with_suffix(ext)
    return base.with_name(base.name + ext)


@dataclass
class CiSummary:
    mean: np.ndarray
    half_width: np.ndarray
    n: int
    ci_available: bool


def summarize_ci(series) -> CiSummary:
    """Per-point mean and 1.96 * sample std / sqrt(N) over the first axis.

    With fewer than two series the half-width is NaN and ``ci_available`` is False.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n == 0:
        raise ValueError("no series to summarize")
    mean = x.mean(axis=0)
    if n < 2:
        return CiSummary(mean, np.full(mean.shape, np.nan), n, False)
    half = Z_95 * x.std(axis=0, ddof=1) / math.sqrt(n)
    return CiSummary(mean, half, n, True)


def write_csv(path, header: list, rows: Iterable) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# heatmaps

_LOW = np.array([255, 255, 229])
_HIGH = np.array([127, 0, 0])


def _color(t: float) -> str:
    rgb = np.round(_LOW + (_HIGH - _LOW) * t).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def emit_heatmap(values, grid: GridMap, path, cell: int = 24) -> tuple[Path, Path]:
    """Write ``<path>.csv`` with (x, y, value) rows and ``<path>.svg``.

    Colors scale linearly between the smallest and largest value; wall
    cells are left blank.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.n_states,):
        raise ValueError(f"expected {grid.n_states} values for this map, got {values.shape}")
    base = Path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(
        with_ext(base, ".csv"), ["x", "y", "value"],
        ((x, y, values[i]) for i, (y, x) in enumerate(grid.coords)),
    )
    lo, hi = float(np.min(values)), float(np.max(values))
    span = hi - lo
    w, h = grid.width * cell, grid.height * cell
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">'
    ]
    for i, (y, x) in enumerate(grid.coords):
        t = 0.0 if span == 0 else (values[i] - lo) / span
        parts.append(
            f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" height="{cell}" '
            f'fill="{_color(t)}"><title>{values[i]:.6g}</title></rect>'
        )
    parts.append("</svg>")
    svg_path = with_ext(base, ".svg")
    svg_path.write_text("\n".join(parts) + "\n")
    return csv_path, svg_path


def read_heatmap_csv(path, grid: GridMap) -> np.ndarray:
    out = np.zeros(grid.n_states)
    for row in read_csv(path):
        out[grid.index[(int(row["y"]), int(row["x"]))]] = float(row["value"])
    return out
