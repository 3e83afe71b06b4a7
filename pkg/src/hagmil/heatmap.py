"""Patch-resolution attention heatmaps (CSV rows and binary PGM)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pyramid import QuadTreeIndex

CSV_HEADER = ("level", "id", "row", "col", "raw_attention", "normalized", "pruned")


@dataclass
class HeatmapGrid:
    level: int
    values: np.ndarray  # rows x cols normalized attention, 0 where pruned/background/outside tissue
    raw: np.ndarray  # per patch id, NaN where never distilled
    normalized: np.ndarray  # per patch id
    pruned: np.ndarray  # per patch id: not in this level's bag
    background: np.ndarray  # per patch id: tissue flag unset
    coords: np.ndarray  # per patch id (row, col)

    def pgm_bytes(self) -> bytes:
        rows, cols = self.values.shape
        pixels = np.rint(255.0 * self.values).astype(np.uint8)
        return f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes()


def heatmap_grid(level: int, attention, bag_ids, index: QuadTreeIndex) -> HeatmapGrid:
    """Min-max normalize one level's attention over the patches that were in its bag.

    A single patch, or a bag with constant attention, normalizes to 1.
    """
    attention = np.asarray(attention, dtype=np.float64).reshape(-1)
    bag_ids = np.asarray(bag_ids, dtype=np.int64).reshape(-1)
    if attention.size == 0:
        raise ValueError(f"no attention recorded for level {level}")
    if attention.shape != bag_ids.shape:
        raise ValueError(f"{attention.size} attention values for {bag_ids.size} bag ids")
    n = index.counts[level]
    raw = np.full(n, np.nan)
    raw[bag_ids] = attention
    lo, hi = attention.min(), attention.max()
    norm = np.zeros(n)
    norm[bag_ids] = 1.0 if hi == lo else (attention - lo) / (hi - lo)
    pruned = np.ones(n, dtype=bool)
    pruned[bag_ids] = False
    background = ~index.tissue_flags[level]
    norm[background] = 0.0
    coords = index.coords(level)
    grid = np.zeros(index.grid_dims[level])
    grid[coords[:, 0], coords[:, 1]] = norm
    return HeatmapGrid(level, grid, raw, norm, pruned, background, coords)


def level_heatmap(result, index: QuadTreeIndex, level: int) -> HeatmapGrid:
    lo = result.level(level)
    return heatmap_grid(level, lo.attention, lo.bag_ids, index)


def export_heatmap(level_output, index: QuadTreeIndex, path, fmt: str = "csv") -> HeatmapGrid:
    """Write a heatmap for one level as ``csv`` or ``pgm`` and return the grid."""
    grid = heatmap_grid(level_output.level, level_output.attention, level_output.bag_ids, index)
    path = Path(path)
    if fmt == "pgm":
        path.write_bytes(grid.pgm_bytes())
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for i in range(len(grid.raw)):
                raw = "" if np.isnan(grid.raw[i]) else repr(float(grid.raw[i]))
                w.writerow((grid.level, i, int(grid.coords[i, 0]), int(grid.coords[i, 1]), raw,
                            repr(float(grid.normalized[i])), int(grid.pruned[i])))
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}; use 'csv' or 'pgm'")
    return grid


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)


def planted_contrast(grid: HeatmapGrid, planted) -> float:
    """Mean normalized attention over planted cells minus the mean over the other tissue cells."""
    planted = np.asarray(planted, dtype=bool)
    tissue = ~grid.background
    inside = planted & tissue
    outside = ~planted & tissue
    if not inside.any() or not outside.any():
        raise ValueError("need both planted and non-planted tissue cells")
    return float(grid.normalized[inside].mean() - grid.normalized[outside].mean())
