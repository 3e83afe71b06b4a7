"""Quadtree index over a multi-resolution patch grid.

Level 0 is the finest resolution and level ``num_levels - 1`` the coarsest.
Coarsest-level tissue patches are numbered row-major over the grid.  Every
finer level is stored so that patch ``i`` at level ``j + 1`` owns the four
patches ``4i .. 4i + 3`` at level ``j``, in the order top-left, top-right,
bottom-left, bottom-right.  Background children of a retained parent are
still materialized; they only carry ``tissue_flags == False``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, take_rows

# (row, col) offset of child c inside its parent
_CHILD_OFFSETS = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.int64)


def find_sub_patch_ids(i: int) -> tuple[int, int, int, int]:
    if i < 0:
        raise ValueError(f"patch id must be >= 0, got {i}")
    return (4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3)


def rank_parents(a, k: int) -> np.ndarray:
    """Ids of the ``min(k, len(a))`` highest scores; ties go to the lower id."""
    scores = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValueError("attention vector is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = np.argsort(-scores, kind="stable")
    return order[: min(k, scores.size)]


def find_topk_ids(a, k: int) -> np.ndarray:
    """Children at the next finer level of the top-``k`` attention parents.

    Parents appear in rank order, each followed by its four children in
    ascending id order.
    """
    parents = rank_parents(a, k)
    return (4 * parents[:, None] + np.arange(4)).reshape(-1)


def distill_features(features: Tensor, ids) -> Tensor:
    """Gather the rows ``ids`` of ``features`` in the given order."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= features.shape[0]):
        bad = ids[(ids < 0) | (ids >= features.shape[0])][0]
        raise IndexError(f"patch id {bad} out of range for {features.shape[0]} patches")
    return take_rows(features, ids)


@dataclass(frozen=True)
class PatchRef:
    level: int
    id: int
    coords: tuple[int, int]


@dataclass(frozen=True)
class Box:
    """Half-open rectangle ``[r0, r1) x [c0, c1)`` in finest-level patch units."""

    r0: int
    c0: int
    r1: int
    c1: int

    @property
    def area(self) -> int:
        return (self.r1 - self.r0) * (self.c1 - self.c0)

    def intersects(self, other: "Box") -> bool:
        return self.r0 < other.r1 and other.r0 < self.r1 and self.c0 < other.c1 and other.c0 < self.c1


class QuadTreeIndex:
    """Immutable parent/child index plus per-level grid coordinates."""

    def __init__(self, coarse_grid: tuple[int, int], num_levels: int, coarse_ids_rc: np.ndarray,
                 tissue_flags: list[np.ndarray]):
        self.coarse_grid = (int(coarse_grid[0]), int(coarse_grid[1]))
        self.num_levels = int(num_levels)
        top = self.num_levels - 1
        coords: list[np.ndarray] = [None] * self.num_levels  # type: ignore[list-item]
        coords[top] = np.asarray(coarse_ids_rc, dtype=np.int64).reshape(-1, 2)
        for j in range(top - 1, -1, -1):
            parent = coords[j + 1]
            coords[j] = (2 * parent[:, None, :] + _CHILD_OFFSETS[None, :, :]).reshape(-1, 2)
        self._coords = coords
        for c in coords:
            c.setflags(write=False)
        self.tissue_flags = [np.asarray(t, dtype=bool) for t in tissue_flags]
        for j, t in enumerate(self.tissue_flags):
            if t.shape != (len(coords[j]),):
                raise ValueError(f"tissue flags at level {j} have shape {t.shape}, expected ({len(coords[j])},)")
            t.setflags(write=False)

    @property
    def counts(self) -> list[int]:
        return [len(c) for c in self._coords]

    @property
    def grid_dims(self) -> list[tuple[int, int]]:
        r, c = self.coarse_grid
        top = self.num_levels - 1
        return [(r << (top - j), c << (top - j)) for j in range(self.num_levels)]

    def coords(self, level: int) -> np.ndarray:
        return self._coords[level]

    def patch_ref(self, level: int, i: int) -> PatchRef:
        if not 0 <= level < self.num_levels:
            raise ValueError(f"level {level} outside [0, {self.num_levels})")
        if not 0 <= i < self.counts[level]:
            raise IndexError(f"patch id {i} out of range at level {level}")
        r, c = self._coords[level][i]
        return PatchRef(level, int(i), (int(r), int(c)))

    def resolve_coords(self, ref: PatchRef) -> Box:
        expected = self.patch_ref(ref.level, ref.id)
        if tuple(ref.coords) != expected.coords:
            raise ValueError(f"coords {ref.coords} inconsistent with id {ref.id} at level {ref.level}")
        return resolve_coords(ref)

    def to_dict(self) -> dict:
        return {
            "coarse_grid": list(self.coarse_grid),
            "num_levels": self.num_levels,
            "coarse_coords": self._coords[-1].tolist(),
            "background": {str(j): np.flatnonzero(~t).tolist() for j, t in enumerate(self.tissue_flags) if (~t).any()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadTreeIndex":
        num_levels = int(d["num_levels"])
        coarse = np.asarray(d["coarse_coords"], dtype=np.int64).reshape(-1, 2)
        n_top = len(coarse)
        counts = [n_top * 4 ** (num_levels - 1 - j) for j in range(num_levels)]
        flags = [np.ones(n, dtype=bool) for n in counts]
        for j, ids in d.get("background", {}).items():
            flags[int(j)][np.asarray(ids, dtype=np.int64)] = False
        return cls(tuple(d["coarse_grid"]), num_levels, coarse, flags)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuadTreeIndex):
            return NotImplemented
        return (
            self.coarse_grid == other.coarse_grid
            and self.num_levels == other.num_levels
            and np.array_equal(self._coords[-1], other._coords[-1])
            and all(np.array_equal(a, b) for a, b in zip(self.tissue_flags, other.tissue_flags))
        )

    __hash__ = None  # type: ignore[assignment]


def resolve_coords(ref: PatchRef) -> Box:
    """Slide-space box of a patch, side ``2**level`` finest-level units."""
    if ref.level < 0 or ref.id < 0 or min(ref.coords) < 0:
        raise ValueError(f"invalid patch reference {ref}")
    side = 1 << ref.level
    r, c = ref.coords
    return Box(r * side, c * side, r * side + side, c * side + side)


def build_quadtree(coarse_grid: tuple[int, int], num_levels: int, tissue_mask=None,
                   background: dict[int, np.ndarray] | None = None) -> QuadTreeIndex:
    """Build the index from a coarsest-level tissue mask.

    ``tissue_mask`` is a boolean ``rows x cols`` array (all tissue when
    omitted).  ``background`` optionally maps a finer level to a boolean
    vector over that level's patches marking background children; they
    stay in the index, flagged.
    """
    rows, cols = int(coarse_grid[0]), int(coarse_grid[1])
    if rows * cols < 1:
        raise ValueError("coarse grid must contain at least one patch")
    if num_levels < 1:
        raise ValueError("num_levels must be >= 1")
    mask = np.ones((rows, cols), dtype=bool) if tissue_mask is None else np.asarray(tissue_mask, dtype=bool)
    if mask.shape != (rows, cols):
        raise ValueError(f"tissue mask shape {mask.shape} != grid {(rows, cols)}")
    if not mask.any():
        raise ValueError("tissue mask is empty")
    rc = np.argwhere(mask)  # row-major
    n_top = len(rc)
    flags = [np.ones(n_top * 4 ** (num_levels - 1 - j), dtype=bool) for j in range(num_levels)]
    for j, bg in (background or {}).items():
        bg = np.asarray(bg, dtype=bool)
        if j >= num_levels - 1 or bg.shape != flags[j].shape:
            raise ValueError(f"background mask for level {j} has wrong shape")
        flags[j] = ~bg
    return QuadTreeIndex((rows, cols), num_levels, rc, flags)
