import csv
from types import SimpleNamespace

import numpy as np
import pytest

from hagmil.heatmap import CSV_HEADER, export_heatmap, heatmap_grid, planted_contrast, read_pgm
from hagmil.pyramid import build_quadtree


@pytest.fixture
def index():
    return build_quadtree((2, 2), 2)


def _out(level, attention, ids):
    return SimpleNamespace(level=level, attention=np.asarray(attention, float), bag_ids=np.asarray(ids))


def test_single_patch_is_full_scale(tmp_path, index):
    grid = export_heatmap(_out(0, [0.3], [5]), index, tmp_path / "h.pgm", "pgm")
    px = read_pgm(tmp_path / "h.pgm")
    assert px.shape == (4, 4) and px.sum() == 255
    r, c = grid.coords[5]
    assert px[r, c] == 255


def test_uniform_attention_normalizes_to_one(index):
    grid = heatmap_grid(1, [0.2] * 4, [0, 1, 2, 3], index)
    np.testing.assert_array_equal(grid.values, np.ones((2, 2)))


def test_min_max_and_pruned(index):
    grid = heatmap_grid(0, [1.0, 3.0, 2.0], [0, 1, 4], index)
    assert grid.normalized[0] == 0.0 and grid.normalized[1] == 1.0 and grid.normalized[4] == 0.5
    assert grid.pruned.sum() == 13 and not grid.pruned[[0, 1, 4]].any()
    assert np.isnan(grid.raw[2]) and grid.raw[4] == 2.0


def test_csv_and_pgm_agree(tmp_path, index):
    out = _out(0, np.linspace(-1, 2, 8), [0, 1, 2, 3, 8, 9, 10, 11])
    export_heatmap(out, index, tmp_path / "h.csv", "csv")
    export_heatmap(out, index, tmp_path / "h.pgm", "pgm")
    with (tmp_path / "h.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_HEADER and len(rows) == 17
    px = read_pgm(tmp_path / "h.pgm")
    for row in rows[1:]:
        r, c, norm, pruned = int(row[2]), int(row[3]), float(row[5]), int(row[6])
        assert px[r, c] == int(np.rint(255 * norm))
        assert pruned == (row[4] == "")


def test_pgm_header(tmp_path, index):
    export_heatmap(_out(1, [0.0, 1.0], [0, 3]), index, tmp_path / "h.pgm", "pgm")
    raw = (tmp_path / "h.pgm").read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n") and len(raw) == len(b"P5\n2 2\n255\n") + 4


def test_background_cells_are_zero():
    bg = np.zeros(16, dtype=bool)
    bg[3] = True
    idx = build_quadtree((2, 2), 2, background={0: bg})
    grid = heatmap_grid(0, [5.0, 1.0], [3, 2], idx)
    assert grid.normalized[3] == 0.0 and grid.background[3]


def test_errors(tmp_path, index):
    with pytest.raises(ValueError):
        heatmap_grid(0, [], [], index)
    with pytest.raises(ValueError):
        heatmap_grid(0, [1.0, 2.0], [1], index)
    with pytest.raises(ValueError):
        export_heatmap(_out(0, [1.0], [0]), index, tmp_path / "x", "png")
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "bad.pgm")


def test_planted_contrast(index):
    grid = heatmap_grid(1, [4.0, 0.0, 2.0, 0.0], [0, 1, 2, 3], index)
    assert planted_contrast(grid, [True, False, False, False]) == pytest.approx(1.0 - 0.5 / 3)
    with pytest.raises(ValueError):
        planted_contrast(grid, [False] * 4)
