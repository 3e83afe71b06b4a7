import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hagmil.pyramid import (Box, PatchRef, QuadTreeIndex, build_quadtree, distill_features, find_sub_patch_ids,
                            find_topk_ids, rank_parents, resolve_coords)
from hagmil.tensor import Tensor

from oracles import brute_topk_children


def test_sub_patch_ids_examples():
    assert find_sub_patch_ids(0) == (0, 1, 2, 3)
    assert find_sub_patch_ids(7) == (28, 29, 30, 31)
    with pytest.raises(ValueError):
        find_sub_patch_ids(-1)


def test_topk_example():
    np.testing.assert_array_equal(find_topk_ids([0.1, 0.9, 0.5], 2), [4, 5, 6, 7, 8, 9, 10, 11])


def test_topk_ties_go_to_lower_id():
    np.testing.assert_array_equal(rank_parents([0.5, 0.5, 0.5], 2), [0, 1])


def test_topk_k_larger_than_bag():
    np.testing.assert_array_equal(find_topk_ids([1.0, 2.0], 5), [4, 5, 6, 7, 0, 1, 2, 3])


def test_topk_errors():
    with pytest.raises(ValueError):
        rank_parents([], 1)
    with pytest.raises(ValueError):
        rank_parents([1.0], 0)


def test_distill_gathers_rows_in_order():
    f = Tensor(np.arange(12.0).reshape(6, 2))
    np.testing.assert_array_equal(distill_features(f, [5, 0, 5]).data, [[10, 11], [0, 1], [10, 11]])
    with pytest.raises(IndexError):
        distill_features(f, [6])


def test_resolve_coords_box_side():
    assert resolve_coords(PatchRef(0, 0, (3, 5))) == Box(3, 5, 4, 6)
    assert resolve_coords(PatchRef(2, 0, (1, 2))) == Box(4, 8, 8, 12)
    with pytest.raises(ValueError):
        resolve_coords(PatchRef(0, 0, (-1, 0)))


def test_build_quadtree_counts_and_dims():
    idx = build_quadtree((8, 8), 3)
    assert idx.counts == [1024, 256, 64]
    assert idx.grid_dims == [(32, 32), (16, 16), (8, 8)]
    np.testing.assert_array_equal(idx.coords(2)[:3], [[0, 0], [0, 1], [0, 2]])
    np.testing.assert_array_equal(idx.coords(1)[:4], [[0, 0], [0, 1], [1, 0], [1, 1]])


def test_tissue_mask_row_major_and_errors():
    mask = np.array([[0, 1], [1, 1]], dtype=bool)
    idx = build_quadtree((2, 2), 2, mask)
    np.testing.assert_array_equal(idx.coords(1), [[0, 1], [1, 0], [1, 1]])
    assert idx.counts == [12, 3]
    with pytest.raises(ValueError):
        build_quadtree((2, 2), 2, np.zeros((2, 2), dtype=bool))
    with pytest.raises(ValueError):
        build_quadtree((0, 3), 2)


def test_background_children_are_materialized_and_flagged():
    bg = np.zeros(16, dtype=bool)
    bg[[1, 7]] = True
    idx = build_quadtree((2, 2), 2, background={0: bg})
    assert idx.counts == [16, 4]
    assert not idx.tissue_flags[0][1] and idx.tissue_flags[0][0]
    back = QuadTreeIndex.from_dict(idx.to_dict())
    assert back == idx


def test_patch_ref_validation():
    idx = build_quadtree((2, 2), 2)
    ref = idx.patch_ref(0, 5)
    assert idx.resolve_coords(ref) == Box(0, 3, 1, 4)
    with pytest.raises(ValueError):
        idx.resolve_coords(PatchRef(0, 5, (0, 0)))
    with pytest.raises(IndexError):
        idx.patch_ref(0, 16)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_children_tile_parent_exactly(rows, cols, levels):
    idx = build_quadtree((rows, cols), levels)
    for j in range(levels - 1, 0, -1):
        parent_boxes = [resolve_coords(idx.patch_ref(j, i)) for i in range(idx.counts[j])]
        for i, pb in enumerate(parent_boxes):
            kids = [resolve_coords(idx.patch_ref(j - 1, c)) for c in find_sub_patch_ids(i)]
            assert sum(k.area for k in kids) == pb.area
            assert all(pb.r0 <= k.r0 and k.r1 <= pb.r1 and pb.c0 <= k.c0 and k.c1 <= pb.c1 for k in kids)
            assert not any(a.intersects(b) for n, a in enumerate(kids) for b in kids[n + 1:])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.integers(1, 12))
def test_topk_matches_brute_force_and_bound(a, k):
    ids = find_topk_ids(a, k)
    assert ids.tolist() == brute_topk_children(a, k)
    assert len(ids) <= 4 * k
    assert len(set(ids.tolist())) == len(ids)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-500, 500), min_size=1, max_size=30, unique=True), st.integers(1, 10))
def test_rank_invariant_under_monotone_transform(a, k):
    a = np.array(a) / 100.0
    base = rank_parents(a, k)
    np.testing.assert_array_equal(base, rank_parents(np.exp(a), k))
    np.testing.assert_array_equal(base, rank_parents(3.0 * a + 7.0, k))
