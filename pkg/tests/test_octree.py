import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxfield.field import FieldNetwork, trilinear_weights
from voxfield.geometry import Aabb
from voxfield.octree import (CORNER_OFFSETS, EmbeddingTable, GridError, SparseVoxelGrid, delete_cells,
                             init_from_bbox, init_from_points, lattice_locals, prune, prune_mask, row_map, subdivide)

from conftest import random_grid


def field_at(grid, table, points):
    """Interpolated embedding at world points, by direct per-point corner lookup."""
    vox, local = grid.locate(points)
    assert np.all(vox >= 0)
    rows = grid.cell_corners[vox]
    w = trilinear_weights(local)
    return np.einsum("nk,nkd->nd", w, table.data[rows])


def points_in_cells(rng, grid, n):
    ids = rng.integers(0, grid.num_cells, n)
    return grid.origin + (grid.cells[ids] + rng.uniform(0.01, 0.99, (n, 3))) * grid.voxel_size


def test_init_from_bbox_covers_box():
    box = Aabb([-1, -1, -1], [1, 1, 1])
    grid = init_from_bbox(box, 1000)
    assert grid.num_cells == 1000
    assert np.isclose(grid.voxel_size, 0.2)
    assert np.allclose(grid.bounds().min, box.min) and np.allclose(grid.bounds().max, box.max)


def test_init_from_bbox_non_cubic():
    grid = init_from_bbox(Aabb([0, 0, 0], [2, 1, 1]), 16)
    b = grid.bounds()
    assert np.all(b.max >= np.array([2, 1, 1]) - 1e-12)
    with pytest.raises(GridError):
        init_from_bbox(Aabb([0, 0, 0], [0, 1, 1]), 10)


def test_init_from_points_dilates():
    g = init_from_points([[0.5, 0.5, 0.5]], 1.0, dilate=False)
    assert g.num_cells == 1
    assert init_from_points([[0.5, 0.5, 0.5]], 1.0).num_cells == 27
    with pytest.raises(GridError):
        init_from_points(np.zeros((0, 3)), 1.0)


def test_single_cell_layout():
    g = SparseVoxelGrid([[0, 0, 0]], 1.0)
    assert g.num_corners == 8
    assert np.array_equal(g.corners[g.cell_corners[0]], CORNER_OFFSETS)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adjacent_cells_share_corner_rows(seed):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, (4, 4, 4), 0.6)
    for i in range(grid.num_cells):
        for a in range(3):
            step = np.zeros(3, np.int64)
            step[a] = 1
            j = grid.cell_id(grid.cells[i] + step)[0]
            if j < 0:
                continue
            # corners of i on its +a face are the corners of j on its -a face
            hi_i = grid.cell_corners[i][CORNER_OFFSETS[:, a] == 1]
            lo_j = grid.cell_corners[j][CORNER_OFFSETS[:, a] == 0]
            assert np.array_equal(hi_i, lo_j)


def test_corner_rows_agree_with_dict_lookup(rng):
    grid = random_grid(rng, (5, 5, 5), 0.3)
    for i in range(grid.num_cells):
        for k in range(8):
            key = tuple(grid.cells[i] + CORNER_OFFSETS[k])
            assert grid.corner_index[key] == grid.cell_corners[i, k]


def test_locate_returns_cell_and_local(rng):
    grid = random_grid(rng)
    p = points_in_cells(rng, grid, 50)
    vox, local = grid.locate(p)
    assert np.all(vox >= 0)
    assert np.all((local >= 0) & (local <= 1))
    back = grid.origin + (grid.cells[vox] + local) * grid.voxel_size
    assert np.allclose(back, p)


def test_subdivide_constant_field():
    g = SparseVoxelGrid([[0, 0, 0]], 1.0)
    t = EmbeddingTable(np.tile(np.array([[1.5, -2.0]]), (8, 1)))
    fine, ft = subdivide(g, t)
    assert fine.num_cells == 8 and fine.num_corners == 27
    assert np.allclose(ft.data, [1.5, -2.0])
    assert fine.voxel_size == 0.5 and fine.level == 1


def test_subdivide_reproduces_linear_field(rng):
    grid = random_grid(rng, (3, 3, 3), 0.7)
    A = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    table = EmbeddingTable(grid.corner_positions() @ A + b)
    fine, ft = subdivide(grid, table)
    assert np.allclose(ft.data, fine.corner_positions() @ A + b, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_subdivide_preserves_field(seed):
    rng = np.random.default_rng(seed)
    grid = random_grid(rng, (4, 4, 4), 0.5)
    table = EmbeddingTable(rng.standard_normal((grid.num_corners, 6)))
    fine, ft = subdivide(grid, table)
    p = points_in_cells(rng, grid, 100)
    assert np.abs(field_at(grid, table, p) - field_at(fine, ft, p)).max() < 1e-6


def test_subdivide_twice_matches_direct_resampling(rng):
    grid = random_grid(rng, (2, 2, 2), 1.0)
    table = EmbeddingTable(rng.standard_normal((grid.num_corners, 3)))
    g2, t2 = subdivide(*subdivide(grid, table))
    # every level-2 corner, interpolated in the original grid
    pts = g2.corner_positions()
    vox, local = grid.locate(np.minimum(pts, grid.bounds().max - 1e-12))
    ok = vox >= 0
    direct = np.einsum("nk,nkd->nd", trilinear_weights(local[ok]), table.data[grid.cell_corners[vox[ok]]])
    assert np.abs(direct - t2.data[ok]).max() < 1e-9


def test_row_map_after_subdivide(rng):
    grid = random_grid(rng)
    table = EmbeddingTable(rng.standard_normal((grid.num_corners, 2)))
    fine, ft = subdivide(grid, table)
    rows = row_map(grid, fine, scale=2)
    old = rows >= 0
    assert old.sum() == grid.num_corners
    assert np.allclose(ft.data[old], table.data[rows[old]])


def constant_density_net(sigma):
    """A network whose density is softplus(bias) everywhere."""
    rng = np.random.default_rng(0)
    net = FieldNetwork.create(rng, np.float64, feature_dim=2, hidden=4, feature_freqs=0, dir_freqs=0)
    for k in net.params:
        net.params[k][...] = 0
    net.params["sigma.b"][0] = np.log(np.expm1(sigma)) if sigma > 0 else -60.0
    return net


def test_prune_thresholds():
    grid = SparseVoxelGrid(np.argwhere(np.ones((2, 2, 2))), 1.0)
    table = EmbeddingTable(np.zeros((grid.num_corners, 2)))
    net = constant_density_net(1.0)  # exp(-1) = 0.37
    assert prune_mask(grid, table, net, 4, gamma=0.5).sum() == 0
    assert prune_mask(grid, table, net, 4, gamma=0.3).sum() == grid.num_cells


def test_prune_gamma_extremes(rng):
    grid = random_grid(rng)
    table = EmbeddingTable(rng.standard_normal((grid.num_corners, 8)))
    net = FieldNetwork.create(rng, np.float64, feature_dim=8, hidden=8)
    # exp(-sigma) lies in (0, 1]: gamma >= 1 keeps everything, gamma = 0 removes everything
    assert not prune_mask(grid, table, net, 4, gamma=1.0).any()
    assert prune_mask(grid, table, net, 4, gamma=0.0).all()


def test_prune_leaves_surviving_field_unchanged(rng):
    grid = random_grid(rng, (4, 4, 4), 0.7)
    table = EmbeddingTable(rng.standard_normal((grid.num_corners, 8)))
    net = FieldNetwork.create(rng, np.float64, feature_dim=8, hidden=8)
    remove = prune_mask(grid, table, net, 4, gamma=0.6)
    g2, t2 = prune(grid, table, net, 4, gamma=0.6)
    assert g2.num_cells == grid.num_cells - remove.sum()
    if g2.num_cells:
        p = points_in_cells(rng, g2, 100)
        assert np.array_equal(field_at(grid, table, p), field_at(g2, t2, p))


def test_lattice_locals_cell_centered():
    t = lattice_locals(4)
    assert t.shape == (64, 3)
    assert np.allclose(np.unique(t), [0.125, 0.375, 0.625, 0.875])


def test_delete_cells(rng):
    grid = random_grid(rng, (3, 3, 3), 0.8)
    table = EmbeddingTable(rng.standard_normal((grid.num_corners, 2)))
    g, t = delete_cells(grid, table, [])
    assert np.array_equal(g.cells, grid.cells) and np.array_equal(t.data, table.data)
    g, t = delete_cells(grid, table, np.arange(grid.num_cells))
    assert g.num_cells == 0 and len(t) == 0
    with pytest.raises(GridError):
        delete_cells(grid, table, [grid.num_cells])
