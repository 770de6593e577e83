import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxfield.field import (FieldError, FieldNetwork, GradientBuffer, backward, features, forward,
                            positional_encode, query, query_backward, trilinear, trilinear_weights)
from voxfield.octree import CORNER_OFFSETS, EmbeddingTable, SparseVoxelGrid

from conftest import random_grid, tiny_field


def test_trilinear_hits_corner_values(rng):
    vals = rng.standard_normal((8, 4))
    for k in range(8):
        assert np.allclose(trilinear(vals, CORNER_OFFSETS[k].astype(float)), vals[k])


def test_trilinear_center_is_mean(rng):
    vals = rng.standard_normal((8, 3))
    assert np.allclose(trilinear(vals, [0.5, 0.5, 0.5]), vals.mean(axis=0))


def test_trilinear_rejects_points_outside():
    with pytest.raises(FieldError):
        trilinear(np.zeros((8, 1)), [1.2, 0.5, 0.5])


@given(st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_trilinear_weights_partition_of_unity(t):
    w = trilinear_weights(np.array([t]))
    assert np.all(w >= 0)
    assert abs(w.sum() - 1) < 1e-12


def test_trilinear_reproduces_affine(rng):
    A, b = rng.standard_normal((3, 2)), rng.standard_normal(2)
    vals = CORNER_OFFSETS @ A + b
    t = rng.random(3)
    assert np.allclose(trilinear(vals, t), t @ A + b)


def test_encoding_layout():
    x = np.array([[0.25, -0.5]])
    enc = positional_encode(x, 2)
    want = [0.25, -0.5, np.sin(np.pi / 4), np.sin(-np.pi / 2), np.cos(np.pi / 4), np.cos(-np.pi / 2),
            np.sin(np.pi / 2), np.sin(-np.pi), np.cos(np.pi / 2), np.cos(-np.pi)]
    assert np.allclose(enc[0], want)
    assert positional_encode(np.zeros((5, 32)), 6).shape == (5, 416)
    assert np.array_equal(positional_encode(x, 0), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_encoding_matches_direct_trig(seed, L):
    x = np.random.default_rng(seed).uniform(-2, 2, (20, 3))
    direct = np.concatenate([x] + [f(2.0**k * np.pi * x) for k in range(L) for f in (np.sin, np.cos)], axis=1)
    assert np.abs(positional_encode(x, L) - direct).max() < 1e-10


def test_network_shapes_and_ranges(rng):
    net = FieldNetwork.create(rng, np.float64, feature_dim=8, hidden=16)
    feat = rng.standard_normal((10, 8))
    dirs = rng.standard_normal((10, 3))
    sigma, color, _ = forward(net, feat, dirs)
    assert sigma.shape == (10,) and color.shape == (10, 3)
    assert np.all(sigma >= 0) and np.all((color > 0) & (color < 1))
    assert net.encoded_dim == 8 * 13 and net.dir_dim == 27


def test_default_network_dimensions():
    net = FieldNetwork.create(np.random.default_rng(0))
    assert net.params["density.0.W"].shape == (416, 128)
    assert net.params["rgb.W"].shape == (128, 3)
    assert net.dtype == np.float32


def _loss(net, feat, dirs, a, b):
    s, c, cache = forward(net, feat, dirs)
    return float(a @ s + np.sum(b * c)), cache


@pytest.mark.parametrize("activation", ["relu", "softplus"])
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_backward_matches_finite_differences(activation, seed):
    rng = np.random.default_rng(seed)
    net = FieldNetwork.create(rng, np.float64, feature_dim=4, hidden=8, feature_freqs=2, dir_freqs=1,
                              activation=activation)
    feat = rng.standard_normal((6, 4))
    dirs = rng.standard_normal((6, 3))
    a, b = rng.standard_normal(6), rng.standard_normal((6, 3))
    _, cache = _loss(net, feat, dirs, a, b)
    grads = {k: np.zeros_like(v) for k, v in net.params.items()}
    d_feat = backward(net, cache, a, b, grads)
    h = 1e-6

    def close(up, mid, dn, g):
        tol = 1e-5 * max(1, abs(g))
        if abs((up - dn) / (2 * h) - g) < tol:
            return True
        # at a ReLU kink the analytic slope is one of the one-sided ones
        return activation == "relu" and min(abs((up - mid) / h - g), abs((mid - dn) / h - g)) < 1e-4 * max(1, abs(g))

    mid, _ = _loss(net, feat, dirs, a, b)
    for k, p in net.params.items():
        for idx in list(np.ndindex(p.shape))[:: max(1, p.size // 15)]:
            old = p[idx]
            p[idx] = old + h
            up, _ = _loss(net, feat, dirs, a, b)
            p[idx] = old - h
            dn, _ = _loss(net, feat, dirs, a, b)
            p[idx] = old
            assert close(up, mid, dn, grads[k][idx])
    for idx in np.ndindex(feat.shape):
        old = feat[idx]
        feat[idx] = old + h
        up, _ = _loss(net, feat, dirs, a, b)
        feat[idx] = old - h
        dn, _ = _loss(net, feat, dirs, a, b)
        feat[idx] = old
        assert close(up, mid, dn, d_feat[idx])


def test_features_gather_matches_corner_sum(rng):
    grid = random_grid(rng)
    table = EmbeddingTable(rng.standard_normal((grid.num_corners, 5)))
    vox = rng.integers(0, grid.num_cells, 30)
    local = rng.random((30, 3))
    feat, S = features(table, grid.cell_corners[vox], local)
    want = np.einsum("nk,nkd->nd", trilinear_weights(local), table.data[grid.cell_corners[vox]])
    assert np.allclose(feat, want)
    assert S.shape == (30, grid.num_corners)


def test_query_outside_voxels_raises(rng):
    grid = SparseVoxelGrid([[0, 0, 0]], 1.0)
    table, net = tiny_field(rng, grid)
    with pytest.raises(FieldError):
        query(grid, table, net, [2.0, 0.5, 0.5], [1, 0, 0])


def test_query_backward_checks_shapes(rng):
    grid = SparseVoxelGrid([[0, 0, 0]], 1.0)
    table, net = tiny_field(rng, grid)
    _, _, tape = query(grid, table, net, [0.5, 0.5, 0.5], [1, 0, 0])
    with pytest.raises(FieldError):
        query_backward(tape, 1.0, [1.0, 0.0], GradientBuffer.zeros_like(net, table))
    other = EmbeddingTable(np.zeros((3, table.dim)))
    with pytest.raises(FieldError):
        query_backward(tape, 1.0, [1.0, 0.0, 0.0], GradientBuffer.zeros_like(net, other))


def test_query_gradient_scatters_to_eight_corners(rng):
    grid = SparseVoxelGrid([[0, 0, 0], [1, 0, 0]], 1.0)
    table, net = tiny_field(rng, grid)
    _, _, tape = query(grid, table, net, [0.3, 0.6, 0.2], [0, 0, 1])
    g = GradientBuffer.zeros_like(net, table)
    query_backward(tape, 1.0, [0.5, -0.2, 0.1], g)
    touched = np.flatnonzero(np.abs(g.embeddings).sum(axis=1) > 0)
    assert set(touched) <= set(grid.cell_corners[0])


def test_pinned_corner_embeddings_give_point_encoding(rng):
    # with each corner's embedding set to its own position, the field is the identity map
    grid = random_grid(rng, (3, 3, 3), 0.7)
    table = EmbeddingTable(grid.corner_positions())
    ids = rng.integers(0, grid.num_cells, 1000)
    p = grid.origin + (grid.cells[ids] + rng.random((1000, 3))) * grid.voxel_size
    vox, local = grid.locate(p)
    feat, _ = features(table, grid.cell_corners[vox], local)
    assert np.abs(positional_encode(feat, 6) - positional_encode(p, 6)).max() < 1e-6


def test_unknown_activation_rejected(rng):
    with pytest.raises(FieldError):
        FieldNetwork.create(rng, feature_dim=4, hidden=8, activation="tanh")
