import numpy as np
import pytest

from voxfield.field import FieldNetwork
from voxfield.octree import EmbeddingTable, SparseVoxelGrid

# filled by the acceptance tests, printed once at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def random_grid(rng, shape=(4, 4, 4), fill=0.5, voxel_size=0.5, origin=(-1.0, -1.0, -1.0)):
    """Random sparse occupancy over a small lattice (at least one cell)."""
    occ = rng.random(shape) < fill
    if not occ.any():
        occ[tuple(rng.integers(0, s) for s in shape)] = True
    return SparseVoxelGrid(np.argwhere(occ), voxel_size, origin)


def random_unit(rng, n):
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def tiny_field(rng, grid, dim=8, hidden=16, dtype=np.float64, std=0.5, activation="relu"):
    net = FieldNetwork.create(rng, dtype=dtype, feature_dim=dim, hidden=hidden, feature_freqs=2, dir_freqs=1,
                              activation=activation)
    table = EmbeddingTable.random(grid.num_corners, dim, rng, std=std, dtype=dtype)
    return table, net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def axis_rays(rng, n, lo=-0.5, hi=0.5, start=-2.0):
    """Rays parallel to a random coordinate axis through the square [lo, hi]^2."""
    o = np.zeros((n, 3))
    d = np.zeros((n, 3))
    for k in range(n):
        ax = rng.integers(3)
        sign = rng.choice([-1.0, 1.0])
        o[k] = rng.uniform(lo + 0.05, hi - 0.05, 3)
        o[k, ax] = start * sign
        d[k, ax] = sign
    return o, d


def loss_gradient_check(scene, net, batch, cfg, h=1e-3, rel=1e-4, floor=1e-6, max_params=None, rng=None):
    """Compare analytic loss gradients with central differences.

    Returns (number checked, list of failures as (name, index, analytic, numeric)).
    """
    from voxfield.train import loss_and_grads

    _, g = loss_and_grads(batch, scene, net, cfg)
    entries = [(f"net.{k}", v, g.params[k]) for k, v in net.params.items()]
    entries += [("embeddings", scene.table.data, g.embeddings), ("c_bg", scene.c_bg, g.c_bg)]
    checked, failures = 0, []
    for name, p, gp in entries:
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_params is not None and flat.size > max_params:
            idx = rng.choice(flat.size, max_params, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            up = loss_and_grads(batch, scene, net, cfg)[0].total
            flat[i] = old - h
            dn = loss_and_grads(batch, scene, net, cfg)[0].total
            flat[i] = old
            num = (up - dn) / (2 * h)
            ana = float(gp.reshape(-1)[i])
            checked += 1
            if abs(ana - num) > max(floor, rel * max(abs(ana), abs(num))):
                failures.append((name, int(i), ana, num))
    return checked, failures
