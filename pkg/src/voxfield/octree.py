"""Sparse voxel grid with shared-corner embeddings: init, prune, subdivide."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .geometry import Aabb

# corner k of a cell sits at offset ((k >> 2) & 1, (k >> 1) & 1, k & 1)
CORNER_OFFSETS = np.array([[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=np.int64)


class GridError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    data: np.ndarray

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.data.shape[0]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.data.copy())

    @classmethod
    def random(cls, rows: int, dim: int, rng: np.random.Generator, std: float = 0.01, dtype=np.float32):
        return cls((rng.standard_normal((rows, dim)) * std).astype(dtype))


class SparseVoxelGrid:
    """Occupied cells on an integer lattice plus the shared-corner table layout.

    ``cells`` are integer lattice coordinates at the current level; voxel ``i`` spans
    ``origin + cells[i] * voxel_size`` to ``origin + (cells[i] + 1) * voxel_size``.
    ``corners`` holds the unique corner lattice coordinates, sorted lexicographically,
    and ``cell_corners[i, k]`` is the table row of corner ``k`` of voxel ``i``.
    """

    def __init__(self, cells, voxel_size: float, origin=(0.0, 0.0, 0.0), level: int = 0):
        if not voxel_size > 0:
            raise GridError("voxel_size must be positive")
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        self.cells = np.unique(cells, axis=0) if len(cells) else cells
        self.voxel_size = float(voxel_size)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.level = int(level)
        if len(self.cells):
            all_corners = (self.cells[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
            self.corners, inverse = np.unique(all_corners, axis=0, return_inverse=True)
            self.cell_corners = inverse.reshape(-1, 8)
        else:
            self.corners = np.zeros((0, 3), dtype=np.int64)
            self.cell_corners = np.zeros((0, 8), dtype=np.int64)

    def __repr__(self):
        return f"SparseVoxelGrid(cells={self.num_cells}, corners={self.num_corners}, l={self.voxel_size:g}, level={self.level})"

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def num_corners(self) -> int:
        return len(self.corners)

    @cached_property
    def lattice_lo(self) -> np.ndarray:
        return self.cells.min(axis=0)

    @cached_property
    def lattice_hi(self) -> np.ndarray:
        return self.cells.max(axis=0)

    @cached_property
    def lookup(self) -> np.ndarray:
        """Dense cell-id array over the occupied lattice extent (-1 = empty)."""
        shape = tuple(self.lattice_hi - self.lattice_lo + 1)
        table = np.full(shape, -1, dtype=np.int64)
        rel = self.cells - self.lattice_lo
        table[rel[:, 0], rel[:, 1], rel[:, 2]] = np.arange(self.num_cells)
        return table

    @cached_property
    def corner_index(self) -> dict[tuple[int, int, int], int]:
        return {tuple(int(v) for v in c): i for i, c in enumerate(self.corners)}

    def cell_id(self, ijk) -> np.ndarray:
        """Voxel ids for integer cell coordinates (-1 where unoccupied)."""
        ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
        out = np.full(len(ijk), -1, dtype=np.int64)
        if self.num_cells == 0:
            return out
        rel = ijk - self.lattice_lo
        ok = np.all((rel >= 0) & (ijk <= self.lattice_hi), axis=1)
        out[ok] = self.lookup[rel[ok, 0], rel[ok, 1], rel[ok, 2]]
        return out

    def locate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """(voxel id or -1, local coordinates in [0,1]^3) for world points."""
        p = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - self.origin) / self.voxel_size
        ijk = np.floor(p).astype(np.int64)
        return self.cell_id(ijk), p - ijk

    def voxel_box(self, voxel_id: int) -> Aabb:
        lo = self.origin + self.cells[voxel_id] * self.voxel_size
        hi = self.origin + (self.cells[voxel_id] + 1) * self.voxel_size
        return Aabb(lo, hi)

    def voxel_boxes(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin + self.cells * self.voxel_size, self.origin + (self.cells + 1) * self.voxel_size

    def centers(self) -> np.ndarray:
        return self.origin + (self.cells + 0.5) * self.voxel_size

    def corner_positions(self) -> np.ndarray:
        return self.origin + self.corners * self.voxel_size

    def bounds(self) -> Aabb:
        lo, hi = self.voxel_boxes()
        return Aabb(lo.min(axis=0), hi.max(axis=0))

    def subset(self, keep: np.ndarray) -> tuple["SparseVoxelGrid", np.ndarray]:
        """Grid restricted to voxels where ``keep`` is true, and the surviving table rows."""
        sub = SparseVoxelGrid(self.cells[np.asarray(keep, bool)], self.voxel_size, self.origin, self.level)
        rows = row_map(self, sub)
        return sub, rows

    def same_layout(self, other: "SparseVoxelGrid") -> bool:
        return (
            self.voxel_size == other.voxel_size
            and np.array_equal(self.origin, other.origin)
            and self.level == other.level
            and np.array_equal(self.cells, other.cells)
        )


def row_map(src: SparseVoxelGrid, dst: SparseVoxelGrid, scale: int = 1) -> np.ndarray:
    """For each corner row of ``dst``, the row of ``src`` at the same position (or -1).

    ``scale`` is the lattice ratio dst/src (2 after one subdivision).
    """
    out = np.full(dst.num_corners, -1, dtype=np.int64)
    if src.num_corners == 0 or dst.num_corners == 0:
        return out
    on_src = np.all(dst.corners % scale == 0, axis=1)
    pos, found = _find_rows(src.corners, dst.corners[on_src] // scale)
    idx = np.flatnonzero(on_src)
    out[idx[found]] = pos[found]
    return out


def _find_rows(sorted_coords: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Binary search of integer coordinates in a lexicographically sorted array."""
    both = np.concatenate([sorted_coords, query]) if len(query) else sorted_coords
    lo = both.min(axis=0)
    span = both.max(axis=0) - lo + 1

    def encode(c):
        rel = c - lo
        return (rel[:, 0] * span[1] + rel[:, 1]) * span[2] + rel[:, 2]

    keys_all = encode(sorted_coords)
    keys = encode(query)
    pos = np.clip(np.searchsorted(keys_all, keys), 0, len(keys_all) - 1)
    return pos, keys_all[pos] == keys


def init_from_bbox(bbox: Aabb, target_count: int = 1000) -> SparseVoxelGrid:
    if bbox.volume <= 0:
        raise GridError("bounding box must have positive volume")
    if target_count < 1:
        raise GridError("target_count must be >= 1")
    size = float(np.cbrt(bbox.volume / target_count))
    counts = np.maximum(np.ceil(bbox.extent / size - 1e-9).astype(np.int64), 1)
    ii, jj, kk = np.meshgrid(*(np.arange(n) for n in counts), indexing="ij")
    cells = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    return SparseVoxelGrid(cells, size, bbox.min, level=0)


def init_from_points(points, voxel_size: float, *, dilate: bool = True, origin=(0.0, 0.0, 0.0)) -> SparseVoxelGrid:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise GridError("cannot voxelize an empty point set")
    origin = np.asarray(origin, dtype=np.float64)
    cells = np.unique(np.floor((points - origin) / voxel_size).astype(np.int64), axis=0)
    if dilate:
        nb = np.stack(np.meshgrid(*(np.arange(-1, 2),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        cells = np.unique((cells[:, None, :] + nb[None]).reshape(-1, 3), axis=0)
    return SparseVoxelGrid(cells, voxel_size, origin)


def lattice_locals(samples_per_axis: int) -> np.ndarray:
    """Cell-centered regular lattice of local coordinates, shape (n^3, 3)."""
    t = (np.arange(samples_per_axis) + 0.5) / samples_per_axis
    g = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def prune_mask(grid: SparseVoxelGrid, table: EmbeddingTable, net, samples_per_axis: int = 16,
               gamma: float = 0.5, chunk: int = 1 << 18) -> np.ndarray:
    """Boolean mask of voxels to remove: min over lattice samples of exp(-sigma) > gamma."""
    from .field import density_at

    if samples_per_axis < 2:
        raise GridError("samples_per_axis must be >= 2")
    local = lattice_locals(samples_per_axis)
    g = len(local)
    min_transmit = np.empty(grid.num_cells)
    per_chunk = max(1, chunk // g)
    for start in range(0, grid.num_cells, per_chunk):
        ids = np.arange(start, min(start + per_chunk, grid.num_cells))
        vox = np.repeat(ids, g)
        loc = np.tile(local, (len(ids), 1))
        sigma = density_at(net, table, grid.cell_corners[vox], loc)
        min_transmit[ids] = np.exp(-sigma.astype(np.float64)).reshape(len(ids), g).min(axis=1)
    return min_transmit > gamma


def prune(grid: SparseVoxelGrid, table: EmbeddingTable, net, samples_per_axis: int = 16,
          gamma: float = 0.5) -> tuple[SparseVoxelGrid, EmbeddingTable]:
    remove = prune_mask(grid, table, net, samples_per_axis, gamma)
    return remove_voxels(grid, table, remove)


def remove_voxels(grid: SparseVoxelGrid, table: EmbeddingTable, remove: np.ndarray):
    sub, rows = grid.subset(~np.asarray(remove, bool))
    return sub, EmbeddingTable(table.data[rows])


# child corner lattice offsets (0..2)^3 inside a parent, and their trilinear weights
_CHILD_OFFSETS = np.stack(np.meshgrid(*(np.arange(3),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)


def _child_weights() -> np.ndarray:
    t = _CHILD_OFFSETS / 2.0
    w = np.ones((len(t), 8))
    for k, off in enumerate(CORNER_OFFSETS):
        for a in range(3):
            w[:, k] *= t[:, a] if off[a] else 1.0 - t[:, a]
    return w


_CHILD_WEIGHTS = _child_weights()


def subdivide(grid: SparseVoxelGrid, table: EmbeddingTable) -> tuple[SparseVoxelGrid, EmbeddingTable]:
    """Split every voxel into 2^3 children; new corners are trilinear in the parent."""
    children = (2 * grid.cells[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
    fine = SparseVoxelGrid(children, grid.voxel_size / 2.0, grid.origin, grid.level + 1)
    if grid.num_cells == 0:
        return fine, EmbeddingTable(table.data[:0].copy())
    parent = table.data[grid.cell_corners]  # (K, 8, d)
    values = np.einsum("ck,vkd->vcd", _CHILD_WEIGHTS.astype(table.data.dtype), parent)
    keys = (2 * grid.cells[:, None, :] + _CHILD_OFFSETS[None]).reshape(-1, 3)
    rows = _corner_rows(fine, keys)
    first = np.unique(rows, return_index=True)[1]
    data = np.empty((fine.num_corners, table.dim), dtype=table.data.dtype)
    data[rows[first]] = values.reshape(-1, table.dim)[first]
    return fine, EmbeddingTable(data)


def _corner_rows(grid: SparseVoxelGrid, corners: np.ndarray) -> np.ndarray:
    pos, found = _find_rows(grid.corners, corners)
    if not np.all(found):
        raise GridError("corner not present in grid")
    return pos


def delete_cells(grid: SparseVoxelGrid, table: EmbeddingTable, cell_ids: Sequence[int]):
    cell_ids = np.asarray(cell_ids, dtype=np.int64).ravel()
    if np.any((cell_ids < 0) | (cell_ids >= grid.num_cells)):
        raise GridError("unknown voxel id in delete set")
    remove = np.zeros(grid.num_cells, bool)
    remove[cell_ids] = True
    return remove_voxels(grid, table, remove)
