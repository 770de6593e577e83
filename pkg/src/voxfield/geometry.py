"""Ray/box geometry: pinhole cameras, slab tests and sorted voxel traversal."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(o)) and np.all(np.isfinite(d))):
            raise GeometryError("ray components must be finite")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError(f"ray direction must be unit length, got |d|={np.linalg.norm(d)}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    @classmethod
    def toward(cls, origin, direction) -> "Ray":
        d = np.asarray(direction, dtype=np.float64)
        return cls(origin, d / np.linalg.norm(d))

    def at(self, z: float) -> np.ndarray:
        return self.origin + z * self.direction


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise GeometryError(f"box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)


@dataclass
class Camera:
    """Pinhole camera. Pose is camera-to-world; camera frame is x right, y down, z forward."""

    focal: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.focal > 0:
            raise GeometryError("focal length must be positive")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-6:
            raise GeometryError("camera rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise GeometryError("camera needs a positive image size")

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    @property
    def pose(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_pose(cls, pose, focal, cx, cy, width, height) -> "Camera":
        pose = np.asarray(pose, dtype=np.float64)
        return cls(focal, cx, cy, int(width), int(height), pose[:3, :3], pose[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, focal, width, height) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-12:
            # looking straight along `up`; any perpendicular right vector will do
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z], axis=1)
        return cls(focal, width / 2.0, height / 2.0, width, height, rot, eye)

    def directions(self, px, py) -> np.ndarray:
        """Unit world directions through (possibly fractional) pixel coordinates."""
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        d_cam = np.stack([(px - self.cx) / self.focal, (py - self.cy) / self.focal, np.ones_like(px)], axis=-1)
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, direction) -> np.ndarray:
        """Pixel coordinates (px, py) of a world direction seen from the camera center."""
        d_cam = np.asarray(direction, dtype=np.float64) @ self.rotation
        return np.stack(
            [self.focal * d_cam[..., 0] / d_cam[..., 2] + self.cx, self.focal * d_cam[..., 1] / d_cam[..., 2] + self.cy],
            axis=-1,
        )

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates in row-major order, each of shape (height*width,)."""
        py, px = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        return px.ravel(), py.ravel()

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        px, py = self.pixel_grid()
        dirs = self.directions(px, py)
        return np.broadcast_to(self.translation, dirs.shape).copy(), dirs

    def scaled(self, factor: float) -> "Camera":
        return Camera(
            self.focal * factor, self.cx * factor, self.cy * factor,
            max(1, round(self.width * factor)), max(1, round(self.height * factor)),
            self.rotation, self.translation,
        )


class VoxelHit(NamedTuple):
    voxel_id: int
    z_in: float
    z_out: float


def pixel_ray(camera: Camera, px: float, py: float) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise GeometryError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    return Ray(camera.translation, camera.directions(px, py))


def intersect_aabb(ray: Ray, box: Aabb) -> Optional[tuple[float, float]]:
    """Slab test. Distances are clipped to z >= 0; grazing and zero-extent boxes miss."""
    if np.any(box.extent <= 0):
        return None
    z_in, z_out = 0.0, np.inf
    for a in range(3):
        o, d = ray.origin[a], ray.direction[a]
        if d == 0.0:
            if o < box.min[a] or o > box.max[a]:
                return None
            continue
        t1 = (box.min[a] - o) / d
        t2 = (box.max[a] - o) / d
        z_in = max(z_in, min(t1, t2))
        z_out = min(z_out, max(t1, t2))
    if z_in >= z_out:
        return None
    return float(z_in), float(z_out)


def intersect_aabb_batch(origins, dirs, box_min, box_max) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized slab test of R rays against one box. Returns (z_in, z_out, hit)."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (np.asarray(box_min) - origins) / dirs
        t2 = (np.asarray(box_max) - origins) / dirs
    parallel = dirs == 0.0
    inside = (origins >= box_min) & (origins <= box_max)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    z_in = np.maximum(lo.max(axis=1), 0.0)
    z_out = hi.min(axis=1)
    return z_in, z_out, z_in < z_out


@dataclass
class HitBatch:
    """Padded per-ray voxel hits, sorted near to far. Padding has voxel == -1 and z = +inf."""

    z_in: np.ndarray
    z_out: np.ndarray
    voxel: np.ndarray

    @property
    def count(self) -> np.ndarray:
        return (self.voxel >= 0).sum(axis=1)

    @property
    def any(self) -> np.ndarray:
        return self.voxel[:, 0] >= 0 if self.voxel.shape[1] else np.zeros(len(self.voxel), bool)

    def ray(self, r: int) -> list[VoxelHit]:
        n = int(self.count[r])
        return [VoxelHit(int(v), float(a), float(b)) for v, a, b in zip(self.voxel[r, :n], self.z_in[r, :n], self.z_out[r, :n])]


def traverse_grid(origins, dirs, grid) -> HitBatch:
    """Sorted occupied-voxel intervals for many rays at once.

    Every plane crossing of the grid lattice is computed, crossings are sorted per ray,
    and the cell between consecutive crossings is tracked by counting crossings per axis
    (3D-DDA in sorted form). Coincident crossings give zero-length segments, which are
    dropped. Plane positions are computed as ``origin + i * voxel_size``, the same
    expression used for voxel boxes, so distances agree with the slab test exactly.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = len(origins)
    if grid.num_cells == 0 or n_rays == 0:
        empty = np.zeros((n_rays, 0))
        return HitBatch(empty, empty.copy(), np.zeros((n_rays, 0), dtype=np.int64))

    lo, hi = grid.lattice_lo, grid.lattice_hi
    l = grid.voxel_size
    t_parts, axis_parts = [], []
    for a in range(3):
        planes = grid.origin[a] + np.arange(lo[a], hi[a] + 2) * l
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (planes[None, :] - origins[:, a : a + 1]) / dirs[:, a : a + 1]
        t[dirs[:, a] == 0.0] = np.inf
        t_parts.append(t)
        axis_parts.append(np.full(len(planes), a))
    t_all = np.concatenate(t_parts, axis=1)
    axes = np.concatenate(axis_parts)
    order = np.argsort(t_all, axis=1, kind="stable")
    t_sorted = np.take_along_axis(t_all, order, axis=1)
    ax_sorted = axes[order]

    cell = np.empty(t_sorted.shape + (3,), dtype=np.int64)
    for a in range(3):
        crossed = np.cumsum(ax_sorted == a, axis=1)
        d = dirs[:, a : a + 1]
        start = np.floor((origins[:, a : a + 1] - grid.origin[a]) / l).astype(np.int64)
        cell[..., a] = np.where(d > 0, lo[a] - 1 + crossed, np.where(d < 0, hi[a] + 1 - crossed, start))

    # segment j spans [t_sorted[j], t_sorted[j+1]] and lies in cell[j]
    seg_lo = np.maximum(t_sorted[:, :-1], 0.0)
    seg_hi = t_sorted[:, 1:]
    seg_cell = cell[:, :-1]
    valid = np.isfinite(seg_hi) & (seg_hi > seg_lo)
    in_lattice = np.all((seg_cell >= lo) & (seg_cell <= hi), axis=-1) & valid
    voxel = np.full(seg_lo.shape, -1, dtype=np.int64)
    rel = seg_cell[in_lattice] - lo
    voxel[in_lattice] = grid.lookup[rel[:, 0], rel[:, 1], rel[:, 2]]
    keep = voxel >= 0

    n_hits = keep.sum(axis=1)
    width = int(n_hits.max()) if n_rays else 0
    # stable compaction of kept segments to the front of each row
    pos = np.argsort(~keep, axis=1, kind="stable")[:, :width]
    kept = np.take_along_axis(keep, pos, axis=1)
    z_in = np.where(kept, np.take_along_axis(seg_lo, pos, axis=1), np.inf)
    z_out = np.where(kept, np.take_along_axis(seg_hi, pos, axis=1), np.inf)
    vox = np.where(kept, np.take_along_axis(voxel, pos, axis=1), -1)
    return HitBatch(z_in, z_out, vox)


def intersect_grid(ray: Ray, grid) -> list[VoxelHit]:
    """Occupied voxels pierced by ``ray``, sorted by (z_in, voxel_id)."""
    hits = traverse_grid(ray.origin[None], ray.direction[None], grid)
    return hits.ray(0)


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation from XYZ Euler angles in degrees (applied x, then y, then z)."""
    ax, ay, az = np.radians(np.asarray(angles_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx
