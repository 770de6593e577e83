"""Posed image sets on disk, and an analytic ray tracer that generates them.

On-disk layout::

    images/NNNN.png      8-bit RGB
    poses/NNNN.txt       4x4 camera-to-world matrix, row-major, whitespace separated
    intrinsics.txt       focal cx cy width height
    depths/NNNN.raw      optional float raster (see imaging.py), ray distance per pixel
    bbox.txt             xmin ymin zmin xmax ymax zmax
    meta.json            optional: background color, z_max, generator settings
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Aabb, Camera
from .imaging import read_png, read_raster, write_png, write_raster


class DatasetError(ValueError):
    pass


class MissingFileError(DatasetError):
    pass


class MissingPoseError(DatasetError):
    pass


class MalformedPoseError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


@dataclass
class PosedImageSet:
    images: np.ndarray  # (N, H, W, 3) in [0, 1]
    cameras: list
    bbox: Aabb
    depths: Optional[np.ndarray] = None  # (N, H, W) ray distances
    masks: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise DimensionMismatchError(f"images must be (N, H, W, 3), got {self.images.shape}")
        if len(self.cameras) != len(self.images):
            raise DimensionMismatchError("one camera per image required")
        h, w = self.images.shape[1:3]
        for cam in self.cameras:
            if (cam.height, cam.width) != (h, w):
                raise DimensionMismatchError(f"camera {cam.width}x{cam.height} does not match images {w}x{h}")
        if self.depths is not None and self.depths.shape != self.images.shape[:3]:
            raise DimensionMismatchError("depth rasters must match image size")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    @property
    def z_max(self) -> float:
        if "z_max" in self.meta:
            return float(self.meta["z_max"])
        far = max(np.linalg.norm(c.translation - self.bbox.center) for c in self.cameras)
        return float(far + np.linalg.norm(self.bbox.extent))

    def subset(self, idx) -> "PosedImageSet":
        idx = list(idx)
        return PosedImageSet(
            self.images[idx], [self.cameras[i] for i in idx], self.bbox,
            None if self.depths is None else self.depths[idx],
            None if self.masks is None else self.masks[idx], dict(self.meta),
        )


# --------------------------------------------------------------------------- oracle scenes


@dataclass
class Sphere:
    center: Sequence[float]
    radius: float
    albedo: Sequence[float]


@dataclass
class Box:
    min: Sequence[float]
    max: Sequence[float]
    albedo: Sequence[float]


@dataclass
class OracleScene:
    primitives: list = field(default_factory=list)
    bbox: Aabb = field(default_factory=lambda: Aabb([-1, -1, -1], [1, 1, 1]))
    light_dir: Sequence[float] = (0.4, 0.3, 0.85)
    ambient: float = 0.3
    background: Sequence[float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for p in self.primitives:
            lo, hi = (np.asarray(p.center) - p.radius, np.asarray(p.center) + p.radius) if isinstance(p, Sphere) \
                else (np.asarray(p.min), np.asarray(p.max))
            if np.any(lo < self.bbox.min - 1e-12) or np.any(hi > self.bbox.max + 1e-12):
                raise DatasetError("primitive extends outside the scene bounding box")

    def trace(self, origins, dirs) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Closed-form first hits. Returns (color, distance or inf, normal, hit mask)."""
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        n = len(origins)
        best = np.full(n, np.inf)
        normal = np.zeros((n, 3))
        albedo = np.zeros((n, 3))
        for prim in self.primitives:
            if isinstance(prim, Sphere):
                t, nrm = _trace_sphere(origins, dirs, np.asarray(prim.center, float), prim.radius)
            else:
                t, nrm = _trace_box(origins, dirs, np.asarray(prim.min, float), np.asarray(prim.max, float))
            closer = t < best
            best[closer] = t[closer]
            normal[closer] = nrm[closer]
            albedo[closer] = prim.albedo
        hit = np.isfinite(best)
        light = np.asarray(self.light_dir, dtype=np.float64)
        light = light / np.linalg.norm(light)
        shade = self.ambient + (1 - self.ambient) * np.clip(normal @ light, 0.0, None)
        color = np.where(hit[:, None], albedo * shade[:, None], np.asarray(self.background, float))
        return color, best, normal, hit


def _trace_sphere(o, d, c, r):
    oc = o - c
    b = np.sum(oc * d, axis=1)
    cc = np.sum(oc * oc, axis=1) - r * r
    disc = b * b - cc
    root = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - root, -b + root
    t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
    t = np.where(disc > 0, t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, (p - c) / r


def _trace_box(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    tmin = np.where(d == 0, np.where((o >= lo) & (o <= hi), -np.inf, np.inf), np.minimum(t1, t2))
    tmax = np.where(d == 0, np.where((o >= lo) & (o <= hi), np.inf, -np.inf), np.maximum(t1, t2))
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    ok = (t_near < t_far) & (t_near > 1e-9)
    t = np.where(ok, t_near, np.inf)
    normal = np.zeros_like(o)
    rows = np.arange(len(o))
    normal[rows, axis] = -np.sign(d[rows, axis])
    return t, normal


SCENES = {
    "empty": lambda: OracleScene([]),
    "sphere": lambda: OracleScene([Sphere((0.0, 0.0, 0.0), 0.35, (0.85, 0.3, 0.2))]),
    "sphere_box": lambda: OracleScene([
        Sphere((-0.3, -0.1, 0.0), 0.42, (0.85, 0.3, 0.2)),
        Box((0.2, -0.15, -0.42), (0.62, 0.45, 0.12), (0.2, 0.45, 0.85)),
    ]),
    "two_spheres": lambda: OracleScene([
        Sphere((-0.35, 0.2, 0.0), 0.35, (0.25, 0.7, 0.3)),
        Sphere((0.4, -0.2, -0.1), 0.3, (0.9, 0.8, 0.2)),
    ]),
}


def oracle_scene(name: str) -> OracleScene:
    try:
        return SCENES[name]()
    except KeyError:
        raise DatasetError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


def hemisphere_cameras(n: int, rng: np.random.Generator, *, target, distance: float, resolution: int,
                       fov_deg: float = 40.0, min_elevation_deg: float = 5.0) -> list[Camera]:
    """Cameras at uniformly random directions on the upper hemisphere, looking at ``target``."""
    focal = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    zmin = np.sin(np.radians(min_elevation_deg))
    cams = []
    for _ in range(n):
        z = rng.uniform(zmin, 1.0)
        phi = rng.uniform(0, 2 * np.pi)
        s = np.sqrt(1 - z * z)
        eye = np.asarray(target) + distance * np.array([s * np.cos(phi), s * np.sin(phi), z])
        cams.append(Camera.look_at(eye, target, focal=focal, width=resolution, height=resolution))
    return cams


def orbit_cameras(n: int, *, target, distance: float, resolution: int, elevation_deg: float = 30.0,
                  fov_deg: float = 40.0) -> list[Camera]:
    focal = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    el = np.radians(elevation_deg)
    cams = []
    for i in range(n):
        phi = 2 * np.pi * i / n
        eye = np.asarray(target) + distance * np.array([np.cos(el) * np.cos(phi), np.cos(el) * np.sin(phi), np.sin(el)])
        cams.append(Camera.look_at(eye, target, focal=focal, width=resolution, height=resolution))
    return cams


def render_oracle(scene: OracleScene, cameras, z_max: float):
    images, depths = [], []
    for cam in cameras:
        o, d = cam.rays()
        color, t, _, hit = scene.trace(o, d)
        images.append(color.reshape(cam.height, cam.width, 3))
        depths.append(np.where(hit, t, z_max).reshape(cam.height, cam.width))
    return np.stack(images), np.stack(depths)


def generate_oracle_dataset(scene: OracleScene, n_train: int, n_test: int, resolution: int,
                            rng: np.random.Generator, *, distance: float = 4.0, fov_deg: float = 40.0,
                            z_max: Optional[float] = None) -> tuple[PosedImageSet, PosedImageSet]:
    if resolution < 16:
        raise DatasetError("resolution must be at least 16")
    center = scene.bbox.center
    if z_max is None:
        z_max = distance + float(np.linalg.norm(scene.bbox.extent))
    cams = hemisphere_cameras(n_train + n_test, rng, target=center, distance=distance,
                              resolution=resolution, fov_deg=fov_deg)
    images, depths = render_oracle(scene, cams, z_max)
    meta = {"background": list(map(float, scene.background)), "z_max": z_max,
            "distance": distance, "fov_deg": fov_deg}
    train = PosedImageSet(images[:n_train], cams[:n_train], scene.bbox, depths[:n_train], meta=dict(meta))
    test = PosedImageSet(images[n_train:], cams[n_train:], scene.bbox, depths[n_train:], meta=dict(meta))
    return train, test


# --------------------------------------------------------------------------- disk io


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: PosedImageSet, path):
    root = Path(path)
    for sub in ("images", "poses"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    cam0 = ds.cameras[0]
    (root / "intrinsics.txt").write_text(
        " ".join([_fmt(cam0.focal), _fmt(cam0.cx), _fmt(cam0.cy), str(cam0.width), str(cam0.height)]) + "\n")
    (root / "bbox.txt").write_text(" ".join(_fmt(v) for v in (*ds.bbox.min, *ds.bbox.max)) + "\n")
    if ds.meta:
        (root / "meta.json").write_text(json.dumps(ds.meta, sort_keys=True, indent=1) + "\n")
    if ds.depths is not None:
        (root / "depths").mkdir(exist_ok=True)
    for i, (img, cam) in enumerate(zip(ds.images, ds.cameras)):
        write_png(root / "images" / f"{i:04d}.png", img)
        rows = "\n".join(" ".join(_fmt(v) for v in row) for row in cam.pose)
        (root / "poses" / f"{i:04d}.txt").write_text(rows + "\n")
        if ds.depths is not None:
            write_raster(root / "depths" / f"{i:04d}.raw", ds.depths[i])


def load_dataset(path) -> PosedImageSet:
    root = Path(path)
    if not root.is_dir():
        raise MissingFileError(f"{root}: dataset directory not found")
    intr = root / "intrinsics.txt"
    if not intr.exists():
        raise MissingFileError(f"{intr}: missing intrinsics file")
    try:
        f, cx, cy, w, h = intr.read_text().split()
        f, cx, cy, w, h = float(f), float(cx), float(cy), int(w), int(h)
    except ValueError as e:
        raise DatasetError(f"{intr}: expected 'focal cx cy width height'") from e
    bbox_file = root / "bbox.txt"
    if not bbox_file.exists():
        raise MissingFileError(f"{bbox_file}: missing bounding box")
    vals = [float(v) for v in bbox_file.read_text().split()]
    if len(vals) != 6:
        raise DatasetError(f"{bbox_file}: expected 6 numbers")
    bbox = Aabb(vals[:3], vals[3:])
    meta = json.loads((root / "meta.json").read_text()) if (root / "meta.json").exists() else {}

    image_files = sorted((root / "images").glob("*.png"))
    if not image_files:
        raise MissingFileError(f"{root / 'images'}: no images")
    images, cams, depths = [], [], []
    for img_path in image_files:
        stem = img_path.stem
        pose_path = root / "poses" / f"{stem}.txt"
        if not pose_path.exists():
            raise MissingPoseError(f"{pose_path}: no pose for image {img_path.name}")
        try:
            pose = np.array([[float(v) for v in line.split()] for line in pose_path.read_text().strip().splitlines()])
        except ValueError as e:
            raise MalformedPoseError(f"{pose_path}: non-numeric entry") from e
        if pose.shape != (4, 4) or not np.all(np.isfinite(pose)):
            raise MalformedPoseError(f"{pose_path}: expected a finite 4x4 matrix, got shape {pose.shape}")
        img = read_png(img_path)
        if img.shape[:2] != (h, w):
            raise DimensionMismatchError(f"{img_path}: size {img.shape[1]}x{img.shape[0]} differs from intrinsics {w}x{h}")
        try:
            cams.append(Camera.from_pose(pose, f, cx, cy, w, h))
        except ValueError as e:
            raise MalformedPoseError(f"{pose_path}: {e}") from e
        images.append(img)
        depth_path = root / "depths" / f"{stem}.raw"
        if depth_path.exists():
            d = read_raster(depth_path)
            if d.shape != (h, w):
                raise DimensionMismatchError(f"{depth_path}: raster size differs from images")
            depths.append(d)
    if depths and len(depths) != len(images):
        raise MissingFileError("depth rasters present for only some images")
    return PosedImageSet(np.stack(images), cams, bbox, np.stack(depths) if depths else None, meta=meta)


def dataset_hash(path) -> str:
    """SHA-256 over all files of a dataset directory (names and contents, sorted)."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()
