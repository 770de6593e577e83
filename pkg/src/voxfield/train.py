"""Training: photometric loss with a transparency prior, Adam, and the progressive
schedule of periodic pruning plus milestone subdivision (voxel and step size halved).

Several scenes can share one network while keeping their own grids, embedding tables
and background colors; batches then rotate through the scenes.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from .dataset import PosedImageSet
from .field import FieldNetwork, GradientBuffer
from .geometry import Aabb, traverse_grid
from .metrics import psnr, ssim
from .octree import EmbeddingTable, SparseVoxelGrid, init_from_bbox, prune_mask, remove_voxels, row_map, subdivide
from .render import FieldSource, RenderConfig, render_image, render_rays, render_rays_backward


class TrainingError(RuntimeError):
    pass


class NumericError(TrainingError):
    pass


class AllVoxelsPrunedError(TrainingError):
    pass


@dataclass
class TrainConfig:
    rays_per_image: int = 2048
    images_per_batch: int = 4
    lr: float = 1e-3
    embedding_lr_scale: float = 1.0
    background_lr_scale: float = 1.0
    lambda_reg: float = 0.01
    depth_loss_weight: float = 0.0
    total_steps: int = 4000
    prune_period: int = 500
    prune_start: Optional[int] = None  # default: first milestone, or prune_period without milestones
    prune_gamma: float = 0.5
    prune_samples: int = 16
    prune: bool = True
    subdivide_milestones: tuple = (1000, 3000)
    max_retries: int = 16
    early_stop_eps: float = 0.01  # used for validation renders only; training renders are exact
    val_views: int = 2
    log_every: int = 10
    checkpoint_dir: Optional[str] = None
    log_path: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        self.subdivide_milestones = tuple(int(m) for m in self.subdivide_milestones)
        positive = ("rays_per_image", "images_per_batch", "prune_period", "max_retries", "prune_samples")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not self.lr > 0 or self.lambda_reg < 0 or self.depth_loss_weight < 0:
            raise ValueError("lr must be positive; lambda_reg and depth_loss_weight nonnegative")
        if any(b <= a for a, b in zip(self.subdivide_milestones, self.subdivide_milestones[1:])):
            raise ValueError("subdivide_milestones must be strictly ascending")
        if any(m < 1 for m in self.subdivide_milestones):
            raise ValueError("milestones must be >= 1")

    @property
    def first_prune(self) -> int:
        if self.prune_start is not None:
            return self.prune_start
        return self.subdivide_milestones[0] if self.subdivide_milestones else self.prune_period

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subdivide_milestones"] = list(self.subdivide_milestones)
        return d


# --------------------------------------------------------------------------- state


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr_t: float, lr_scale: Optional[dict] = None):
    """One bias-corrected Adam update in place (step size lr_t / (sqrt(v_hat) + eps)).

    ``lr_scale`` optionally multiplies the step size per parameter name.
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m = state.m.setdefault(k, np.zeros(p.shape))
        v = state.v.setdefault(k, np.zeros(p.shape))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        lr_k = lr_t * (lr_scale or {}).get(k, 1.0)
        p -= (lr_k * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def remap_rows(state: AdamState, key: str, rows: np.ndarray):
    """Carry moment rows over to a new table layout; rows == -1 start from zero."""
    for acc in (state.m, state.v):
        if key not in acc:
            continue
        old = acc[key]
        new = np.zeros((len(rows),) + old.shape[1:])
        ok = rows >= 0
        new[ok] = old[rows[ok]]
        acc[key] = new


@dataclass
class Scene:
    grid: SparseVoxelGrid
    table: EmbeddingTable
    c_bg: np.ndarray
    step_size: float
    z_max: float
    adam: AdamState = field(default_factory=AdamState)

    def render_config(self, eps: float = 0.0, **kw) -> RenderConfig:
        return RenderConfig(step_size=self.step_size, early_stop_eps=eps, z_max=self.z_max, **kw)

    def copy(self) -> "Scene":
        return Scene(self.grid, self.table.copy(), self.c_bg.copy(), self.step_size, self.z_max)

    def to_model(self, net: FieldNetwork) -> ckpt.Model:
        return ckpt.Model(self.grid, self.table, net, self.c_bg.copy(),
                          meta={"step_size": self.step_size, "z_max": self.z_max})

    @classmethod
    def from_model(cls, model: ckpt.Model) -> "Scene":
        return cls(model.grid, model.table, np.asarray(model.c_bg, float), float(model.meta["step_size"]),
                   float(model.meta["z_max"]))


@dataclass
class SceneSet:
    scenes: list
    net: FieldNetwork
    net_adam: AdamState = field(default_factory=AdamState)

    def __post_init__(self):
        dims = {s.table.dim for s in self.scenes}
        if len(dims) > 1 or (dims and dims.pop() != self.net.feature_dim):
            raise TrainingError("all embedding tables must match the network feature dimension")

    def copy(self) -> "SceneSet":
        return SceneSet([s.copy() for s in self.scenes], self.net.copy())


def init_scene(bbox: Aabb, rng: np.random.Generator, *, target_voxels: int = 1000, feature_dim: int = 32,
               step_ratio: float = 0.125, z_max: float = 10.0, c_bg=(0.5, 0.5, 0.5), dtype=np.float32) -> Scene:
    grid = init_from_bbox(bbox, target_voxels)
    table = EmbeddingTable.random(grid.num_corners, feature_dim, rng, dtype=dtype)
    return Scene(grid, table, np.asarray(c_bg, float), grid.voxel_size * step_ratio, z_max)


def init_scene_set(datasets: Sequence[PosedImageSet], rng: np.random.Generator, *, target_voxels: int = 1000,
                   step_ratio: float = 0.125, dtype=np.float32, **net_kw) -> SceneSet:
    """Fresh scenes covering each dataset's bbox, plus one shared network."""
    net = FieldNetwork.create(rng, dtype=dtype, **net_kw)
    scenes = []
    for ds in datasets:
        bg = ds.meta.get("background", (0.5, 0.5, 0.5))
        scenes.append(init_scene(ds.bbox, rng, target_voxels=target_voxels, feature_dim=net.feature_dim,
                                 step_ratio=step_ratio, z_max=ds.z_max, c_bg=bg, dtype=dtype))
    return SceneSet(scenes, net)


# --------------------------------------------------------------------------- batches


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    depths: Optional[np.ndarray]
    hit: np.ndarray  # whether the ray crosses an occupied voxel

    def __len__(self) -> int:
        return len(self.origins)


class HitMaskCache:
    """Per-image masks of pixels whose rays cross an occupied voxel, keyed on the grid."""

    def __init__(self, dataset: PosedImageSet):
        self.dataset = dataset
        self.grid = None
        self.masks: dict[int, np.ndarray] = {}

    def mask(self, grid: SparseVoxelGrid, i: int) -> np.ndarray:
        if grid is not self.grid:
            self.grid, self.masks = grid, {}
        if i not in self.masks:
            o, d = self.dataset.cameras[i].rays()
            self.masks[i] = traverse_grid(o, d, grid).any if grid.num_cells else np.zeros(len(o), bool)
        return self.masks[i]


def sample_ray_batch(dataset: PosedImageSet, scene: Scene, cfg: TrainConfig, rng: np.random.Generator,
                     cache: Optional[HitMaskCache] = None) -> RayBatch:
    """Pick images, then pixels, redrawing pixels whose rays miss every voxel.

    After ``cfg.max_retries`` redraws a still-missing pixel is kept as a background ray.
    """
    if len(dataset) == 0:
        raise TrainingError("dataset has no images")
    if scene.grid.num_cells == 0:
        raise TrainingError("cannot sample rays: the grid has no voxels")
    cache = cache or HitMaskCache(dataset)
    n_img = len(dataset)
    picks = rng.choice(n_img, size=cfg.images_per_batch, replace=cfg.images_per_batch > n_img)
    H, W = dataset.height, dataset.width
    o_all, d_all, c_all, z_all, h_all = [], [], [], [], []
    for i in picks:
        mask = cache.mask(scene.grid, int(i))
        pix = rng.integers(0, H * W, size=cfg.rays_per_image)
        for _ in range(cfg.max_retries):
            miss = ~mask[pix]
            if not np.any(miss):
                break
            pix[miss] = rng.integers(0, H * W, size=int(miss.sum()))
        cam = dataset.cameras[int(i)]
        py, px = np.divmod(pix, W)
        d = cam.directions(px + 0.5, py + 0.5)
        o_all.append(np.broadcast_to(cam.translation, d.shape))
        d_all.append(d)
        c_all.append(dataset.images[i, py, px])
        if dataset.depths is not None:
            z_all.append(dataset.depths[i, py, px])
        h_all.append(mask[pix])
    return RayBatch(np.concatenate(o_all), np.concatenate(d_all), np.concatenate(c_all),
                    np.concatenate(z_all) if z_all else None, np.concatenate(h_all))


# --------------------------------------------------------------------------- loss


OMEGA_SHIFT = math.log(0.1) + math.log(1.1)


def omega(A):
    """Transparency prior, zero at A = 0 and A = 1, peaking at A = 0.5."""
    A = np.asarray(A, dtype=np.float64)
    return np.log(0.1 + A) + np.log(1.1 - A) - OMEGA_SHIFT


def omega_grad(A):
    A = np.asarray(A, dtype=np.float64)
    return 1.0 / (0.1 + A) - 1.0 / (1.1 - A)


@dataclass
class LossTerms:
    total: float
    color: float
    reg: float
    depth: float
    evals: int


def loss_and_grads(batch: RayBatch, scene: Scene, net: FieldNetwork, cfg: TrainConfig,
                   grads: Optional[GradientBuffer] = None) -> tuple[LossTerms, GradientBuffer]:
    if len(batch) == 0:
        raise TrainingError("empty ray batch")
    if grads is None:
        grads = GradientBuffer.zeros_like(net, scene.table)
    rcfg = scene.render_config(eps=0.0)
    source = FieldSource(scene.grid, scene.table, net)
    res = render_rays(batch.origins, batch.dirs, None, cfg=rcfg, c_bg=scene.c_bg, need_tape=True, sources=[source])
    n = len(batch)
    diff = res.color - batch.colors
    color_loss = float(np.mean(np.sum(diff**2, axis=1)))
    reg = float(np.mean(omega(res.transparency)))
    depth = 0.0
    gZ = np.zeros(n)
    if cfg.depth_loss_weight > 0 and batch.depths is not None:
        dz = res.depth - batch.depths
        depth = float(np.mean(np.abs(dz)))
        gZ = cfg.depth_loss_weight * np.sign(dz) / n
    total = color_loss + cfg.lambda_reg * reg + cfg.depth_loss_weight * depth
    if not math.isfinite(total):
        bad = np.flatnonzero(~np.all(np.isfinite(res.color), axis=1) | ~np.isfinite(res.transparency))
        detail = ", ".join(f"ray {r}: origin {batch.origins[r].tolist()} dir {batch.dirs[r].tolist()}" for r in bad[:5])
        raise NumericError(f"non-finite loss ({total}); {len(bad)} offending rays. {detail}")
    gC = 2.0 * diff / n
    gA = cfg.lambda_reg * omega_grad(res.transparency) / n
    render_rays_backward(res, gC, gZ, gA, [grads], [source])
    return LossTerms(total, color_loss, reg, depth, int(res.eval_count.sum())), grads


# --------------------------------------------------------------------------- evaluation


def render_views(scene: Scene, net: FieldNetwork, cameras, eps: float = 0.01, workers: int = 1):
    cfg = scene.render_config(eps=eps)
    return [render_image(cam, scene.grid, scene.table, net, cfg, np.clip(scene.c_bg, 0, 1), workers=workers)
            for cam in cameras]


def evaluate(scene: Scene, net: FieldNetwork, dataset: PosedImageSet, eps: float = 0.01, workers: int = 1,
             with_ssim: bool = True) -> dict:
    """Per-image and mean PSNR/SSIM plus total field evaluations."""
    if len(dataset) == 0:
        raise TrainingError("evaluation split is empty")
    renders = render_views(scene, net, dataset.cameras, eps, workers)
    p = [psnr(r.rgb, gt) for r, gt in zip(renders, dataset.images)]
    s = [ssim(r.rgb, gt) for r, gt in zip(renders, dataset.images)] if with_ssim else []
    out = {"psnr": p, "mean_psnr": float(np.mean(p)), "evals": int(sum(int(r.evals.sum()) for r in renders))}
    if with_ssim:
        out.update(ssim=s, mean_ssim=float(np.mean(s)))
    return out


# --------------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    scene_set: SceneSet
    log: list
    prune_events: list


class _Log:
    def __init__(self, path: Optional[str]):
        self.records = []
        self.fh = open(path, "a") if path else None

    def write(self, rec: dict):
        self.records.append(rec)
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _apply_prune(scene: Scene, net: FieldNetwork, cfg: TrainConfig):
    remove = prune_mask(scene.grid, scene.table, net, cfg.prune_samples, cfg.prune_gamma)
    before = scene.grid
    scene.grid, scene.table = remove_voxels(scene.grid, scene.table, remove)
    remap_rows(scene.adam, "embeddings", row_map(before, scene.grid))
    return int(remove.sum())


def _apply_subdivide(scene: Scene):
    before = scene.grid
    scene.grid, scene.table = subdivide(scene.grid, scene.table)
    remap_rows(scene.adam, "embeddings", row_map(before, scene.grid, scale=2))
    scene.step_size /= 2


def _save(scene_set: SceneSet, directory: Optional[str], tag: str):
    if not directory:
        return
    Path(directory).mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scene_set.scenes):
        name = f"{tag}.vxf" if len(scene_set.scenes) == 1 else f"{tag}_scene{i}.vxf"
        ckpt.save(sc.to_model(scene_set.net), Path(directory) / name)


def _validation_psnr(scene: Scene, net: FieldNetwork, val: Optional[PosedImageSet], cfg: TrainConfig) -> Optional[float]:
    if val is None or len(val) == 0:
        return None
    renders = render_views(scene, net, val.cameras, cfg.early_stop_eps, cfg.workers)
    return float(np.mean([psnr(r.rgb, gt) for r, gt in zip(renders, val.images)]))


def _run(scene_set: SceneSet, datasets: Sequence[PosedImageSet], cfg: TrainConfig, rng: np.random.Generator,
         val_sets: Optional[Sequence[Optional[PosedImageSet]]] = None) -> TrainResult:
    if len(datasets) != len(scene_set.scenes):
        raise TrainingError("one dataset per scene required")
    val_sets = list(val_sets) if val_sets is not None else [None] * len(datasets)
    caches = [HitMaskCache(ds) for ds in datasets]
    log = _Log(cfg.log_path)
    prune_events = []
    net = scene_set.net
    milestones = set(cfg.subdivide_milestones)
    t0 = time.perf_counter()
    window = []
    try:
        for step in range(1, cfg.total_steps + 1):
            si = (step - 1) % len(scene_set.scenes)
            scene = scene_set.scenes[si]
            lr_t = cfg.lr * (1 - (step - 1) / cfg.total_steps)
            batch = sample_ray_batch(datasets[si], scene, cfg, rng, caches[si])
            terms, g = loss_and_grads(batch, scene, net, cfg)
            adam_step(net.params, g.params, scene_set.net_adam, lr_t)
            scene_params = {"embeddings": scene.table.data, "c_bg": scene.c_bg}
            scene_grads = {"embeddings": g.embeddings, "c_bg": g.c_bg}
            adam_step(scene_params, scene_grads, scene.adam, lr_t,
                      {"embeddings": cfg.embedding_lr_scale, "c_bg": cfg.background_lr_scale})
            np.clip(scene.c_bg, 0.0, 1.0, out=scene.c_bg)
            window.append(terms.total)
            if step % cfg.log_every == 0 or step == cfg.total_steps:
                log.write({"event": "step", "step": step, "scene": si, "loss": terms.total, "loss_color": terms.color,
                           "loss_reg": terms.reg, "loss_depth": terms.depth, "loss_avg": float(np.mean(window)),
                           "voxels": scene.grid.num_cells, "evals": terms.evals, "lr": lr_t,
                           "time": time.perf_counter() - t0})
                window = []

            if cfg.prune and step >= cfg.first_prune and (step - cfg.first_prune) % cfg.prune_period == 0:
                for i, sc in enumerate(scene_set.scenes):
                    before_psnr = _validation_psnr(sc, net, val_sets[i], cfg)
                    n_before = sc.grid.num_cells
                    removed = _apply_prune(sc, net, cfg)
                    if sc.grid.num_cells == 0:
                        ev = {"event": "prune", "step": step, "scene": i, "voxels_before": n_before, "voxels_after": 0}
                        log.write(ev)
                        raise AllVoxelsPrunedError(
                            f"step {step}: pruning removed all {n_before} voxels of scene {i} "
                            f"(every sampled transmittance exceeded gamma={cfg.prune_gamma}); "
                            "the images may be empty or training diverged")
                    after_psnr = _validation_psnr(sc, net, val_sets[i], cfg) if removed else before_psnr
                    ev = {"event": "prune", "step": step, "scene": i, "voxels_before": n_before,
                          "voxels_after": sc.grid.num_cells, "psnr_before": before_psnr, "psnr_after": after_psnr}
                    prune_events.append(ev)
                    log.write(ev)
            if step in milestones:
                for i, sc in enumerate(scene_set.scenes):
                    _apply_subdivide(sc)
                    log.write({"event": "subdivide", "step": step, "scene": i, "voxels": sc.grid.num_cells,
                               "voxel_size": sc.grid.voxel_size, "step_size": sc.step_size})
                _save(scene_set, cfg.checkpoint_dir, f"step{step:06d}")
        _save(scene_set, cfg.checkpoint_dir, "final")
    finally:
        log.close()
    return TrainResult(scene_set, log.records, prune_events)


def train(scene_set: SceneSet, dataset: PosedImageSet, cfg: TrainConfig, rng: np.random.Generator,
          val: Optional[PosedImageSet] = None) -> TrainResult:
    """Train in place. ``val`` views (first ``cfg.val_views``) are rendered around prune events."""
    if len(scene_set.scenes) != 1:
        raise TrainingError("train() expects a single scene; use train_multiscene")
    v = val.subset(range(min(cfg.val_views, len(val)))) if val is not None else None
    return _run(scene_set, [dataset], cfg, rng, [v])


def train_multiscene(scene_set: SceneSet, datasets: Sequence[PosedImageSet], cfg: TrainConfig,
                     rng: np.random.Generator, vals: Optional[Sequence[PosedImageSet]] = None) -> TrainResult:
    if len(scene_set.scenes) < 2:
        raise TrainingError("multi-scene training needs at least two scenes")
    v = None
    if vals is not None:
        v = [x.subset(range(min(cfg.val_views, len(x)))) if x is not None else None for x in vals]
    return _run(scene_set, datasets, cfg, rng, v)
