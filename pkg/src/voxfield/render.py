"""Ray marching through sparse voxels with midpoint accumulation, early termination
and a background term, plus the reverse pass through the whole quadrature.

Two routes exist: ``render_ray`` follows the marching loop literally, one sample at
a time, and keeps a per-sample tape; ``render_rays`` does the same arithmetic on
padded (rays x samples) arrays and is what training and image rendering use.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .field import (FieldNetwork, GradientBuffer, QueryTape, backward, features, forward,
                    query_backward, query_voxel)
from .geometry import Camera, HitBatch, Ray, VoxelHit, intersect_grid, traverse_grid
from .octree import EmbeddingTable, SparseVoxelGrid


class RenderError(RuntimeError):
    pass


@dataclass
class RenderConfig:
    step_size: float
    early_stop_eps: float = 0.01
    z_max: float = 10.0
    jitter: bool = False
    chunk: int = 4096
    window: int = 32

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 <= self.early_stop_eps < 1:
            raise ValueError("early_stop_eps must lie in [0, 1)")

    def replace(self, **kw) -> "RenderConfig":
        d = dict(self.__dict__)
        d.update(kw)
        return RenderConfig(**d)


# --------------------------------------------------------------------------- single ray


def sample_ray(hits: Sequence[VoxelHit], cfg: RenderConfig, rng: Optional[np.random.Generator] = None):
    """Midpoints, intervals and owning voxel ids for one ray's sorted hits."""
    if not hits:
        return []
    tau = cfg.step_size
    z0, z1 = hits[0].z_in, hits[-1].z_out
    n = math.ceil((z1 - z0) / tau)
    offsets = rng.random(n) if (cfg.jitter and rng is not None) else np.full(n, 0.5)
    points = [z0 + (k + offsets[k]) * tau for k in range(n)]
    points = [z for z in points if z <= z1]
    bounds = [z for h in hits for z in (h.z_in, h.z_out)]
    zs = sorted(points + bounds)
    out = []
    for a, b in zip(zs[:-1], zs[1:]):
        delta = b - a
        if not delta > 0:
            continue
        mid = (a + b) / 2
        for h in hits:
            if h.z_in <= mid <= h.z_out:
                out.append((mid, delta, h.voxel_id))
                break
    return out


@dataclass
class SampleRecord:
    z: float
    delta: float
    voxel: int
    tape: QueryTape
    sigma: float
    color: np.ndarray
    alpha: float
    a_prev: float


@dataclass
class RayRenderResult:
    color: np.ndarray
    depth: float
    transparency: float
    eval_count: int
    tape: list = field(default_factory=list)
    c_bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z_max: float = 0.0
    truncated: bool = False


def render_ray(ray: Ray, grid: SparseVoxelGrid, table: EmbeddingTable, net: FieldNetwork,
               cfg: RenderConfig, c_bg, rng: Optional[np.random.Generator] = None) -> RayRenderResult:
    c_bg = np.asarray(c_bg, dtype=np.float64)
    if np.any(c_bg < 0) or np.any(c_bg > 1):
        raise RenderError("background color must lie in [0, 1]")
    A, C, Z = 1.0, np.zeros(3), 0.0
    tape, evals, truncated = [], 0, False
    hits = intersect_grid(ray, grid) if grid.num_cells else []
    for z, delta, vox in sample_ray(hits, cfg, rng):
        if not A > cfg.early_stop_eps:
            truncated = truncated or cfg.early_stop_eps > 0
            continue
        p = ray.origin + z * ray.direction
        local = np.clip((p - grid.origin) / grid.voxel_size - grid.cells[vox], 0.0, 1.0)
        sigma, color, qt = query_voxel(grid, table, net, vox, local, ray.direction)
        evals += 1
        alpha = math.exp(-sigma * delta)
        tape.append(SampleRecord(z, delta, vox, qt, sigma, color, alpha, A))
        C = C + A * (1 - alpha) * color
        Z = Z + A * (1 - alpha) * z
        A = A * alpha
    C = C + A * c_bg
    Z = Z + A * cfg.z_max
    return RayRenderResult(C, Z, A, evals, tape, c_bg, cfg.z_max, truncated)


def render_ray_backward(result: RayRenderResult, d_color, d_depth: float, d_transparency: float,
                        grads: GradientBuffer):
    if result.truncated:
        raise RenderError("tape truncated by early termination; render with early_stop_eps=0 for gradients")
    gC = np.asarray(d_color, dtype=np.float64)
    A_final = result.transparency
    e_bg = float(gC @ result.c_bg) + d_depth * result.z_max + d_transparency
    remaining = A_final * e_bg
    grads.c_bg += A_final * gC
    for rec in reversed(result.tape):
        e = float(gC @ rec.color) + d_depth * rec.z
        w = rec.a_prev * (1 - rec.alpha)
        ds = rec.a_prev * rec.alpha * e - remaining
        remaining += w * e
        query_backward(rec.tape, ds * rec.delta, w * gC, grads)


# --------------------------------------------------------------------------- batched


@dataclass
class FieldSource:
    """A renderable field placed in the world by a rigid transform (local -> world)."""

    grid: SparseVoxelGrid
    table: EmbeddingTable
    net: FieldNetwork
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_local(self, origins, dirs):
        R = np.asarray(self.rotation, dtype=np.float64)
        return (origins - self.translation) @ R, dirs @ R

    @property
    def is_identity(self) -> bool:
        return np.array_equal(self.rotation, np.eye(3)) and not np.any(self.translation)


@dataclass
class SampleBatch:
    """Padded samples: row r holds ray r's kept midpoints in increasing z."""

    z: np.ndarray
    delta: np.ndarray
    voxel: np.ndarray
    source: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.voxel >= 0

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def merge_hits(parts: Sequence[HitBatch]) -> tuple[HitBatch, np.ndarray]:
    """Concatenate per-source hit lists and re-sort by z_in. Returns hits and source ids."""
    if len(parts) == 1:
        h = parts[0]
        return h, np.where(h.voxel >= 0, 0, -1)
    z_in = np.concatenate([p.z_in for p in parts], axis=1)
    z_out = np.concatenate([p.z_out for p in parts], axis=1)
    vox = np.concatenate([p.voxel for p in parts], axis=1)
    src = np.concatenate([np.where(p.voxel >= 0, i, -1) for i, p in enumerate(parts)], axis=1)
    order = np.argsort(z_in, axis=1, kind="stable")
    take = lambda a: np.take_along_axis(a, order, axis=1)
    return HitBatch(take(z_in), take(z_out), take(vox)), take(src)


def sample_batch(hits: HitBatch, cfg: RenderConfig, rng: Optional[np.random.Generator] = None,
                 hit_source: Optional[np.ndarray] = None, overlapping: bool = False) -> SampleBatch:
    """Vectorized form of ``sample_ray`` over padded hits."""
    n_rays = hits.voxel.shape[0]
    n_hits = hits.count
    has = n_hits > 0
    if hit_source is None:
        hit_source = np.where(hits.voxel >= 0, 0, -1)
    if not np.any(has):
        e = np.zeros((n_rays, 0))
        return SampleBatch(e, e.copy(), np.zeros((n_rays, 0), np.int64), np.zeros((n_rays, 0), np.int64))
    tau = cfg.step_size
    z0 = np.where(has, hits.z_in[:, 0], 0.0)
    last = np.maximum(n_hits - 1, 0)
    z1 = np.where(has, hits.z_out[np.arange(n_rays), last], 0.0)
    n_strat = np.where(has, np.ceil((z1 - z0) / tau), 0).astype(np.int64)
    m = int(n_strat.max())
    k = np.arange(m)[None, :]
    if cfg.jitter and rng is not None:
        offs = rng.random((n_rays, m))
    else:
        offs = np.full((1, m), 0.5)
    pts = z0[:, None] + (k + offs) * tau
    pts = np.where((k < n_strat[:, None]) & (pts <= z1[:, None]), pts, np.inf)

    hvalid = hits.voxel >= 0
    values = np.concatenate([pts, hits.z_in, hits.z_out], axis=1)
    depth_step = np.concatenate([np.zeros_like(pts, dtype=np.int64), hvalid.astype(np.int64), -hvalid.astype(np.int64)], axis=1)
    starts = np.concatenate([np.zeros_like(pts, dtype=np.int64), hvalid.astype(np.int64), np.zeros_like(hvalid, dtype=np.int64)], axis=1)
    order = np.argsort(values, axis=1, kind="stable")
    zs = np.take_along_axis(values, order, axis=1)
    inside = np.cumsum(np.take_along_axis(depth_step, order, axis=1), axis=1)[:, :-1]
    hit_idx = np.cumsum(np.take_along_axis(starts, order, axis=1), axis=1)[:, :-1] - 1

    a, b = zs[:, :-1], zs[:, 1:]
    with np.errstate(invalid="ignore"):
        delta = b - a
    mid = (a + b) / 2
    keep = np.isfinite(b) & (delta > 0) & (inside > 0)

    if overlapping:
        # ownership by first source (in order) whose hit interval contains the midpoint
        contains = (mid[:, :, None] >= hits.z_in[:, None, :]) & (mid[:, :, None] <= hits.z_out[:, None, :])
        rank = np.where(contains, hit_source[:, None, :], np.iinfo(np.int64).max)
        hit_idx = np.argmin(rank, axis=2)
        keep &= contains.any(axis=2)
    hit_idx = np.clip(hit_idx, 0, max(hits.voxel.shape[1] - 1, 0))
    vox = np.take_along_axis(hits.voxel, hit_idx, axis=1)
    src = np.take_along_axis(hit_source, hit_idx, axis=1)

    width = int(keep.sum(axis=1).max())
    pos = np.argsort(~keep, axis=1, kind="stable")[:, :width]
    kept = np.take_along_axis(keep, pos, axis=1)
    pick = lambda arr, fill: np.where(kept, np.take_along_axis(arr, pos, axis=1), fill)
    return SampleBatch(pick(mid, np.inf), pick(delta, 0.0), pick(vox, -1), pick(src, -1))


@dataclass
class FieldEval:
    """Field outputs and backward caches for the valid samples of one source."""

    index: tuple
    cache: dict
    gather: object


@dataclass
class BatchRenderResult:
    color: np.ndarray
    depth: np.ndarray
    transparency: np.ndarray
    eval_count: np.ndarray
    samples: Optional[SampleBatch] = None
    sigma: Optional[np.ndarray] = None
    sample_color: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    a_prev: Optional[np.ndarray] = None
    evals: list = field(default_factory=list)
    c_bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    z_max: float = 0.0
    truncated: bool = False

    @property
    def weights(self) -> np.ndarray:
        return self.a_prev * (1 - self.alpha)


def _march(origins, dirs, sources: Sequence[FieldSource], cfg: RenderConfig, rng):
    parts, local_rays = [], []
    for s in sources:
        o_l, d_l = (origins, dirs) if s.is_identity else s.to_local(origins, dirs)
        local_rays.append((o_l, d_l))
        parts.append(traverse_grid(o_l, d_l, s.grid))
    hits, hsrc = merge_hits(parts)
    samples = sample_batch(hits, cfg, rng, hsrc, overlapping=len(sources) > 1)
    return samples, local_rays


def _evaluate(samples: SampleBatch, sel: np.ndarray, sources, local_rays, need_tape: bool):
    """Field values at the samples selected by boolean mask ``sel`` (rows x cols)."""
    shape = samples.z.shape
    sigma = np.zeros(shape)
    color = np.zeros(shape + (3,))
    evals = []
    for si, s in enumerate(sources):
        m = sel & (samples.source == si)
        if not np.any(m):
            continue
        rows, cols = np.nonzero(m)
        o_l, d_l = local_rays[si]
        z = samples.z[rows, cols]
        vox = samples.voxel[rows, cols]
        p = o_l[rows] + z[:, None] * d_l[rows]
        local = np.clip((p - s.grid.origin) / s.grid.voxel_size - s.grid.cells[vox], 0.0, 1.0)
        feat, S = features(s.table, s.grid.cell_corners[vox], local)
        sg, col, cache = forward(s.net, feat, d_l[rows])
        sigma[rows, cols] = sg
        color[rows, cols] = col
        if need_tape:
            evals.append(FieldEval((si, rows, cols), cache, S))
    return sigma, color, evals


def render_rays(origins, dirs, grid, table=None, net=None, cfg: RenderConfig = None, c_bg=(0, 0, 0), *,
                rng: Optional[np.random.Generator] = None, need_tape: bool = False,
                sources: Optional[Sequence[FieldSource]] = None) -> BatchRenderResult:
    """Render many rays. Pass either (grid, table, net) or ``sources`` for composites."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    c_bg = np.asarray(c_bg, dtype=np.float64)
    if sources is None:
        sources = [FieldSource(grid, table, net)]
    n = len(origins)
    eps = cfg.early_stop_eps
    samples, local_rays = _march(origins, dirs, sources, cfg, rng)
    valid = samples.valid
    width = samples.z.shape[1]

    if need_tape:
        sigma, color, evals = _evaluate(samples, valid, sources, local_rays, True)
        alpha = np.where(valid, np.exp(-sigma * samples.delta), 1.0)
        a_prev = np.cumprod(np.concatenate([np.ones((n, 1)), alpha], axis=1), axis=1)
        live = valid & (a_prev[:, :-1] > eps)
        # with eps = 0 only underflowed (A == 0) samples are skipped; their gradient is exactly zero
        truncated = eps > 0 and bool(np.any(valid & ~live))
        alpha = np.where(live, alpha, 1.0)
        a_prev = np.cumprod(np.concatenate([np.ones((n, 1)), alpha], axis=1), axis=1)
        A = a_prev[:, -1]
        a_prev = a_prev[:, :-1]
        w = a_prev * (1 - alpha)
        C = (w[..., None] * color).sum(axis=1) + A[:, None] * c_bg
        zs = np.where(live, samples.z, 0.0)
        Z = (w * zs).sum(axis=1) + A * cfg.z_max
        return BatchRenderResult(C, Z, A, live.sum(axis=1), samples, sigma, color, alpha, a_prev, evals,
                                 c_bg, cfg.z_max, truncated)

    # windowed marching: rays whose transparency fell to eps stop requesting samples
    A = np.ones(n)
    C = np.zeros((n, 3))
    Z = np.zeros(n)
    count = np.zeros(n, dtype=np.int64)
    for start in range(0, width, cfg.window):
        stop = min(start + cfg.window, width)
        active = A > eps
        if not np.any(active):
            break
        sel = np.zeros_like(valid)
        sel[:, start:stop] = valid[:, start:stop] & active[:, None]
        rows = np.flatnonzero(sel[:, start:stop].any(axis=1))
        if len(rows) == 0:
            continue
        sigma, color, _ = _evaluate(samples, sel, sources, local_rays, False)
        v = sel[rows, start:stop]
        alpha = np.where(v, np.exp(-sigma[rows, start:stop] * samples.delta[rows, start:stop]), 1.0)
        ap = np.cumprod(np.concatenate([A[rows, None], alpha], axis=1), axis=1)[:, :-1]
        live = v & (ap > eps)
        alpha = np.where(live, alpha, 1.0)
        ap = np.cumprod(np.concatenate([A[rows, None], alpha], axis=1), axis=1)
        w = ap[:, :-1] * (1 - alpha)
        C[rows] += (w[..., None] * color[rows, start:stop]).sum(axis=1)
        Z[rows] += (w * np.where(live, samples.z[rows, start:stop], 0.0)).sum(axis=1)
        A[rows] = ap[:, -1]
        count[rows] += live.sum(axis=1)
    C += A[:, None] * c_bg
    Z += A * cfg.z_max
    return BatchRenderResult(C, Z, A, count, c_bg=c_bg, z_max=cfg.z_max, truncated=eps > 0)


def render_rays_backward(result: BatchRenderResult, d_color, d_depth, d_transparency,
                         grads: Sequence[GradientBuffer] | GradientBuffer, sources: Sequence[FieldSource]):
    """Accumulate gradients of sum_r (gC_r.C_r + gZ_r Z_r + gA_r A_r) into ``grads``.

    ``grads`` holds one buffer per source (a single buffer is accepted for one source).
    """
    if result.samples is None:
        raise RenderError("render result carries no tape; render with need_tape=True")
    if result.truncated:
        raise RenderError("tape truncated by early termination; render with early_stop_eps=0 for gradients")
    if isinstance(grads, GradientBuffer):
        grads = [grads]
    n = len(result.color)
    gC = np.asarray(d_color, dtype=np.float64).reshape(n, 3)
    gZ = np.broadcast_to(np.asarray(d_depth, dtype=np.float64), (n,))
    gA = np.broadcast_to(np.asarray(d_transparency, dtype=np.float64), (n,))
    valid = result.samples.valid
    z = np.where(valid, result.samples.z, 0.0)
    A = result.transparency
    e = np.einsum("rsc,rc->rs", result.sample_color, gC) + gZ[:, None] * z
    w = result.weights
    we = w * e
    suffix = np.cumsum(we[:, ::-1], axis=1)[:, ::-1] - we
    e_bg = gC @ result.c_bg + gZ * result.z_max + gA
    remaining = suffix + (A * e_bg)[:, None]
    ds = result.a_prev * result.alpha * e - remaining
    d_sigma = np.where(valid, ds * result.samples.delta, 0.0)
    d_col = w[..., None] * gC[:, None, :]
    grads[0].c_bg += (A[:, None] * gC).sum(axis=0)
    for ev in result.evals:
        si, rows, cols = ev.index
        net = sources[si].net
        d_feat = backward(net, ev.cache, d_sigma[rows, cols], d_col[rows, cols], grads[si].params)
        if grads[si].embeddings is not None:
            grads[si].embeddings += np.asarray(ev.gather.T @ d_feat)


# --------------------------------------------------------------------------- images


@dataclass
class RenderedImage:
    rgb: np.ndarray
    depth: np.ndarray
    transparency: np.ndarray
    evals: np.ndarray


def render_image(camera: Camera, grid=None, table=None, net=None, cfg: RenderConfig = None, c_bg=(0, 0, 0), *,
                 sources: Optional[Sequence[FieldSource]] = None, workers: int = 1,
                 rng: Optional[np.random.Generator] = None) -> RenderedImage:
    """Per-pixel rendering in fixed-size ray chunks (so results do not depend on ``workers``)."""
    origins, dirs = camera.rays()
    n = len(origins)
    if sources is None:
        sources = [FieldSource(grid, table, net)]
    chunks = [(s, min(s + cfg.chunk, n)) for s in range(0, n, cfg.chunk)]

    def run(span):
        a, b = span
        return render_rays(origins[a:b], dirs[a:b], None, cfg=cfg, c_bg=c_bg, rng=rng, sources=sources)

    if workers > 1 and len(chunks) > 1 and rng is None:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    H, W = camera.height, camera.width
    cat = lambda f: np.concatenate([f(r) for r in results])
    return RenderedImage(
        cat(lambda r: r.color).reshape(H, W, 3),
        cat(lambda r: r.depth).reshape(H, W),
        cat(lambda r: r.transparency).reshape(H, W),
        cat(lambda r: r.eval_count).reshape(H, W),
    )


def normal_map(depth: np.ndarray, camera: Camera, transparency: Optional[np.ndarray] = None,
               background: float = 0.99) -> np.ndarray:
    """Camera-facing unit normals from central differences of back-projected depth.

    Pixels whose transparency exceeds ``background`` (or that border such pixels) are zero.
    """
    _, dirs = camera.rays()
    H, W = depth.shape
    dirs = dirs.reshape(H, W, 3)
    P = camera.translation + depth[..., None] * dirs
    dPdy, dPdx = np.gradient(P, axis=(0, 1))
    n = np.cross(dPdx, dPdy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    flip = np.sum(n * dirs, axis=-1) > 0
    n[flip] *= -1
    if transparency is not None:
        bg = transparency > background
        grown = bg.copy()
        grown[1:] |= bg[:-1]
        grown[:-1] |= bg[1:]
        grown[:, 1:] |= bg[:, :-1]
        grown[:, :-1] |= bg[:, 1:]
        n[grown] = 0
    return n
