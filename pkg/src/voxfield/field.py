"""Voxel-bounded neural field: trilinear feature aggregation, positional encoding,
and a small shared MLP predicting (sigma, color), with a hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .octree import CORNER_OFFSETS, EmbeddingTable, SparseVoxelGrid


class FieldError(ValueError):
    pass


def trilinear_weights(local) -> np.ndarray:
    """Weights of the 8 cell corners at local coordinates in [0,1]^3, shape (N, 8)."""
    local = np.asarray(local)
    t = local.reshape(-1, 3)
    w = np.ones((len(t), 8), dtype=t.dtype if t.dtype.kind == "f" else np.float64)
    for k, off in enumerate(CORNER_OFFSETS):
        for a in range(3):
            w[:, k] *= t[:, a] if off[a] else 1.0 - t[:, a]
    return w


def trilinear(corner_values, local) -> np.ndarray:
    local = np.asarray(local, dtype=np.float64)
    if local.shape != (3,) or np.any(local < 0) or np.any(local > 1):
        raise FieldError(f"local coordinate {local} outside the unit cell")
    corner_values = np.asarray(corner_values)
    return trilinear_weights(local)[0] @ corner_values.reshape(8, -1)


def positional_encode(x, L: int) -> np.ndarray:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)] along the last axis."""
    x = np.asarray(x)
    if L < 0:
        raise FieldError("number of frequencies must be >= 0")
    if L == 0:
        return x.copy()
    out = np.empty(x.shape[:-1] + (x.shape[-1] * (1 + 2 * L),), dtype=np.result_type(x.dtype, np.float32))
    n = x.shape[-1]
    out[..., :n] = x
    # double-angle recurrence: one sin/cos pair, then products only
    s = np.sin(np.pi * x)
    c = np.cos(np.pi * x)
    for k in range(L):
        out[..., n * (1 + 2 * k) : n * (2 + 2 * k)] = s
        out[..., n * (2 + 2 * k) : n * (3 + 2 * k)] = c
        if k + 1 < L:
            s, c = 2.0 * s * c, (c - s) * (c + s)
    return out


def _encode_backward(d_enc: np.ndarray, enc: np.ndarray, dim: int, L: int) -> np.ndarray:
    dx = d_enc[:, :dim].copy()
    for k in range(L):
        s = enc[:, dim * (1 + 2 * k) : dim * (2 + 2 * k)]
        c = enc[:, dim * (2 + 2 * k) : dim * (3 + 2 * k)]
        ds = d_enc[:, dim * (1 + 2 * k) : dim * (2 + 2 * k)]
        dc = d_enc[:, dim * (2 + 2 * k) : dim * (3 + 2 * k)]
        dx += (2.0**k * np.pi) * (ds * c - dc * s)
    return dx


def softplus(x):
    # max(x, 0) + log1p(exp(-|x|)), computed in place in the input dtype
    out = np.abs(x)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(x, 0)
    return out


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class FieldNetwork:
    """Shared MLP. Density trunk on encoded features; color head on trunk + encoded direction.

    Parameters live in ``params`` as ``{name: array}``; weights are (fan_in, fan_out).
    """

    feature_dim: int = 32
    feature_freqs: int = 6
    dir_freqs: int = 4
    hidden: int = 128
    density_layers: int = 2
    color_layers: int = 2
    activation: str = "softplus"  # hidden layers: smooth "softplus" or "relu"
    params: dict = field(default_factory=dict)

    @property
    def encoded_dim(self) -> int:
        return self.feature_dim * (1 + 2 * self.feature_freqs)

    @property
    def dir_dim(self) -> int:
        return 3 * (1 + 2 * self.dir_freqs)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        shapes = {}
        fan_in = self.encoded_dim
        for i in range(self.density_layers):
            shapes[f"density.{i}"] = (fan_in, self.hidden)
            fan_in = self.hidden
        shapes["sigma"] = (fan_in, 1)
        fan_in = fan_in + self.dir_dim
        for i in range(self.color_layers - 1):
            shapes[f"color.{i}"] = (fan_in, self.hidden)
            fan_in = self.hidden
        shapes["rgb"] = (fan_in, 3)
        return shapes

    @classmethod
    def create(cls, rng: np.random.Generator, dtype=np.float32, **kwargs) -> "FieldNetwork":
        net = cls(**kwargs)
        if net.activation not in _ACTIVATIONS:
            raise FieldError(f"unknown activation {net.activation!r}; expected one of {sorted(_ACTIVATIONS)}")
        if net.density_layers < 1 or net.color_layers < 1:
            raise FieldError("need at least one density and one color layer")
        for name, (fan_in, fan_out) in net.layer_shapes().items():
            bound = np.sqrt(6.0 / fan_in)
            net.params[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)
            net.params[f"{name}.b"] = np.zeros(fan_out, dtype=dtype)
        return net

    def astype(self, dtype) -> "FieldNetwork":
        return FieldNetwork(
            self.feature_dim, self.feature_freqs, self.dir_freqs, self.hidden,
            self.density_layers, self.color_layers, self.activation,
            {k: v.astype(dtype) for k, v in self.params.items()},
        )

    def copy(self) -> "FieldNetwork":
        return self.astype(self.dtype)

    def config(self) -> dict:
        return dict(feature_dim=self.feature_dim, feature_freqs=self.feature_freqs, dir_freqs=self.dir_freqs,
                    hidden=self.hidden, density_layers=self.density_layers, color_layers=self.color_layers,
                    activation=self.activation)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class GradientBuffer:
    params: dict
    embeddings: Optional[np.ndarray] = None
    c_bg: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def zeros_like(cls, net: FieldNetwork, table: Optional[EmbeddingTable] = None, dtype=np.float64):
        return cls(
            {k: np.zeros(v.shape, dtype=dtype) for k, v in net.params.items()},
            None if table is None else np.zeros(table.data.shape, dtype=dtype),
        )

    def zero(self):
        for v in self.params.values():
            v[...] = 0
        if self.embeddings is not None:
            self.embeddings[...] = 0
        self.c_bg[...] = 0

    def add(self, other: "GradientBuffer"):
        for k, v in other.params.items():
            self.params[k] += v
        if other.embeddings is not None:
            self.embeddings += other.embeddings
        self.c_bg += other.c_bg


def _relu(x):
    return np.maximum(x, 0)


def _relu_slope(a):
    return a > 0


def _softplus_slope(a):
    # softplus' = sigmoid, written in terms of the output a = softplus(z)
    return -np.expm1(-a)


_ACTIVATIONS = {"relu": (_relu, _relu_slope), "softplus": (softplus, _softplus_slope)}


def forward(net: FieldNetwork, feat: np.ndarray, dirs: Optional[np.ndarray], need_color: bool = True):
    """Evaluate the MLP on pre-encoding features. Returns (sigma, color, cache)."""
    P = net.params
    dt = net.dtype
    act = _ACTIVATIONS[net.activation][0]
    enc = positional_encode(feat.astype(dt, copy=False), net.feature_freqs)
    acts = [enc]
    x = enc
    for i in range(net.density_layers):
        x = act(x @ P[f"density.{i}.W"] + P[f"density.{i}.b"])
        acts.append(x)
    s = (x @ P["sigma.W"])[:, 0] + P["sigma.b"][0]
    sigma = softplus(s)
    cache = {"enc": enc, "acts": acts, "s": s, "dim": feat.shape[1]}
    if not need_color:
        return sigma, None, cache
    denc = positional_encode(np.asarray(dirs, dtype=dt), net.dir_freqs)
    y = np.concatenate([x, denc], axis=1)
    cacts = [y]
    for i in range(net.color_layers - 1):
        y = act(y @ P[f"color.{i}.W"] + P[f"color.{i}.b"])
        cacts.append(y)
    color = sigmoid(y @ P["rgb.W"] + P["rgb.b"])
    cache.update(cacts=cacts, color=color)
    return sigma, color, cache


def backward(net: FieldNetwork, cache: dict, d_sigma: np.ndarray, d_color: Optional[np.ndarray],
             grads: dict) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; return gradient w.r.t. the features."""
    P = net.params
    dt = net.dtype
    slope = _ACTIVATIONS[net.activation][1]
    d_sigma = np.asarray(d_sigma, dtype=dt)
    acts = cache["acts"]
    trunk = acts[-1]
    ds = d_sigma * sigmoid(cache["s"])  # softplus' = sigmoid
    grads["sigma.W"] += trunk.T @ ds[:, None]
    grads["sigma.b"] += ds.sum()
    d_trunk = ds[:, None] * P["sigma.W"][:, 0][None, :]
    if d_color is not None and "color" in cache:
        c = cache["color"]
        dy = np.asarray(d_color, dtype=dt) * c * (1 - c)
        cacts = cache["cacts"]
        grads["rgb.W"] += cacts[-1].T @ dy
        grads["rgb.b"] += dy.sum(axis=0)
        dy = dy @ P["rgb.W"].T
        for i in reversed(range(net.color_layers - 1)):
            dy = dy * slope(cacts[i + 1])
            grads[f"color.{i}.W"] += cacts[i].T @ dy
            grads[f"color.{i}.b"] += dy.sum(axis=0)
            dy = dy @ P[f"color.{i}.W"].T
        d_trunk = d_trunk + dy[:, : trunk.shape[1]]
    dx = d_trunk
    for i in reversed(range(net.density_layers)):
        dx = dx * slope(acts[i + 1])
        grads[f"density.{i}.W"] += acts[i].T @ dx
        grads[f"density.{i}.b"] += dx.sum(axis=0)
        dx = dx @ P[f"density.{i}.W"].T
    return _encode_backward(dx, cache["enc"], cache["dim"], net.feature_freqs)


def gather_matrix(corner_rows: np.ndarray, weights: np.ndarray, num_rows: int) -> sp.csr_matrix:
    """Sparse (N, num_rows) matrix mapping table rows to trilinear features."""
    n = len(corner_rows)
    return sp.csr_matrix(
        (weights.ravel(), (np.repeat(np.arange(n), 8), corner_rows.ravel())), shape=(n, num_rows)
    )


def features(table: EmbeddingTable, corner_rows: np.ndarray, local: np.ndarray):
    w = trilinear_weights(np.asarray(local, dtype=table.data.dtype))
    S = gather_matrix(corner_rows, w, len(table))
    return np.asarray(S @ table.data), S


def density_at(net: FieldNetwork, table: EmbeddingTable, corner_rows, local) -> np.ndarray:
    feat, _ = features(table, corner_rows, local)
    sigma, _, _ = forward(net, feat, None, need_color=False)
    return sigma


@dataclass
class QueryTape:
    corner_rows: np.ndarray
    weights: np.ndarray
    cache: dict
    net: FieldNetwork
    num_rows: int


def query(grid: SparseVoxelGrid, table: EmbeddingTable, net: FieldNetwork, p, v):
    """(sigma, color, tape) at world point ``p`` seen along direction ``v``."""
    vox, local = grid.locate(p)
    if vox[0] < 0:
        raise FieldError(f"point {np.asarray(p)} is outside every occupied voxel")
    return query_voxel(grid, table, net, int(vox[0]), np.clip(local[0], 0.0, 1.0), v)


def query_voxel(grid: SparseVoxelGrid, table: EmbeddingTable, net: FieldNetwork, voxel: int, local, v):
    rows = grid.cell_corners[voxel][None]
    w = trilinear_weights(np.asarray(local, dtype=np.float64)[None])
    feat = (w @ table.data[rows[0]]).astype(net.dtype)
    sigma, color, cache = forward(net, feat, np.asarray(v, dtype=np.float64).reshape(1, 3))
    return float(sigma[0]), color[0].astype(np.float64), QueryTape(rows, w, cache, net, len(table))


def query_backward(tape: QueryTape, d_sigma: float, d_color, grads: GradientBuffer):
    d_color = np.asarray(d_color, dtype=np.float64).reshape(-1)
    if d_color.shape != (3,):
        raise FieldError("d_color must have 3 components")
    if grads.embeddings is not None and len(grads.embeddings) != tape.num_rows:
        raise FieldError("gradient buffer does not match the embedding table")
    if set(grads.params) != set(tape.net.params):
        raise FieldError("gradient buffer does not match the network")
    d_feat = backward(tape.net, tape.cache, np.array([d_sigma]), d_color[None], grads.params)
    if grads.embeddings is not None:
        grads.embeddings[tape.corner_rows[0]] += tape.weights[0][:, None] * d_feat[0][None, :]
