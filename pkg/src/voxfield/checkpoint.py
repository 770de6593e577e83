"""Checkpoint container for a trained voxel field.

Byte layout (all little-endian)::

    8 bytes   magic b"VOXFIELD"
    1 byte    format version (currently 1)
    uint32    header length H
    H bytes   UTF-8 JSON header, keys sorted
    int32     cells        (num_cells x 3)
    int32     corners      (num_corners x 3)
    float32   embeddings   (num_corners x d)
    float32   network parameters, in the order of header["params"], each row-major
    int32     per instance: cell ids (header["instances"][i]["count"] values)
    uint32    CRC32 of every preceding byte

The header carries format_version, level, voxel_size, origin, d, counts, the network
configuration, parameter names and shapes, c_bg, optional instance transforms, and a
free-form ``meta`` dict (step size, z_max, ...).
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .field import FieldNetwork
from .octree import EmbeddingTable, SparseVoxelGrid

MAGIC = b"VOXFIELD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class FormatError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedError(ChecksumError):
    """A file shorter than its header promises; also a checksum failure."""


@dataclass
class Instance:
    """A placed copy of (a subset of) the stored grid: local -> world is x -> R x + t."""

    cells: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class Model:
    grid: SparseVoxelGrid
    table: EmbeddingTable
    net: FieldNetwork
    c_bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    instances: Optional[list] = None
    meta: dict = field(default_factory=dict)


def _tolist(a) -> list:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def to_bytes(model: Model) -> bytes:
    grid, table, net = model.grid, model.table, model.net
    if len(table) != grid.num_corners:
        raise FormatError("embedding table does not match the grid corners")
    names = sorted(net.params)
    header = {
        "format_version": FORMAT_VERSION,
        "level": grid.level,
        "voxel_size": grid.voxel_size,
        "origin": _tolist(grid.origin),
        "d": table.dim,
        "num_cells": grid.num_cells,
        "num_corners": grid.num_corners,
        "network": net.config(),
        "params": [[k, list(net.params[k].shape)] for k in names],
        "c_bg": _tolist(model.c_bg),
        "meta": model.meta,
    }
    if model.instances is not None:
        header["instances"] = [
            {"count": int(len(inst.cells)), "rotation": _tolist(inst.rotation), "translation": _tolist(inst.translation)}
            for inst in model.instances
        ]
    head = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, bytes([FORMAT_VERSION]), struct.pack("<I", len(head)), head,
             grid.cells.astype("<i4").tobytes(), grid.corners.astype("<i4").tobytes(),
             table.data.astype("<f4").tobytes()]
    parts += [net.params[k].astype("<f4").tobytes() for k in names]
    for inst in model.instances or []:
        parts.append(np.asarray(inst.cells).astype("<i4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(data: bytes) -> Model:
    if len(data) < len(MAGIC) + 1 or data[: len(MAGIC)] != MAGIC:
        raise FormatError("not a voxel field checkpoint")
    version = data[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < len(MAGIC) + 9:
        raise TruncatedError("checkpoint truncated inside the header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (corrupt or truncated file)")
    pos = len(MAGIC) + 1
    (hlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    try:
        header = json.loads(body[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad checkpoint header: {e}") from e
    pos += hlen

    def take(dtype, count, shape):
        nonlocal pos
        nbytes = 4 * count
        if pos + nbytes > len(body):
            raise TruncatedError("checkpoint payload shorter than its header")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += nbytes
        return arr

    k, m, d = header["num_cells"], header["num_corners"], header["d"]
    cells = take("<i4", 3 * k, (k, 3)).astype(np.int64)
    corners = take("<i4", 3 * m, (m, 3)).astype(np.int64)
    emb = take("<f4", m * d, (m, d)).astype(np.float32)
    net = FieldNetwork(**header["network"])
    for name, shape in header["params"]:
        net.params[name] = take("<f4", int(np.prod(shape)), tuple(shape)).astype(np.float32)
    instances = None
    if "instances" in header:
        instances = []
        for spec in header["instances"]:
            ids = take("<i4", spec["count"], (spec["count"],)).astype(np.int64)
            instances.append(Instance(ids, np.array(spec["rotation"]).reshape(3, 3), np.array(spec["translation"])))
    if pos != len(body):
        raise FormatError("trailing bytes after checkpoint payload")
    grid = SparseVoxelGrid(cells, header["voxel_size"], header["origin"], header["level"])
    if not np.array_equal(grid.corners, corners):
        raise FormatError("stored corners disagree with the cells")
    return Model(grid, EmbeddingTable(emb), net, np.array(header["c_bg"]), instances, header.get("meta", {}))


def save(model: Model, path):
    Path(path).write_bytes(to_bytes(model))


def load(path) -> Model:
    return from_bytes(Path(path).read_bytes())


def save_grid(grid: SparseVoxelGrid, table: EmbeddingTable, net: FieldNetwork, path, **kw):
    save(Model(grid, table, net, **kw), path)
