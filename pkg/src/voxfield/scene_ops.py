"""Editing trained voxel fields (select, delete, clone, move) and composing several
fields into one scene rendered in a single marching pass.

Edit scripts are JSON Lines: one operation object per line, blank lines and lines
starting with ``#`` ignored. Operations act on a current selection:

    {"op": "select", "region": {"min": [x, y, z], "max": [x, y, z]}, "instance": 0}
    {"op": "delete"}
    {"op": "clone", "translate": [x, y, z], "rotate_deg": [rx, ry, rz], "pivot": [x, y, z]}
    {"op": "transform", "translate": [x, y, z], "rotate_deg": [rx, ry, rz], "pivot": [x, y, z]}

``select`` picks voxels of one instance whose world-space centers lie in the region
(omit ``region`` for all of them). ``clone`` copies the selection into a new instance
and selects the copy. ``transform`` moves the selection; a partial selection is split
off into its own instance first. Rotations are XYZ Euler angles in degrees applied
about ``pivot`` (default: the origin), followed by the translation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .checkpoint import Instance, Model
from .field import FieldNetwork
from .geometry import Aabb, Camera, rotation_matrix
from .octree import EmbeddingTable, GridError, SparseVoxelGrid, delete_cells
from .render import FieldSource, RenderConfig, RenderedImage, render_image


class EditError(ValueError):
    pass


class EditScriptError(EditError):
    pass


def select_voxels(grid: SparseVoxelGrid, region: Aabb) -> np.ndarray:
    """Ids of voxels whose centers lie in ``region`` (boundary inclusive)."""
    if grid.num_cells == 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(region.contains(grid.centers()))


def delete_voxels(grid: SparseVoxelGrid, table: EmbeddingTable, cells) -> tuple[SparseVoxelGrid, EmbeddingTable]:
    try:
        return delete_cells(grid, table, cells)
    except GridError as e:
        raise EditError(str(e)) from e


def _check_rigid(R: np.ndarray):
    if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or not np.linalg.det(R) > 0:
        raise EditError("rotation must be a proper orthonormal 3x3 matrix")


@dataclass
class FieldInstance:
    """A trained field placed in the world: world = rotation @ local + translation."""

    grid: SparseVoxelGrid
    table: EmbeddingTable
    net: FieldNetwork
    c_bg: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scene_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rigid(self.rotation)

    def source(self) -> FieldSource:
        return FieldSource(self.grid, self.table, self.net, self.rotation, self.translation)

    def world_centers(self) -> np.ndarray:
        return self.grid.centers() @ self.rotation.T + self.translation


def compose_transform(rotation, translation, edit_rotation, edit_translation, pivot=None):
    """Rigid map ``x -> E(x)`` applied after ``x -> R x + t``; rotation about ``pivot``."""
    p = np.zeros(3) if pivot is None else np.asarray(pivot, dtype=np.float64)
    Re = np.asarray(edit_rotation, dtype=np.float64)
    R = Re @ np.asarray(rotation, dtype=np.float64)
    t = Re @ (np.asarray(translation, dtype=np.float64) - p) + p + np.asarray(edit_translation, dtype=np.float64)
    return R, t


def clone_voxels(instance: FieldInstance, cells, rotation=None, translation=(0.0, 0.0, 0.0),
                 pivot=None) -> FieldInstance:
    """New instance holding ``cells`` of ``instance`` (same values, same network), moved rigidly."""
    cells = np.asarray(cells, dtype=np.int64).ravel()
    if np.any((cells < 0) | (cells >= instance.grid.num_cells)):
        raise EditError("unknown voxel id in clone set")
    keep = np.zeros(instance.grid.num_cells, bool)
    keep[cells] = True
    sub, rows = instance.grid.subset(keep)
    R_e = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    _check_rigid(R_e)
    R, t = compose_transform(instance.rotation, instance.translation, R_e, translation, pivot)
    return FieldInstance(sub, EmbeddingTable(instance.table.data[rows]), instance.net, instance.c_bg.copy(), R, t,
                         instance.scene_id)


@dataclass
class CompositeScene:
    instances: list
    background: Optional[np.ndarray] = None  # default: first instance's c_bg

    def __post_init__(self):
        if not self.instances:
            raise EditError("a composite scene needs at least one instance")

    @property
    def c_bg(self) -> np.ndarray:
        bg = self.instances[0].c_bg if self.background is None else self.background
        return np.clip(np.asarray(bg, dtype=np.float64), 0.0, 1.0)

    def sources(self) -> list[FieldSource]:
        return [inst.source() for inst in self.instances]


def render_composite(scene: CompositeScene, camera: Camera, cfg: RenderConfig, workers: int = 1) -> RenderedImage:
    """Hits of all instances merged by depth and accumulated in one pass."""
    return render_image(camera, cfg=cfg, c_bg=scene.c_bg, sources=scene.sources(), workers=workers)


# --------------------------------------------------------------------------- models <-> instances


def model_instances(model: Model) -> list[FieldInstance]:
    base = FieldInstance(model.grid, model.table, model.net, np.asarray(model.c_bg, float))
    if model.instances is None:
        return [base]
    return [clone_voxels(base, inst.cells, inst.rotation, inst.translation) for inst in model.instances]


def composite_from_models(models: Sequence[Model], transforms: Optional[Sequence] = None,
                          background=None) -> CompositeScene:
    """Every instance of every model, each model moved by its (rotation, translation)."""
    out = []
    for i, m in enumerate(models):
        R, t = (np.eye(3), np.zeros(3)) if transforms is None else transforms[i]
        for inst in model_instances(m):
            Rc, tc = compose_transform(inst.rotation, inst.translation, R, t)
            out.append(FieldInstance(inst.grid, inst.table, inst.net, inst.c_bg, Rc, tc, scene_id=i))
    return CompositeScene(out, None if background is None else np.asarray(background, float))


# --------------------------------------------------------------------------- edit scripts


@dataclass
class EditOp:
    line: int
    op: str
    args: dict


_FIELDS = {
    "select": {"region", "instance"},
    "delete": set(),
    "clone": {"translate", "rotate_deg", "pivot"},
    "transform": {"translate", "rotate_deg", "pivot"},
}


def _vec3(value, line: int, name: str) -> np.ndarray:
    if not (isinstance(value, list) and len(value) == 3 and all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                                 for v in value)):
        raise EditScriptError(f"line {line}: '{name}' must be a list of 3 numbers")
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise EditScriptError(f"line {line}: '{name}' must be finite")
    return arr


def parse_edit_script(text: str) -> list[EditOp]:
    ops = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise EditScriptError(f"line {n}: invalid JSON ({e.msg})") from None
        if not isinstance(obj, dict) or "op" not in obj:
            raise EditScriptError(f"line {n}: expected an object with an 'op' field")
        op = obj.pop("op")
        if op not in _FIELDS:
            raise EditScriptError(f"line {n}: unknown op {op!r}; expected one of {sorted(_FIELDS)}")
        extra = set(obj) - _FIELDS[op]
        if extra:
            raise EditScriptError(f"line {n}: unexpected field(s) {sorted(extra)} for op '{op}'")
        args = {}
        if op == "select":
            if "region" in obj:
                reg = obj["region"]
                if not isinstance(reg, dict) or set(reg) != {"min", "max"}:
                    raise EditScriptError(f"line {n}: 'region' needs exactly 'min' and 'max'")
                lo, hi = _vec3(reg["min"], n, "region.min"), _vec3(reg["max"], n, "region.max")
                if np.any(hi < lo):
                    raise EditScriptError(f"line {n}: region max below min")
                args["region"] = Aabb(lo, hi)
            inst = obj.get("instance", 0)
            if not isinstance(inst, int) or isinstance(inst, bool) or inst < 0:
                raise EditScriptError(f"line {n}: 'instance' must be a nonnegative integer")
            args["instance"] = inst
        elif op in ("clone", "transform"):
            args["translate"] = _vec3(obj.get("translate", [0, 0, 0]), n, "translate")
            args["rotation"] = rotation_matrix(_vec3(obj.get("rotate_deg", [0, 0, 0]), n, "rotate_deg"))
            args["pivot"] = _vec3(obj["pivot"], n, "pivot") if "pivot" in obj else None
        ops.append(EditOp(n, op, args))
    return ops


def apply_edits(model: Model, ops: Sequence[EditOp]) -> Model:
    """Apply parsed operations; with no operations the model is returned unchanged."""
    if not ops:
        return model
    # instances index cells of the shared base grid
    insts = model.instances or [Instance(np.arange(model.grid.num_cells))]
    insts = [Instance(np.asarray(i.cells, np.int64), np.asarray(i.rotation, float), np.asarray(i.translation, float))
             for i in insts]
    base_centers = model.grid.centers()
    sel: Optional[tuple[int, np.ndarray]] = None
    for op in ops:
        if op.op == "select":
            k = op.args["instance"]
            if k >= len(insts):
                raise EditScriptError(f"line {op.line}: instance {k} does not exist ({len(insts)} present)")
            cells = insts[k].cells
            if "region" in op.args:
                world = base_centers[cells] @ insts[k].rotation.T + insts[k].translation
                cells = cells[op.args["region"].contains(world)] if len(cells) else cells
            sel = (k, cells)
            continue
        if sel is None:
            raise EditScriptError(f"line {op.line}: '{op.op}' needs a preceding 'select'")
        k, cells = sel
        if op.op == "delete":
            insts[k].cells = np.setdiff1d(insts[k].cells, cells)
            sel = (k, np.zeros(0, np.int64))
        elif op.op == "clone":
            R, t = compose_transform(insts[k].rotation, insts[k].translation, op.args["rotation"],
                                     op.args["translate"], op.args["pivot"])
            insts.append(Instance(cells.copy(), R, t))
            sel = (len(insts) - 1, cells.copy())
        elif op.op == "transform":
            R, t = compose_transform(insts[k].rotation, insts[k].translation, op.args["rotation"],
                                     op.args["translate"], op.args["pivot"])
            if len(cells) == len(insts[k].cells):
                insts[k].rotation, insts[k].translation = R, t
            else:
                insts[k].cells = np.setdiff1d(insts[k].cells, cells)
                insts.append(Instance(cells.copy(), R, t))
                sel = (len(insts) - 1, cells.copy())

    if len(insts) == 1 and np.array_equal(insts[0].rotation, np.eye(3)) and not np.any(insts[0].translation):
        # a single untransformed instance: compact the grid instead of storing an index list
        removed = np.setdiff1d(np.arange(model.grid.num_cells), insts[0].cells)
        grid, table = delete_voxels(model.grid, model.table, removed)
        return Model(grid, table, model.net, model.c_bg, None, dict(model.meta))
    return Model(model.grid, model.table, model.net, model.c_bg, insts, dict(model.meta))


def edit_model(model: Model, script_text: str) -> Model:
    return apply_edits(model, parse_edit_script(script_text))
