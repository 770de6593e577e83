"""Desk-scale experiment presets shared by the acceptance suite and ``scripts/``.

Sized for a single CPU core: 64x64 oracle images, 30 train / 10 test views, a small
network, and 1000 optimization steps with one subdivision milestone.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import PosedImageSet, generate_oracle_dataset, oracle_scene
from .train import SceneSet, TrainConfig, TrainResult, evaluate, init_scene_set, train

DATA_SEED = 7
TRAIN_SEED = 0


@dataclass
class DeskPreset:
    scene: str = "sphere_box"
    resolution: int = 64
    n_train: int = 30
    n_test: int = 10
    target_voxels: int = 64
    step_ratio: float = 0.25
    net: dict = field(default_factory=lambda: {"feature_dim": 16, "hidden": 64, "activation": "softplus"})
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        rays_per_image=256, images_per_batch=4, total_steps=1000, subdivide_milestones=(400,),
        prune_start=200, prune_period=200, embedding_lr_scale=10.0, log_every=50))

    def single_stage(self) -> "DeskPreset":
        """Same budget without subdivision."""
        return replace(self, train=replace(self.train, subdivide_milestones=()))


PRESETS = {
    "sphere_box": DeskPreset(),
    # fine single-stage grid: pruning has room to work and never follows a split
    "sphere": DeskPreset(scene="sphere", target_voxels=4096).single_stage(),
}


@dataclass
class DeskRun:
    preset: DeskPreset
    train_set: PosedImageSet
    test_set: PosedImageSet
    scene_set: SceneSet
    result: TrainResult
    initial_voxels: int
    seconds: float

    @property
    def scene(self):
        return self.scene_set.scenes[0]

    def evaluate(self, eps: float = 0.01, with_ssim: bool = True) -> dict:
        return evaluate(self.scene, self.scene_set.net, self.test_set, eps=eps, with_ssim=with_ssim)


def desk_data(preset: DeskPreset, seed: int = DATA_SEED):
    return generate_oracle_dataset(oracle_scene(preset.scene), preset.n_train, preset.n_test, preset.resolution,
                                   np.random.default_rng(seed))


def run_desk(preset: DeskPreset, data=None, seed: int = TRAIN_SEED, **train_overrides) -> DeskRun:
    tr, te = data if data is not None else desk_data(preset)
    rng = np.random.default_rng(seed)
    ss = init_scene_set([tr], rng, target_voxels=preset.target_voxels, step_ratio=preset.step_ratio, **preset.net)
    n0 = ss.scenes[0].grid.num_cells
    cfg = replace(preset.train, **train_overrides)
    t0 = time.perf_counter()
    res = train(ss, tr, cfg, rng, val=te)
    return DeskRun(preset, tr, te, ss, res, n0, time.perf_counter() - t0)
