import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxfield.dataset import PosedImageSet, generate_oracle_dataset, oracle_scene
from voxfield.geometry import Aabb, Camera
from voxfield.octree import SparseVoxelGrid
from voxfield.train import (AdamState, AllVoxelsPrunedError, HitMaskCache, RayBatch, Scene, TrainConfig,
                            TrainingError, adam_step, evaluate, init_scene_set, loss_and_grads, omega, omega_grad,
                            remap_rows, sample_ray_batch, train, train_multiscene)

from conftest import axis_rays, loss_gradient_check, tiny_field


def mini_scene(rng, dim=8, hidden=16, activation="softplus"):
    grid = SparseVoxelGrid(np.argwhere(np.ones((2, 2, 2))), 0.5, (-0.5, -0.5, -0.5))
    table, net = tiny_field(rng, grid, dim=dim, hidden=hidden, activation=activation)
    scene = Scene(grid, table, np.array([0.3, 0.5, 0.7]), 0.25, 4.0)
    return scene, net


def mini_batch(rng, n=6):
    o, d = axis_rays(rng, n)
    return RayBatch(o, d, rng.random((n, 3)), rng.uniform(1, 3, n), np.ones(n, bool))


# --------------------------------------------------------------------------- adam


def test_adam_zero_gradient_is_identity(rng):
    p = {"w": rng.standard_normal((3, 4))}
    before = p["w"].copy()
    state = AdamState()
    for _ in range(3):
        adam_step(p, {"w": np.zeros((3, 4))}, state, 0.1)
    assert np.array_equal(p["w"], before)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10).filter(lambda g: abs(g) > 1e-6), st.floats(1e-4, 1.0))
def test_adam_first_step_closed_form(g, lr):
    p = {"w": np.array([0.0])}
    state = AdamState()
    adam_step(p, {"w": np.array([g])}, state, lr)
    assert abs(p["w"][0] - (-lr * g / (abs(g) + state.eps))) < 1e-12


def test_adam_descends_quadratic(rng):
    target = rng.standard_normal(5)
    p = {"w": np.zeros(5)}
    state = AdamState()
    for _ in range(2000):
        adam_step(p, {"w": 2 * (p["w"] - target)}, state, 0.01)
    assert np.allclose(p["w"], target, atol=1e-3)


def test_adam_lr_scale(rng):
    p = {"a": np.zeros(2), "b": np.zeros(2)}
    adam_step(p, {"a": np.ones(2), "b": np.ones(2)}, AdamState(), 0.1, {"b": 10.0})
    assert np.allclose(p["b"], 10 * p["a"])


def test_remap_rows_carries_moments():
    state = AdamState(m={"e": np.arange(6.0).reshape(3, 2)}, v={"e": np.ones((3, 2))})
    remap_rows(state, "e", np.array([2, -1, 0, 2]))
    assert np.array_equal(state.m["e"], [[4, 5], [0, 0], [0, 1], [4, 5]])
    assert np.array_equal(state.v["e"][:, 0], [1, 0, 1, 1])


# --------------------------------------------------------------------------- loss


def test_omega_shape():
    A = np.linspace(0, 1, 101)
    assert abs(omega(0.0)) < 1e-12 and abs(omega(1.0)) < 1e-12
    assert np.allclose(omega(A), omega(1 - A))
    assert np.argmax(omega(A)) == 50 and abs(omega_grad(0.5)) < 1e-12
    h = 1e-6
    assert np.allclose(omega_grad(A[1:-1]), (omega(A[1:-1] + h) - omega(A[1:-1] - h)) / (2 * h), atol=1e-6)


def test_loss_gradients_match_finite_differences(rng):
    scene, net = mini_scene(rng)
    batch = mini_batch(rng)
    cfg = TrainConfig(lambda_reg=0.3, depth_loss_weight=0.1)
    n, fails = loss_gradient_check(scene, net, batch, cfg, max_params=12, rng=rng)
    assert n > 50 and not fails, fails[:5]


def test_relu_network_gradients_with_small_step(rng):
    # ReLU kinks make wide central differences unreliable; a small step avoids crossing them
    scene, net = mini_scene(rng, activation="relu")
    batch = mini_batch(rng)
    n, fails = loss_gradient_check(scene, net, batch, TrainConfig(lambda_reg=0.3), h=1e-5, max_params=12, rng=rng)
    assert n > 50 and not fails, fails[:5]


def test_loss_zero_on_own_render(rng):
    from voxfield.render import FieldSource, render_rays

    scene, net = mini_scene(rng)
    batch = mini_batch(rng)
    res = render_rays(batch.origins, batch.dirs, None, cfg=scene.render_config(0.0), c_bg=scene.c_bg,
                      sources=[FieldSource(scene.grid, scene.table, net)])
    batch.colors = res.color
    terms, g = loss_and_grads(batch, scene, net, TrainConfig(lambda_reg=0.0))
    assert terms.total < 1e-24
    assert all(np.abs(v).max() < 1e-12 for v in g.params.values())


# --------------------------------------------------------------------------- ray sampling


@pytest.fixture(scope="module")
def sphere_data():
    return generate_oracle_dataset(oracle_scene("sphere"), 4, 2, 16, np.random.default_rng(11))


def test_full_frustum_grid_accepts_everything(sphere_data, rng):
    tr, _ = sphere_data
    ss = init_scene_set([tr], rng, target_voxels=64, feature_dim=8, hidden=16)
    # a grid covering the whole bbox is hit by pixels that see the box only
    cache = HitMaskCache(tr)
    batch = sample_ray_batch(tr, ss.scenes[0], TrainConfig(rays_per_image=200, max_retries=30), rng, cache)
    assert batch.hit.all()


def test_sampling_concentrates_on_small_object(rng):
    tr, _ = generate_oracle_dataset(oracle_scene("sphere"), 3, 1, 32, np.random.default_rng(2))
    ss = init_scene_set([tr], rng, target_voxels=8, feature_dim=8, hidden=16)
    sc = ss.scenes[0]
    sc.grid = SparseVoxelGrid([[0, 0, 0]], 0.2, (-0.1, -0.1, -0.1))
    frac = np.array([HitMaskCache(tr).mask(sc.grid, i).mean() for i in range(len(tr))])
    assert 0 < frac.min() and frac.max() < 0.05
    # enough redraws that a ray misses every time with probability < 0.5%
    retries = int(np.ceil(np.log(0.005) / np.log1p(-frac.min())))
    cfg = TrainConfig(rays_per_image=500, images_per_batch=3, max_retries=retries)
    batch = sample_ray_batch(tr, sc, cfg, rng)
    assert batch.hit.mean() >= 0.95
    few = sample_ray_batch(tr, sc, TrainConfig(rays_per_image=500, images_per_batch=3, max_retries=1), rng)
    assert few.hit.mean() < 0.15 and not few.hit.all()


def test_sampling_deterministic(sphere_data):
    tr, _ = sphere_data
    out = []
    for _ in range(2):
        r = np.random.default_rng(9)
        ss = init_scene_set([tr], r, target_voxels=64, feature_dim=8, hidden=16)
        out.append(sample_ray_batch(tr, ss.scenes[0], TrainConfig(rays_per_image=50), r))
    assert np.array_equal(out[0].dirs, out[1].dirs) and np.array_equal(out[0].colors, out[1].colors)


# --------------------------------------------------------------------------- loop


def test_zero_steps_leaves_model_untouched(sphere_data, rng):
    tr, _ = sphere_data
    ss = init_scene_set([tr], rng, target_voxels=64, feature_dim=8, hidden=16)
    before = ss.copy()
    train(ss, tr, TrainConfig(total_steps=0), rng)
    assert np.array_equal(ss.scenes[0].table.data, before.scenes[0].table.data)
    assert all(np.array_equal(ss.net.params[k], before.net.params[k]) for k in ss.net.params)


def test_short_run_reduces_loss_and_follows_schedule(sphere_data, tmp_path):
    tr, te = sphere_data
    rng = np.random.default_rng(0)
    ss = init_scene_set([tr], rng, target_voxels=64, feature_dim=8, hidden=16)
    cfg = TrainConfig(rays_per_image=64, images_per_batch=2, total_steps=40, subdivide_milestones=(20,),
                      prune_start=30, prune_period=10, log_every=1, checkpoint_dir=str(tmp_path),
                      log_path=str(tmp_path / "log.jsonl"), embedding_lr_scale=10)
    n0, tau0 = ss.scenes[0].grid.num_cells, ss.scenes[0].step_size
    before = evaluate(ss.scenes[0], ss.net, tr, with_ssim=False)["mean_psnr"]
    res = train(ss, tr, cfg, rng, val=te)
    assert evaluate(ss.scenes[0], ss.net, tr, with_ssim=False)["mean_psnr"] > before + 1.0
    sub = [r for r in res.log if r["event"] == "subdivide"]
    assert len(sub) == 1 and sub[0]["step"] == 20
    assert ss.scenes[0].step_size == tau0 / 2
    assert [e["step"] for e in res.prune_events] == [30, 40]
    assert ss.scenes[0].grid.num_cells <= 8 * n0
    assert (tmp_path / "step000020.vxf").exists() and (tmp_path / "final.vxf").exists()
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == len(res.log)
    assert np.all((ss.scenes[0].c_bg >= 0) & (ss.scenes[0].c_bg <= 1))


def test_background_only_images_prune_everything(rng):
    cams = [Camera.look_at(eye, [0, 0, 0], focal=20.0, width=16, height=16)
            for eye in ([0, -3, 1], [3, 0, 1])]
    ds = PosedImageSet(np.ones((2, 16, 16, 3)), cams, Aabb([-1, -1, -1], [1, 1, 1]), meta={"background": [1, 1, 1]})
    ss = init_scene_set([ds], rng, target_voxels=27, feature_dim=8, hidden=16)
    cfg = TrainConfig(rays_per_image=64, images_per_batch=2, total_steps=300, subdivide_milestones=(),
                      prune_start=300, prune_period=300, lr=1e-2, embedding_lr_scale=10, lambda_reg=0.1)
    with pytest.raises(AllVoxelsPrunedError, match="removed all"):
        train(ss, ds, cfg, rng)


def test_multiscene_updates_only_active_scene(rng):
    a, _ = generate_oracle_dataset(oracle_scene("sphere"), 2, 1, 16, np.random.default_rng(1))
    b, _ = generate_oracle_dataset(oracle_scene("two_spheres"), 2, 1, 16, np.random.default_rng(2))
    ss = init_scene_set([a, b], rng, target_voxels=27, feature_dim=8, hidden=16)
    before = ss.copy()
    cfg = TrainConfig(rays_per_image=16, images_per_batch=1, total_steps=1, subdivide_milestones=(), prune=False)
    train_multiscene(ss, [a, b], cfg, rng)
    assert not np.array_equal(ss.scenes[0].table.data, before.scenes[0].table.data)
    assert np.array_equal(ss.scenes[1].table.data, before.scenes[1].table.data)
    with pytest.raises(TrainingError):
        train_multiscene(init_scene_set([a], rng, target_voxels=8, feature_dim=8, hidden=16), [a], cfg, rng)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(subdivide_milestones=(10, 5))
    with pytest.raises(ValueError):
        TrainConfig(total_steps=-1)
    assert TrainConfig(subdivide_milestones=(7,)).first_prune == 7
    assert TrainConfig(subdivide_milestones=(), prune_period=9).first_prune == 9
