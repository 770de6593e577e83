"""Command-line front end: ``voxfield <command> [flags]``.

Exit codes: 0 success, 2 bad flags or config, 3 file / format problems,
4 numeric failure during training (non-finite loss, every voxel pruned), 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from .dataset import (DatasetError, PosedImageSet, dataset_hash, generate_oracle_dataset, load_dataset,
                      oracle_scene, orbit_cameras, save_dataset)
from .geometry import Camera, rotation_matrix
from .imaging import RasterError, normals_to_rgb, write_png, write_raster
from .metrics import MetricError, psnr, ssim
from .render import FieldSource, RenderConfig, normal_map, render_image
from .scene_ops import EditError, composite_from_models, edit_model, model_instances
from .train import (Scene, SceneSet, TrainConfig, TrainingError, NumericError, AllVoxelsPrunedError, evaluate,
                    init_scene_set, train)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


class IOFailure(OSError):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    code_version: str
    dataset_hash: str | None = None
    outputs: dict = field(default_factory=dict)

    def write(self, directory):
        Path(directory).mkdir(parents=True, exist_ok=True)
        (Path(directory) / "manifest.json").write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise IOFailure(f"{out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _vec(text: str, name: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None
    if len(vals) != 3:
        raise ConfigError(f"{name}: expected 3 values, got {len(vals)}")
    return np.array(vals)


def _threads(args) -> int:
    return args.threads if args.threads else (os.cpu_count() or 1)


def _load_split(path) -> PosedImageSet:
    try:
        return load_dataset(path)
    except DatasetError as e:
        raise IOFailure(str(e)) from e


def _load_ckpt(path) -> ckpt.Model:
    try:
        return ckpt.load(path)
    except FileNotFoundError as e:
        raise IOFailure(f"{path}: checkpoint not found") from e
    except ckpt.CheckpointError as e:
        raise IOFailure(f"{path}: {e}") from e


def _split_dirs(data: Path) -> tuple[Path, Path | None]:
    if (data / "train").is_dir():
        return data / "train", (data / "test") if (data / "test").is_dir() else None
    return data, None


def _report_value(x: float):
    return "inf" if math.isinf(x) else x


# --------------------------------------------------------------------------- commands


def cmd_make_synthetic(args) -> int:
    if args.res < 16:
        raise ConfigError("--res must be at least 16")
    if args.train < 1 or args.test < 0:
        raise ConfigError("--train must be >= 1 and --test >= 0")
    try:
        scene = oracle_scene(args.scene)
    except DatasetError as e:
        raise ConfigError(str(e)) from None
    out = _prepare_out(args.out, args.force)
    RunManifest("make-synthetic", {"scene": args.scene, "res": args.res, "train": args.train, "test": args.test,
                                   "distance": args.distance, "fov": args.fov},
                args.seed, __version__, outputs={"train": str(out / "train"), "test": str(out / "test")}).write(out)
    tr, te = generate_oracle_dataset(scene, args.train, args.test, args.res, np.random.default_rng(args.seed),
                                     distance=args.distance, fov_deg=args.fov)
    save_dataset(tr, out / "train")
    if args.test:
        save_dataset(te, out / "test")
    print(f"wrote {len(tr)} train / {len(te)} test views to {out}")
    return EXIT_OK


TRAIN_KEYS = {f for f in TrainConfig.__dataclass_fields__}
MODEL_KEYS = {"target_voxels", "step_ratio", "feature_dim", "feature_freqs", "dir_freqs", "hidden",
              "density_layers", "color_layers", "activation"}


def _train_settings(args) -> tuple[dict, dict]:
    settings = {}
    if args.config:
        try:
            settings = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise IOFailure(f"{args.config}: config file not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from None
        if not isinstance(settings, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    flags = {"total_steps": args.steps, "rays_per_image": args.rays, "images_per_batch": args.images,
             "lr": args.lr, "lambda_reg": args.lambda_reg, "depth_loss_weight": args.depth_weight,
             "prune_period": args.prune_period, "prune_start": args.prune_start,
             "embedding_lr_scale": args.embedding_lr_scale,
             "subdivide_milestones": None if args.milestones is None else
             [int(m) for m in args.milestones.split(",") if m.strip()],
             "target_voxels": args.voxels, "hidden": args.hidden, "feature_dim": args.feature_dim,
             "activation": args.activation}
    settings.update({k: v for k, v in flags.items() if v is not None})
    if args.no_prune:
        settings["prune"] = False
    unknown = set(settings) - TRAIN_KEYS - MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model = {k: settings.pop(k) for k in list(settings) if k in MODEL_KEYS}
    return settings, model


def cmd_train(args) -> int:
    settings, model_kw = _train_settings(args)
    data = Path(args.data)
    if not data.is_dir():
        raise IOFailure(f"{data}: dataset directory not found")
    train_dir, test_dir = _split_dirs(data)
    if args.test:
        test_dir = Path(args.test)
    out = _prepare_out(args.out, args.force)
    settings.setdefault("log_path", str(out / "log.jsonl"))
    settings.setdefault("checkpoint_dir", str(out / "checkpoints"))
    settings["workers"] = _threads(args)
    try:
        cfg = TrainConfig(**settings)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    trainset = _load_split(train_dir)
    testset = _load_split(test_dir) if test_dir else None
    RunManifest("train", {"train": cfg.to_dict(), "model": model_kw}, args.seed, __version__, dataset_hash(train_dir),
                {"dir": str(out), "log": cfg.log_path, "checkpoints": cfg.checkpoint_dir,
                 "final": str(Path(cfg.checkpoint_dir) / "final.vxf")}).write(out)
    rng = np.random.default_rng(args.seed)
    try:
        ss = init_scene_set([trainset], rng, **model_kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    result = train(ss, trainset, cfg, rng, val=testset)
    metrics = {"steps": cfg.total_steps, "voxels": ss.scenes[0].grid.num_cells}
    if testset is not None:
        ev = evaluate(ss.scenes[0], ss.net, testset, cfg.early_stop_eps, _threads(args))
        metrics.update(mean_psnr=_report_value(ev["mean_psnr"]), mean_ssim=ev["mean_ssim"])
        print(f"test PSNR {ev['mean_psnr']:.3f} dB  SSIM {ev['mean_ssim']:.4f}  ({len(testset)} views)")
    metrics["prune_events"] = result.prune_events
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    print(f"final checkpoint: {Path(cfg.checkpoint_dir) / 'final.vxf'}")
    return EXIT_OK


def _cameras(args, fallback_center) -> list[Camera]:
    if args.poses:
        return _load_split(args.poses).cameras
    if args.orbit:
        center = _vec(args.center, "--center") if args.center else fallback_center
        return orbit_cameras(args.orbit, target=center, distance=args.radius, resolution=args.res,
                             elevation_deg=args.elevation, fov_deg=args.fov)
    raise ConfigError("give --poses DATASET or --orbit N")


def _render_cfg(args, model: ckpt.Model) -> RenderConfig:
    step = args.step_size or model.meta.get("step_size") or model.grid.voxel_size / 8
    z_max = args.z_max or model.meta.get("z_max", 10.0)
    return RenderConfig(step_size=float(step), early_stop_eps=args.eps, z_max=float(z_max))


def _write_outputs(out: Path, i: int, img, cam: Camera, args):
    write_png(out / f"{i:04d}.png", img.rgb)
    if args.depth:
        write_raster(out / f"{i:04d}_depth.raw", img.depth)
        write_raster(out / f"{i:04d}_alpha.raw", img.transparency)
    if args.normals:
        write_png(out / f"{i:04d}_normal.png", normals_to_rgb(normal_map(img.depth, cam, img.transparency)))
    if args.count_evals:
        write_raster(out / f"{i:04d}_evals.raw", img.evals.astype(np.float64))


def cmd_render(args) -> int:
    model = _load_ckpt(args.ckpt)
    cfg = _render_cfg(args, model)
    cams = _cameras(args, model.grid.bounds().center if model.grid.num_cells else np.zeros(3))
    out = _prepare_out(args.out, args.force)
    RunManifest("render", {"ckpt": str(args.ckpt), "eps": cfg.early_stop_eps, "step_size": cfg.step_size,
                           "views": len(cams)}, None, __version__, outputs={"dir": str(out)}).write(out)
    scene = composite_from_models([model])
    totals = []
    for i, cam in enumerate(cams):
        img = render_image(cam, cfg=cfg, c_bg=scene.c_bg, sources=scene.sources(), workers=_threads(args))
        _write_outputs(out, i, img, cam, args)
        totals.append(int(img.evals.sum()))
    if args.count_evals:
        (out / "evals.json").write_text(json.dumps({"per_view": totals, "total": sum(totals)}) + "\n")
        print(f"field evaluations: total {sum(totals)}  per view {totals}")
    print(f"rendered {len(cams)} views to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = _load_split(args.data)
    if len(gt) == 0:
        raise ConfigError("evaluation split is empty")
    if args.pred:
        from .imaging import read_png

        files = sorted(Path(args.pred).glob("[0-9][0-9][0-9][0-9].png"))
        if len(files) != len(gt):
            raise IOFailure(f"{args.pred}: {len(files)} predicted images for {len(gt)} ground-truth views")
        preds = [read_png(f) for f in files]
    else:
        if not args.ckpt:
            raise ConfigError("give --ckpt or --pred")
        model = _load_ckpt(args.ckpt)
        cfg = _render_cfg(args, model)
        scene = composite_from_models([model])
        preds = [render_image(cam, cfg=cfg, c_bg=scene.c_bg, sources=scene.sources(), workers=_threads(args)).rgb
                 for cam in gt.cameras]
    rows = []
    for i, (p, g) in enumerate(zip(preds, gt.images)):
        if p.shape != g.shape:
            raise MetricError(f"view {i}: prediction {p.shape[:2]} vs ground truth {g.shape[:2]}")
        rows.append({"index": i, "psnr": psnr(p, g), "ssim": ssim(p, g)})
    mean_p = float(np.mean([r["psnr"] for r in rows]))
    mean_s = float(np.mean([r["ssim"] for r in rows]))
    report = {"views": [{**r, "psnr": _report_value(r["psnr"])} for r in rows],
              "mean_psnr": _report_value(mean_p), "mean_ssim": mean_s}
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.report:
        Path(args.report).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_edit(args) -> int:
    model = _load_ckpt(args.ckpt)
    try:
        script = Path(args.script).read_text()
    except FileNotFoundError:
        raise IOFailure(f"{args.script}: edit script not found") from None
    edited = edit_model(model, script)
    if Path(args.out).exists() and not args.force:
        raise IOFailure(f"{args.out} exists (use --force to overwrite)")
    if edited is model:
        # nothing to apply: copy the input bytes through unchanged
        Path(args.out).write_bytes(Path(args.ckpt).read_bytes())
    else:
        ckpt.save(edited, args.out)
    print(f"wrote {args.out} ({len(model_instances(edited))} instance(s))")
    return EXIT_OK


def cmd_compose(args) -> int:
    models = [_load_ckpt(p) for p in args.ckpt]
    n = len(models)
    translations = [_vec(t, "--translate") for t in (args.translate or [])]
    rotations = [rotation_matrix(_vec(r, "--rotate")) for r in (args.rotate or [])]
    if len(translations) not in (0, n) or len(rotations) not in (0, n):
        raise ConfigError("give --translate/--rotate once per --ckpt (or not at all)")
    transforms = [(rotations[i] if rotations else np.eye(3), translations[i] if translations else np.zeros(3))
                  for i in range(n)]
    bg = _vec(args.background, "--background") if args.background else None
    scene = composite_from_models(models, transforms, bg)
    cfg = _render_cfg(args, models[0])
    centers = [inst.world_centers() for inst in scene.instances if inst.grid.num_cells]
    center = np.concatenate(centers).mean(axis=0) if centers else np.zeros(3)
    cams = _cameras(args, center)
    out = _prepare_out(args.out, args.force)
    RunManifest("compose", {"ckpt": list(map(str, args.ckpt)), "translate": args.translate, "rotate": args.rotate,
                            "eps": cfg.early_stop_eps}, None, __version__, outputs={"dir": str(out)}).write(out)
    for i, cam in enumerate(cams):
        img = render_image(cam, cfg=cfg, c_bg=scene.c_bg, sources=scene.sources(), workers=_threads(args))
        _write_outputs(out, i, img, cam, args)
    print(f"rendered {len(cams)} composite views of {len(scene.instances)} instances to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def _add_view_flags(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--poses", help="dataset directory whose cameras to render")
    p.add_argument("--orbit", type=int, help="render N views on a circular orbit")
    p.add_argument("--radius", type=float, default=4.0)
    p.add_argument("--elevation", type=float, default=30.0)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--fov", type=float, default=40.0)
    p.add_argument("--center", help="orbit target x,y,z (default: voxel bounds center)")
    p.add_argument("--eps", type=float, default=0.01, help="early termination threshold on transparency")
    p.add_argument("--step-size", type=float, help="marching step (default: the checkpoint's)")
    p.add_argument("--z-max", type=float, help="far depth for the background term")
    p.add_argument("--count-evals", action="store_true", help="write per-pixel field evaluation counts")
    p.add_argument("--normals", action="store_true", help="write normal maps")
    p.add_argument("--depth", action="store_true", help="write depth and transparency rasters")
    p.add_argument("--force", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="voxfield", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--threads", type=int, default=0, help="worker threads (default: all cores)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="ray trace an oracle scene into a posed dataset")
    p.add_argument("--scene", default="sphere_box")
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--train", type=int, default=30)
    p.add_argument("--test", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distance", type=float, default=4.0)
    p.add_argument("--fov", type=float, default=40.0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="optimize a voxel field on a dataset")
    p.add_argument("--data", required=True, help="dataset dir, or a dir holding train/ and test/")
    p.add_argument("--test", help="held-out dataset dir (default: DATA/test)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--config", help="JSON file of training/model settings (flags win)")
    p.add_argument("--steps", type=int)
    p.add_argument("--rays", type=int, help="rays per image")
    p.add_argument("--images", type=int, help="images per batch")
    p.add_argument("--lr", type=float)
    p.add_argument("--embedding-lr-scale", type=float)
    p.add_argument("--lambda", dest="lambda_reg", type=float)
    p.add_argument("--depth-weight", type=float)
    p.add_argument("--milestones", help="comma-separated subdivision steps ('' for none)")
    p.add_argument("--prune-period", type=int)
    p.add_argument("--prune-start", type=int)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--voxels", type=int, help="initial voxel count target")
    p.add_argument("--hidden", type=int)
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--activation", choices=["relu", "softplus"], help="hidden-layer activation")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_view_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM report against a dataset")
    p.add_argument("--data", required=True, help="ground-truth dataset dir")
    p.add_argument("--ckpt", help="checkpoint to render")
    p.add_argument("--pred", help="directory of predicted NNNN.png images instead of a checkpoint")
    p.add_argument("--report", help="also write the report here")
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--step-size", type=float)
    p.add_argument("--z-max", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edit", help="apply an edit script to a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("compose", help="render several checkpoints as one scene")
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--translate", action="append", help="x,y,z per --ckpt")
    p.add_argument("--rotate", action="append", help="rx,ry,rz degrees per --ckpt")
    p.add_argument("--background", help="r,g,b override (default: first checkpoint's)")
    _add_view_flags(p)
    p.set_defaults(func=cmd_compose)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, EditError, MetricError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IOFailure, DatasetError, RasterError, ckpt.CheckpointError, FileNotFoundError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, AllVoxelsPrunedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
