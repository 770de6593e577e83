"""Train a desk preset and print test metrics, voxel counts and prune events.

    python scripts/desk_train.py sphere_box            # 2-stage run
    python scripts/desk_train.py sphere_box --single   # same budget, no subdivision
    python scripts/desk_train.py sphere --out runs/sphere
"""
import argparse
import json
from pathlib import Path

from voxfield.desk import PRESETS, run_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("preset", choices=sorted(PRESETS))
    ap.add_argument("--single", action="store_true", help="disable subdivision")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="directory for checkpoints and the JSON-lines log")
    args = ap.parse_args()

    preset = PRESETS[args.preset].single_stage() if args.single else PRESETS[args.preset]
    extra = {}
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        extra = {"checkpoint_dir": args.out, "log_path": str(Path(args.out) / "log.jsonl")}
    run = run_desk(preset, seed=args.seed, **extra)
    fast, exact = run.evaluate(0.01), run.evaluate(0.0, with_ssim=False)
    summary = {
        "preset": args.preset, "stages": 1 if args.single else 1 + len(preset.train.subdivide_milestones),
        "train_seconds": round(run.seconds, 1), "voxels_initial": run.initial_voxels,
        "voxels_final": run.scene.grid.num_cells, "test_psnr": fast["mean_psnr"], "test_ssim": fast["mean_ssim"],
        "evals": fast["evals"], "test_psnr_eps0": exact["mean_psnr"], "evals_eps0": exact["evals"],
        "prune_events": run.result.prune_events,
    }
    print(json.dumps(summary, indent=1))


if __name__ == "__main__":
    main()
