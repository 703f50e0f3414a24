"""Command-line entry point: ``latitude <command> [--seed N] [--config F] [--out DIR] [--a.b=value ...]``.

Commands share one output directory.  Each reads its prerequisites from there
unless an explicit path is given, and writes its configuration next to its
results before doing any work.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

COMMANDS = ("scene-gen", "train-field", "train-regressor", "localize", "ablate", "sweep", "render")


class MissingPrerequisite(Exception):
    def __init__(self, path, what):
        super().__init__(f"missing {what}: {path}")
        self.path = str(path)


def _limit_threads():
    n = os.environ.get("LATITUDE_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n
    return int(n) if n else None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latitude", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides the config file)")
    p.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    p.add_argument("--scene-file", type=Path, default=None)
    p.add_argument("--dataset", type=Path, default=None)
    p.add_argument("--field", type=Path, default=None)
    p.add_argument("--regressor", type=Path, default=None)
    p.add_argument("--index", type=int, default=None, help="test-split position (localize, render)")
    p.add_argument("--pose", default=None, help="'tx ty tz qw qx qy qz' (render)")
    p.add_argument("--raw", action="store_true", help="also write the float render (render)")
    return p


def parse_args(argv):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = []
    for item in extra:
        if item.startswith("--") and "=" in item:
            overrides.append(item[2:])
        else:
            parser.error(f"unrecognised argument {item!r}")
    return args, overrides


# --------------------------------------------------------------- helpers


def _paths(args):
    out = args.out
    return dict(
        scene=args.scene_file or out / "scene.json",
        dataset=args.dataset or out / "dataset",
        field=args.field or out / "field",
        regressor=args.regressor or out / "regressor",
    )


def _require(path, what):
    path = Path(path)
    probe = path / "manifest.txt" if what.endswith("checkpoint") else path
    if what == "dataset":
        probe = path / "manifest.json"
    if not probe.exists():
        raise MissingPrerequisite(path, what)
    return path


def _load_dataset(paths):
    from .scene import read_dataset

    return read_dataset(_require(paths["dataset"], "dataset"))


def _load_scene(paths):
    from .scene import load_scene

    return load_scene(_require(paths["scene"], "scene description"))


def _load_field(paths):
    from .field import RadianceField

    return RadianceField.load(_require(paths["field"], "field checkpoint"))


def _load_regressor(paths):
    from .regressor import Regressor

    return Regressor.load(_require(paths["regressor"], "regressor checkpoint"))


def _intrinsics(cfg):
    from .geometry import CameraIntrinsics

    s = cfg.scene
    return CameraIntrinsics.from_fov(s.width, s.height, s.fov_deg)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _test_index(ds, index):
    test = ds.split("test")
    if index is None:
        return None
    if not 0 <= index < len(test):
        raise ValueError(f"--index must be in [0, {len(test)})")
    return test[index]


# -------------------------------------------------------------- commands


def cmd_scene_gen(cfg, args, paths):
    from .scene import flight_poses, make_scene, render_dataset, save_scene, write_dataset

    s = cfg.scene
    n = s.n_train + s.n_test
    scene = make_scene(s.objects, n, cfg.stream("scene"))
    train, test = flight_poses(scene, s.n_train, s.n_test, cfg.stream("trajectory"), s.trajectory)
    splits = ["train"] * len(train) + ["test"] * len(test)
    ds = render_dataset(scene, train + test, _intrinsics(cfg), step_size=s.step_size, seed=cfg.seed, splits=splits)
    save_scene(paths["scene"], scene, seed=cfg.seed)
    write_dataset(paths["dataset"], ds)
    print(f"scene with {len(scene.primitives)} primitives, {len(train)} train / {len(test)} test images")
    return 0


def field_quality(field_, ds, scene, step_size, n_samples):
    """Held-out PSNR of mean-embedding renders against untinted oracle renders."""
    from .renderer import render_image
    from .scene import oracle_render
    from .trainer import psnr

    rows = []
    for i in ds.split("test"):
        pose = ds.frames[i].pose
        img = render_image(field_, pose, ds.intrinsics, scene.bounds, n_samples)
        ref = oracle_render(pose, ds.intrinsics, scene, step_size)
        rows.append((i, psnr(img, ref)))
    return rows


def cmd_train_field(cfg, args, paths):
    from dataclasses import replace

    from .trainer import field_config_for_bounds, format_psnr, train_field

    ds = _load_dataset(paths)
    scene = _load_scene(paths)
    f = cfg.field
    fcfg = field_config_for_bounds(scene.bounds, depth=f.depth, width=f.width, pos_bands=f.pos_bands,
                                   dir_bands=f.dir_bands, app_dim=f.app_dim)
    tcfg = replace(cfg.train, seed=cfg.seed)
    field_, rows = train_field(ds, scene.bounds, tcfg, fcfg, out_dir=args.out, rng=cfg.stream("train-field"))
    quality = field_quality(field_, ds, scene, cfg.scene.step_size, tcfg.samples_per_ray)
    values = [p for _, p in quality]
    _write_json(args.out / "field_eval.json", dict(
        seed=cfg.seed, psnr={str(i): format_psnr(p) for i, p in quality},
        mean_psnr=sum(values) / len(values), min_psnr=min(values), final_loss=rows[-1][1]))
    print(f"held-out PSNR mean {sum(values) / len(values):.2f} dB, min {min(values):.2f} dB")
    return 0


def cmd_train_regressor(cfg, args, paths):
    from dataclasses import replace

    import numpy as np
    import torch

    from .experiments import ErrorStats
    from .geometry import pose_errors
    from .regressor import train_regressor

    threads = _limit_threads()
    if threads:
        torch.set_num_threads(threads)
    ds = _load_dataset(paths)
    scene = _load_scene(paths)
    rcfg = replace(cfg.regressor, seed=cfg.seed)
    field_ = _load_field(paths) if rcfg.augment is not None and rcfg.beta > 0 else None
    reg, log = train_regressor(ds, field_, scene.bounds, rcfg, rng=cfg.stream("regressor"))
    reg.save(paths["regressor"])
    with open(args.out / "regressor_log.csv", "w") as fh:
        fh.write(f"# seed={cfg.seed}\nepoch,loss_real,loss_syn\n")
        for e, a, b in log.epoch_losses:
            fh.write(f"{e},{a!r},{b!r}\n")
    test = ds.split("test")
    preds = reg.predict_poses(np.stack([ds.images[i] for i in test]))
    errs = np.array([pose_errors(p, ds.frames[i].pose) for p, i in zip(preds, test)])
    stats = ErrorStats.of(errs[:, 0])
    _write_json(args.out / "regressor_eval.json", dict(
        seed=cfg.seed, translation=stats.__dict__, rotation_mean=float(errs[:, 1].mean()),
        synthetic_images=log.renders))
    print(f"regressor test error: translation mean {stats.mean:.4f}, rotation mean {errs[:, 1].mean():.3f} deg")
    return 0


def cmd_localize(cfg, args, paths):
    from dataclasses import replace

    from .experiments import trajectory_eval
    from .geometry import pose_errors, write_poses
    from .localizer import optimize_pose

    ds = _load_dataset(paths)
    scene = _load_scene(paths)
    field_ = _load_field(paths)
    reg = _load_regressor(paths)
    lcfg = replace(cfg.localizer, seed=cfg.seed)
    frame = _test_index(ds, args.index)
    if frame is None:
        report = trajectory_eval(field_, reg, ds, scene.bounds, lcfg, seed=cfg.seed)
        report.write(args.out / "trajectory")
        for r in report.rows:
            t = r.translation
            print(f"{r.method:10s} max {t.max:.4f} mean {t.mean:.4f} min {t.min:.4f} rmse {t.rmse:.4f} "
                  f"std {t.std:.4f} rot {r.rotation_mean:.3f} failures {r.failures}")
        return 0
    truth = ds.frames[frame].pose
    prior = reg.predict_pose(ds.images[frame])
    rng = cfg.stream(f"localize-{frame}")
    pose, trace = optimize_pose(ds.images[frame], prior, field_, ds.intrinsics, scene.bounds, lcfg, truth=truth, rng=rng)
    traces = args.out / "traces"
    traces.mkdir(parents=True, exist_ok=True)
    trace.to_csv(traces / f"frame_{frame:04d}.csv", header=f"seed={cfg.seed}")
    write_poses(traces / f"frame_{frame:04d}.poses.txt", [prior, pose], header=f"seed={cfg.seed}")
    t0, r0 = pose_errors(prior, truth)
    t1, r1 = pose_errors(pose, truth)
    print(f"frame {frame}: prior error {t0:.4f} / {r0:.3f} deg, refined error {t1:.4f} / {r1:.3f} deg, "
          f"iterations {len(trace.records)}, {trace.reason}")
    return 0


def _grid_settings(cfg):
    from .experiments import GridSettings

    e = cfg.experiments
    return GridSettings(e.positions, e.seeds_per_position, tuple(e.levels_t), tuple(e.levels_r))


def cmd_ablate(cfg, args, paths):
    from .experiments import perturbation_grid, write_grid

    ds = _load_dataset(paths)
    scene = _load_scene(paths)
    field_ = _load_field(paths)

    def show(r):
        print(f"level {r.level_t:g}/{r.level_r:g} {r.variant:14s} t {r.mean_t:.4f} r {r.mean_r:.3f} "
              f"success {r.success:.2f}", flush=True)

    rows = perturbation_grid(field_, ds, scene.bounds, cfg.localizer, _grid_settings(cfg), seed=cfg.seed,
                             levels=cfg.experiments.ablate_levels, progress=show)
    write_grid(args.out / "ablation", rows, cfg.seed, scene.diameter)
    return 0


def cmd_sweep(cfg, args, paths):
    from .experiments import alpha0_sweep, write_grid

    ds = _load_dataset(paths)
    scene = _load_scene(paths)
    field_ = _load_field(paths)

    def show(r):
        print(f"{r.variant:12s} t {r.mean_t:.4f} r {r.mean_r:.3f} success {r.success:.2f}", flush=True)

    rows = alpha0_sweep(field_, ds, scene.bounds, cfg.localizer, cfg.experiments.alpha0_fractions,
                        _grid_settings(cfg), cfg.experiments.sweep_level, seed=cfg.seed, progress=show)
    write_grid(args.out / "alpha0_sweep", rows, cfg.seed, scene.diameter)
    return 0


def cmd_render(cfg, args, paths):
    from .geometry import parse_pose
    from .renderer import render_image, save_png, save_raw

    field_ = _load_field(paths)
    scene = _load_scene(paths)
    if args.pose:
        pose, K = parse_pose(args.pose), _intrinsics(cfg)
    else:
        ds = _load_dataset(paths)
        frame = _test_index(ds, args.index if args.index is not None else 0)
        pose, K = ds.frames[frame].pose, ds.intrinsics
    img = render_image(field_, pose, K, scene.bounds, cfg.train.samples_per_ray)
    save_png(args.out / "render.png", img, seed=cfg.seed)
    if args.raw:
        save_raw(args.out / "render.raw", img, seed=cfg.seed)
    print(f"wrote {args.out / 'render.png'}")
    return 0


HANDLERS = {
    "scene-gen": cmd_scene_gen,
    "train-field": cmd_train_field,
    "train-regressor": cmd_train_regressor,
    "localize": cmd_localize,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "render": cmd_render,
}


def _fail(out, code, record):
    text = json.dumps(record, sort_keys=True)
    print(text, file=sys.stderr)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(text + "\n")
    except OSError:
        pass
    return code


def main(argv=None) -> int:
    _limit_threads()
    args, overrides = parse_args(sys.argv[1:] if argv is None else argv)
    from .config import ConfigError, load_config

    try:
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError, json.JSONDecodeError) as e:
        return _fail(args.out, 2, dict(error="config", command=args.command, message=str(e)))
    if args.seed is not None:
        cfg.seed = args.seed
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / f"config.{args.command}.json").write_text(cfg.to_json() + "\n")
    paths = _paths(args)
    try:
        return HANDLERS[args.command](cfg, args, paths)
    except MissingPrerequisite as e:
        return _fail(args.out, 2, dict(error="missing_prerequisite", command=args.command, path=e.path, message=str(e)))
    except FileNotFoundError as e:
        path = getattr(e, "path", None) or e.filename or ""
        return _fail(args.out, 2, dict(error="missing_prerequisite", command=args.command, path=str(path), message=str(e)))
    except Exception as e:  # noqa: BLE001 - reported as a machine-readable record
        return _fail(args.out, 1, dict(error="runtime", command=args.command, type=type(e).__name__, message=str(e),
                                       traceback=traceback.format_exc(limit=5)))


if __name__ == "__main__":
    sys.exit(main())
