"""Field training loop and image metrics."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .field import FieldConfig, RadianceField, grid_centroids
from .optim import Adam, exp_decay
from .renderer import (
    DEFAULT_BACKGROUND,
    all_pixels,
    generate_rays,
    ray_box,
    render_backward,
    render_image,
    render_rays,
    stratified_depths,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step, snapshot):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    iterations: int = 6000
    rays_per_step: int = 1024
    samples_per_ray: int = 48
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 1000
    partition: tuple = (2, 2)
    precision: str = "float32"

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if not self.lr_end < self.lr_start:
            raise ValueError("lr_end must be below lr_start")


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def format_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def field_config_for_bounds(bounds, **overrides) -> FieldConfig:
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    center = tuple(float(v) for v in 0.5 * (lo + hi))
    scale = float(0.5 * np.max(hi - lo))
    return FieldConfig(center=center, scale=scale, **overrides)


class RayPool:
    """Every pixel ray of the training images, with its box interval."""

    def __init__(self, dataset, indices, bounds):
        K = dataset.intrinsics
        px = all_pixels(K)
        origins, dirs, near, far, colors, img = [], [], [], [], [], []
        for i in indices:
            o, d = generate_rays(dataset.frames[i].pose, K, px)
            n, f, _ = ray_box(o, d, *bounds)
            origins.append(o)
            dirs.append(d)
            near.append(n)
            far.append(f)
            colors.append(dataset.images[i][px[:, 1], px[:, 0]])
            img.append(np.full(len(px), dataset.frames[i].tint))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.near = np.concatenate(near)
        self.far = np.concatenate(far)
        self.colors = np.concatenate(colors)
        self.image_index = np.concatenate(img)

    def __len__(self):
        return len(self.origins)


def initial_loss(pool, sel, depths, background=DEFAULT_BACKGROUND):
    """Closed-form mean squared error of the zero-initialised field.

    That field is grey everywhere with density softplus(0) = ln 2, so each
    ray's residual transmittance is ``exp(-ln2 * (far - s_1))``.
    """
    trans = np.exp(-math.log(2.0) * (pool.far[sel] - depths[:, 0]))
    rgb = 0.5 * (1 - trans)[:, None] + trans[:, None] * np.asarray(background)
    return float(((rgb - pool.colors[sel]) ** 2).mean())


def train_field(dataset, bounds, cfg: TrainConfig, field_cfg: FieldConfig | None = None, out_dir=None,
                rng: np.random.Generator | None = None, val_index: int | None = None, progress=None):
    """Fit a radiance field to the training split.

    Returns ``(field, log_rows)``; rows are ``(step, loss, lr, psnr_val)`` with
    ``psnr_val`` None on steps without evaluation.
    """
    train_idx = dataset.split("train")
    if not train_idx:
        raise ValueError("dataset has an empty train split")
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    field_cfg = field_cfg or field_config_for_bounds(bounds)
    centroids = grid_centroids(bounds[0], bounds[1], *cfg.partition)
    n_images = max(f.tint for f in dataset.frames) + 1
    field = RadianceField.create(field_cfg, n_images, centroids, rng, dtype)
    field.meta["seed"] = cfg.seed
    pool = RayPool(dataset, train_idx, bounds)
    params = [p for cell in field.cells for p in cell.values()] + [field.appearance]
    names = [(c, k) for c in range(len(field.cells)) for k in field.cells[c]]
    opt = Adam(params)
    rows = []
    out_dir = Path(out_dir) if out_dir else None
    if val_index is None:
        test = dataset.split("test")
        val_index = test[0] if test else None
    for step in range(cfg.iterations):
        lr = exp_decay(cfg.lr_start, cfg.lr_end, step, cfg.iterations)
        sel = rng.integers(0, len(pool), size=cfg.rays_per_step)
        depths = stratified_depths(pool.near[sel], pool.far[sel], cfg.samples_per_ray, rng)
        emb = field.appearance[pool.image_index[sel]]
        rgb, cache = render_rays(field, pool.origins[sel], pool.dirs[sel], depths, pool.far[sel], emb, keep=True)
        resid = rgb - pool.colors[sel].astype(dtype)
        loss = float((resid.astype(np.float64) ** 2).mean())
        if not math.isfinite(loss):
            raise TrainingDiverged(step, dict(lr=lr, params=field.flat_params()))
        g_rgb = (2.0 / resid.size) * resid
        grads = render_backward(field, cache, g_rgb, want_params=True, want_inputs=False)
        g_app = np.zeros_like(field.appearance)
        n, N = depths.shape
        np.add.at(g_app, pool.image_index[sel], grads.embedding.reshape(n, N, -1).sum(1))
        flat_grads = [grads.cells[c][k] for c, k in names] + [g_app]
        opt.step(flat_grads, lr)
        psnr_val = None
        last = step == cfg.iterations - 1
        if val_index is not None and cfg.eval_every and ((step + 1) % cfg.eval_every == 0 or last):
            frame = dataset.frames[val_index]
            img = render_image(field, frame.pose, dataset.intrinsics, bounds, cfg.samples_per_ray,
                               embedding=field.mean_embedding())
            psnr_val = psnr(img, dataset.images[val_index])
            log.info("step %d loss %.5f psnr %.2f", step, loss, psnr_val)
            if progress:
                progress(step, loss, psnr_val)
        rows.append((step, loss, lr, psnr_val))
        if out_dir and cfg.checkpoint_every and ((step + 1) % cfg.checkpoint_every == 0 or last):
            field.save(out_dir / "field")
    # unseen images get the training mean so mean_embedding() is unbiased
    seen = np.unique(pool.image_index)
    unseen = np.setdiff1d(np.arange(n_images), seen)
    field.appearance[unseen] = field.appearance[seen].mean(0)
    if out_dir:
        field.save(out_dir / "field")
        write_training_log(out_dir / "train_log.csv", rows, header=f"seed={cfg.seed}")
    return field, rows


def write_training_log(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "psnr_val"])
        for step, loss, lr, p in rows:
            w.writerow([step, repr(loss), repr(lr), "" if p is None else format_psnr(p)])
