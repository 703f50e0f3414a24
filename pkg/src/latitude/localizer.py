"""Photometric pose refinement against a trained field.

Two update rules are provided:

* ``tangent``: a single twist ``xi`` about the prior is the optimisation
  variable; the pose is ``exp(xi) @ prior`` and Adam sees the exact gradient
  with respect to ``xi``.
* ``se3-recursive``: each step takes the gradient of a fresh increment at the
  current pose and applies it immediately, ``T <- exp(step) @ T``.  Adam's
  moments carry over between the re-anchored charts.

Both use the truncated dynamic low-pass filter on the position encoding when
enabled.

The world-frame twist is ``xi = A @ D @ z`` where ``z`` is what Adam sees.
``A`` moves the rotation centre from the world origin to a camera centre (the
prior's in tangent mode, the current one in recursive mode) and ``D`` divides
the rotation part by ``rotation_scale``.  Without this a unit rotation step
swings the camera around the far-away world origin and per-coordinate Adam
steps are badly matched between translation and rotation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import band_weights, schedule_alpha
from .geometry import Pose, apply_increment, pose_errors, se3_left_jacobian, skew
from .optim import exp_decay
from .renderer import (
    DEFAULT_BACKGROUND,
    RayBatch,
    all_pixels,
    generate_rays,
    loss_and_local_grad,
    observed_colors,
    ray_box,
    stratified_depths,
)

TANGENT = "tangent"
RECURSIVE = "se3-recursive"


class LocalizationFailed(RuntimeError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


@dataclass
class TDLFConfig:
    enabled: bool = True
    alpha0: float = 0.4  # fraction of the band count
    update_interval: int = 50
    smooth: bool = False


@dataclass
class LocalizerConfig:
    iterations: int = 500
    rays_per_step: int = 192
    samples_per_ray: int = 32
    lr_start: float = 5e-2
    lr_end: float = 5e-3
    rotation_scale: float = 10.0  # scene units per radian in the optimiser's coordinates
    mode: str = TANGENT
    tdlf: TDLFConfig = field(default_factory=TDLFConfig)
    seed: int = 0
    early_stop_window: int = 0  # 0 disables
    early_stop_tol: float = 1e-4
    divergence_factor: float = 0.5  # drift limit in scene diameters
    min_visible_fraction: float = 0.05

    def __post_init__(self):
        if isinstance(self.tdlf, dict):
            self.tdlf = TDLFConfig(**self.tdlf)
        if self.mode not in (TANGENT, RECURSIVE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.iterations < self.tdlf.update_interval:
            raise ValueError("iterations must be at least the filter update interval")


@dataclass
class TraceRecord:
    step: int
    alpha: float
    loss: float
    t_err: float
    r_err: float


@dataclass
class OptimizationTrace:
    records: list = field(default_factory=list)
    final_pose: Pose | None = None
    converged: bool = False
    reason: str = ""

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["step", "alpha", "loss", "t_err", "r_err"])
            for r in self.records:
                w.writerow([r.step, repr(r.alpha), repr(r.loss), repr(r.t_err), repr(r.r_err)])


def alpha0_bands(cfg: LocalizerConfig, num_bands: int) -> float:
    return cfg.tdlf.alpha0 * num_bands


def filter_weights(step: int, cfg: LocalizerConfig, num_bands: int):
    if not cfg.tdlf.enabled:
        return 1.0, np.ones(num_bands)
    alpha = schedule_alpha(step, cfg.iterations, cfg.tdlf.update_interval)
    return alpha, band_weights(alpha, alpha0_bands(cfg, num_bands), num_bands, smooth=cfg.tdlf.smooth)


def visible_fraction(pose: Pose, K, bounds, n: int = 256) -> float:
    px = all_pixels(K)
    px = px[np.linspace(0, len(px) - 1, min(n, len(px))).astype(int)]
    o, d = generate_rays(pose, K, px)
    return float(ray_box(o, d, *bounds)[2].mean())


class _AdamState:
    def __init__(self, b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = np.zeros(6)
        self.v = np.zeros(6)
        self.t = 0

    def direction(self, g, lr):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return -lr * mh / (np.sqrt(vh) + self.eps)


def chart_matrix(center, rotation_scale: float) -> np.ndarray:
    """``M`` with world twist ``xi = M @ z``: rotation about ``center``, rotation part scaled."""
    A = np.eye(6)
    A[:3, 3:] = skew(np.asarray(center, dtype=np.float64))
    D = np.diag([1.0, 1.0, 1.0] + [1.0 / rotation_scale] * 3)
    return A @ D


def optimize_pose(observed, prior: Pose, field, K, bounds, cfg: LocalizerConfig, truth: Pose | None = None,
                  rng: np.random.Generator | None = None, embedding=None, background=DEFAULT_BACKGROUND,
                  snapshot=None):
    """Refine ``prior`` so renders of ``field`` match ``observed``.

    Returns ``(pose, trace)``.  When a guard trips the prior is returned with
    ``trace.converged = False``.  ``snapshot(step, pose)`` is called every step
    when given.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if embedding is None:
        embedding = field.mean_embedding()
    L = field.cfg.pos_bands
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    diameter = float(np.linalg.norm(hi - lo))
    trace = OptimizationTrace()
    pixels_all = all_pixels(K)

    if not np.all(np.isfinite(prior.to_vector())):
        raise ValueError("prior pose is not finite")
    if visible_fraction(prior, K, bounds) < cfg.min_visible_fraction:
        trace.final_pose, trace.converged, trace.reason = prior, False, "prior does not view the scene"
        return prior, trace

    z = np.zeros(6)
    M = chart_matrix(prior.translation, cfg.rotation_scale)
    pose = prior
    adam = _AdamState()
    window = []
    for step in range(cfg.iterations):
        alpha, omega = filter_weights(step, cfg, L)
        lr = exp_decay(cfg.lr_start, cfg.lr_end, step, cfg.iterations)
        sel = rng.choice(len(pixels_all), size=min(cfg.rays_per_step, len(pixels_all)), replace=False)
        px = pixels_all[sel]
        o, d = generate_rays(pose, K, px)
        near, far, _ = ray_box(o, d, lo, hi)
        batch = RayBatch(px, stratified_depths(near, far, cfg.samples_per_ray, rng), far)
        obs = observed_colors(observed, px)
        loss, g_local, _ = loss_and_local_grad(field, pose, K, batch, obs, embedding, omega, background)
        if cfg.mode == TANGENT:
            grad = M.T @ se3_left_jacobian(M @ z).T @ g_local
        else:
            M = chart_matrix(pose.translation, cfg.rotation_scale)
            grad = M.T @ g_local
        if not math.isfinite(loss):
            trace.final_pose, trace.converged, trace.reason = prior, False, f"non-finite loss at step {step}"
            raise LocalizationFailed(trace.reason, trace)
        t_err, r_err = pose_errors(pose, truth) if truth is not None else (math.nan, math.nan)
        trace.records.append(TraceRecord(step, alpha, loss, t_err, r_err))
        if snapshot:
            snapshot(step, pose)

        step_vec = adam.direction(grad, lr)
        if cfg.mode == TANGENT:
            z = z + step_vec
            pose = apply_increment(M @ z, prior)
        else:
            pose = apply_increment(M @ step_vec, pose)

        if np.linalg.norm(pose.translation - prior.translation) > cfg.divergence_factor * diameter:
            trace.final_pose, trace.converged, trace.reason = prior, False, f"diverged at step {step}"
            return prior, trace

        if cfg.early_stop_window:
            window.append(loss)
            w = cfg.early_stop_window
            if len(window) >= 2 * w and (not cfg.tdlf.enabled or alpha >= 1.0 or _band_full(omega)):
                before = np.mean(window[-2 * w:-w])
                after = np.mean(window[-w:])
                if before - after < cfg.early_stop_tol * before:
                    trace.reason = f"plateau at step {step}"
                    break

    trace.final_pose, trace.converged = pose, True
    trace.reason = trace.reason or "completed"
    return pose, trace


def _band_full(omega) -> bool:
    return bool(np.all(np.asarray(omega) >= 1.0))


def optimize_pose_se3_recursive(observed, prior, field, K, bounds, cfg: LocalizerConfig, **kw):
    from dataclasses import replace

    return optimize_pose(observed, prior, field, K, bounds, replace(cfg, mode=RECURSIVE), **kw)


@dataclass
class LocalizationReport:
    prior: Pose
    refined: Pose
    prior_error: tuple | None
    refined_error: tuple | None
    iterations: int
    converged: bool
    reason: str
    trace: OptimizationTrace


def localize(observed, regressor, field, K, bounds, cfg: LocalizerConfig, truth: Pose | None = None,
             rng: np.random.Generator | None = None) -> tuple[Pose, LocalizationReport]:
    """Regressor prior followed by photometric refinement."""
    prior = regressor.predict_pose(observed)
    refined, trace = optimize_pose(observed, prior, field, K, bounds, cfg, truth=truth, rng=rng)
    perr = pose_errors(prior, truth) if truth is not None else None
    rerr = pose_errors(refined, truth) if truth is not None else None
    report = LocalizationReport(prior, refined, perr, rerr, len(trace.records), trace.converged, trace.reason, trace)
    return refined, report
