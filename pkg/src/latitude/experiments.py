"""Error statistics and the localisation experiment drivers.

* ``trajectory_eval``: regressor prior versus refined pose over the test split.
* ``perturbation_grid``: final errors from perturbed priors for the four
  combinations of {tangent, recursive} x {filter on, off}.
* ``alpha0_sweep``: the full method with different filter offsets.

All drivers take a base ``LocalizerConfig`` and derive every random stream
from ``seed`` so that variants see the same priors and pixel batches.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Pose, perturb_pose, pose_errors
from .localizer import RECURSIVE, TANGENT, LocalizationFailed, LocalizerConfig, optimize_pose

# fractions of the scene diameter and degrees, paired by index
LEVELS_T = (0.025, 0.05, 0.075, 0.10)
LEVELS_R = (4.0, 8.0, 12.0, 16.0)
MID_LEVEL = 1
ALPHA0_FRACTIONS = (0.0, 0.1, 0.3, 0.4, 0.5, 0.7)

VARIANTS = {
    "full": (TANGENT, True),
    "manifold_only": (TANGENT, False),
    "tdlf_only": (RECURSIVE, True),
    "neither": (RECURSIVE, False),
}


@dataclass
class ErrorStats:
    max: float
    mean: float
    min: float
    rmse: float
    std: float

    @classmethod
    def of(cls, errors) -> ErrorStats:
        e = np.asarray(errors, dtype=np.float64)
        if e.size == 0:
            return cls(*(math.nan,) * 5)
        return cls(
            float(e.max()),
            float(e.mean()),
            float(e.min()),
            float(np.sqrt((e**2).mean())),
            float(e.std()),
        )

    def as_tuple(self):
        return (self.max, self.mean, self.min, self.rmse, self.std)


@dataclass
class TrialResult:
    frame: int
    trial: int
    t_err: float
    r_err: float
    t_prior: float
    r_prior: float
    converged: bool
    iterations: int


@dataclass
class GridSettings:
    positions: int = 4
    seeds_per_position: int = 5
    levels_t: tuple = LEVELS_T
    levels_r: tuple = LEVELS_R

    @property
    def n_trials(self) -> int:
        return self.positions * self.seeds_per_position


def trial_frames(dataset, positions: int) -> list[int]:
    test = dataset.split("test")
    if not test:
        raise ValueError("dataset has no test frames")
    positions = min(positions, len(test))
    return [test[(j * len(test)) // positions] for j in range(positions)]


def trial_priors(dataset, diameter: float, level_t: float, level_r: float, settings: GridSettings, seed: int,
                 level_index: int = 0):
    """Perturbed priors ``(frame, trial, prior)`` shared by every variant."""
    out = []
    frames = trial_frames(dataset, settings.positions)
    for trial in range(settings.n_trials):
        frame = frames[trial % len(frames)]
        rng = np.random.default_rng([seed, level_index, trial, 0])
        truth = dataset.frames[frame].pose
        out.append((frame, trial, perturb_pose(truth, level_t * diameter, level_r, rng)))
    return out


def refine(field_, dataset, bounds, frame: int, prior: Pose, cfg: LocalizerConfig, rng_key, trial: int = 0) -> TrialResult:
    truth = dataset.frames[frame].pose
    rng = np.random.default_rng(rng_key)
    try:
        pose, trace = optimize_pose(dataset.images[frame], prior, field_, dataset.intrinsics, bounds, cfg,
                                    truth=truth, rng=rng)
        converged = trace.converged
        n = len(trace.records)
    except LocalizationFailed as err:
        pose, converged, n = prior, False, len(err.trace.records)
    t, r = pose_errors(pose, truth)
    t0, r0 = pose_errors(prior, truth)
    return TrialResult(frame, trial, t, r, t0, r0, converged, n)


def variant_config(base: LocalizerConfig, variant: str) -> LocalizerConfig:
    mode, tdlf = VARIANTS[variant]
    return replace(base, mode=mode, tdlf=replace(base.tdlf, enabled=tdlf))


@dataclass
class GridRow:
    level_t: float  # fraction of diameter
    level_r: float  # degrees
    variant: str
    mean_t: float
    mean_r: float
    success: float
    failures: int
    trials: list = field(default_factory=list, repr=False)


def perturbation_grid(field_, dataset, bounds, base: LocalizerConfig, settings: GridSettings = GridSettings(),
                      variants=tuple(VARIANTS), seed: int = 0, levels=None, progress=None,
                      tol_t: float = 0.005, tol_r: float = 0.5) -> list[GridRow]:
    """Mean final errors per (level, variant); success uses ``tol_t`` (diameter fraction) and ``tol_r`` degrees."""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    diameter = float(np.linalg.norm(hi - lo))
    levels = range(len(settings.levels_t)) if levels is None else levels
    rows = []
    for li in levels:
        lt, lr = settings.levels_t[li], settings.levels_r[li]
        priors = trial_priors(dataset, diameter, lt, lr, settings, seed, li)
        for v in variants:
            cfg = variant_config(base, v)
            res = [refine(field_, dataset, bounds, f, p, cfg, (seed, li, trial, 1), trial) for f, trial, p in priors]
            rows.append(_grid_row(lt, lr, v, res, diameter, tol_t, tol_r))
            if progress:
                progress(rows[-1])
    return rows


def _grid_row(lt, lr, name, res, diameter, tol_t, tol_r) -> GridRow:
    t = np.array([r.t_err for r in res])
    r = np.array([r.r_err for r in res])
    ok = (t <= tol_t * diameter) & (r <= tol_r)
    fails = sum(not x.converged for x in res)
    return GridRow(lt, lr, name, float(t.mean()), float(r.mean()), float(ok.mean()), fails, res)


def alpha0_sweep(field_, dataset, bounds, base: LocalizerConfig, fractions=ALPHA0_FRACTIONS,
                 settings: GridSettings = GridSettings(), level: int = MID_LEVEL, seed: int = 0, progress=None,
                 tol_t: float = 0.005, tol_r: float = 0.5) -> list[GridRow]:
    """Full method at one perturbation level, one row per filter offset."""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    diameter = float(np.linalg.norm(hi - lo))
    lt, lr = settings.levels_t[level], settings.levels_r[level]
    priors = trial_priors(dataset, diameter, lt, lr, settings, seed, level)
    rows = []
    for frac in fractions:
        cfg = replace(base, mode=TANGENT, tdlf=replace(base.tdlf, enabled=True, alpha0=float(frac)))
        res = [refine(field_, dataset, bounds, f, p, cfg, (seed, level, trial, 1), trial) for f, trial, p in priors]
        rows.append(_grid_row(lt, lr, f"alpha0={frac:g}", res, diameter, tol_t, tol_r))
        if progress:
            progress(rows[-1])
    return rows


# ----------------------------------------------------------- trajectory eval


@dataclass
class MethodRow:
    method: str
    translation: ErrorStats
    rotation_mean: float
    failures: int
    errors: list = field(default_factory=list, repr=False)


@dataclass
class ExperimentReport:
    rows: list
    meta: dict

    def row(self, method: str) -> MethodRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_json(self) -> str:
        body = dict(
            meta=self.meta,
            rows=[
                dict(method=r.method, **asdict(r.translation), rotation_mean=r.rotation_mean, failures=r.failures,
                     errors=[list(map(float, e)) for e in r.errors])
                for r in self.rows
            ],
        )
        return json.dumps(body, indent=1, sort_keys=True)

    def write(self, stem) -> None:
        stem = Path(stem)
        seed = self.meta.get("seed")
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            fh.write(f"# seed={seed}\n")
            w = csv.writer(fh)
            w.writerow(["method", "max", "mean", "min", "rmse", "std", "rotation_mean", "failures"])
            for r in self.rows:
                w.writerow([r.method, *map(repr, r.translation.as_tuple()), repr(r.rotation_mean), r.failures])
        stem.with_suffix(".json").write_text(self.to_json() + "\n")


def trajectory_eval(field_, regressor, dataset, bounds, base: LocalizerConfig, seed: int = 0,
                    methods=("regressor", "full"), progress=None) -> ExperimentReport:
    """Per test image: regressor prior, then each refinement method from that prior."""
    test = dataset.split("test")
    errs = {m: [] for m in methods}
    fails = {m: 0 for m in methods}
    for k, i in enumerate(test):
        truth = dataset.frames[i].pose
        prior = regressor.predict_pose(dataset.images[i])
        for m in methods:
            if m == "regressor":
                errs[m].append(pose_errors(prior, truth))
                continue
            res = refine(field_, dataset, bounds, i, prior, variant_config(base, m), (seed, 99, k, 1), k)
            errs[m].append((res.t_err, res.r_err))
            fails[m] += not res.converged
        if progress:
            progress(k, i, {m: errs[m][-1] for m in methods})
    rows = []
    for m in methods:
        e = np.array(errs[m]).reshape(-1, 2)
        rows.append(MethodRow(m, ErrorStats.of(e[:, 0]), float(e[:, 1].mean()), fails[m], e.tolist()))
    return ExperimentReport(rows, dict(seed=seed, test_frames=test))


def write_grid(stem, rows: list[GridRow], seed: int, diameter: float) -> None:
    stem = Path(stem)
    with open(stem.with_suffix(".csv"), "w", newline="") as fh:
        fh.write(f"# seed={seed}\n")
        w = csv.writer(fh)
        w.writerow(["level_t", "level_r", "variant", "mean_t", "mean_t_pct", "mean_r", "success", "failures"])
        for r in rows:
            w.writerow([repr(r.level_t), repr(r.level_r), r.variant, repr(r.mean_t),
                        repr(100 * r.mean_t / diameter), repr(r.mean_r), repr(r.success), r.failures])
    body = dict(
        seed=seed,
        diameter=diameter,
        rows=[dict(level_t=r.level_t, level_r=r.level_r, variant=r.variant, mean_t=r.mean_t, mean_r=r.mean_r,
                   success=r.success, failures=r.failures, trials=[asdict(t) for t in r.trials]) for r in rows],
    )
    stem.with_suffix(".json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")

