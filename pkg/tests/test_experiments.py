import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latitude.experiments import (
    VARIANTS,
    ErrorStats,
    ExperimentReport,
    GridSettings,
    MethodRow,
    alpha0_sweep,
    perturbation_grid,
    trajectory_eval,
    trial_frames,
    trial_priors,
    variant_config,
    write_grid,
)
from latitude.field import FieldConfig, RadianceField
from latitude.geometry import CameraIntrinsics, look_at, pose_errors
from latitude.localizer import RECURSIVE, TANGENT, LocalizerConfig, TDLFConfig
from latitude.scene import Dataset, Frame


def test_stats_hand_example():
    s = ErrorStats.of([3.0, 4.0, 5.0])
    assert (s.max, s.mean, s.min) == (5.0, 4.0, 3.0)
    assert s.rmse == pytest.approx(math.sqrt(50 / 3), abs=1e-15)
    assert s.std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)


def test_stats_of_zero_errors():
    assert ErrorStats.of(np.zeros(7)).as_tuple() == (0.0,) * 5
    assert all(math.isnan(v) for v in ErrorStats.of([]).as_tuple())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-9, 1e3)), min_size=1, max_size=40))
def test_stats_identities(errors):
    s = ErrorStats.of(errors)
    e = np.asarray(errors)
    assert s.min <= s.mean * (1 + 1e-12) and s.mean <= s.max * (1 + 1e-12)
    assert s.rmse >= s.mean * (1 - 1e-12)
    assert s.rmse**2 == pytest.approx(np.mean(e**2), rel=1e-9, abs=1e-12)
    assert s.rmse**2 == pytest.approx(s.mean**2 + s.std**2, rel=1e-9, abs=1e-9)


def test_variant_table():
    base = LocalizerConfig()
    assert {v: (variant_config(base, v).mode, variant_config(base, v).tdlf.enabled) for v in VARIANTS} == {
        "full": (TANGENT, True),
        "manifold_only": (TANGENT, False),
        "tdlf_only": (RECURSIVE, True),
        "neither": (RECURSIVE, False),
    }
    assert variant_config(base, "neither").tdlf.alpha0 == base.tdlf.alpha0


# -------------------------------------------------------------------- drivers

K = CameraIntrinsics.from_fov(12, 12, 60.0)
BOUNDS = (np.full(3, -2.0), np.full(3, 2.0))


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    cfg = FieldConfig(depth=2, width=8, pos_bands=4, dir_bands=1, app_dim=2, scale=2.0)
    field = RadianceField.create(cfg, 6, [[0.0, 0.0]], rng, np.float64)
    for cell in field.cells:
        for name, arr in cell.items():
            cell[name] = rng.normal(scale=0.5, size=arr.shape)
    frames, images = [], []
    from latitude.renderer import render_image

    for i in range(6):
        a = 2 * math.pi * i / 6
        pose = look_at(np.array([4 * math.cos(a), 4 * math.sin(a), 3.0]), np.zeros(3))
        frames.append(Frame(f"images/{i:04d}.png", pose, i, "test" if i % 2 else "train"))
        images.append(render_image(field, pose, K, BOUNDS, 8))
    return field, Dataset(K, frames, None, images, 0)


def fast_cfg():
    return LocalizerConfig(iterations=6, rays_per_step=16, samples_per_ray=8, tdlf=TDLFConfig(update_interval=2))


def test_trial_layout(toy):
    _, ds = toy
    assert trial_frames(ds, 2) == [1, 3]
    assert trial_frames(ds, 10) == [1, 3, 5]
    settings_ = GridSettings(positions=2, seeds_per_position=3)
    diameter = float(np.linalg.norm(BOUNDS[1] - BOUNDS[0]))
    priors = trial_priors(ds, diameter, 0.05, 8.0, settings_, seed=1)
    assert [f for f, _, _ in priors] == [1, 3, 1, 3, 1, 3]
    for frame, _, prior in priors:
        t, r = pose_errors(prior, ds.frames[frame].pose)
        assert t == pytest.approx(0.05 * diameter, rel=1e-9)
        assert r == pytest.approx(8.0, rel=1e-6)
    again = trial_priors(ds, diameter, 0.05, 8.0, settings_, seed=1)
    assert all(np.array_equal(a[2].to_vector(), b[2].to_vector()) for a, b in zip(priors, again))


def test_grid_rows_and_reproducibility(toy, tmp_path):
    field, ds = toy
    s = GridSettings(positions=2, seeds_per_position=1)
    rows = perturbation_grid(field, ds, BOUNDS, fast_cfg(), s, seed=3, levels=[0, 1])
    assert [(r.level_t, r.variant) for r in rows] == [(lt, v) for lt in (0.025, 0.05) for v in VARIANTS]
    assert all(len(r.trials) == 2 for r in rows)
    # every variant starts from the same priors
    for group in (rows[:4], rows[4:]):
        assert len({tuple(t.t_prior for t in r.trials) for r in group}) == 1
    again = perturbation_grid(field, ds, BOUNDS, fast_cfg(), s, seed=3, levels=[0, 1])
    write_grid(tmp_path / "a", rows, 3, 6.9)
    write_grid(tmp_path / "b", again, 3, 6.9)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_text().startswith("# seed=3\n")


def test_sweep_has_one_row_per_fraction(toy):
    field, ds = toy
    fr = (0.0, 0.4, 0.7)
    rows = alpha0_sweep(field, ds, BOUNDS, fast_cfg(), fr, GridSettings(positions=1, seeds_per_position=1))
    assert [r.variant for r in rows] == ["alpha0=0", "alpha0=0.4", "alpha0=0.7"]


class Oracle:
    """Predicts the ground-truth pose of each dataset image."""

    def __init__(self, ds):
        self.ds = ds

    def predict_pose(self, image):
        for img, f in zip(self.ds.images, self.ds.frames):
            if img is image:
                return f.pose
        raise KeyError("unknown image")


def test_trajectory_eval_with_perfect_prior(toy, tmp_path):
    field, ds = toy
    report = trajectory_eval(field, Oracle(ds), ds, BOUNDS, fast_cfg(), seed=0)
    reg = report.row("regressor")
    assert reg.translation.as_tuple() == (0.0,) * 5
    assert reg.rotation_mean <= 1e-12
    assert len(report.row("full").errors) == 3
    report.write(tmp_path / "traj")
    body = json.loads((tmp_path / "traj.json").read_text())
    assert body["meta"]["seed"] == 0
    assert [r["method"] for r in body["rows"]] == ["regressor", "full"]
    lines = (tmp_path / "traj.csv").read_text().splitlines()
    assert lines[0] == "# seed=0" and lines[1].startswith("method,max,mean,min,rmse,std")


def test_report_lookup():
    r = ExperimentReport([MethodRow("x", ErrorStats.of([1.0]), 0.0, 0)], {})
    assert r.row("x").translation.mean == 1.0
    with pytest.raises(KeyError):
        r.row("y")
