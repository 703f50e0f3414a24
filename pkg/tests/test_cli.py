import json
import os

import numpy as np
import pytest
from PIL import Image

from latitude.cli import main
from latitude.field import RadianceField
from latitude.scene import read_dataset

TINY = {
    "seed": 5,
    "scene": {"n_train": 10, "n_test": 2, "width": 16, "height": 16, "step_size": 0.2,
              "objects": {"n_objects": 3}, "trajectory": {"max_yaw_step_deg": 90.0}},
    "field": {"depth": 2, "width": 8, "pos_bands": 3, "dir_bands": 1, "app_dim": 2},
    "train": {"iterations": 20, "rays_per_step": 64, "samples_per_ray": 8, "eval_every": 0},
    "regressor": {"input_size": 16, "widths": [4, 8], "fc": [16, 16, 8], "epochs": 2, "batch_size": 4,
                  "augment": {"samples_per_anchor": 1, "render_samples": 4}},
    "localizer": {"iterations": 6, "rays_per_step": 16, "samples_per_ray": 8, "tdlf": {"update_interval": 2}},
    "experiments": {"positions": 1, "seeds_per_position": 1, "ablate_levels": [1],
                    "alpha0_fractions": [0.0, 0.4]},
}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def run(cmd, out, config, *extra):
    return main([cmd, "--config", str(config), "--out", str(out), *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("scene-gen", "train-field", "train-regressor"):
        assert run(cmd, out, config_file) == 0
    return out


def test_scene_gen_contract(pipeline):
    ds = read_dataset(pipeline / "dataset")
    assert len(ds.split("train")) == 10 and len(ds.split("test")) == 2
    assert ds.seed == 5
    saved = json.loads((pipeline / "config.scene-gen.json").read_text())
    assert saved["seed"] == 5 and saved["scene"]["n_train"] == 10


def test_same_seed_same_bytes(pipeline, config_file, tmp_path):
    for cmd in ("scene-gen", "train-field", "train-regressor"):
        assert run(cmd, tmp_path, config_file) == 0
    names = ["dataset/manifest.json", "dataset/images/0003.png", "scene.json", "field/params.f32",
             "field/manifest.txt", "train_log.csv", "field_eval.json", "regressor/params.f32",
             "regressor_log.csv", "regressor_eval.json"]
    for name in names:
        assert (pipeline / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_seed_changes_outputs(pipeline, config_file, tmp_path):
    assert run("scene-gen", tmp_path, config_file, "--seed", "6") == 0
    assert (pipeline / "scene.json").read_bytes() != (tmp_path / "scene.json").read_bytes()
    assert read_dataset(tmp_path / "dataset").seed == 6


def test_seed_in_output_headers(pipeline):
    assert (pipeline / "train_log.csv").read_text().startswith("# seed=5\n")
    assert (pipeline / "regressor_log.csv").read_text().startswith("# seed=5\n")
    assert json.loads((pipeline / "field_eval.json").read_text())["seed"] == 5
    assert RadianceField.load(pipeline / "field").meta["seed"] == "5"


def test_localize_one_image(pipeline, config_file, capsys):
    assert run("localize", pipeline, config_file, "--index", "1") == 0
    text = capsys.readouterr().out
    assert "prior error" in text and "refined error" in text and "iterations 6" in text
    traces = list((pipeline / "traces").glob("frame_*.csv"))
    assert len(traces) == 1
    lines = traces[0].read_text().splitlines()
    assert lines[:2] == ["# seed=5", "step,alpha,loss,t_err,r_err"] and len(lines) == 8


def test_localize_trajectory(pipeline, config_file):
    assert run("localize", pipeline, config_file) == 0
    body = json.loads((pipeline / "trajectory.json").read_text())
    assert [r["method"] for r in body["rows"]] == ["regressor", "full"]


def test_ablate_and_sweep(pipeline, config_file):
    assert run("ablate", pipeline, config_file) == 0
    header = (pipeline / "ablation.csv").read_text().splitlines()
    assert header[0] == "# seed=5"
    assert header[1].split(",")[:3] == ["level_t", "level_r", "variant"]
    assert [line.split(",")[2] for line in header[2:]] == ["full", "manifold_only", "tdlf_only", "neither"]
    assert run("sweep", pipeline, config_file) == 0
    rows = (pipeline / "alpha0_sweep.csv").read_text().splitlines()[2:]
    assert [r.split(",")[2] for r in rows] == ["alpha0=0", "alpha0=0.4"]


def test_render_writes_seeded_png(pipeline, config_file):
    assert run("render", pipeline, config_file, "--raw") == 0
    img = Image.open(pipeline / "render.png")
    assert img.size == (16, 16) and img.text["seed"] == "5"
    assert (pipeline / "render.raw").exists()
    assert run("render", pipeline, config_file, "--pose", "0 0 12 1 0 0 0") == 0


def error_record(out, capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    record = json.loads(err)
    assert record == json.loads((out / "error.json").read_text())
    return record


def test_missing_field_exits_2(tmp_path, config_file, capsys):
    assert run("scene-gen", tmp_path, config_file) == 0
    assert run("localize", tmp_path, config_file) == 2
    record = error_record(tmp_path, capsys)
    assert record["error"] == "missing_prerequisite"
    assert record["path"] == str(tmp_path / "field")
    assert str(tmp_path / "field") in record["message"]


def test_explicit_missing_path(pipeline, config_file, tmp_path, capsys):
    nowhere = tmp_path / "elsewhere"
    code = main(["localize", "--config", str(config_file), "--out", str(tmp_path), "--dataset",
                 str(pipeline / "dataset"), "--scene-file", str(pipeline / "scene.json"), "--field", str(nowhere)])
    assert code == 2
    assert error_record(tmp_path, capsys)["path"] == str(nowhere)


def test_unknown_key_exits_2(tmp_path, capsys):
    assert main(["scene-gen", "--out", str(tmp_path), "--scene.n_trian=3"]) == 2
    record = error_record(tmp_path, capsys)
    assert record["error"] == "config" and "scene.n_trian" in record["message"]


def test_runtime_failure_exits_1(pipeline, config_file, tmp_path, capsys):
    paths = [f"--{k}={pipeline / v}" for k, v in
             [("dataset", "dataset"), ("scene-file", "scene.json"), ("field", "field"), ("regressor", "regressor")]]
    code = main(["localize", "--config", str(config_file), "--out", str(tmp_path), *paths, "--index", "99"])
    assert code == 1
    record = error_record(tmp_path, capsys)
    assert record["error"] == "runtime" and "--index" in record["message"]


def test_thread_cap(monkeypatch):
    from latitude.cli import _limit_threads

    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        monkeypatch.setenv(var, "4")
    monkeypatch.setenv("LATITUDE_THREADS", "1")
    assert _limit_threads() == 1
    assert os.environ["OMP_NUM_THREADS"] == "1"


def test_regressor_without_augmentation_needs_no_field(tmp_path, config_file):
    assert run("scene-gen", tmp_path, config_file) == 0
    assert run("train-regressor", tmp_path, config_file, "--regressor.augment=null") == 0
    assert not (tmp_path / "field").exists()
    assert np.isfinite(json.loads((tmp_path / "regressor_eval.json").read_text())["translation"]["mean"])
