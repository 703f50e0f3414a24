#!/usr/bin/env python3
"""Compare regressors trained with and without virtual views over many seeds.

Needs a finished ``scene-gen`` and ``train-field`` in ``--run``.  Every seed
trains two regressors that share the real-image batch order; the only
difference is the synthetic term.  Writes ``augmentation.csv`` to ``--run``.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from latitude.cli import main


def train(run: Path, seed: int, augment: bool, config: Path | None) -> float:
    out = run / "augmentation" / f"{'aug' if augment else 'plain'}-{seed:02d}"
    if not (out / "regressor_eval.json").exists():
        argv = ["train-regressor", "--out", str(out), "--seed", str(seed),
                "--dataset", str(run / "dataset"), "--scene-file", str(run / "scene.json"),
                "--field", str(run / "field")]
        if config is not None:
            argv += ["--config", str(config)]
        if not augment:
            argv.append("--regressor.augment=null")
        if main(argv) != 0:
            raise SystemExit(f"training failed for seed {seed}")
    return json.loads((out / "regressor_eval.json").read_text())["translation"]["mean"]


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--run", type=Path, default=Path("runs/repro"))
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--config", type=Path, default=None)
    a = p.parse_args()
    rows = []
    for s in range(a.seeds):
        rows.append((s, train(a.run, s, True, a.config), train(a.run, s, False, a.config)))
        print(f"seed {s}: augmented {rows[-1][1]:.4f}  real only {rows[-1][2]:.4f}")
    with open(a.run / "augmentation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "augmented", "real_only"])
        w.writerows(rows)
    aug, plain = np.array([r[1] for r in rows]), np.array([r[2] for r in rows])
    print(f"mean: augmented {aug.mean():.4f}, real only {plain.mean():.4f}, "
          f"augmented better on {(aug <= plain).sum()}/{len(rows)} seeds")
    sys.exit(0)
