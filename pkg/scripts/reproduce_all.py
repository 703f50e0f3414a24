#!/usr/bin/env python3
"""Run the whole pipeline with the default configuration.

    python3 scripts/reproduce_all.py --out runs/repro [--seed 0] [--config cfg.json]

Steps already finished (a ``.done`` marker in the output directory) are skipped,
so an interrupted run can be resumed with the same command.
"""

import argparse
import sys
import time
from pathlib import Path

from latitude.cli import main

STEPS = [
    ["scene-gen"],
    ["train-field"],
    ["train-regressor"],
    ["localize", "--index", "0"],
    ["localize"],
    ["ablate"],
    ["sweep", "--experiments.alpha0_fractions=[0.0, 0.1, 0.2, 0.4, 0.7, 1.0]"],
    ["render"],
]


def run(out: Path, seed: int, config: Path | None) -> int:
    out.mkdir(parents=True, exist_ok=True)
    common = ["--out", str(out), "--seed", str(seed)]
    if config is not None:
        common += ["--config", str(config)]
    for step in STEPS:
        marker = out / f".done-{'-'.join(s.lstrip('-').split('=')[0] for s in step)}"
        if marker.exists():
            print(f"skip {' '.join(step)}")
            continue
        t0 = time.perf_counter()
        code = main([step[0], *common, *step[1:]])
        if code != 0:
            print(f"{step[0]} failed with exit code {code}", file=sys.stderr)
            return code
        marker.write_text(f"{time.perf_counter() - t0:.1f}\n")
        print(f"{' '.join(step)}: {time.perf_counter() - t0:.0f} s")
    return 0


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", type=Path, default=Path("runs/repro"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", type=Path, default=None)
    a = p.parse_args()
    sys.exit(run(a.out, a.seed, a.config))
