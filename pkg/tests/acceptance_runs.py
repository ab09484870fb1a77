"""Drive the long acceptance runs through the command-line interface.

Everything lands under ``$DGAD_ACCEPTANCE_DIR`` (default ``/root/runs/acceptance``):

    data/                          gen-data, n=2000, 64px
    full/                          train, full arm, 5000 steps, batch 8, lr 1e-4, float32
    full_eval/report.kv            eval on the whole test split
    ablation/<arm>_s<seed>/        train, one directory per arm and seed, shared budget
    ablation_eval/report.kv        eval over all ablation checkpoints

Each stage is skipped when its output already exists, so an interrupted run
resumes where it stopped. Run ``python3 tests/acceptance_runs.py`` to build
everything (several hours on one core).
"""
from __future__ import annotations

import os
import subprocess
import sys
from pathlib import Path

ARMS = ("full", "no_dense_ca", "no_layout_concat", "random_input_weights", "dense_ca_both_stages")
SEEDS = (0, 1, 2)
FULL_STEPS = 5000
ABLATION_STEPS = 1500
ABLATION_CFG = f"""\
train.steps = {ABLATION_STEPS}
train.batch_size = 8
train.lr = 1e-4
train.precision = float32
"""


def root() -> Path:
    return Path(os.environ.get("DGAD_ACCEPTANCE_DIR", "/root/runs/acceptance"))


def dgad(*args: str) -> None:
    cmd = [sys.executable, "-m", "dgad.cli", *args]
    print("+", " ".join(cmd), flush=True)
    subprocess.run(cmd, check=True)


def _finished(ckpt: Path, steps: int) -> bool:
    if not ckpt.is_file():
        return False
    from dgad.checkpoint import read_checkpoint

    return read_checkpoint(ckpt)[1]["step"] >= steps


def _train(out: Path, steps: int, *extra: str) -> None:
    if _finished(out / "model.ckpt", steps):
        return
    resume = ["--resume"] if (out / "model.ckpt").is_file() else []
    dgad("train", "--data", str(root() / "data"), "--out", str(out), "--steps", str(steps), *extra, *resume)


def dataset() -> Path:
    data = root() / "data"
    if not (data / "manifest.txt").is_file():
        dgad("gen-data", "--out", str(data), "--n", "2000", "--seed", "0", "--force")
    return data


def full_run() -> Path:
    dataset()
    _train(root() / "full", FULL_STEPS, "--arm", "full", "--seed", "0", "--batch-size", "8", "--lr", "1e-4",
           "--precision", "float32")
    report = root() / "full_eval" / "report.kv"
    if not report.is_file():
        dgad("eval", "--data", str(root() / "data"), "--ckpt", str(root() / "full" / "model.ckpt"),
             "--out", str(report.parent))
    return report


def ablation_checkpoints():
    return [root() / "ablation" / f"{arm}_s{seed}" / "model.ckpt" for seed in SEEDS for arm in ARMS]


def ablation() -> Path:
    dataset()
    cfg = root() / "ablation.cfg"
    cfg.parent.mkdir(parents=True, exist_ok=True)
    cfg.write_text(ABLATION_CFG)
    for seed in SEEDS:
        for arm in ARMS:
            _train(root() / "ablation" / f"{arm}_s{seed}", ABLATION_STEPS, "--config", str(cfg), "--arm", arm,
                   "--seed", str(seed))
    report = root() / "ablation_eval" / "report.kv"
    if not report.is_file():
        dgad("eval", "--config", str(cfg), "--data", str(root() / "data"), "--out", str(report.parent),
             "--ckpt", *map(str, ablation_checkpoints()))
    return report


if __name__ == "__main__":
    stages = sys.argv[1:] or ["full", "ablation"]
    if "full" in stages:
        full_run()
    if "ablation" in stages:
        ablation()
