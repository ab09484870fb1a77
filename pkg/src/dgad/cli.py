"""Command-line entry point.

Subcommands: gen-data, train, sample, eval, gradcheck, attn-viz. Exit codes:
0 on success, 1 on a validation error (one line on stderr), 2 on a runtime
error. ``DGAD_THREADS`` caps the worker and intra-op thread count.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import CheckpointError, read_checkpoint
from .config import ConfigError, RunConfig, load_config, write_run_txt

log = logging.getLogger("dgad")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def thread_count() -> int:
    raw = os.environ.get("DGAD_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"DGAD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"DGAD_THREADS must be a positive integer, got {raw!r}")
    return n


def parse_box(text: str, size: Optional[int] = None):
    try:
        box = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"malformed box {text!r}; expected x0,y0,x1,y1") from None
    if len(box) != 4:
        raise ValidationError(f"malformed box {text!r}; expected 4 integers x0,y0,x1,y1")
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1) or min(box) < 0 or (size is not None and max(x1, y1) > size):
        raise ValidationError(f"box {text!r} is empty or outside the {size}x{size} image")
    return box


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _require_dataset(path) -> Path:
    p = Path(path)
    if not (p / "manifest.txt").is_file():
        raise ValidationError(f"dataset not found (no manifest.txt): {p}")
    return p


def _config(args, overrides: Dict[str, object]) -> RunConfig:
    if args.config is not None:
        _require_file(args.config, "config file")
    return load_config(args.config, overrides)


def _dtype(cfg: RunConfig) -> torch.dtype:
    return torch.float64 if cfg.train.precision == "float64" else torch.float32


# --- subcommands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import build_dataset

    cfg = _config(args, {"data.n": args.n, "data.seed": args.seed, "paths.data": args.out})
    out = Path(cfg.paths.data)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"--out exists and is not a directory: {out}")
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"{out} is not empty; pass --force to overwrite")
    workers = min(thread_count(), 8)
    m = build_dataset(cfg.data.n, cfg.data.seed, out, cfg.data.data_config(), force=args.force, workers=workers)
    # run.txt sits inside the dataset; record it as "." so the bytes do not depend on --out
    cfg.paths.data = "."
    write_run_txt(out, cfg, {"command": "gen-data"})
    counts = m.split_counts()
    print(f"wrote {m.count} samples to {out} (train={counts['train']} val={counts['val']} test={counts['test']})")
    return EXIT_OK


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = []
    for line in path.read_text().splitlines(keepends=True):
        if line.startswith("step=") and int(line.split()[0][5:]) > step:
            break
        keep.append(line)
    path.write_text("".join(keep))


def cmd_train(args) -> int:
    from .data import load_manifest, load_split
    from .model import DgadModel
    from .trainer import Trainer, TrainingSet

    overrides = {"paths.data": args.data, "paths.out": args.out, "train.arm": args.arm, "train.steps": args.steps,
                 "train.seed": args.seed, "train.precision": args.precision, "train.lr": args.lr,
                 "train.batch_size": args.batch_size}
    cfg = _config(args, overrides)
    data_root = _require_dataset(cfg.paths.data)
    out = Path(cfg.paths.out)
    ckpt = out / "model.ckpt"
    log_path = out / "train.log"
    if args.resume:
        _require_file(ckpt, "checkpoint to resume")
    manifest = load_manifest(data_root, verify=True)

    tcfg = cfg.train_config()
    dtype = _dtype(cfg)
    model = DgadModel(cfg.model_config(), cfg.train.arm, seed=tcfg.seed)
    data = TrainingSet(load_split(data_root, "train"), dtype)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, data, tcfg, log_path)
    extra = {"data_hash": manifest.content_hash, "train_seconds": 0.0}
    if args.resume:
        meta = trainer.load(ckpt)
        if meta.get("data_hash") not in (None, manifest.content_hash):
            raise ValidationError("checkpoint was trained on a different dataset")
        extra["train_seconds"] = float(meta.get("train_seconds", 0.0))
        _truncate_log(log_path, trainer.step)
        print(f"resuming {cfg.train.arm} from step {trainer.step}")
    elif log_path.exists():
        log_path.unlink()
    write_run_txt(out, cfg, {"command": "train", "resume": bool(args.resume)})
    torch.set_num_threads(thread_count())

    every = tcfg.checkpoint_every or tcfg.steps
    while trainer.step < tcfg.steps:
        n = min(every - trainer.step % every, tcfg.steps - trainer.step)
        t0 = time.perf_counter()
        trainer.train(n)
        extra["train_seconds"] += time.perf_counter() - t0  # wall time of optimisation steps only
        trainer.save(ckpt, extra)
        print(f"step={trainer.step} loss={np.mean(trainer.losses[-n:]):.5f}", flush=True)
    if not ckpt.exists():
        trainer.save(ckpt, extra)
    return EXIT_OK


def _load_model(path: Path, dtype: torch.dtype):
    from .trainer import model_from_checkpoint

    try:
        model, meta = model_from_checkpoint(path, dtype)
    except CheckpointError as exc:
        raise ValidationError(str(exc)) from None
    model.eval()
    return model, meta


def _schedule(meta: dict, cfg: RunConfig):
    """Noise schedule the checkpoint was trained with; the config one if it was not recorded."""
    from .schedule import make_linear_schedule

    tc = meta.get("train_config") or {}
    if {"T", "beta_start", "beta_end"} <= tc.keys():
        return make_linear_schedule(int(tc["T"]), float(tc["beta_start"]), float(tc["beta_end"]))
    return cfg.train_config().schedule()


def cmd_sample(args) -> int:
    from .data import to_tensor, to_uint8
    from .model import box_mask, compose
    from .pnm import PnmError, read_pnm, write_pnm

    cfg = _config(args, {"sample.steps": args.steps, "sample.cfg_scale": args.cfg, "sample.seed": args.seed,
                         "paths.out": args.out, "train.precision": args.precision})
    ckpt = _require_file(args.ckpt, "checkpoint")
    obj_p, bg_p = _require_file(args.obj, "object image"), _require_file(args.bg, "background image")
    try:
        obj, bg = read_pnm(obj_p), read_pnm(bg_p)
    except PnmError as exc:
        raise ValidationError(str(exc)) from None
    if obj.ndim != 3 or bg.ndim != 3 or obj.shape != bg.shape or obj.shape[0] != obj.shape[1]:
        raise ValidationError(f"object {obj.shape} and background {bg.shape} must be equal-size square RGB images")
    box = parse_box(args.box, obj.shape[0])
    dtype = _dtype(cfg)
    model, meta = _load_model(ckpt, dtype)
    if model.cfg.image_size != obj.shape[0]:
        raise ValidationError(f"checkpoint expects {model.cfg.image_size}px images, got {obj.shape[0]}px")

    out = Path(cfg.paths.out)
    write_run_txt(out, cfg, {"command": "sample", "ckpt": ckpt, "box": args.box})
    torch.set_num_threads(thread_count())
    mask = box_mask([box], obj.shape[0], dtype)
    pred = compose(to_tensor(obj, dtype)[None], to_tensor(bg, dtype)[None], mask, model,
                   _schedule(meta, cfg), cfg.sample.steps, cfg.sample.cfg_scale, cfg.sample.seed,
                   cfg.sample.mode)
    write_pnm(out / "composite.ppm", to_uint8(pred[0]))
    print(f"wrote {out / 'composite.ppm'}")
    return EXIT_OK


def _arms_arg(text: Optional[str]) -> Optional[List[str]]:
    from .model import ARMS

    if not text:
        return None
    arms = [a.strip() for a in text.split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad or not arms:
        raise ValidationError(f"unknown arm(s) {','.join(bad) or text!r}; expected names from {','.join(ARMS)}")
    return arms


def _budget_key(meta: dict) -> str:
    tc = dict(meta.get("train_config", {}))
    tc.pop("seed", None)
    return json.dumps([tc, meta.get("model_config")], sort_keys=True)


def cmd_eval(args) -> int:
    from .data import load_manifest, load_split
    from .eval import (AblationBudget, AblationTable, directional_comparisons, evaluate_predictions,
                       predict_samples, run_ablation)
    cfg = _config(args, {"paths.data": args.data, "paths.out": args.out, "sample.steps": args.steps,
                         "sample.cfg_scale": args.cfg, "eval.n_eval": args.n_eval})
    arms = _arms_arg(args.arms)
    data_root = _require_dataset(cfg.paths.data)
    ckpts = [_require_file(p, "checkpoint") for p in (args.ckpt or [])]
    metas = []
    for p in ckpts:
        try:
            metas.append(read_checkpoint(p)[1])
        except CheckpointError as exc:
            raise ValidationError(str(exc)) from None
    manifest = load_manifest(data_root, verify=True)
    if ckpts:
        if arms is not None:
            missing = sorted(set(arms) - {m["arm"] for m in metas})
            if missing:
                raise ValidationError(f"no checkpoint given for arm(s) {','.join(missing)}")
        hashes = {m.get("data_hash") for m in metas}
        if hashes != {manifest.content_hash}:
            raise ValidationError("checkpoints were not all trained on this dataset (manifest hash mismatch)")
        if len({_budget_key(m) for m in metas}) > 1:
            raise ValidationError("checkpoints were trained under different budgets")
    elif arms is None:
        raise ValidationError("give --ckpt files or --arms to train")

    out = Path(cfg.paths.out)
    write_run_txt(out, cfg, {"command": "eval", "ckpts": ",".join(map(str, ckpts)), "arms": args.arms or ""})
    torch.set_num_threads(thread_count())
    n_eval = cfg.eval.n_eval or None
    budget = AblationBudget(steps=cfg.eval.steps, batch_size=cfg.train.batch_size, lr=cfg.train.lr,
                            seeds=cfg.eval.seeds, sample_steps=cfg.sample.steps, cfg_scale=cfg.sample.cfg_scale,
                            n_eval=n_eval, precision=cfg.train.precision)
    if ckpts:
        test = load_split(data_root, "test", n_eval)
        reports, seeds = [], []
        for p, meta in zip(ckpts, metas):
            if arms is not None and meta["arm"] not in arms:
                continue
            model, _ = _load_model(p, _dtype(cfg))
            preds = predict_samples(model, test, _schedule(meta, cfg), cfg.sample.steps,
                                    cfg.sample.cfg_scale, cfg.sample.seed,
                                    cfg.sample.batch_size, cfg.sample.mode)
            reports.append(evaluate_predictions(meta["arm"], preds, test))
            seeds.append(int(meta.get("train_config", {}).get("seed", 0)))
            print(f"evaluated {p}: masked_psnr={reports[-1].masked_psnr:.3f}", flush=True)
        table = AblationTable(reports, seeds, manifest.content_hash, directional_comparisons(reports, seeds))
    else:
        table = run_ablation(arms, data_root, budget, out / "ckpts", cfg.model_config())
    (out / "report.txt").write_text(table.to_text() + "\n")
    (out / "report.kv").write_text(table.to_kv())
    print(table.to_text())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import gradient_suite

    cfg = _config(args, {})
    if not 1e-6 <= args.eps <= 1e-4:
        raise ValidationError(f"--eps must lie in [1e-6, 1e-4], got {args.eps}")
    if args.tol <= 0:
        raise ValidationError(f"--tol must be > 0, got {args.tol}")
    if args.out:
        write_run_txt(args.out, cfg, {"command": "gradcheck", "tol": args.tol, "eps": args.eps})
    torch.set_num_threads(thread_count())
    reports = gradient_suite(tol=args.tol, eps=args.eps, seed=cfg.train.seed)
    lines = [r.summary() for r in reports]
    worst = max(r.max_rel_error for r in reports)
    lines.append(f"max_rel_error={worst:.6e}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        (Path(args.out) / "gradcheck.txt").write_text(text + "\n")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_RUNTIME


def cmd_attn_viz(args) -> int:
    from .data import read_sample
    from .encoder import SemanticCrossAttention, attention_map
    from .eval import render_attention_overlay
    from .model import box_mask, latent_encode
    from .numerics import bicubic_resize
    from .encoder import normalize_map
    from .schedule import add_noise

    cfg = _config(args, {"paths.out": args.out, "sample.seed": args.seed})
    ckpt = _require_file(args.ckpt, "checkpoint")
    sdir = Path(args.sample)
    if not (sdir / "meta.txt").is_file():
        raise ValidationError(f"sample directory not found: {sdir}")
    if not 0 <= args.t < cfg.schedule.T:
        raise ValidationError(f"--t must lie in [0, {cfg.schedule.T})")
    try:
        sample = read_sample(sdir)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    dtype = _dtype(cfg)
    model, meta = _load_model(ckpt, dtype)
    out = Path(cfg.paths.out)
    write_run_txt(out, cfg, {"command": "attn-viz", "ckpt": ckpt, "sample": sdir, "t": args.t})

    captured = []

    def hook(mod, inputs):
        captured.append((mod, inputs[0].detach(), inputs[1].detach()))

    names = {m: n for n, m in model.named_modules() if isinstance(m, SemanticCrossAttention)}
    handles = [m.register_forward_pre_hook(hook) for m in names]
    g = torch.Generator().manual_seed(cfg.sample.seed)
    with torch.no_grad():
        obj, bg, tgt = (x[None].to(dtype) for x in (sample.i_obj, sample.i_bg, sample.i_tgt))
        z = latent_encode(tgt)
        x_t = add_noise(z, torch.randn(z.shape, generator=g, dtype=dtype), args.t, _schedule(meta, cfg))
        model(x_t, args.t, model.condition(obj, bg, box_mask([sample.box], sample.image_size, dtype)))
    for h in handles:
        h.remove()
    s = model.cfg.latent_size
    maps = []
    for mod, f_b, tokens in captured:
        amap = attention_map(f_b, tokens, mod)[0]
        render_attention_overlay(tgt[0], amap, out / f"attn_{names[mod].replace('.', '_')}.ppm")
        maps.append(bicubic_resize(amap[None, None].double(), (s, s))[0, 0])
    mean = normalize_map(torch.stack(maps).mean(0)[None])[0]
    render_attention_overlay(tgt[0], mean, out / "attn_mean.ppm")
    print(f"wrote {len(maps) + 1} overlays to {out}")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dgad", description="Toy geometry-editable object composition with diffusion.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key = value config file")
        sp.set_defaults(fn=fn)
        return sp

    g = add("gen-data", cmd_gen_data, "generate the synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")

    t = add("train", cmd_train, "train one arm")
    t.add_argument("--data")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from <out>/model.ckpt")
    t.add_argument("--arm")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--precision", choices=["float32", "float64"])

    s = add("sample", cmd_sample, "compose one object into one background")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--obj", required=True)
    s.add_argument("--bg", required=True)
    s.add_argument("--box", required=True, help="x0,y0,x1,y1 in image pixels")
    s.add_argument("--steps", type=int)
    s.add_argument("--cfg", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--precision", choices=["float32", "float64"])
    s.add_argument("--out", required=True)

    e = add("eval", cmd_eval, "evaluate checkpoints or run the ablation")
    e.add_argument("--ckpt", nargs="+")
    e.add_argument("--data")
    e.add_argument("--arms")
    e.add_argument("--steps", type=int, help="sampling steps")
    e.add_argument("--cfg", type=float)
    e.add_argument("--n-eval", type=int)
    e.add_argument("--out", required=True)

    c = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--out")

    a = add("attn-viz", cmd_attn_viz, "render semantic attention overlays")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--sample", required=True)
    a.add_argument("--t", type=int, default=50)
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (ValidationError, ConfigError) as exc:
        print(f"dgad: error: {str(exc).splitlines()[0] if str(exc) else type(exc).__name__}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        print(f"dgad: runtime error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
              file=sys.stderr)
        return EXIT_RUNTIME


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
