"""Pixel-space metrics, the ablation harness and attention overlays."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from . import numerics as nx
from .data import CompositeSample, paste_object, to_tensor, to_uint8
from .pnm import write_pnm

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
PSNR_CAP = 99.0
PEAK = 2.0  # value range of [-1,1] images
HEAT_COLOR = (1.0, -1.0, -1.0)  # pure red in [-1,1] space


def _check_box(box, H: int, W: int) -> Tuple[int, int, int, int]:
    x0, y0, x1, y1 = (int(v) for v in box)
    if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
        raise ValueError(f"invalid box {box} for a {W}x{H} image")
    return x0, y0, x1, y1


def psnr_from_mse(mse: float, peak: float = PEAK) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def masked_psnr(pred: torch.Tensor, tgt: torch.Tensor, box) -> float:
    """PSNR (dB) over the box pixels of two [3,H,W] images in [-1,1]."""
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    x0, y0, x1, y1 = _check_box(box, *pred.shape[-2:])
    d = (pred[..., y0:y1, x0:x1].double() - tgt[..., y0:y1, x0:x1].double())
    return psnr_from_mse(float((d * d).mean()))


def full_psnr(pred: torch.Tensor, tgt: torch.Tensor) -> float:
    d = pred.double() - tgt.double()
    return psnr_from_mse(float((d * d).mean()))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(a @ b) / den


def transform_score(pred: torch.Tensor, sample: CompositeSample) -> float:
    """Normalized cross-correlation of the box region with the ground-truth composite, clipped to [0,1]."""
    x0, y0, x1, y1 = _check_box(sample.box, *pred.shape[-2:])
    got = pred[..., y0:y1, x0:x1].detach().double().numpy()
    want = sample.i_tgt[..., y0:y1, x0:x1].double().numpy()
    return min(1.0, max(0.0, ncc(got, want)))


def paste_baseline(sample: CompositeSample) -> torch.Tensor:
    return to_tensor(paste_object(sample.obj, sample.bg, sample.box))


def copy_background_baseline(sample: CompositeSample) -> torch.Tensor:
    return sample.i_bg


@dataclass
class EvalReport:
    arm: str
    masked_psnr: float
    full_psnr: float
    transform_score: float
    paste_score: float
    copy_bg_psnr: float
    n: int
    per_sample: List[Dict[str, float]] = field(default_factory=list)

    def row(self) -> Dict[str, float]:
        return {"arm": self.arm, "masked_psnr": self.masked_psnr, "full_psnr": self.full_psnr,
                "transform_score": self.transform_score, "paste_score": self.paste_score,
                "copy_bg_psnr": self.copy_bg_psnr, "n": self.n}


def evaluate_predictions(arm: str, preds: Sequence[torch.Tensor], samples: Sequence[CompositeSample]) -> EvalReport:
    if len(preds) != len(samples) or not samples:
        raise ValueError("need one prediction per sample and at least one sample")
    rows = []
    for p, s in zip(preds, samples):
        tgt = s.i_tgt
        p = p.to(tgt.dtype)
        rows.append({
            "seed": s.seed,
            "masked_psnr": masked_psnr(p, tgt, s.box),
            "full_psnr": full_psnr(p, tgt),
            "transform_score": transform_score(p, s),
            "paste_score": transform_score(paste_baseline(s), s),
            "copy_bg_psnr": masked_psnr(s.i_bg, tgt, s.box),
        })
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "seed"}
    return EvalReport(arm, mean["masked_psnr"], mean["full_psnr"], mean["transform_score"], mean["paste_score"],
                      mean["copy_bg_psnr"], len(rows), rows)


# --- sampling over a split ---------------------------------------------------

@torch.no_grad()
def predict_samples(model, samples: Sequence[CompositeSample], schedule, steps: int = 50, cfg_scale: float = 7.5,
                    seed: int = 0, batch_size: int = 16, mode: str = "ddim") -> List[torch.Tensor]:
    """Compose every sample; batch ``k`` uses sampler seed ``seed + k``."""
    from .model import box_mask, compose

    model.eval()
    out: List[torch.Tensor] = []
    size = model.cfg.image_size
    for k, i in enumerate(range(0, len(samples), batch_size)):
        chunk = samples[i:i + batch_size]
        obj = torch.stack([s.i_obj for s in chunk])
        bg = torch.stack([s.i_bg for s in chunk])
        mask = box_mask([s.box for s in chunk], size)
        pred = compose(obj, bg, mask, model, schedule, steps, cfg_scale, seed + k, mode)
        out.extend(p.float() for p in pred)
    return out


# --- ablations ---------------------------------------------------------------

@dataclass
class AblationBudget:
    """Everything an arm's run depends on besides the arm itself."""
    steps: int = 5000
    batch_size: int = 8
    lr: float = 1e-4
    seeds: Tuple[int, ...] = (0,)
    sample_steps: int = 50
    cfg_scale: float = 7.5
    n_eval: Optional[int] = None
    precision: str = "float32"


@dataclass
class AblationTable:
    reports: List[EvalReport]
    seeds: List[int]
    manifest_hash: str
    comparisons: List[Dict[str, object]] = field(default_factory=list)

    def to_text(self) -> str:
        return format_table(self.reports, self.seeds) + "\n" + format_comparisons(self.comparisons)

    def to_kv(self) -> str:
        return report_kv(self.reports, self.seeds, self.comparisons)


# (lhs, rhs, margin): holds when masked_psnr(lhs) >= masked_psnr(rhs) - margin
DIRECTIONS = (
    ("full", "no_dense_ca", 0.0),
    ("full", "no_layout_concat", 0.0),
    ("full", "random_input_weights", 0.0),
    ("full", "dense_ca_both_stages", 0.5),
)


def directional_comparisons(reports: Sequence[EvalReport], seeds: Sequence[int]) -> List[Dict[str, object]]:
    """Evaluate each ablation inequality per seed; reports and seeds are parallel lists."""
    by = {(r.arm, s): r for r, s in zip(reports, seeds)}
    out = []
    for lhs, rhs, margin in DIRECTIONS:
        common = sorted({s for a, s in by if a == lhs} & {s for a, s in by if a == rhs})
        if not common:
            continue
        held = [by[(lhs, s)].masked_psnr >= by[(rhs, s)].masked_psnr - margin for s in common]
        out.append({"lhs": lhs, "rhs": rhs, "margin": margin, "seeds": common, "held": held,
                    "n_held": sum(held), "n": len(held)})
    return out


def _check_arms(arms: Sequence[str]) -> List[str]:
    from .model import ARMS

    arms = list(arms)
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise ValueError(f"unknown arm(s) {bad}; expected names from {list(ARMS)}")
    if not arms:
        raise ValueError("no arms given")
    return arms


def train_arm(arm: str, dataset: PathLike, budget: AblationBudget, seed: int,
              out_dir: Optional[PathLike] = None, model_cfg=None):
    """Train one arm on the training split; returns the trained model."""
    from .data import load_split
    from .model import DgadModel, ModelConfig
    from .trainer import TrainConfig, Trainer, TrainingSet

    cfg = TrainConfig(lr=budget.lr, batch_size=budget.batch_size, steps=budget.steps, seed=seed,
                      precision=budget.precision)
    model = DgadModel(model_cfg or ModelConfig(), arm, seed=seed)
    log_path = ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"{arm}_s{seed}.log"
        ckpt = out_dir / f"{arm}_s{seed}.ckpt"
        if log_path.exists():
            log_path.unlink()
    trainer = Trainer(model, TrainingSet(load_split(dataset, "train"), nx.dtype_for(budget.precision)), cfg, log_path)
    trainer.train(budget.steps)
    if ckpt is not None:
        trainer.save(ckpt)
    return model


def evaluate_model(model, samples: Sequence[CompositeSample], budget: AblationBudget, seed: int = 0) -> EvalReport:
    from .schedule import make_linear_schedule

    preds = predict_samples(model, samples, make_linear_schedule(), budget.sample_steps, budget.cfg_scale, seed)
    return evaluate_predictions(model.arm, preds, samples)


def run_ablation(arms: Sequence[str], dataset: PathLike, budget: AblationBudget,
                 out_dir: Optional[PathLike] = None, model_cfg=None) -> AblationTable:
    """Train and evaluate every arm under one budget, for every seed in it."""
    from .data import load_manifest, load_split

    arms = _check_arms(arms)
    manifest_hash = load_manifest(dataset, verify=True).content_hash
    test = load_split(dataset, "test", budget.n_eval)
    reports, seeds = [], []
    for seed in budget.seeds:
        for arm in arms:
            # every arm must see exactly the same bytes
            if load_manifest(dataset).content_hash != manifest_hash:
                raise RuntimeError("dataset changed during the ablation run")
            model = train_arm(arm, dataset, budget, seed, out_dir, model_cfg)
            rep = evaluate_model(model, test, budget, seed)
            log.info("arm=%s seed=%d masked_psnr=%.3f", arm, seed, rep.masked_psnr)
            reports.append(rep)
            seeds.append(seed)
    return AblationTable(reports, seeds, manifest_hash, directional_comparisons(reports, seeds))


# --- report writers ------------------------------------------------------------

_COLS = ("arm", "seed", "n", "masked_psnr", "full_psnr", "transform_score", "paste_score", "copy_bg_psnr")


def format_table(reports: Sequence[EvalReport], seeds: Optional[Sequence[int]] = None) -> str:
    seeds = list(seeds) if seeds is not None else [0] * len(reports)
    lines = ["{:<22}{:>6}{:>6}{:>13}{:>11}{:>17}{:>13}{:>14}".format(*_COLS)]
    for r, s in zip(reports, seeds):
        lines.append(f"{r.arm:<22}{s:>6}{r.n:>6}{r.masked_psnr:>13.3f}{r.full_psnr:>11.3f}"
                     f"{r.transform_score:>17.4f}{r.paste_score:>13.4f}{r.copy_bg_psnr:>14.3f}")
    return "\n".join(lines)


def format_comparisons(comparisons: Sequence[Dict[str, object]]) -> str:
    lines = []
    for c in comparisons:
        rel = ">=" if not c["margin"] else f">= -{c['margin']} dB +"
        status = "holds" if 2 * c["n_held"] > c["n"] else "fails"
        lines.append(f"masked_psnr({c['lhs']}) {rel} masked_psnr({c['rhs']}): {c['n_held']}/{c['n']} seeds, {status}")
    return "\n".join(lines)


def report_kv(reports: Sequence[EvalReport], seeds: Optional[Sequence[int]] = None,
              comparisons: Sequence[Dict[str, object]] = ()) -> str:
    seeds = list(seeds) if seeds is not None else [0] * len(reports)
    lines = []
    for r, s in zip(reports, seeds):
        for k, v in r.row().items():
            if k != "arm":
                lines.append(f"{r.arm}.s{s}.{k}={v:.17g}" if isinstance(v, float) else f"{r.arm}.s{s}.{k}={v}")
    for c in comparisons:
        lines.append(f"cmp.{c['lhs']}_vs_{c['rhs']}.held={c['n_held']}")
        lines.append(f"cmp.{c['lhs']}_vs_{c['rhs']}.n={c['n']}")
    return "\n".join(lines) + "\n"


def parse_report_kv(text: str) -> Dict[str, str]:
    out = {}
    for ln in text.splitlines():
        if ln.strip():
            k, _, v = ln.partition("=")
            out[k] = v
    return out


# --- attention overlays ----------------------------------------------------------

def overlay_attention(scene: torch.Tensor, amap: torch.Tensor, weight: float = 0.5) -> torch.Tensor:
    """Blend a heat color into ``scene`` ([3,H,W] in [-1,1]) in proportion to the upsampled map."""
    if scene.dim() != 3 or scene.shape[0] != 3:
        raise ValueError(f"scene must be [3,H,W], got {tuple(scene.shape)}")
    if amap.dim() != 2:
        raise ValueError(f"attention map must be [h,w], got {tuple(amap.shape)}")
    if amap.min() < 0 or amap.max() > 1:
        raise ValueError("attention map values must lie in [0,1]")
    H, W = scene.shape[-2:]
    scene = scene.double()
    up = nx.bicubic_resize(amap.double()[None, None], (H, W))[0].clamp(0, 1)
    heat = torch.tensor(HEAT_COLOR, dtype=torch.float64).view(3, 1, 1)
    w = weight * up
    return scene * (1 - w) + heat * w


def render_attention_overlay(scene: torch.Tensor, amap: torch.Tensor, out_path: PathLike) -> torch.Tensor:
    img = overlay_attention(scene, amap)
    write_pnm(out_path, to_uint8(img))
    return img
