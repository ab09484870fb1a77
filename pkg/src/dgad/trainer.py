"""Noise-prediction training: timestep sampling, noising, MSE loss, Adam,
parameter freezing, checkpoints and the loss log."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .data import CompositeSample, to_tensor
from .model import ARMS, GROUPS, DEFAULT_FREEZE, DgadModel, ModelConfig, box_mask, latent_encode
from .numerics import dtype_for
from .schedule import DEFAULT_BETA, DEFAULT_T, NoiseSchedule, add_noise, make_linear_schedule

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    steps: int = 5000
    T: int = DEFAULT_T
    beta_start: float = DEFAULT_BETA[0]
    beta_end: float = DEFAULT_BETA[1]
    freeze: Tuple[str, ...] = ()
    cond_drop_prob: float = 0.1
    seed: int = 0
    precision: str = "float32"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.cond_drop_prob < 1:
            raise ValueError(f"cond_drop_prob must lie in [0, 1), got {self.cond_drop_prob}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        dtype_for(self.precision)

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, named_params: Iterable[Tuple[str, torch.Tensor]], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.step_count = 0

    @torch.no_grad()
    def step(self, frozen: Iterable[str] = ()) -> None:
        frozen = set(frozen)
        self.step_count += 1
        bc1 = 1 - self.beta1 ** self.step_count
        bc2 = 1 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            if name in frozen or p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            p.addcdiv_(m, denom, value=-self.lr / bc1)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        out = {f"adam.m/{n}": t for n, t in self.m.items()}
        out.update({f"adam.v/{n}": t for n, t in self.v.items()})
        return out

    def load_state_tensors(self, tensors: Dict[str, torch.Tensor], step_count: int) -> None:
        for n in self.params:
            self.m[n].copy_(tensors[f"adam.m/{n}"])
            self.v[n].copy_(tensors[f"adam.v/{n}"])
        self.step_count = step_count


def apply_freeze_mask(model: DgadModel, names: Iterable[str]) -> List[str]:
    """Freeze every parameter in the named groups; returns the frozen parameter names."""
    names = list(names)
    unknown = sorted(set(names) - set(GROUPS))
    if unknown:
        raise ValueError(f"unknown parameter group(s) {unknown}; expected names from {GROUPS}")
    frozen = []
    for pname, p in model.named_parameters():
        if model.param_group(pname) in names:
            p.requires_grad_(False)
            frozen.append(pname)
        else:
            p.requires_grad_(True)
    return frozen


def param_checksums(model: nn.Module) -> Dict[str, str]:
    return {n: hashlib.sha256(p.detach().cpu().numpy().tobytes()).hexdigest()[:16]
            for n, p in model.named_parameters()}


# --- batches -----------------------------------------------------------------

class TrainingSet:
    """All training samples held as tensors; batches are drawn by index."""

    def __init__(self, samples: Sequence[CompositeSample], dtype=torch.float32):
        if not samples:
            raise ValueError("empty training set")
        size = samples[0].image_size
        self.obj = torch.stack([to_tensor(s.obj, dtype) for s in samples])
        self.bg = torch.stack([to_tensor(s.bg, dtype) for s in samples])
        self.tgt = torch.stack([to_tensor(s.tgt, dtype) for s in samples])
        self.mask = box_mask([s.box for s in samples], size, dtype)
        self.z_tgt = latent_encode(self.tgt)

    def __len__(self) -> int:
        return self.obj.shape[0]

    def batch(self, idx: np.ndarray) -> Dict[str, torch.Tensor]:
        i = torch.as_tensor(idx, dtype=torch.long)
        return {"obj": self.obj[i], "bg": self.bg[i], "mask": self.mask[i], "z_tgt": self.z_tgt[i]}


def training_step(batch: Dict[str, torch.Tensor], model, schedule: NoiseSchedule, opt: Optional[Adam],
                  rng: np.random.Generator, cond_drop_prob: float = 0.1,
                  frozen: Iterable[str] = ()) -> Tuple[float, float]:
    """One noise-prediction step. Returns (loss, mean timestep).

    A non-finite loss or gradient aborts the step before any parameter or
    optimizer state is touched.
    """
    z = batch["z_tgt"]
    B = z.shape[0]
    t = torch.as_tensor(rng.integers(0, schedule.T, size=B), dtype=torch.long)
    eps = torch.as_tensor(rng.standard_normal(z.shape), dtype=z.dtype)
    keep = torch.as_tensor(rng.random(B) >= cond_drop_prob)
    cond = model.condition(batch["obj"], batch["bg"], batch["mask"]).drop(keep)
    x_t = add_noise(z, eps, t, schedule)
    pred = model(x_t, t, cond)
    loss = ((pred - eps) ** 2).mean()
    t_mean = float(t.double().mean())
    if opt is None:
        return loss.item(), t_mean
    opt.zero_grad()
    if not torch.isfinite(loss):
        log.warning("non-finite loss %s; step aborted", loss.item())
        return float("nan"), t_mean
    if not loss.requires_grad:  # every group frozen
        return loss.item(), t_mean
    loss.backward()
    if any(p.grad is not None and not torch.isfinite(p.grad).all() for p in opt.params.values()):
        log.warning("non-finite gradient; step aborted")
        opt.zero_grad()
        return float("nan"), t_mean
    opt.step(frozen)
    return loss.item(), t_mean


# --- trainer ---------------------------------------------------------------------

class Trainer:
    def __init__(self, model: DgadModel, data: TrainingSet, cfg: TrainConfig,
                 log_path: Optional[PathLike] = None):
        self.cfg = cfg
        self.dtype = dtype_for(cfg.precision)
        self.model = model.to(self.dtype)
        self.data = data
        self.schedule = cfg.schedule()
        self.frozen = apply_freeze_mask(model, cfg.freeze)
        self.opt = Adam(model.named_parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.losses: List[float] = []
        self.log_path = Path(log_path) if log_path else None

    def training_step(self) -> float:
        idx = self.rng.integers(0, len(self.data), size=self.cfg.batch_size)
        batch = {k: v.to(self.dtype) for k, v in self.data.batch(idx).items()}
        loss, t_mean = training_step(batch, self.model, self.schedule, self.opt, self.rng,
                                     self.cfg.cond_drop_prob, self.frozen)
        self.step += 1
        self.losses.append(loss)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(f"step={self.step} loss={loss:.17g} t_mean={t_mean:.17g}\n")
        return loss

    def train(self, steps: int, checkpoint_path: Optional[PathLike] = None,
              callback: Optional[Callable[["Trainer"], None]] = None) -> List[float]:
        out = []
        for _ in range(steps):
            out.append(self.training_step())
            if callback is not None:
                callback(self)
            if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                self.save(checkpoint_path)
        return out

    # -- checkpoints ------------------------------------------------------------

    def save(self, path: PathLike, extra: Optional[dict] = None) -> None:
        save_checkpoint(path, self.model, self.opt, self.step, self.rng, self.cfg, extra)

    def load(self, path: PathLike) -> dict:
        meta = load_checkpoint(path, self.model, self.opt)
        self.step = int(meta["step"])
        self.rng.bit_generator.state = meta["rng_state"]
        return meta


def _jsonable(state):
    if isinstance(state, dict):
        return {k: _jsonable(v) for k, v in state.items()}
    if isinstance(state, (np.integer,)):
        return int(state)
    return state


def save_checkpoint(path: PathLike, model: DgadModel, opt: Optional[Adam], step: int,
                    rng: Optional[np.random.Generator] = None, train_cfg: Optional[TrainConfig] = None,
                    extra: Optional[dict] = None) -> None:
    tensors = {f"model/{n}": p.detach() for n, p in model.named_parameters()}
    meta = {"step": int(step), "arm": model.arm, "model_config": asdict(model.cfg),
            "adam_step": opt.step_count if opt is not None else 0}
    if opt is not None:
        tensors.update(opt.state_tensors())
    if rng is not None:
        meta["rng_state"] = _jsonable(rng.bit_generator.state)
    if train_cfg is not None:
        meta["train_config"] = asdict(train_cfg)
    if extra:
        meta.update(extra)
    write_checkpoint(path, tensors, meta)


def load_checkpoint(path: PathLike, model: DgadModel, opt: Optional[Adam] = None) -> dict:
    tensors, meta = read_checkpoint(path)
    if meta.get("arm") != model.arm:
        raise CheckpointError(f"{path}: checkpoint arm {meta.get('arm')!r} != model arm {model.arm!r}")
    with torch.no_grad():
        for n, p in model.named_parameters():
            key = f"model/{n}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key!r}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: shape mismatch for {key!r}")
            p.copy_(tensors[key].to(p.dtype))
    if opt is not None:
        opt.load_state_tensors({k: v for k, v in tensors.items() if k.startswith("adam.")}, int(meta["adam_step"]))
    return meta


def model_from_checkpoint(path: PathLike, dtype=torch.float32) -> Tuple[DgadModel, dict]:
    _, meta = read_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    model = DgadModel(cfg, meta["arm"]).to(dtype)
    load_checkpoint(path, model)
    return model, meta
