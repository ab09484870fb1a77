"""scikit-learn style wrapper: ``fit`` trains on composite samples, ``predict``
returns composites, ``score`` is the mean masked PSNR."""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import CompositeSample, to_tensor, to_uint8
from .model import ARMS, DgadModel, ModelConfig
from .numerics import dtype_for
from .trainer import TrainConfig, Trainer, TrainingSet


def check_image(img, name: str = "image", size: Optional[int] = None) -> np.ndarray:
    """Validate an [H,W,3] uint8 square image."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square [H,W,3] uint8 array, got {arr.dtype} {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise ValueError(f"{name} is {arr.shape[0]}px, expected {size}px")
    return arr


def check_box(box, size: int) -> Tuple[int, int, int, int]:
    try:
        x0, y0, x1, y1 = (int(v) for v in box)
    except (TypeError, ValueError):
        raise ValueError(f"box must be four integers (x0, y0, x1, y1), got {box!r}") from None
    if not (0 <= x0 < x1 <= size and 0 <= y0 < y1 <= size):
        raise ValueError(f"box {box} is empty or outside a {size}x{size} image")
    return x0, y0, x1, y1


def check_samples(X, size: Optional[int] = None) -> List[CompositeSample]:
    """Validate a non-empty sequence of samples that share one image size."""
    if isinstance(X, CompositeSample):
        X = [X]
    samples = list(X)
    if not samples:
        raise ValueError("expected at least one sample")
    for i, s in enumerate(samples):
        if not isinstance(s, CompositeSample):
            raise TypeError(f"sample {i} is {type(s).__name__}, expected CompositeSample")
    size = size or samples[0].image_size
    for i, s in enumerate(samples):
        check_image(s.obj, f"sample {i} object", size)
        check_image(s.bg, f"sample {i} background", size)
        check_box(s.box, size)
    return samples


class DgadCompositor(BaseEstimator):
    def __init__(self, arm: str = "full", steps: int = 5000, batch_size: int = 8, lr: float = 1e-4,
                 seed: int = 0, precision: str = "float32", channels: Tuple[int, ...] = (64, 128, 256),
                 res_units: int = 2, sample_steps: int = 50, cfg_scale: float = 7.5, sample_seed: int = 0):
        self.arm = arm
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.precision = precision
        self.channels = channels
        self.res_units = res_units
        self.sample_steps = sample_steps
        self.cfg_scale = cfg_scale
        self.sample_seed = sample_seed

    def _check_params(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}; expected one of {ARMS}")
        dtype_for(self.precision)

    def fit(self, X, y=None):
        self._check_params()
        samples = check_samples(X)
        size = samples[0].image_size
        mcfg = ModelConfig(image_size=size, channels=tuple(self.channels), res_units=self.res_units)
        tcfg = TrainConfig(lr=self.lr, batch_size=self.batch_size, steps=self.steps, seed=self.seed,
                           precision=self.precision)
        self.model_ = DgadModel(mcfg, self.arm, seed=self.seed)
        self.trainer_ = Trainer(self.model_, TrainingSet(samples, dtype_for(self.precision)), tcfg)
        self.trainer_.train(self.steps)
        self.loss_curve_ = list(self.trainer_.losses)
        self.image_size_ = size
        return self

    def _fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("DgadCompositor is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        """[n,H,W,3] uint8 composites."""
        from .eval import predict_samples

        self._fitted()
        samples = check_samples(X, self.image_size_)
        preds = predict_samples(self.model_, samples, self.trainer_.schedule, self.sample_steps, self.cfg_scale,
                                self.sample_seed)
        return np.stack([to_uint8(p) for p in preds])

    def score(self, X, y=None) -> float:
        """Mean masked PSNR (dB) against each sample's ground-truth composite."""
        from .eval import masked_psnr

        samples = check_samples(X, getattr(self, "image_size_", None))
        preds = self.predict(samples)
        scores = [masked_psnr(to_tensor(p, torch.float64), to_tensor(s.tgt, torch.float64), s.box)
                  for p, s in zip(preds, samples)]
        return float(np.mean(scores))
