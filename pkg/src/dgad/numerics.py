"""Dense tensor ops used throughout the package, plus a finite-difference
gradient checker.

Tensors are plain ``torch.Tensor`` objects; analytic gradients come from
torch autograd. Two precision modes exist: ``"float64"`` for oracle tests and
gradient checks, ``"float32"`` for training.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}


def dtype_for(precision: str) -> torch.dtype:
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def _require_finite(x: torch.Tensor, op: str) -> None:
    if not torch.isfinite(x).all():
        bad = int((~torch.isfinite(x)).sum())
        raise ValueError(f"{op}: input contains {bad} non-finite value(s)")


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last dimension, max-subtracted for stability."""
    if x.dim() == 0 or x.shape[-1] < 1:
        raise ValueError("softmax_rows: last dimension must be >= 1")
    _require_finite(x, "softmax_rows")
    shifted = x - x.amax(dim=-1, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-stochastic weights softmax(q k^T / sqrt(C)) of shape [B, N, M]."""
    if q.dim() != 3 or k.dim() != 3:
        raise ValueError(f"attention expects [B,N,C] tensors, got {tuple(q.shape)} and {tuple(k.shape)}")
    if q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ValueError(f"attention: query {tuple(q.shape)} and key {tuple(k.shape)} disagree on batch/channels")
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax_rows(torch.bmm(q, k.transpose(1, 2)) * scale)


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(C)) v for q [B,N,C], k [B,M,C], v [B,M,Cv]."""
    if v.dim() != 3 or v.shape[:2] != k.shape[:2]:
        raise ValueError(f"attention: value {tuple(v.shape)} does not match key {tuple(k.shape)}")
    return torch.bmm(attention_weights(q, k), v)


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: Optional[torch.Tensor] = None,
           padding: Optional[int] = None, stride: int = 1) -> torch.Tensor:
    """2-D cross-correlation. ``padding=None`` means shape-preserving ((k-1)//2)."""
    if x.dim() != 4 or kernel.dim() != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.dim()}-D and {kernel.dim()}-D")
    if x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {tuple(kernel.shape[-2:])}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv2d: bias shape {tuple(bias.shape)} != ({kernel.shape[0]},)")
    if padding is None:
        padding = (k - 1) // 2
    return F.conv2d(x, kernel, bias, stride=stride, padding=padding)


def linear(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Affine map x @ W + b with W stored as [Din, Dout]."""
    if weight.dim() != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input last dim {x.shape[-1]} does not match weight {tuple(weight.shape)}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias shape {tuple(bias.shape)} != ({weight.shape[1]},)")
        out = out + bias
    return out


def activation(x: torch.Tensor, kind: str) -> torch.Tensor:
    if kind == "relu":
        return torch.relu(x)
    if kind == "sigmoid":
        return torch.sigmoid(x)
    if kind == "silu":
        return F.silu(x)
    raise ValueError(f"unknown activation {kind!r}")


def group_norm(x: torch.Tensor, groups: int, weight: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    return F.group_norm(x, groups, weight, bias, eps)


def norm_groups(channels: int, max_groups: int = 8, min_group_size: int = 4) -> int:
    """Largest group count <= max_groups that divides ``channels`` with groups of >= min_group_size."""
    for g in range(max_groups, 0, -1):
        if channels % g == 0 and channels // g >= min_group_size:
            return g
    return 1


# --- bicubic resampling -----------------------------------------------------

CUBIC_A = -0.5  # Catmull-Rom


def cubic_kernel(d: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    d = np.abs(d)
    out = np.zeros_like(d)
    near = d <= 1
    far = (d > 1) & (d < 2)
    out[near] = (a + 2) * d[near] ** 3 - (a + 3) * d[near] ** 2 + 1
    out[far] = a * d[far] ** 3 - 5 * a * d[far] ** 2 + 8 * a * d[far] - 4 * a
    return out


def cubic_resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] matrix of cubic weights, half-pixel aligned, edge-clamped."""
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(centers).astype(np.int64)
    mat = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        idx = base + tap
        w = cubic_kernel(centers - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), w)
    return mat


def bicubic_resize(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Separable Catmull-Rom resize of a [B,C,H,W] tensor (no antialiasing)."""
    if x.dim() != 4:
        raise ValueError(f"bicubic_resize expects [B,C,H,W], got shape {tuple(x.shape)}")
    h, w = size
    if h < 1 or w < 1:
        raise ValueError(f"bicubic_resize: invalid target size {size}")
    H, W = x.shape[-2:]
    if (h, w) == (H, W):
        return x.clone()
    rows = torch.as_tensor(cubic_resample_matrix(H, h), dtype=x.dtype)
    cols = torch.as_tensor(cubic_resample_matrix(W, w), dtype=x.dtype)
    return rows @ x @ cols.T


def bicubic_downsample(x: torch.Tensor, target: Tuple[int, int]) -> torch.Tensor:
    if x.dim() != 4:
        raise ValueError(f"bicubic_downsample expects [B,C,H,W], got shape {tuple(x.shape)}")
    H, W = x.shape[-2:]
    if target[0] > H or target[1] > W:
        raise ValueError(f"bicubic_downsample: target {tuple(target)} larger than source {(H, W)}")
    return bicubic_resize(x, target)


# --- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    per_param_errors: Dict[str, float]
    passed: bool
    tol: float
    n_checked: int = 0
    flagged: list = field(default_factory=list)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op_name}: max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}, {self.n_checked} entries)"


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor], eps: float = 1e-5,
               tol: float = 1e-4, op_name: str = "op", max_entries: Optional[int] = 16,
               seed: int = 0) -> GradCheckReport:
    """Compare autograd gradients of the scalar ``fn()`` with central differences.

    ``params`` must be float64 leaf tensors that ``fn`` reads. At most
    ``max_entries`` entries per tensor are probed (all of them if ``None``).
    Entries where the one-sided slopes disagree are treated as sitting on a
    kink: the entry is nudged once and re-checked, and flagged if it still fails.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"grad_check: eps={eps} outside [1e-6, 1e-4]")
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"grad_check: parameter {name!r} is {p.dtype}, run checks at float64")
    names = list(params)
    tensors = [params[n] for n in names]
    for t in tensors:
        t.requires_grad_(True)

    def analytic() -> list:
        out = fn()
        if out.numel() != 1:
            raise ValueError("grad_check: fn must return a scalar")
        grads = torch.autograd.grad(out, tensors, allow_unused=True)
        return [torch.zeros_like(t) if g is None else g.detach().clone() for t, g in zip(tensors, grads)]

    def f() -> float:
        with torch.no_grad():
            return float(fn())

    def probe(t: torch.Tensor, idx: int) -> Tuple[float, float, float]:
        flat = t.data.view(-1)
        orig = flat[idx].item()
        flat[idx] = orig + eps
        fp = f()
        flat[idx] = orig - eps
        fm = f()
        flat[idx] = orig
        f0 = f()
        return (fp - fm) / (2 * eps), (fp - f0) / eps, (f0 - fm) / eps

    rng = np.random.default_rng(seed)
    grads = analytic()
    per_param: Dict[str, float] = {}
    flagged = []
    n_checked = 0
    for i, (name, t) in enumerate(zip(names, tensors)):
        n = t.numel()
        if max_entries is None or n <= max_entries:
            idxs = np.arange(n)
        else:
            idxs = np.sort(rng.choice(n, size=max_entries, replace=False))
        worst = 0.0
        for idx in idxs:
            idx = int(idx)
            num, fwd, bwd = probe(t, idx)
            a = grads[i].view(-1)[idx].item()
            err = _rel_error(a, num)
            if err > tol and _rel_error(fwd, bwd) > tol:
                # likely a kink: move off it and retry once
                flat = t.data.view(-1)
                orig = flat[idx].item()
                flat[idx] = orig + 7.3 * eps * (1 if rng.random() < 0.5 else -1)
                retry_grads = analytic()
                num, _, _ = probe(t, idx)
                err = _rel_error(retry_grads[i].view(-1)[idx].item(), num)
                flat[idx] = orig
                if err > tol:
                    flagged.append((name, idx))
            worst = max(worst, err)
            n_checked += 1
        per_param[name] = worst
    max_err = max(per_param.values(), default=0.0)
    return GradCheckReport(op_name, max_err, per_param, max_err <= tol, tol, n_checked, flagged)


def module_params(module: torch.nn.Module, prefix: str = "") -> Dict[str, torch.Tensor]:
    return {prefix + n: p for n, p in module.named_parameters() if p.requires_grad}


def seeded_normal(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)
