"""Gated dense cross-attention between backbone and reference features.

Queries come from backbone features, keys and values from same-resolution
reference features. A position-wise gate ``alpha`` weights the retrieved
appearance and its clamped complement ``beta`` keeps a share of the query:

    out = softmax(q k^T / sqrt(C)) v * alpha + q * beta
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from . import numerics as nx
from .layers import Conv, Dense, from_tokens, to_tokens

CLAMP_INTERVAL = (0.5, 0.8)


@dataclass
class GateMaps:
    alpha: torch.Tensor
    beta: torch.Tensor


def mask_process(m: torch.Tensor, lo: float = CLAMP_INTERVAL[0], hi: float = CLAMP_INTERVAL[1]) -> torch.Tensor:
    if not lo < hi:
        raise ValueError(f"clamp interval must satisfy lo < hi, got ({lo}, {hi})")
    return m.clamp(lo, hi)


class ProjectionStack(nn.Module):
    """Conv1x1 followed by ``L`` shape-preserving Conv3x3 layers (no nonlinearity).

    ``final_bias=False`` drops the bias of the last conv. The key stack uses
    it: a constant key offset shifts every logit of a query equally, so the
    softmax ignores it and the parameter would never receive a gradient.
    """

    def __init__(self, channels: int, L: int = 1, generator: Optional[torch.Generator] = None,
                 final_bias: bool = True):
        super().__init__()
        if L < 0:
            raise ValueError(f"L must be >= 0, got {L}")
        self.pointwise = Conv(channels, channels, 1, bias=final_bias or L > 0, generator=generator)
        self.spatial = nn.ModuleList(Conv(channels, channels, 3, bias=final_bias or i < L - 1, generator=generator)
                                     for i in range(L))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        out = self.pointwise(f)
        for conv in self.spatial:
            out = conv(out)
        if out.shape != f.shape:
            raise ValueError(f"projection changed shape {tuple(f.shape)} -> {tuple(out.shape)}")
        return out


def project(f: torch.Tensor, stack: ProjectionStack) -> torch.Tensor:
    return stack(f)


class GateNetwork(nn.Module):
    """Position-wise fc(C -> hidden) -> ReLU -> fc(hidden -> 1)."""

    def __init__(self, channels: int, hidden: Optional[int] = None, generator: Optional[torch.Generator] = None):
        super().__init__()
        hidden = hidden or max(channels // 2, 4)
        self.fc1 = Dense(channels, hidden, generator=generator)
        self.fc2 = Dense(hidden, 1, generator=generator)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        h, w = q.shape[-2:]
        x = to_tokens(q)
        logits = self.fc2(nx.activation(self.fc1(x), "relu"))
        return from_tokens(logits, h, w)


def gate(q_proj: torch.Tensor, net: GateNetwork, lo: float = CLAMP_INTERVAL[0],
         hi: float = CLAMP_INTERVAL[1]) -> GateMaps:
    alpha = nx.activation(net(q_proj), "sigmoid")
    # a saturated sigmoid rounds to exactly 0 or 1; keep alpha inside the open interval
    fi = torch.finfo(alpha.dtype)
    alpha = alpha.clamp(fi.tiny, 1.0 - fi.eps / 2)
    return GateMaps(alpha, mask_process(1 - alpha, lo, hi))


def blend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, alpha: torch.Tensor,
          beta: torch.Tensor) -> torch.Tensor:
    """attn(q,k,v) * alpha + q * beta on [B,C,H,W] maps; alpha/beta broadcast over C."""
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"dense attention needs equal shapes, got {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    h, w = q.shape[-2:]
    attn = from_tokens(nx.scaled_dot_attention(to_tokens(q), to_tokens(k), to_tokens(v)), h, w)
    return attn * alpha + q * beta


class DenseCrossAttention(nn.Module):
    def __init__(self, channels: int, L: int = 1, clamp: Tuple[float, float] = CLAMP_INTERVAL,
                 gate_hidden: Optional[int] = None, generator: Optional[torch.Generator] = None):
        super().__init__()
        lo, hi = clamp
        if not lo < hi:
            raise ValueError(f"clamp interval must satisfy lo < hi, got {clamp}")
        self.clamp_lo, self.clamp_hi = float(lo), float(hi)
        self.L = L
        self.q_proj = ProjectionStack(channels, L, generator)
        self.k_proj = ProjectionStack(channels, L, generator, final_bias=False)
        self.v_proj = ProjectionStack(channels, L, generator)
        self.gate = GateNetwork(channels, gate_hidden, generator)

    def gates(self, f_b: torch.Tensor) -> GateMaps:
        return gate(self.q_proj(f_b), self.gate, self.clamp_lo, self.clamp_hi)

    def forward(self, f_b: torch.Tensor, f_r: torch.Tensor,
                gate_override: Optional[Tuple[float, float]] = None) -> torch.Tensor:
        """``gate_override=(alpha, beta)`` replaces the learned gate with constants (test hook)."""
        if f_b.shape != f_r.shape:
            raise ValueError(f"backbone {tuple(f_b.shape)} and reference {tuple(f_r.shape)} features differ in shape")
        q = self.q_proj(f_b)
        k = self.k_proj(f_r)
        v = self.v_proj(f_r)
        if gate_override is not None:
            shape = (q.shape[0], 1, *q.shape[2:])
            alpha = torch.full(shape, float(gate_override[0]), dtype=q.dtype)
            beta = torch.full(shape, float(gate_override[1]), dtype=q.dtype)
            return blend(q, k, v, alpha, beta)
        g = gate(q, self.gate, self.clamp_lo, self.clamp_hi)
        return blend(q, k, v, g.alpha, g.beta)


def dense_attention(f_b: torch.Tensor, f_r: torch.Tensor, params: DenseCrossAttention,
                    gate_override: Optional[Tuple[float, float]] = None) -> torch.Tensor:
    return params(f_b, f_r, gate_override)


class ReferenceCrossAttention(nn.Module):
    """Plain (ungated) cross-attention from backbone to reference features.

    Replaces the dense module in the ``no_dense_ca`` ablation arm.
    """

    def __init__(self, channels: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.q = Dense(channels, channels, bias=False, generator=generator)
        self.k = Dense(channels, channels, bias=False, generator=generator)
        self.v = Dense(channels, channels, bias=False, generator=generator)

    def forward(self, f_b: torch.Tensor, f_r: torch.Tensor) -> torch.Tensor:
        if f_b.shape != f_r.shape:
            raise ValueError(f"backbone {tuple(f_b.shape)} and reference {tuple(f_r.shape)} features differ in shape")
        h, w = f_b.shape[-2:]
        tb, tr = to_tokens(f_b), to_tokens(f_r)
        return from_tokens(nx.scaled_dot_attention(self.q(tb), self.k(tr), self.v(tr)), h, w)
