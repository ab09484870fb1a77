"""Geometry-editable encoder pieces: composite input assembly, input-layer
expansion by weight replication, the toy semantic encoder, and standard
cross-attention between backbone features and semantic tokens."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
from torch import nn

from . import numerics as nx
from .layers import Conv, from_tokens, to_tokens


def assemble_input(m_lat: torch.Tensor, f_bg: torch.Tensor, f_tgt_t: torch.Tensor) -> torch.Tensor:
    """Channel-concatenate ``[mask | background latent | noisy target latent]``."""
    if m_lat.dim() != 4 or f_bg.dim() != 4 or f_tgt_t.dim() != 4:
        raise ValueError("assemble_input expects [B,C,h,w] tensors")
    if m_lat.shape[1] != 1:
        raise ValueError(f"mask must have one channel, got {m_lat.shape[1]}")
    ref = f_tgt_t.shape
    for name, t in (("mask", m_lat), ("background", f_bg)):
        if t.shape[0] != ref[0] or t.shape[-2:] != ref[-2:]:
            raise ValueError(f"assemble_input: {name} shape {tuple(t.shape)} incompatible with {tuple(ref)}")
    return torch.cat([m_lat, f_bg, f_tgt_t], dim=1)


def cycle_mapping(cin: int, cin_new: int) -> list:
    return [i % cin for i in range(cin_new)]


def expand_input_layer(kernel_orig: torch.Tensor, bias: Optional[torch.Tensor], cin_new: int,
                       mapping: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Widen a conv kernel to ``cin_new`` input channels by copying columns.

    ``mapping[i]`` names the original channel copied into new channel ``i``;
    the first ``Cin`` entries must be the identity. The bias is untouched.
    """
    cout, cin = kernel_orig.shape[:2]
    if cin_new < cin:
        raise ValueError(f"cannot shrink input layer from {cin} to {cin_new} channels")
    if mapping is None:
        mapping = cycle_mapping(cin, cin_new)
    mapping = [int(m) for m in mapping]
    if len(mapping) != cin_new:
        raise ValueError(f"mapping has {len(mapping)} entries, expected {cin_new}")
    if any(m < 0 or m >= cin for m in mapping):
        raise ValueError(f"mapping index out of range [0, {cin}): {mapping}")
    if mapping[:cin] != list(range(cin)):
        raise ValueError("mapping must be the identity on the original channels")
    return kernel_orig[:, mapping].clone()


class SemanticEncoder(nn.Module):
    """Three stride-2 conv blocks followed by attention pooling into learned token slots."""

    def __init__(self, image_size: int = 64, channels: Sequence[int] = (32, 64, 64), n_tokens: int = 16,
                 d_sem: int = 64, generator: Optional[torch.Generator] = None):
        super().__init__()
        convs = []
        cin = 3
        for c in channels:
            convs.append(Conv(cin, c, 3, stride=2, generator=generator))
            cin = c
        self.convs = nn.ModuleList(convs)
        side = image_size
        for _ in channels:
            side = (side + 1) // 2
        self.n_tokens, self.d_sem = n_tokens, d_sem
        self.pos = nn.Parameter(0.02 * torch.randn(side * side, cin, generator=generator))
        self.queries = nn.Parameter(torch.randn(n_tokens, d_sem, generator=generator) / math.sqrt(d_sem))
        self.w_k = nn.Parameter(torch.randn(cin, d_sem, generator=generator) / math.sqrt(cin))
        self.w_v = nn.Parameter(torch.randn(cin, d_sem, generator=generator) / math.sqrt(cin))

    def forward(self, i_obj: torch.Tensor) -> torch.Tensor:
        h = i_obj
        for conv in self.convs:
            h = nx.activation(conv(h), "relu")
        feats = to_tokens(h) + self.pos
        k = nx.linear(feats, self.w_k)
        v = nx.linear(feats, self.w_v)
        q = self.queries.unsqueeze(0).expand(h.shape[0], -1, -1)
        return nx.scaled_dot_attention(q, k, v)


def semantic_encode(i_obj: torch.Tensor, params: SemanticEncoder) -> torch.Tensor:
    return params(i_obj)


class SemanticCrossAttention(nn.Module):
    """Backbone features attend to semantic tokens; output is added residually."""

    def __init__(self, channels: int, d_sem: int = 64, dim: Optional[int] = None,
                 generator: Optional[torch.Generator] = None, zero_out: bool = True):
        super().__init__()
        dim = dim or channels
        self.w_q = nn.Parameter(torch.randn(channels, dim, generator=generator) / math.sqrt(channels))
        self.w_k = nn.Parameter(torch.randn(d_sem, dim, generator=generator) / math.sqrt(d_sem))
        self.w_v = nn.Parameter(torch.randn(d_sem, dim, generator=generator) / math.sqrt(d_sem))
        init = torch.zeros(dim, channels) if zero_out else torch.randn(dim, channels, generator=generator) / math.sqrt(dim)
        self.w_out = nn.Parameter(init)

    def weights(self, f_b: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        self._check(f_b, tokens)
        q = nx.linear(to_tokens(f_b), self.w_q)
        k = nx.linear(tokens, self.w_k)
        return nx.attention_weights(q, k)

    def forward(self, f_b: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        self._check(f_b, tokens)
        h, w = f_b.shape[-2:]
        q = nx.linear(to_tokens(f_b), self.w_q)
        k = nx.linear(tokens, self.w_k)
        v = nx.linear(tokens, self.w_v)
        out = nx.linear(nx.scaled_dot_attention(q, k, v), self.w_out)
        return f_b + from_tokens(out, h, w)

    def _check(self, f_b: torch.Tensor, tokens: torch.Tensor) -> None:
        if f_b.dim() != 4 or f_b.shape[1] != self.w_q.shape[0]:
            raise ValueError(f"cross-attention expects {self.w_q.shape[0]} feature channels, got shape {tuple(f_b.shape)}")
        if tokens.dim() != 3 or tokens.shape[0] != f_b.shape[0] or tokens.shape[2] != self.w_k.shape[0]:
            raise ValueError(f"token shape {tuple(tokens.shape)} incompatible with features {tuple(f_b.shape)}")


def semantic_cross_attention(f_b: torch.Tensor, f_obj: torch.Tensor, p: SemanticCrossAttention) -> torch.Tensor:
    return p(f_b, f_obj)


def normalize_map(m: torch.Tensor) -> torch.Tensor:
    """Per-image min-max normalization of [B,h,w]; flat maps become all ones."""
    flat = m.flatten(1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / span.clamp_min(torch.finfo(m.dtype).tiny), torch.ones_like(flat))
    return out.view_as(m)


def attention_map(f_b: torch.Tensor, f_obj: torch.Tensor, p: SemanticCrossAttention) -> torch.Tensor:
    """Max-over-tokens attention weight per position, normalized to [0,1] per image."""
    h, w = f_b.shape[-2:]
    weights = p.weights(f_b, f_obj)
    return normalize_map(weights.amax(dim=-1).view(-1, h, w))
