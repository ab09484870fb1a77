"""The full denoiser: toy latent transform, reference network, and a small
U-Net with semantic cross-attention in every block and gated dense
cross-attention in the decoder blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .dense_attn import DenseCrossAttention, ReferenceCrossAttention
from .encoder import SemanticCrossAttention, SemanticEncoder, assemble_input, cycle_mapping, expand_input_layer
from .layers import Conv, Dense, GroupNorm
from .schedule import NoiseSchedule, cfg_combine, sampler_step, sampling_timesteps

ARMS = ("full", "no_dense_ca", "dense_ca_both_stages", "random_input_weights", "no_layout_concat")

# parameter groups (see DgadModel.param_groups)
GROUPS = ("input_conv", "time_embed", "backbone", "semantic_ca", "dense_ca", "ref_net", "semantic_encoder")
DEFAULT_FREEZE = ("input_conv", "time_embed", "backbone", "ref_net", "semantic_encoder")

# --- toy latent transform ---------------------------------------------------

PATCH = 4
LATENT_CHANNELS = 4
LATENT_SCALE = 0.5


def _latent_basis() -> np.ndarray:
    """Orthonormal [4, 48] basis over 4x4 RGB patches (pixel_unshuffle order)."""
    basis = np.zeros((LATENT_CHANNELS, 3 * PATCH * PATCH))
    for c in range(3):
        basis[c, c * 16:(c + 1) * 16] = 1.0 / 4.0
    cols = np.tile(np.arange(PATCH), PATCH)
    sign = np.where(cols < PATCH // 2, 1.0, -1.0)
    basis[3] = np.tile(sign, 3) / math.sqrt(48.0)
    return basis


LATENT_BASIS = _latent_basis()


def latent_encode(img: torch.Tensor) -> torch.Tensor:
    """[B,3,H,W] -> [B,4,H/4,W/4]: space-to-depth, then a frozen orthonormal projection."""
    if img.dim() != 4 or img.shape[1] != 3:
        raise ValueError(f"latent_encode expects [B,3,H,W], got {tuple(img.shape)}")
    if img.shape[-1] % PATCH or img.shape[-2] % PATCH:
        raise ValueError(f"image size {tuple(img.shape[-2:])} not divisible by {PATCH}")
    patches = F.pixel_unshuffle(img, PATCH)
    proj = torch.as_tensor(LATENT_BASIS, dtype=img.dtype)
    return LATENT_SCALE * torch.einsum("kc,bchw->bkhw", proj, patches)


def latent_decode(z: torch.Tensor) -> torch.Tensor:
    if z.dim() != 4 or z.shape[1] != LATENT_CHANNELS:
        raise ValueError(f"latent_decode expects [B,{LATENT_CHANNELS},h,w], got {tuple(z.shape)}")
    proj = torch.as_tensor(LATENT_BASIS, dtype=z.dtype)
    patches = torch.einsum("kc,bkhw->bchw", proj, z / LATENT_SCALE)
    return F.pixel_shuffle(patches, PATCH)


def box_mask(boxes: Sequence[Tuple[int, int, int, int]], size: int, dtype=torch.float32) -> torch.Tensor:
    """[B,1,size,size] with ones inside each (x0,y0,x1,y1) box."""
    m = torch.zeros(len(boxes), 1, size, size, dtype=dtype)
    for i, (x0, y0, x1, y1) in enumerate(boxes):
        m[i, 0, y0:y1, x0:x1] = 1
    return m


def latent_mask(mask: torch.Tensor, latent_size: int) -> torch.Tensor:
    return nx.bicubic_downsample(mask, (latent_size, latent_size)).clamp(0, 1)


# --- configuration ----------------------------------------------------------

@dataclass
class ModelConfig:
    image_size: int = 64
    channels: Tuple[int, ...] = (64, 128, 256)
    res_units: int = 2
    time_dim: int = 128
    n_tokens: int = 16
    d_sem: int = 64
    sem_channels: Tuple[int, ...] = (32, 64, 64)
    dense_L: int = 1
    clamp_lo: float = 0.5
    clamp_hi: float = 0.8

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.sem_channels = tuple(int(c) for c in self.sem_channels)
        if self.image_size % PATCH:
            raise ValueError(f"image_size must be divisible by {PATCH}")
        if not self.clamp_lo < self.clamp_hi:
            raise ValueError("clamp_lo must be < clamp_hi")
        if len(self.channels) < 1 or self.res_units < 1:
            raise ValueError("need at least one level and one residual unit")

    @property
    def latent_size(self) -> int:
        return self.image_size // PATCH

    def level_sizes(self) -> List[int]:
        sizes = [self.latent_size]
        for _ in self.channels[1:]:
            sizes.append((sizes[-1] + 1) // 2)
        return sizes

    def reference_shapes(self) -> List[Tuple[int, int, int]]:
        """(C, h, w) of each decoder level, deepest first."""
        return [(c, s, s) for c, s in zip(reversed(self.channels), reversed(self.level_sizes()))]


# --- building blocks ---------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResUnit(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: Optional[int], generator=None):
        super().__init__()
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv(cin, cout, 3, generator=generator)
        self.temb = Dense(tdim, cout, generator=generator) if tdim else None
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv(cout, cout, 3, generator=generator)
        self.skip = Conv(cin, cout, 1, generator=generator) if cin != cout else None

    def forward(self, x: torch.Tensor, temb: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.conv1(nx.activation(self.norm1(x), "silu"))
        if self.temb is not None:
            h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(nx.activation(self.norm2(h), "silu"))
        return (x if self.skip is None else self.skip(x)) + h


class Block(nn.Module):
    """Residual units, then semantic cross-attention, then (optionally) reference attention."""

    def __init__(self, cin: int, cout: int, cfg: ModelConfig, ref_kind: Optional[str], generator=None):
        super().__init__()
        self.res = nn.ModuleList(
            ResUnit(cin if i == 0 else cout, cout, cfg.time_dim, generator) for i in range(cfg.res_units))
        self.cross_attn = SemanticCrossAttention(cout, cfg.d_sem, generator=generator)
        self.ref_kind = ref_kind
        if ref_kind == "dense":
            self.ref_attn = DenseCrossAttention(cout, cfg.dense_L, (cfg.clamp_lo, cfg.clamp_hi), generator=generator)
        elif ref_kind == "standard":
            self.ref_attn = ReferenceCrossAttention(cout, generator)
        elif ref_kind is not None:
            raise ValueError(f"unknown reference attention kind {ref_kind!r}")
        if ref_kind is not None:
            self.ref_out = Conv(cout, cout, 1, generator=generator).zero_()

    def forward(self, h, temb, tokens, f_r=None):
        for unit in self.res:
            h = unit(h, temb)
        h = self.cross_attn(h, tokens)
        if self.ref_kind is not None:
            h = h + self.ref_out(self.ref_attn(h, f_r))
        return h


class ReferenceNet(nn.Module):
    """Conv encoder-decoder over the object latent; emits one map per decoder level."""

    def __init__(self, cfg: ModelConfig, generator=None):
        super().__init__()
        ch = cfg.channels
        self.conv_in = Conv(LATENT_CHANNELS, ch[0], 3, generator=generator)
        self.enc = nn.ModuleList(ResUnit(c, c, None, generator) for c in ch)
        self.down = nn.ModuleList(Conv(ch[i], ch[i + 1], 3, stride=2, generator=generator) for i in range(len(ch) - 1))
        self.head = Conv(ch[-1], ch[-1], 1, generator=generator)
        self.up = nn.ModuleList(Conv(ch[i + 1], ch[i], 3, generator=generator) for i in range(len(ch) - 1))
        self.dec = nn.ModuleList(ResUnit(2 * ch[i], ch[i], None, generator) for i in range(len(ch) - 1))

    def forward(self, z_obj: torch.Tensor) -> List[torch.Tensor]:
        h = self.conv_in(z_obj)
        skips = []
        for i, unit in enumerate(self.enc):
            h = unit(h)
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)
        outs = [self.head(h)]
        for i in reversed(range(len(self.dec))):
            h = _upsample(self.up[i], h, skips[i].shape[-2:])
            h = self.dec[i](torch.cat([h, skips[i]], dim=1))
            outs.append(h)
        return outs


def _upsample(conv: Conv, h: torch.Tensor, size) -> torch.Tensor:
    return conv(F.interpolate(h, size=tuple(size), mode="nearest"))


@dataclass
class ConditioningBundle:
    m_lat: torch.Tensor
    f_bg: torch.Tensor
    f_obj: torch.Tensor
    f_r: List[torch.Tensor]

    @property
    def batch(self) -> int:
        return self.m_lat.shape[0]

    def unconditional(self) -> "ConditioningBundle":
        """Drop semantic tokens and reference features, keep the layout."""
        return ConditioningBundle(self.m_lat, self.f_bg, torch.zeros_like(self.f_obj),
                                  [torch.zeros_like(f) for f in self.f_r])

    def drop(self, keep: torch.Tensor) -> "ConditioningBundle":
        """Zero the appearance conditions of samples where ``keep`` is 0."""
        k = keep.to(self.f_obj.dtype)
        return ConditioningBundle(self.m_lat, self.f_bg, self.f_obj * k[:, None, None],
                                  [f * k[:, None, None, None] for f in self.f_r])

    def cat(self, other: "ConditioningBundle") -> "ConditioningBundle":
        return ConditioningBundle(torch.cat([self.m_lat, other.m_lat]), torch.cat([self.f_bg, other.f_bg]),
                                  torch.cat([self.f_obj, other.f_obj]),
                                  [torch.cat([a, b]) for a, b in zip(self.f_r, other.f_r)])


class DgadModel(nn.Module):
    def __init__(self, cfg: Optional[ModelConfig] = None, arm: str = "full", seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        if arm not in ARMS:
            raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
        self.cfg, self.arm = cfg, arm
        g = torch.Generator().manual_seed(seed)
        ch = cfg.channels
        n = len(ch)

        self.semantic = SemanticEncoder(cfg.image_size, cfg.sem_channels, cfg.n_tokens, cfg.d_sem, g)
        self.reference = ReferenceNet(cfg, g)
        self.time_mlp = nn.ModuleList([Dense(cfg.time_dim, cfg.time_dim, generator=g),
                                       Dense(cfg.time_dim, cfg.time_dim, generator=g)])

        # the "original" layer sees the noisy latent only; it is widened for the layout inputs
        original = Conv(LATENT_CHANNELS, ch[0], 3, generator=g)
        self.in_channels = 2 * LATENT_CHANNELS + (0 if arm == "no_layout_concat" else 1)
        self.input_conv = Conv(self.in_channels, ch[0], 3, generator=g)
        with torch.no_grad():
            if arm == "random_input_weights":
                self.input_conv.weight[:, :LATENT_CHANNELS] = original.weight
            else:
                mapping = cycle_mapping(LATENT_CHANNELS, self.in_channels)
                self.input_conv.weight.copy_(expand_input_layer(original.weight, original.bias,
                                                                self.in_channels, mapping))
            self.input_conv.bias.copy_(original.bias)

        dec_kind = {"no_dense_ca": "standard"}.get(arm, "dense")
        enc_kind = "dense" if arm == "dense_ca_both_stages" else None
        self.down_blocks = nn.ModuleList(
            Block(ch[max(i - 1, 0)] if i else ch[0], ch[i], cfg, enc_kind, g) for i in range(n))
        self.downsamples = nn.ModuleList(Conv(ch[i], ch[i], 3, stride=2, generator=g) for i in range(n - 1))
        self.mid = Block(ch[-1], ch[-1], cfg, None, g)
        self.up_blocks = nn.ModuleList(Block(2 * ch[i], ch[i], cfg, dec_kind, g) for i in reversed(range(n)))
        self.upsamples = nn.ModuleList(Conv(ch[i], ch[i - 1], 3, generator=g) for i in reversed(range(1, n)))
        self.out_norm = GroupNorm(ch[0])
        self.out_conv = Conv(ch[0], LATENT_CHANNELS, 3, generator=g)

    # -- conditioning ---------------------------------------------------------

    def condition(self, i_obj: torch.Tensor, i_bg: torch.Tensor, mask: torch.Tensor) -> ConditioningBundle:
        """Build the conditioning bundle from images in [-1,1] and an image-size box mask."""
        for name, img in (("object", i_obj), ("background", i_bg)):
            if img.shape[1:] != (3, self.cfg.image_size, self.cfg.image_size):
                raise ValueError(f"{name} image shape {tuple(img.shape)} does not match config")
        m_lat = latent_mask(mask, self.cfg.latent_size)
        return ConditioningBundle(m_lat, latent_encode(i_bg), self.semantic(i_obj), self.reference_forward(i_obj))

    def reference_forward(self, i_obj: torch.Tensor) -> List[torch.Tensor]:
        return self.reference(latent_encode(i_obj))

    # -- denoiser ---------------------------------------------------------------

    def time_embed(self, t: torch.Tensor) -> torch.Tensor:
        e = timestep_embedding(t, self.cfg.time_dim).to(self.out_conv.weight.dtype)
        return self.time_mlp[1](nx.activation(self.time_mlp[0](e), "silu"))

    def model_input(self, x_t: torch.Tensor, c: ConditioningBundle) -> torch.Tensor:
        if self.arm == "no_layout_concat":
            return torch.cat([c.f_bg * (1 - c.m_lat), x_t], dim=1)
        return assemble_input(c.m_lat, c.f_bg, x_t)

    def forward(self, x_t: torch.Tensor, t, c: ConditioningBundle) -> torch.Tensor:
        if isinstance(t, int) or (isinstance(t, torch.Tensor) and t.dim() == 0):
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        self._check_bundle(x_t, c)
        temb = self.time_embed(t)
        n = len(self.cfg.channels)
        f_r = c.f_r  # deepest first
        h = self.input_conv(self.model_input(x_t, c))
        skips = []
        for i, blk in enumerate(self.down_blocks):
            h = blk(h, temb, c.f_obj, f_r[n - 1 - i])
            skips.append(h)
            if i < n - 1:
                h = self.downsamples[i](h)
        h = self.mid(h, temb, c.f_obj)
        for j, blk in enumerate(self.up_blocks):
            i = n - 1 - j
            h = blk(torch.cat([h, skips[i]], dim=1), temb, c.f_obj, f_r[j])
            if j < n - 1:
                h = _upsample(self.upsamples[j], h, skips[i - 1].shape[-2:])
        return self.out_conv(nx.activation(self.out_norm(h), "silu"))

    def _check_bundle(self, x_t: torch.Tensor, c: ConditioningBundle) -> None:
        s = self.cfg.latent_size
        if x_t.shape[1:] != (LATENT_CHANNELS, s, s):
            raise ValueError(f"noisy latent shape {tuple(x_t.shape)} != (B,{LATENT_CHANNELS},{s},{s})")
        if c.batch != x_t.shape[0]:
            raise ValueError(f"conditioning batch {c.batch} != latent batch {x_t.shape[0]}")
        if c.m_lat.shape[1:] != (1, s, s) or c.f_bg.shape[1:] != (LATENT_CHANNELS, s, s):
            raise ValueError("mask/background latent shapes do not match the config")
        if c.f_obj.shape[1:] != (self.cfg.n_tokens, self.cfg.d_sem):
            raise ValueError(f"semantic tokens shape {tuple(c.f_obj.shape)} does not match the config")
        expected = self.cfg.reference_shapes()
        if len(c.f_r) != len(expected):
            raise ValueError(f"expected {len(expected)} reference maps, got {len(c.f_r)}")
        for f, shp in zip(c.f_r, expected):
            if f.shape[1:] != shp:
                raise ValueError(f"reference feature shape {tuple(f.shape)} != (B,{shp[0]},{shp[1]},{shp[2]})")

    # -- introspection ----------------------------------------------------------

    def param_group(self, name: str) -> str:
        if name.startswith("semantic."):
            return "semantic_encoder"
        if name.startswith("reference."):
            return "ref_net"
        if name.startswith("input_conv."):
            return "input_conv"
        if name.startswith("time_mlp.") or ".temb." in name:
            return "time_embed"
        if ".cross_attn." in name:
            return "semantic_ca"
        if ".ref_attn." in name or ".ref_out." in name:
            return "dense_ca"
        return "backbone"

    def param_groups(self) -> Dict[str, List[str]]:
        groups: Dict[str, List[str]] = {g: [] for g in GROUPS}
        for name, _ in self.named_parameters():
            groups[self.param_group(name)].append(name)
        return groups

    def dense_modules(self) -> Dict[str, DenseCrossAttention]:
        return {n: m for n, m in self.named_modules() if isinstance(m, DenseCrossAttention)}

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def predict_noise(f_tgt_t: torch.Tensor, t, c: ConditioningBundle, model: DgadModel) -> torch.Tensor:
    return model(f_tgt_t, t, c)


@torch.no_grad()
def compose(i_obj: torch.Tensor, i_bg: torch.Tensor, mask: torch.Tensor, model: DgadModel,
            schedule: NoiseSchedule, steps: int = 50, cfg_scale: float = 7.5, seed: int = 0,
            mode: str = "ddim") -> torch.Tensor:
    """Sample composites for a batch; pixels outside ``mask`` are copied from ``i_bg``."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dtype = model.out_conv.weight.dtype
    i_obj, i_bg, mask = i_obj.to(dtype), i_bg.to(dtype), mask.to(dtype)
    cond = model.condition(i_obj, i_bg, mask)
    both = cond.cat(cond.unconditional())
    s = model.cfg.latent_size
    rng = torch.Generator().manual_seed(seed)
    x = torch.randn(i_obj.shape[0], LATENT_CHANNELS, s, s, generator=rng, dtype=dtype)
    ts = sampling_timesteps(schedule.T, steps)
    B = x.shape[0]
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else -1
        if cfg_scale == 1:
            eps = model(x, t, cond)
        else:
            out = model(torch.cat([x, x]), t, both)
            eps = cfg_combine(out[B:], out[:B], cfg_scale)
        x = sampler_step(x, eps, t, schedule, mode, rng, t_prev)
    img = latent_decode(x).clamp(-1, 1)
    return mask * img + (1 - mask) * i_bg
