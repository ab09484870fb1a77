"""Finite-difference checks for every trainable block on tiny 8x8-image configs."""
from __future__ import annotations

import time
from typing import Callable, Dict, List, Tuple

import torch

from . import numerics as nx
from .dense_attn import DenseCrossAttention
from .encoder import SemanticCrossAttention, SemanticEncoder
from .model import Block, DgadModel, ModelConfig, ReferenceNet, ResUnit, box_mask, latent_encode

f64 = torch.float64

TINY = ModelConfig(image_size=8, channels=(8, 16), res_units=1, time_dim=8, n_tokens=2, d_sem=4,
                   sem_channels=(4, 4, 4), dense_L=1)


def _randn(g, *shape):
    return torch.randn(*shape, generator=g, dtype=f64)


def _unzero(module: torch.nn.Module, g: torch.Generator, scale: float = 0.3) -> None:
    """Zero-initialized output projections hide every upstream gradient; give them random values."""
    with torch.no_grad():
        for p in module.parameters():
            if p.numel() > 1 and not p.any():
                p.copy_(scale * _randn(g, *p.shape))


def _keep_gates_interior(module: torch.nn.Module) -> None:
    # push 1 - alpha toward ~0.65, away from both clamp edges
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, DenseCrossAttention):
                m.gate.fc2.weight.mul_(0.1)
                m.gate.fc2.bias.fill_(0.6)


def _weighted(out: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (out * w).sum()


def _cases(seed: int) -> List[Tuple[str, Callable[[], torch.Tensor], Dict[str, torch.Tensor]]]:
    g = torch.Generator().manual_seed(seed)
    cases = []

    sca = SemanticCrossAttention(8, 4, generator=g, zero_out=False).double()
    f_b, tok = _randn(g, 2, 8, 2, 2), _randn(g, 2, 3, 4)
    w = _randn(g, 2, 8, 2, 2)
    cases.append(("semantic_cross_attention", lambda: _weighted(sca(f_b, tok), w),
                  {**nx.module_params(sca), "f_b": f_b, "tokens": tok}))

    dca = DenseCrossAttention(8, L=1, generator=g).double()
    _keep_gates_interior(dca)
    fb2, fr2, w2 = _randn(g, 2, 8, 2, 2), _randn(g, 2, 8, 2, 2), _randn(g, 2, 8, 2, 2)
    cases.append(("dense_cross_attention", lambda: _weighted(dca(fb2, fr2), w2),
                  {**nx.module_params(dca), "f_b": fb2, "f_r": fr2}))

    res = ResUnit(8, 16, 8, generator=g).double()
    x3, t3, w3 = _randn(g, 2, 8, 2, 2), _randn(g, 2, 8), _randn(g, 2, 16, 2, 2)
    cases.append(("unet_res_unit", lambda: _weighted(res(x3, t3), w3), {**nx.module_params(res), "x": x3}))

    blk = Block(8, 8, TINY, "dense", generator=g).double()
    _unzero(blk, g)
    _keep_gates_interior(blk)
    x4, t4, tok4, r4, w4 = _randn(g, 2, 8, 2, 2), _randn(g, 2, 8), _randn(g, 2, 2, 4), _randn(g, 2, 8, 2, 2), \
        _randn(g, 2, 8, 2, 2)
    cases.append(("unet_decoder_block", lambda: _weighted(blk(x4, t4, tok4, r4), w4), nx.module_params(blk)))

    ref = ReferenceNet(TINY, generator=g).double()
    z = _randn(g, 2, 4, 2, 2)
    wr = [_randn(g, 2, *s) for s in TINY.reference_shapes()]
    cases.append(("reference_net", lambda: sum(_weighted(o, wi) for o, wi in zip(ref(z), wr)),
                  nx.module_params(ref)))

    enc = SemanticEncoder(8, TINY.sem_channels, TINY.n_tokens, TINY.d_sem, generator=g).double()
    img = torch.rand(2, 3, 8, 8, generator=g, dtype=f64) * 2 - 1
    we = _randn(g, 2, TINY.n_tokens, TINY.d_sem)
    cases.append(("semantic_encoder", lambda: _weighted(enc(img), we), nx.module_params(enc)))

    # whole tiny denoiser, checked group by group
    model = DgadModel(TINY, "full", seed=seed).double()
    _unzero(model, g)
    _keep_gates_interior(model)
    obj = torch.rand(2, 3, 8, 8, generator=g, dtype=f64) * 2 - 1
    bg = torch.rand(2, 3, 8, 8, generator=g, dtype=f64) * 2 - 1
    mask = box_mask([(1, 1, 7, 6), (0, 2, 5, 8)], 8, f64)
    x_t = latent_encode(torch.rand(2, 3, 8, 8, generator=g, dtype=f64) * 2 - 1)
    t = torch.tensor([3, 71])
    wm = _randn(g, *x_t.shape)

    def denoiser():
        return _weighted(model(x_t, t, model.condition(obj, bg, mask)), wm)

    params = dict(model.named_parameters())
    for group in ("input_conv", "backbone", "time_embed"):
        names = model.param_groups()[group]
        cases.append((f"unet_{group}", denoiser, {n: params[n] for n in names}))
    return cases


def gradient_suite(tol: float = 1e-4, eps: float = 1e-5, seed: int = 0,
                   max_entries: int = 12) -> List[nx.GradCheckReport]:
    """Run grad_check over every trainable block; returns one report per block."""
    reports = []
    for name, fn, params in _cases(seed):
        for p in params.values():
            p.requires_grad_(True)
        t0 = time.perf_counter()
        rep = nx.grad_check(fn, params, eps=eps, tol=tol, op_name=name, max_entries=max_entries, seed=seed)
        rep.seconds = time.perf_counter() - t0
        reports.append(rep)
    return reports
