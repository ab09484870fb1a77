"""Thin parameter-holding modules over the ops in :mod:`dgad.numerics`."""
from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from . import numerics as nx


def _uniform_(t: torch.Tensor, bound: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    with torch.no_grad():
        return t.uniform_(-bound, bound, generator=generator)


class Conv(nn.Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, bias: bool = True,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(cout, cin, k, k))
        self.bias = nn.Parameter(torch.empty(cout)) if bias else None
        bound = 1.0 / math.sqrt(cin * k * k)
        _uniform_(self.weight, math.sqrt(3.0) * bound, generator)
        if self.bias is not None:
            _uniform_(self.bias, bound, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.conv2d(x, self.weight, self.bias, stride=self.stride)

    def zero_(self) -> "Conv":
        with torch.no_grad():
            self.weight.zero_()
            if self.bias is not None:
                self.bias.zero_()
        return self


class Dense(nn.Module):
    """Affine layer with weight stored [Din, Dout]."""

    def __init__(self, din: int, dout: int, bias: bool = True, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(din, dout))
        self.bias = nn.Parameter(torch.empty(dout)) if bias else None
        bound = 1.0 / math.sqrt(din)
        _uniform_(self.weight, math.sqrt(3.0) * bound, generator)
        if self.bias is not None:
            _uniform_(self.bias, bound, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.linear(x, self.weight, self.bias)


class GroupNorm(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.groups = nx.norm_groups(channels)
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nx.group_norm(x, self.groups, self.weight, self.bias)


def to_tokens(f: torch.Tensor) -> torch.Tensor:
    """[B,C,H,W] -> [B,HW,C]"""
    return f.flatten(2).transpose(1, 2)


def from_tokens(x: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """[B,HW,C] -> [B,C,H,W]"""
    return x.transpose(1, 2).reshape(x.shape[0], x.shape[2], h, w)
