"""Selective state-space layers and the abundance-specific spatial/spectral blocks."""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from . import scan as _scan
from .tokens import TokenPlan, gather_tokens, scatter_back


class ConfigError(ValueError):
    pass


class SelectiveScan(nn.Module):
    """Diagonal selective SSM over ``[N, L, d]`` sequences.

    Step size, input and output matrices are computed per token from the input;
    the state matrix is ``-exp(A_log)`` so every discretized transition
    ``exp(delta * a)`` lies in (0, 1).
    """

    def __init__(self, d: int, state: int = 16, dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.d, self.state = d, state
        self.dt_proj = nn.Linear(d, d)
        self.B_proj = nn.Linear(d, state, bias=False)
        self.C_proj = nn.Linear(d, state, bias=False)
        self.A_log = nn.Parameter(torch.log(torch.arange(1, state + 1, dtype=torch.float64)).repeat(d, 1))
        self.skip = nn.Parameter(torch.ones(d, dtype=torch.float64))
        with torch.no_grad():
            dt = torch.exp(torch.rand(d) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
            self.dt_proj.weight.mul_(0.1)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def discretize(self, x: torch.Tensor):
        """Per-token ``(delta, B, C)`` for input ``x[N, L, d]``."""
        return F.softplus(self.dt_proj(x)), self.B_proj(x), self.C_proj(x)

    def forward(self, x: torch.Tensor, backend: str | None = None) -> torch.Tensor:
        delta, B, C = self.discretize(x)
        return _scan.scan(x, delta, self.A, B, C, backend) + self.skip * x


def selective_scan(tokens: torch.Tensor, params: SelectiveScan) -> torch.Tensor:
    """Scan a single ``[L, d]`` sequence."""
    return params(tokens.unsqueeze(0)).squeeze(0)


class MambaLayer(nn.Module):
    """Norm, gated input projection, selective scan, output projection.

    ``groups == 1`` scans along the token axis (spatial mode). ``groups = G``
    splits each token's channels into G groups of ``width / G`` and scans
    along the group axis, one sequence per token (spectral mode).
    """

    def __init__(self, width: int, state: int = 16, groups: int = 1):
        super().__init__()
        if width % groups:
            raise ConfigError(f"feature width {width} is not divisible by group count {groups}")
        self.width, self.groups = width, groups
        self.norm = nn.LayerNorm(width)
        self.in_proj = nn.Linear(width, 2 * width)
        self.ssm = SelectiveScan(width // groups, state)
        self.out_proj = nn.Linear(width, width)

    def zero_output_(self) -> "MambaLayer":
        with torch.no_grad():
            self.out_proj.weight.zero_()
            self.out_proj.bias.zero_()
        return self

    def to_sequences(self, u: torch.Tensor) -> torch.Tensor:
        if self.groups == 1:
            return u.unsqueeze(0)                                      # [1, K, D]
        return u.reshape(u.shape[0], self.groups, self.width // self.groups)  # [K, G, J]

    def from_sequences(self, seq: torch.Tensor) -> torch.Tensor:
        if self.groups == 1:
            return seq.squeeze(0)
        return seq.reshape(seq.shape[0], self.width)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        u, z = self.in_proj(self.norm(tokens)).chunk(2, dim=-1)
        y = self.from_sequences(self.ssm(self.to_sequences(F.silu(u))))
        return self.out_proj(y * F.silu(z))


class _ClusterBlock(nn.Module):
    groups = 1

    def __init__(self, dim: int, endmembers: int, state: int = 16):
        super().__init__()
        self.layers = nn.ModuleList(
            MambaLayer(dim, state, self.groups) for _ in range(endmembers + 1)
        )

    def zero_output_(self):
        for layer in self.layers:
            layer.zero_output_()
        return self

    def forward(self, feat: torch.Tensor, plan: TokenPlan) -> torch.Tensor:
        sequences = plan.sequences
        if len(sequences) != len(self.layers):
            raise ConfigError(f"plan has {len(sequences)} sequences, block has {len(self.layers)} layers")
        outputs = []
        for layer, idx in zip(self.layers, sequences):
            if len(idx) == 0:
                continue
            outputs.append((idx, layer(gather_tokens(feat, idx))))
        return scatter_back(outputs, feat)


class SpatialMambaBlock(_ClusterBlock):
    """P cluster-specific scans plus one for unselected pixels, scattered back residually."""


class SpectralMambaBlock(_ClusterBlock):
    """Same token plan as the spatial block; each token is scanned as G channel groups."""

    def __init__(self, dim: int, endmembers: int, state: int = 16, groups: int = 4):
        if dim % groups:
            raise ConfigError(f"feature width {dim} is not divisible by G={groups}")
        self.groups = groups
        super().__init__(dim, endmembers, state)


def group_tokens(tokens: torch.Tensor, groups: int = 4) -> torch.Tensor:
    """``[K, D] -> [K, G, D/G]``."""
    K, D = tokens.shape
    if D % groups:
        raise ConfigError(f"feature width {D} is not divisible by G={groups}")
    return tokens.reshape(K, groups, D // groups)


def ungroup_tokens(grouped: torch.Tensor) -> torch.Tensor:
    return grouped.reshape(grouped.shape[0], -1)


class ClassifierHead(nn.Module):
    """Sum-and-project fusion of both branches, concat abundances, 1x1 to logits."""

    def __init__(self, dim: int, endmembers: int, num_classes: int):
        super().__init__()
        self.fuse = nn.Conv2d(dim, dim, 1)
        self.logits = nn.Conv2d(dim + endmembers, num_classes, 1)

    def forward(self, f_spa: torch.Tensor, f_spe: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
        fused = self.fuse((f_spa + f_spe).unsqueeze(0))
        return self.logits(torch.cat([fused, A.unsqueeze(0)], dim=1)).squeeze(0)
