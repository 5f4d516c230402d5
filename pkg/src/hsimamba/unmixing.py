"""Unmixing branch: embedding, positional gating, abundance and endmember models.

Feature maps are ``[D, H, W]`` tensors (the whole image is one batch).
"""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .vca import vca


def normalized_coords(H: int, W: int, dtype=torch.float64):
    """Return ``(x, y)`` grids in [0, 1]; x runs along columns, y along rows."""
    xs = torch.linspace(0.0, 1.0, W, dtype=dtype) if W > 1 else torch.zeros(1, dtype=dtype)
    ys = torch.linspace(0.0, 1.0, H, dtype=dtype) if H > 1 else torch.zeros(1, dtype=dtype)
    y, x = torch.meshgrid(ys, xs, indexing="ij")
    return x, y


def positional_code(H: int, W: int, flavor: str, dtype=torch.float64) -> torch.Tensor:
    """Three-channel coordinate code ``[3, H, W]`` for the ``um`` or ``cls`` branch."""
    x, y = normalized_coords(H, W, dtype)
    two_pi = 2 * math.pi
    if flavor == "um":
        chans = [x, y, (torch.sin(two_pi * x) + torch.cos(two_pi * y)) / 2]
    elif flavor == "cls":
        chans = [torch.sin(two_pi * x), torch.cos(two_pi * y), (x + y) / 2]
    else:
        raise ValueError(f"unknown positional flavor {flavor!r}")
    return torch.stack(chans)


def _conv(x: torch.Tensor, conv: nn.Conv2d) -> torch.Tensor:
    return conv(x.unsqueeze(0)).squeeze(0)


class PatchEmbed(nn.Module):
    """Per-pixel band mixing ``C -> D`` followed by channel LayerNorm."""

    def __init__(self, bands: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(bands, dim, kernel_size=1)
        self.norm = nn.LayerNorm(dim)

    def forward(self, cube: torch.Tensor) -> torch.Tensor:
        f = _conv(cube, self.proj)
        return self.norm(f.permute(1, 2, 0)).permute(2, 0, 1)


class PositionalGate(nn.Module):
    """``tanh(Q * K) * V + F`` with coordinate-aware queries.

    ``um`` flavor reduces the key over image rows and the value over image
    columns; ``cls`` flavor reduces both over channels. Reduced axes broadcast
    back in the elementwise product. ``enabled=False`` makes it a passthrough.
    """

    def __init__(self, dim: int, height: int, width: int, flavor: str, enabled: bool = True):
        super().__init__()
        if flavor not in ("um", "cls"):
            raise ValueError(f"unknown positional flavor {flavor!r}")
        self.flavor = flavor
        self.enabled = enabled
        self.query = nn.Conv2d(dim + 3, dim, kernel_size=1)
        if flavor == "um":
            self.key = nn.Linear(height, 1)
            self.value = nn.Linear(width, 1)
        else:
            self.key = nn.Conv2d(dim, 1, kernel_size=1)
            self.value = nn.Conv2d(dim, 1, kernel_size=1)
        self.register_buffer("pos", positional_code(height, width, flavor), persistent=False)

    def zero_(self) -> "PositionalGate":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if not self.enabled:
            return feat
        pos = self.pos.to(feat.dtype)
        q = _conv(torch.cat([feat, pos]), self.query)
        if self.flavor == "um":
            k = self.key(feat.transpose(1, 2)).transpose(1, 2)  # [D, 1, W]
            v = self.value(feat)                                 # [D, H, 1]
        else:
            k = _conv(feat, self.key)                            # [1, H, W]
            v = _conv(feat, self.value)
        return torch.tanh(q * k) * v + feat


def abundance_from_features(f_abu: torch.Tensor) -> torch.Tensor:
    """Per-pixel ``|f_p| / sum_q |f_q|``; all-zero pixels fall back to ``1/P``."""
    mag = f_abu.abs()
    total = mag.sum(dim=0, keepdim=True)
    P = f_abu.shape[0]
    uniform = torch.full_like(mag, 1.0 / P)
    safe = torch.where(total > 0, total, torch.ones_like(total))
    return torch.where(total > 0, mag / safe, uniform)


class AbundanceNet(nn.Module):
    """Three 1x1 convolutions ``D -> D -> D/2 -> P`` with BN+ReLU between them.

    BatchNorm always uses the statistics of the current image: the whole image
    is the batch at train and test time alike.
    """

    def __init__(self, dim: int, endmembers: int):
        super().__init__()
        hidden = max(1, dim // 2)
        self.layers = nn.Sequential(
            nn.Conv2d(dim, dim, 1),
            nn.BatchNorm2d(dim, track_running_stats=False),
            nn.ReLU(),
            nn.Conv2d(dim, hidden, 1),
            nn.BatchNorm2d(hidden, track_running_stats=False),
            nn.ReLU(),
            nn.Conv2d(hidden, endmembers, 1),
        )

    def forward(self, f_um: torch.Tensor):
        f_abu = self.layers(f_um.unsqueeze(0)).squeeze(0)
        return f_abu, abundance_from_features(f_abu)


class VariabilityNet(nn.Module):
    """Per-pixel variant weights ``w[P, R, H, W]``, softmax-normalized over R."""

    def __init__(self, endmembers: int, variants: int):
        super().__init__()
        self.P, self.R = endmembers, variants
        self.proj = nn.Conv2d(endmembers, endmembers * variants, 1)

    def forward(self, f_abu: torch.Tensor) -> torch.Tensor:
        _, H, W = f_abu.shape
        logits = _conv(f_abu, self.proj).reshape(self.P, self.R, H, W)
        return torch.softmax(logits, dim=1)


class EndmemberLibrary(nn.Module):
    """Spectral library ``S[P, R, C]``; all R variants start as copies of the VCA spectra."""

    def __init__(self, init: np.ndarray | torch.Tensor, variants: int, trainable: bool = True):
        super().__init__()
        init = torch.as_tensor(np.asarray(init), dtype=torch.float64)
        self.register_buffer("vca_init", init.clone())
        spectra = init[:, None, :].repeat(1, variants, 1)
        self.spectra = nn.Parameter(spectra, requires_grad=trainable)

    @classmethod
    def from_cube(cls, cube: np.ndarray, P: int, variants: int, seed: int = 0,
                  trainable: bool = True) -> "EndmemberLibrary":
        endmembers, _, _ = vca(np.asarray(cube).reshape(cube.shape[0], -1), P, seed=seed)
        return cls(endmembers, variants, trainable)

    @property
    def P(self) -> int:
        return self.spectra.shape[0]

    @property
    def R(self) -> int:
        return self.spectra.shape[1]

    def forward(self) -> torch.Tensor:
        # unconstrained while training, nonnegative when used
        return self.spectra.clamp(min=0.0)


def reconstruct(A: torch.Tensor, S: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """``H_hat[:, h, w] = sum_p A[p, h, w] sum_r w[p, r, h, w] S[p, r, :]``."""
    return torch.einsum("phw,prhw,prc->chw", A, w, S)


def sad(x, y) -> float:
    """Spectral angle (radians) between two spectra."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("spectral angle undefined for a zero-norm spectrum")
    return float(np.arccos(np.clip(x @ y / (nx * ny), -1.0, 1.0)))


def sad_matrix(est: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Pairwise angles between rows of ``est[P, C]`` and ``ref[Q, C]``."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    cos = (est @ ref.T) / np.outer(np.linalg.norm(est, axis=1), np.linalg.norm(ref, axis=1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


class _SafeArccos(torch.autograd.Function):
    # exact arccos forward; derivative bounded near |x| = 1
    @staticmethod
    def forward(ctx, x):
        x = x.clamp(-1.0, 1.0)
        ctx.save_for_backward(x)
        return torch.acos(x)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        return -g / torch.sqrt((1 - x * x).clamp(min=1e-12))


def sad_map(cube: torch.Tensor, recon: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Per-pixel spectral angle between two ``[C, H, W]`` cubes -> ``[H, W]``."""
    dot = (cube * recon).sum(0)
    norm = cube.norm(dim=0) * recon.norm(dim=0)
    return _SafeArccos.apply(dot / norm.clamp(min=eps))
