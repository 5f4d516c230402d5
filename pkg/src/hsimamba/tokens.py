"""Temporal abundance smoothing and abundance-guided Top-K token plans."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch


def default_gamma(epoch: int) -> float:
    return min(0.5, epoch / 100.0)


@dataclass(frozen=True)
class AbundanceState:
    """EMA of abundances across epochs plus the last blended map."""

    A_t: np.ndarray
    ema: np.ndarray
    temp: np.ndarray
    tau: float = 0.9
    gamma: float = 0.0
    epoch: int = 0

    @classmethod
    def initial(cls, A0: np.ndarray, tau: float = 0.9) -> "AbundanceState":
        A0 = np.asarray(A0, dtype=np.float64)
        return cls(A0, A0.copy(), A0.copy(), tau=tau, gamma=0.0, epoch=0)

    def blend(self, A_t: np.ndarray, gamma: float) -> np.ndarray:
        """Blend a fresh abundance map with the stored EMA."""
        return (1.0 - gamma) * np.asarray(A_t, dtype=np.float64) + gamma * self.ema


def update_temporal_abundance(state: AbundanceState, A_t: np.ndarray,
                              gamma: float | None = None) -> AbundanceState:
    """Advance one epoch: blend with the previous EMA, then update the EMA."""
    A_t = np.asarray(A_t, dtype=np.float64)
    if A_t.shape != state.ema.shape:
        raise ValueError(f"abundance shape {A_t.shape} does not match state {state.ema.shape}")
    epoch = state.epoch + 1
    g = default_gamma(epoch) if gamma is None else gamma
    temp = state.blend(A_t, g)
    ema = state.tau * state.ema + (1.0 - state.tau) * A_t
    return replace(state, A_t=A_t, ema=ema, temp=temp, gamma=g, epoch=epoch)


def token_budget(plane: np.ndarray, lam: float = 0.1, alpha: float = 0.3,
                 beta: float = 0.7) -> int:
    """Tokens allotted to one abundance plane.

    Truncates ``lam * H*W * (alpha*max + beta*mean)``; the product is rounded
    to 9 decimals first so that e.g. 440 is not truncated to 439 by binary
    representation error.
    """
    plane = np.asarray(plane, dtype=np.float64)
    hw = plane.size
    raw = lam * (hw * (alpha * plane.max() + beta * plane.mean()))
    return int(min(max(math.trunc(round(raw, 9)), 0), hw))


@dataclass
class TokenPlan:
    budgets: list[int]
    selected: list[np.ndarray]
    unselected: np.ndarray
    sparse_unselected: np.ndarray
    height: int
    width: int
    lam: float = 0.1
    alpha: float = 0.3
    beta: float = 0.7
    full: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def P(self) -> int:
        return len(self.selected)

    @property
    def sequences(self) -> list[np.ndarray]:
        """Index sequences for the P cluster blocks followed by the extra block."""
        return [*self.selected, self.sparse_unselected]

    @property
    def scanned_tokens(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def budget_bound(self) -> float:
        return self.lam * (self.alpha + self.beta) * self.height * self.width * self.P

    def to_jsonl(self) -> str:
        rows = [{"p": p, "K_p": int(len(idx)), "indices": [int(i) for i in idx]}
                for p, idx in enumerate(self.selected)]
        rows.append({"p": "unselected", "K_p": int(len(self.sparse_unselected)),
                     "indices": [int(i) for i in self.sparse_unselected]})
        return "\n".join(json.dumps(r) for r in rows) + "\n"

    def summary(self) -> dict:
        return {
            "budgets": [int(k) for k in self.budgets],
            "unselected": int(len(self.unselected)),
            "sparse_unselected": int(len(self.sparse_unselected)),
            "scanned_tokens": self.scanned_tokens,
            "pixels": self.height * self.width,
            "full": self.full,
        }


def top_k_indices(plane: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the ``k`` largest values, descending; ties by ascending index."""
    order = np.argsort(-np.asarray(plane, dtype=np.float64).ravel(), kind="stable")
    return order[:k].astype(np.int64)


def sparse_subsample(indices: np.ndarray, limit: int) -> np.ndarray:
    """Uniform-stride subset of at most ``limit`` indices."""
    if len(indices) <= limit:
        return indices
    if limit <= 0:
        return indices[:0]
    step = math.ceil(len(indices) / limit)
    return indices[::step]


def select_tokens(A_temp: np.ndarray, budgets, lam: float = 0.1, alpha: float = 0.3,
                  beta: float = 0.7) -> TokenPlan:
    A_temp = np.asarray(A_temp, dtype=np.float64)
    P, H, W = A_temp.shape
    selected = [top_k_indices(A_temp[p], int(k)) for p, k in zip(range(P), budgets)]
    covered = np.zeros(H * W, dtype=bool)
    for idx in selected:
        covered[idx] = True
    unselected = np.flatnonzero(~covered).astype(np.int64)
    limit = math.trunc(round(lam * H * W, 9))
    return TokenPlan([int(k) for k in budgets], selected, unselected,
                     sparse_subsample(unselected, limit), H, W, lam, alpha, beta)


def plan_tokens(A_temp: np.ndarray, lam: float = 0.1, alpha: float = 0.3,
                beta: float = 0.7, topk: bool = True) -> TokenPlan:
    """Budget and select tokens for every cluster.

    With ``topk=False`` every one of the P+1 blocks receives all pixels in
    raster order.
    """
    A_temp = np.asarray(A_temp, dtype=np.float64)
    P, H, W = A_temp.shape
    if not topk:
        everything = np.arange(H * W, dtype=np.int64)
        return TokenPlan([H * W] * P, [everything] * P, np.empty(0, dtype=np.int64),
                         everything, H, W, lam, alpha, beta, full=True)
    budgets = [token_budget(A_temp[p], lam, alpha, beta) for p in range(P)]
    return select_tokens(A_temp, budgets, lam, alpha, beta)


def gather_tokens(feat: torch.Tensor, indices: np.ndarray) -> torch.Tensor:
    """``[D, H, W]`` feature -> ``[K, D]`` tokens in the given order."""
    D = feat.shape[0]
    idx = torch.as_tensor(indices, dtype=torch.long)
    return feat.reshape(D, -1).index_select(1, idx).T


def scatter_back(outputs, base: torch.Tensor) -> torch.Tensor:
    """Residual scatter: ``base + mean of all sequence outputs written to each pixel``.

    ``outputs`` is an iterable of ``(indices, tokens[K, D])``. Pixels no
    sequence wrote to keep their base value.
    """
    D, H, W = base.shape
    acc = torch.zeros(D, H * W, dtype=base.dtype)
    count = torch.zeros(H * W, dtype=base.dtype)
    for indices, tokens in outputs:
        if len(indices) == 0:
            continue
        idx = torch.as_tensor(indices, dtype=torch.long)
        acc = acc.index_add(1, idx, tokens.T)
        count = count.index_add(0, idx, torch.ones(len(idx), dtype=base.dtype))
    mean = acc / count.clamp(min=1.0)
    return base + mean.reshape(D, H, W)
