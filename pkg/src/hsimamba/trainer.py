"""Multi-task objective, optimization schedule, metrics and evaluation."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .data import LabelMap, SyntheticGroundTruth
from .model import ABLATIONS, ModelConfig, UnmixingMamba
from .unmixing import sad_map, sad_matrix

log = logging.getLogger(__name__)

CE_WEIGHT = 1.0
SAD_WEIGHT = 0.01
SPARSITY_WEIGHT = 0.001
SPARSITY_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss ({value}) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr_cls: float = 1e-3
    lr_um: float = 5e-4
    decay: float = 0.9
    decay_every: int = 50
    epochs: int = 500
    seed: int = 0
    train_frac: float = 0.01
    val_frac: float = 0.01
    endmembers: int = 4
    variants: int = 4
    dim: int = 32
    groups: int = 4
    state: int = 16
    lam: float = 0.1
    alpha: float = 0.3
    beta: float = 0.7
    tau: float = 0.9
    freeze_endmembers: bool = False
    no_pos_um: bool = False
    no_pos_cls: bool = False
    no_topk: bool = False
    no_variability: bool = False

    def __post_init__(self):
        if self.lr_cls < 0 or self.lr_um < 0:
            raise ValueError("learning rates must be nonnegative")
        if not 0 < self.decay <= 1 or self.decay_every < 1:
            raise ValueError("decay must lie in (0, 1] with a positive period")
        if self.epochs < 0:
            raise ValueError("epoch count must be nonnegative")

    def model_config(self, bands: int, height: int, width: int, num_classes: int) -> ModelConfig:
        shared = {f.name for f in fields(ModelConfig)} & {f.name for f in fields(TrainConfig)}
        return ModelConfig(bands=bands, height=height, width=width, num_classes=num_classes,
                           **{k: getattr(self, k) for k in shared})

    @property
    def ablations(self) -> list[str]:
        return [name for name in ABLATIONS if getattr(self, name)]


def learning_rate(base: float, epoch: int, decay: float = 0.9, every: int = 50) -> float:
    return base * decay ** (epoch // every)


@dataclass
class LossBundle:
    ce: torch.Tensor
    sad_recon: torch.Tensor
    sparsity: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {"total": self.total.item(), "ce": self.ce.item(),
                "sad_recon": self.sad_recon.item(), "sparsity": self.sparsity.item()}


def sparsity_penalty(A: torch.Tensor) -> torch.Tensor:
    """``sum |a + eps|^(1/2)`` over all entries, divided by the pixel count."""
    H, W = A.shape[-2:]
    return torch.sqrt((A + SPARSITY_EPS).abs()).sum() / (H * W)


def compute_loss(logits: Optional[torch.Tensor], labels, mask, cube: torch.Tensor,
                 recon: torch.Tensor, A: torch.Tensor) -> LossBundle:
    """Cross-entropy on masked pixels + 0.01 SAD reconstruction + 0.001 L1/2 sparsity.

    ``logits=None`` drops the classification term (unmixing-only training).
    """
    sad_recon = sad_map(cube, recon).mean()
    sparsity = sparsity_penalty(A)
    if logits is None:
        ce = torch.zeros((), dtype=cube.dtype)
    else:
        mask = torch.as_tensor(np.asarray(mask), dtype=torch.bool)
        if not mask.any():
            raise ValueError("cross-entropy mask selects no pixels")
        target = torch.as_tensor(np.asarray(labels), dtype=torch.long)[mask] - 1
        ce = F.cross_entropy(logits[:, mask].T, target)
    total = CE_WEIGHT * ce + SAD_WEIGHT * sad_recon + SPARSITY_WEIGHT * sparsity
    return LossBundle(ce, sad_recon, sparsity, total)


# -- metrics -----------------------------------------------------------------

@dataclass
class MetricsReport:
    confusion: np.ndarray
    oa: float
    aa: float
    kappa: float
    per_class: list
    total: int
    abundance_rmse: Optional[float] = None
    endmember_sad: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "OA": self.oa, "AA": self.aa, "Kappa": self.kappa,
            "per_class_accuracy": self.per_class,
            "confusion": self.confusion.tolist(),
            "total_pixels": self.total,
        }
        if self.abundance_rmse is not None:
            out["abundance_rmse"] = self.abundance_rmse
            out["endmember_sad"] = self.endmember_sad
        out.update(self.extra)
        return out


def confusion_matrix(true: np.ndarray, pred: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are reference classes 1..n, columns predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true) - 1, np.asarray(pred) - 1), 1)
    return cm


def classification_metrics(true, pred, num_classes: int) -> MetricsReport:
    cm = confusion_matrix(true, pred, num_classes)
    total = int(cm.sum())
    if total == 0:
        return MetricsReport(cm, float("nan"), float("nan"), float("nan"), [], 0)
    oa = np.trace(cm) / total
    support = cm.sum(axis=1)
    per_class = [float(cm[i, i] / support[i]) if support[i] else None for i in range(num_classes)]
    aa = float(np.mean([a for a in per_class if a is not None]))
    pe = float((cm.sum(axis=0) * support).sum()) / total ** 2
    kappa = 1.0 if pe == 1 and oa == 1 else (0.0 if pe == 1 else (oa - pe) / (1 - pe))
    return MetricsReport(cm, float(oa), aa, float(kappa), per_class, total)


def match_endmembers(est: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hungarian matching on the SAD matrix; returns ``(order, angles)`` with
    ``est[order[i]]`` matched to ``ref[i]``."""
    cost = sad_matrix(est, ref)
    rows, cols = linear_sum_assignment(cost)
    order = np.empty(ref.shape[0], dtype=np.int64)
    order[cols] = rows
    return order, cost[order, np.arange(ref.shape[0])]


def unmixing_metrics(est_endmembers: np.ndarray, est_abundance: np.ndarray,
                     gt: SyntheticGroundTruth) -> tuple[float, float]:
    """``(mean matched SAD, abundance RMSE)`` against synthetic ground truth."""
    order, angles = match_endmembers(est_endmembers, gt.true_endmembers)
    rmse = float(np.sqrt(np.mean((est_abundance[order] - gt.true_abundance) ** 2)))
    return float(np.mean(angles)), rmse


# -- training ------------------------------------------------------------------

def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


def build_model(cube: np.ndarray, num_classes: int, config: TrainConfig) -> UnmixingMamba:
    C, H, W = cube.shape
    _seed_everything(config.seed)
    return UnmixingMamba.from_cube(cube, config.model_config(C, H, W, num_classes), config.seed)


HISTORY_FIELDS = ["epoch", "lr_cls", "lr_um", "total", "ce", "sad_recon", "sparsity",
                  "val_oa", "val_aa", "val_kappa", "scanned_tokens"]


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    history: list


def train(model: UnmixingMamba, cube: np.ndarray, labels: LabelMap, config: TrainConfig,
          log_every: int = 0) -> TrainResult:
    """Full-image training, one optimizer step per epoch.

    The parameters with the best validation OA (measured on the forward pass
    of each epoch, before its update) are loaded back into ``model`` at the end.
    """
    _seed_everything(config.seed)
    x = torch.from_numpy(np.ascontiguousarray(cube, dtype=np.float64))
    cls_params = list(model.classification_parameters())
    um_params = list(model.unmixing_parameters())
    opt = torch.optim.Adam([
        {"params": cls_params, "lr": config.lr_cls},
        {"params": um_params, "lr": config.lr_um},
    ])
    bases = (config.lr_cls, config.lr_um)
    best = {"oa": -1.0, "epoch": -1, "state": _snapshot(model)}
    history = []
    val_mask = labels.val_mask
    n_cls = labels.num_classes
    for epoch in range(config.epochs):
        for group, base in zip(opt.param_groups, bases):
            group["lr"] = learning_rate(base, epoch, config.decay, config.decay_every)
        model.train()
        out = model(x)
        loss = compute_loss(out.logits, labels.labels, labels.train_mask, x, out.recon, out.abundance)
        if not torch.isfinite(loss.total):
            raise TrainingDiverged(epoch, loss.total.item())

        row = {"epoch": epoch, "lr_cls": opt.param_groups[0]["lr"], "lr_um": opt.param_groups[1]["lr"]}
        row.update(loss.as_floats())
        if val_mask.any():
            pred = out.logits.detach().argmax(0).numpy() + 1
            rep = classification_metrics(labels.labels[val_mask], pred[val_mask], n_cls)
            row.update(val_oa=rep.oa, val_aa=rep.aa, val_kappa=rep.kappa)
            if rep.oa >= best["oa"]:
                best = {"oa": rep.oa, "epoch": epoch, "state": _snapshot(model)}
        else:
            row.update(val_oa=float("nan"), val_aa=float("nan"), val_kappa=float("nan"))
            best = {"oa": -1.0, "epoch": epoch, "state": _snapshot(model)}
        row["scanned_tokens"] = out.plan.scanned_tokens
        history.append(row)

        opt.zero_grad()
        loss.total.backward()
        opt.step()
        model.advance_abundance(out.abundance)
        if log_every and epoch % log_every == 0:
            log.info("epoch %d total %.5f ce %.5f val_oa %.4f", epoch, row["total"], row["ce"], row["val_oa"])

    if config.epochs:
        _restore(model, best["state"])
    return TrainResult(best["state"], best["epoch"], history)


def _snapshot(model: UnmixingMamba) -> dict:
    return {"params": copy.deepcopy(model.state_dict()), "abundance_state": model.abundance_state}


def _restore(model: UnmixingMamba, snap: dict) -> None:
    model.load_state_dict(snap["params"])
    model.abundance_state = snap["abundance_state"]


def train_unmixing(model: UnmixingMamba, cube: np.ndarray, epochs: int, lr: float = 5e-4,
                   decay: float = 0.9, decay_every: int = 50, seed: int = 0) -> list:
    """Optimize only the embedding and unmixing branch on SAD + sparsity."""
    _seed_everything(seed)
    x = torch.from_numpy(np.ascontiguousarray(cube, dtype=np.float64))
    params = list(model.patch_embed.parameters()) + list(model.unmixing_parameters())
    opt = torch.optim.Adam(params, lr=lr)
    history = []
    for epoch in range(epochs):
        opt.param_groups[0]["lr"] = learning_rate(lr, epoch, decay, decay_every)
        model.train()
        _, A, _, _, recon = model.unmix(x)
        loss = compute_loss(None, None, None, x, recon, A)
        if not torch.isfinite(loss.total):
            raise TrainingDiverged(epoch, loss.total.item())
        history.append({"epoch": epoch, "lr_um": opt.param_groups[0]["lr"], **loss.as_floats()})
        opt.zero_grad()
        loss.total.backward()
        opt.step()
    return history


@torch.no_grad()
def predict(model: UnmixingMamba, cube: np.ndarray):
    model.eval()
    return model(torch.from_numpy(np.ascontiguousarray(cube, dtype=np.float64)))


def evaluate(model: UnmixingMamba, cube: np.ndarray, labels: LabelMap, split: str = "test",
             gt: Optional[SyntheticGroundTruth] = None) -> MetricsReport:
    out = predict(model, cube)
    pred = out.logits.argmax(0).numpy() + 1
    mask = labels.mask(split)
    rep = classification_metrics(labels.labels[mask], pred[mask], model.config.num_classes)
    if gt is not None:
        est = out.spectra.mean(dim=1).numpy()
        rep.endmember_sad, rep.abundance_rmse = unmixing_metrics(est, out.abundance.numpy(), gt)
    rep.extra["token_plan"] = out.plan.summary()
    return rep


def write_history(path, history: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]) if history else HISTORY_FIELDS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
