"""The joint unmixing / classification network."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from . import io
from .mamba import ClassifierHead, ConfigError, SpatialMambaBlock, SpectralMambaBlock
from .tokens import AbundanceState, TokenPlan, default_gamma, plan_tokens, update_temporal_abundance
from .unmixing import (AbundanceNet, EndmemberLibrary, PatchEmbed, PositionalGate,
                       VariabilityNet, reconstruct)
from .vca import vca

ABLATIONS = ("no_pos_um", "no_pos_cls", "no_topk", "no_variability")


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    height: int
    width: int
    num_classes: int
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
        if self.endmembers < 1:
            raise ConfigError("need at least one endmember")
        if self.endmembers > self.bands:
            raise ConfigError(f"P={self.endmembers} exceeds band count C={self.bands}")
        if self.dim % self.groups:
            raise ConfigError(f"D={self.dim} is not divisible by G={self.groups}")
        if self.variants < 1:
            raise ConfigError("need at least one variant per endmember")

    @property
    def effective_variants(self) -> int:
        return 1 if self.no_variability else self.variants

    @property
    def flags(self) -> dict:
        return {name: getattr(self, name) for name in ABLATIONS}


@dataclass
class ModelOutput:
    logits: torch.Tensor      # [classes, H, W]
    abundance: torch.Tensor   # [P, H, W]
    f_abu: torch.Tensor       # [P, H, W]
    weights: torch.Tensor     # [P, R, H, W]
    spectra: torch.Tensor     # [P, R, C], clamped
    recon: torch.Tensor       # [C, H, W]
    plan: Optional[TokenPlan] = None
    A_temp: Optional[np.ndarray] = None


class UnmixingMamba(nn.Module):
    """Patch embedding feeding an unmixing branch and an abundance-guided
    spatial-spectral Mamba classification branch."""

    def __init__(self, config: ModelConfig, endmember_init: np.ndarray):
        super().__init__()
        self.config = config
        c = config
        R = c.effective_variants
        self.patch_embed = PatchEmbed(c.bands, c.dim)
        self.pos_um = PositionalGate(c.dim, c.height, c.width, "um", enabled=not c.no_pos_um)
        self.pos_cls = PositionalGate(c.dim, c.height, c.width, "cls", enabled=not c.no_pos_cls)
        self.abundance_net = AbundanceNet(c.dim, c.endmembers)
        self.variability = VariabilityNet(c.endmembers, R)
        self.endmembers = EndmemberLibrary(endmember_init, R, trainable=not c.freeze_endmembers)
        self.spatial = SpatialMambaBlock(c.dim, c.endmembers, c.state)
        self.spectral = SpectralMambaBlock(c.dim, c.endmembers, c.state, c.groups)
        self.head = ClassifierHead(c.dim, c.endmembers, c.num_classes)
        self.double()
        self.abundance_state: Optional[AbundanceState] = None
        self.last_plan: Optional[TokenPlan] = None

    @classmethod
    def from_cube(cls, cube: np.ndarray, config: ModelConfig, seed: int = 0) -> "UnmixingMamba":
        """Build with the endmember library initialized by VCA on ``cube[C, H, W]``."""
        torch.manual_seed(seed)
        init, _, _ = vca(np.asarray(cube).reshape(cube.shape[0], -1), config.endmembers, seed=seed)
        return cls(config, init)

    # parameter groups trained at different learning rates
    def classification_parameters(self):
        for mod in (self.patch_embed, self.pos_cls, self.spatial, self.spectral, self.head):
            yield from mod.parameters()

    def unmixing_parameters(self):
        for mod in (self.pos_um, self.abundance_net, self.variability, self.endmembers):
            yield from (p for p in mod.parameters() if p.requires_grad)

    def unmix(self, cube: torch.Tensor, feat: Optional[torch.Tensor] = None):
        if feat is None:
            feat = self.patch_embed(cube)
        f_abu, A = self.abundance_net(self.pos_um(feat))
        w = self.variability(f_abu)
        S = self.endmembers()
        return f_abu, A, w, S, reconstruct(A, S, w)

    def temporal_abundance(self, A: torch.Tensor) -> np.ndarray:
        A_np = A.detach().cpu().numpy().astype(np.float64)
        state = self.abundance_state
        if state is None:
            return A_np
        return state.blend(A_np, default_gamma(state.epoch + 1))

    def advance_abundance(self, A: torch.Tensor) -> AbundanceState:
        """Fold this epoch's abundance into the EMA buffer."""
        A_np = A.detach().cpu().numpy().astype(np.float64)
        if self.abundance_state is None:
            self.abundance_state = AbundanceState.initial(A_np, self.config.tau)
        else:
            self.abundance_state = update_temporal_abundance(self.abundance_state, A_np)
        return self.abundance_state

    def plan(self, A_temp: np.ndarray) -> TokenPlan:
        c = self.config
        plan = plan_tokens(A_temp, c.lam, c.alpha, c.beta, topk=not c.no_topk)
        if not plan.full and sum(plan.budgets) > plan.budget_bound() + 1e-9:
            raise RuntimeError(f"token budgets {plan.budgets} exceed bound {plan.budget_bound()}")
        return plan

    def forward(self, cube: torch.Tensor) -> ModelOutput:
        feat = self.patch_embed(cube)
        f_abu, A, w, S, recon = self.unmix(cube, feat)
        A_temp = self.temporal_abundance(A)
        plan = self.plan(A_temp)
        self.last_plan = plan
        f_cls = self.pos_cls(feat)
        f_spa = self.spatial(f_cls, plan)
        f_spe = self.spectral(f_cls, plan)
        logits = self.head(f_spa, f_spe, A)
        return ModelOutput(logits, A, f_abu, w, S, recon, plan, A_temp)


def apply_ablation(model: UnmixingMamba, **flags) -> UnmixingMamba:
    """Return a model with the given ablation switches, sharing trained weights.

    Without any change to the switches the same model object comes back.
    """
    unknown = set(flags) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation flags: {sorted(unknown)}")
    config = replace(model.config, **flags)
    if config == model.config:
        return model
    new = UnmixingMamba(config, model.endmembers.vca_init.numpy())
    target = new.state_dict()
    for name, value in model.state_dict().items():
        if name not in target:
            continue
        if name == "endmembers.spectra" and value.shape != target[name].shape:
            value = value[:, : target[name].shape[1]]
        if value.shape == target[name].shape:
            target[name] = value.clone()
    new.load_state_dict(target)
    new.abundance_state = model.abundance_state
    return new


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(model: UnmixingMamba, directory, extra: Optional[dict] = None) -> Path:
    """One array-container file per tensor plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, value in model.state_dict().items():
        fname = f"{name}.hsa"
        io.write_array(directory / fname, value.detach().cpu().numpy())
        tensors[name] = {"file": fname, "shape": list(value.shape)}
    state = model.abundance_state
    abundance = None
    if state is not None:
        io.write_array(directory / "abundance_ema.hsa", state.ema)
        abundance = {"file": "abundance_ema.hsa", "epoch": state.epoch, "tau": state.tau}
    manifest = {
        "config": asdict(model.config),
        "hyperparameters": {
            "D": model.config.dim, "P": model.config.endmembers,
            "R": model.config.effective_variants, "G": model.config.groups,
            "s": model.config.state,
        },
        "tensors": tensors,
        "abundance_state": abundance,
        "extra": extra or {},
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(directory) -> tuple[UnmixingMamba, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in manifest["config"].items() if k in known})
    state = {name: torch.from_numpy(io.read_array(directory / meta["file"]))
             for name, meta in manifest["tensors"].items()}
    model = UnmixingMamba(config, state["endmembers.vca_init"].numpy())
    model.load_state_dict(state)
    ab = manifest.get("abundance_state")
    if ab:
        ema = io.read_array(directory / ab["file"])
        model.abundance_state = AbundanceState(ema, ema, ema, tau=ab["tau"], epoch=ab["epoch"])
    return model, manifest
