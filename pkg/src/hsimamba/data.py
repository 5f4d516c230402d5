"""Hyperspectral data model, synthetic mixtures, ENVI ingestion and label splits."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from . import io


@dataclass(frozen=True)
class HsiCube:
    """Dense cube ``values[C, H, W]`` with optional band centres in nm."""

    values: np.ndarray
    wavelengths: Optional[np.ndarray] = None

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"cube must be [C, H, W], got shape {v.shape}")
        c, h, w = v.shape
        if c < 2 or h < 2 or w < 2:
            raise ValueError(f"cube needs C >= 2 and H, W >= 2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cube contains non-finite values")
        if self.wavelengths is not None and len(self.wavelengths) != c:
            raise ValueError("wavelength list length does not match band count")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def pixels(self) -> np.ndarray:
        """Spectra as a ``[C, H*W]`` matrix (raster order)."""
        return self.values.reshape(self.bands, -1)


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        masks = (self.train_mask, self.val_mask, self.test_mask)
        for m in masks:
            if m.shape != self.labels.shape:
                raise ValueError("mask shape does not match label shape")
            if np.any(m & (self.labels <= 0)):
                raise ValueError("split masks must only cover labeled pixels")
        if np.any((self.train_mask & self.val_mask) | (self.train_mask & self.test_mask)
                  | (self.val_mask & self.test_mask)):
            raise ValueError("split masks overlap")

    @property
    def num_classes(self) -> int:
        return int(self.labels.max())

    def mask(self, split: str) -> np.ndarray:
        try:
            return {"train": self.train_mask, "val": self.val_mask, "test": self.test_mask}[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}") from None


@dataclass(frozen=True)
class SyntheticGroundTruth:
    true_endmembers: np.ndarray  # [P, C]
    true_abundance: np.ndarray   # [P, H, W]
    snr_db: float
    noise: np.ndarray = field(repr=False)  # [C, H, W]

    def labels(self) -> np.ndarray:
        """Class map 1..P from the dominant endmember at each pixel."""
        return np.argmax(self.true_abundance, axis=0).astype(np.int64) + 1


def _smooth_spectra(p: int, c: int, rng: np.random.Generator) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, c)
    out = np.empty((p, c))
    for k in range(p):
        for _ in range(100):
            s = rng.uniform(0.1, 0.3) + rng.uniform(-0.2, 0.2) * grid
            for _ in range(3):
                centre = rng.uniform(0.0, 1.0)
                width = rng.uniform(0.05, 0.25)
                s = s + rng.uniform(-0.3, 0.6) * np.exp(-0.5 * ((grid - centre) / width) ** 2)
            s = np.clip(s, 0.02, None)
            s = 0.05 + 0.9 * s / s.max()
            cos = out[:k] @ s / (np.linalg.norm(out[:k], axis=1) * np.linalg.norm(s))
            if k == 0 or np.arccos(np.clip(cos, -1, 1)).min() > 0.1:
                break
        out[k] = s
    return out


def _smooth_abundance(p: int, h: int, w: int, rng: np.random.Generator,
                      pure_pixels: bool) -> np.ndarray:
    cell = max(2, round(min(h, w) / 8))
    gh, gw = -(-h // cell), -(-w // cell)
    coarse = rng.dirichlet(np.full(p, 0.3), size=(gh, gw))  # [gh, gw, P]
    fine = np.repeat(np.repeat(coarse, cell, axis=0), cell, axis=1)[:h, :w]
    fine = np.moveaxis(fine, -1, 0)
    fine = ndimage.uniform_filter(fine, size=(1, 3, 3), mode="reflect")
    fine = np.clip(fine, 0.0, None)
    if pure_pixels:
        taken = set()
        for k in range(p):
            order = np.argsort(-fine[k], axis=None, kind="stable")
            idx = next(int(i) for i in order if int(i) not in taken)
            taken.add(idx)
            r, c = divmod(idx, w)
            fine[:, r, c] = 0.0
            fine[k, r, c] = 1.0
    return fine / fine.sum(axis=0, keepdims=True)


def generate_synthetic_cube(P: int, C: int, H: int, W: int, snr_db: float = math.inf,
                            seed: int = 0, pure_pixels: bool = True
                            ) -> tuple[HsiCube, SyntheticGroundTruth]:
    """Draw a linear mixture ``S^T A + N`` with spatially coherent abundances.

    Abundances are blocky Dirichlet fields smoothed with a 3x3 box filter, so
    every pixel stays on the simplex. With ``pure_pixels`` one pixel per
    endmember is forced pure. Noise is white Gaussian at ``snr_db`` relative to
    the mean signal power; ``math.inf`` gives a noiseless cube.
    """
    if P < 2:
        raise ValueError(f"need at least 2 endmembers, got P={P}")
    if C <= P:
        raise ValueError(f"need more bands than endmembers, got C={C}, P={P}")
    if H < 2 or W < 2:
        raise ValueError(f"spatial size must be at least 2x2, got {H}x{W}")
    if P > H * W:
        raise ValueError("more endmembers than pixels")
    if not snr_db > 0:
        raise ValueError(f"SNR must be positive, got {snr_db}")

    rng = np.random.default_rng(seed)
    endmembers = _smooth_spectra(P, C, rng)
    abundance = _smooth_abundance(P, H, W, rng, pure_pixels)
    clean = np.einsum("pc,phw->chw", endmembers, abundance)
    if math.isinf(snr_db):
        noise = np.zeros_like(clean)
    else:
        sigma = math.sqrt(np.mean(clean ** 2) / 10 ** (snr_db / 10))
        noise = rng.normal(0.0, sigma, size=clean.shape)
    cube = HsiCube(clean + noise, wavelengths=np.linspace(400.0, 2500.0, C))
    return cube, SyntheticGroundTruth(endmembers, abundance, float(snr_db), noise)


def measured_snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return float(10 * np.log10(np.mean(signal ** 2) / np.mean(noise ** 2)))


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Band-wise min-max scaling to [0, 1]; a constant band maps to zeros."""
    values = np.asarray(values, dtype=np.float64)
    lo = values.min(axis=(1, 2), keepdims=True)
    span = values.max(axis=(1, 2), keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (values - lo) / safe, 0.0)


def load_envi(header_path, data_path=None) -> HsiCube:
    raw, header = io.read_envi(header_path, data_path)
    wl = header.get("wavelength")
    wavelengths = np.array([float(v) for v in wl]) if isinstance(wl, list) else None
    return HsiCube(minmax_normalize(raw), wavelengths=wavelengths)


def _frac_count(frac: float, count: int) -> int:
    # rounding first keeps e.g. 0.01 * 300 from ceiling to 4
    return math.ceil(round(frac * count, 9))


def stratified_split(labels: np.ndarray, train_frac: float, val_frac: float,
                     seed: int = 0, num_classes: Optional[int] = None) -> LabelMap:
    """Per-class random split: ``ceil(frac * count)`` train pixels (at least one),
    then ``ceil(val_frac * count)`` validation pixels, the rest test."""
    if not (0 < train_frac and 0 < val_frac and train_frac + val_frac < 1):
        raise ValueError("need 0 < train_frac, val_frac and train_frac + val_frac < 1")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    flat = labels.ravel()
    train = np.zeros(flat.shape, dtype=bool)
    val = np.zeros(flat.shape, dtype=bool)
    test = np.zeros(flat.shape, dtype=bool)
    n_cls = num_classes if num_classes is not None else int(flat.max(initial=0))
    for cls in range(1, n_cls + 1):
        idx = np.flatnonzero(flat == cls)
        if idx.size == 0:
            warnings.warn(f"class {cls} has no labeled pixels; skipped", stacklevel=2)
            continue
        idx = rng.permutation(idx)
        n_train = max(1, _frac_count(train_frac, idx.size))
        n_val = min(_frac_count(val_frac, idx.size), idx.size - n_train)
        train[idx[:n_train]] = True
        val[idx[n_train:n_train + n_val]] = True
        test[idx[n_train + n_val:]] = True
    shape = labels.shape
    return LabelMap(labels, train.reshape(shape), val.reshape(shape), test.reshape(shape))
