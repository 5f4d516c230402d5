"""Static PNG/CSV outputs: class maps, abundance planes, endmember spectra."""
from __future__ import annotations

import csv

import numpy as np
from PIL import Image

# index 0 is unlabeled; classes cycle through the remaining entries
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200),
    (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128),
    (128, 128, 128),
], dtype=np.uint8)


def colorize(classes: np.ndarray) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    idx = np.where(classes > 0, (classes - 1) % (len(PALETTE) - 1) + 1, 0)
    return PALETTE[idx]


def save_class_map(path, classes: np.ndarray) -> None:
    Image.fromarray(colorize(classes), mode="RGB").save(path)


def save_gray(path, plane: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> None:
    plane = np.asarray(plane, dtype=np.float64)
    lo = plane.min() if vmin is None else vmin
    hi = plane.max() if vmax is None else vmax
    scaled = np.zeros_like(plane) if hi <= lo else (np.clip(plane, lo, hi) - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


def save_abundance_pngs(directory, abundance: np.ndarray) -> list:
    paths = []
    for p, plane in enumerate(abundance):
        path = directory / f"abundance_{p:02d}.png"
        save_gray(path, plane, 0.0, 1.0)
        paths.append(path)
    return paths


def write_endmember_csv(path, spectra: np.ndarray) -> None:
    """Rows are the P*R variants (endmember-major), columns the bands."""
    P, R, C = spectra.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["endmember", "variant"] + [f"band_{c}" for c in range(C)])
        for p in range(P):
            for r in range(R):
                writer.writerow([p, r] + [repr(float(v)) for v in spectra[p, r]])


def plot_endmembers(path, spectra: np.ndarray, wavelengths=None, effective=None) -> None:
    """One panel per endmember: its R library variants and, if given, the
    spread of per-pixel effective spectra ``effective[P, N, C]``."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    P, R, C = spectra.shape
    x = np.arange(C) if wavelengths is None else np.asarray(wavelengths)
    fig, axes = plt.subplots(1, P, figsize=(3 * P, 2.6), squeeze=False)
    for p, ax in enumerate(axes[0]):
        if effective is not None:
            lo, hi = np.percentile(effective[p], [5, 95], axis=0)
            ax.fill_between(x, lo, hi, color="0.85", label="pixel 5-95%")
        for r in range(R):
            ax.plot(x, spectra[p, r], lw=1)
        ax.set_title(f"endmember {p}")
        ax.set_xlabel("nm" if wavelengths is not None else "band")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
