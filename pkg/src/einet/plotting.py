"""Figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .diagnostics import PANEL_NAMES, FeaturePanels  # noqa: E402

PANEL_TITLES = {
    "rgb_image": "RGB image",
    "thermal_image": "thermal image",
    "rgb_feature": "RGB feature",
    "denoised_feature": "RGB feature after erasure",
}


def write_pgm(array: np.ndarray, path) -> None:
    """8-bit binary PGM, scaled so the array max maps to 255."""
    a = np.asarray(array, dtype=np.float64)
    hi = a.max() if a.size else 0.0
    scaled = np.zeros_like(a) if hi <= 0 else np.clip(a / hi, 0, 1)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), "L").save(path, format="PPM")


def save_loss_curves(histories: Mapping[str, Sequence[tuple[int, float]]], path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, hist in histories.items():
        if hist:
            e, l = zip(*hist)
            ax.plot(e, l, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    if histories:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_bars(variants: Sequence[str], ap50: Sequence[float], ap: Sequence[float], path,
                       errors: Sequence[float] | None = None) -> None:
    x = np.arange(len(variants))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(variants)), 3.2))
    ax.bar(x - 0.2, [100 * v for v in ap50], 0.4, yerr=None if errors is None else [100 * e for e in errors],
           label="AP50", capsize=3)
    ax.bar(x + 0.2, [100 * v for v in ap], 0.4, label="AP")
    ax.set_xticks(x, variants, rotation=20, fontsize=8)
    ax.set_ylabel("%")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_feature_panels(panels: FeaturePanels, out_dir) -> list[Path]:
    """One PGM per panel plus a side-by-side PNG. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    for ax, name in zip(axes, PANEL_NAMES):
        p = out / f"{name}.pgm"
        write_pgm(panels[name], p)
        written.append(p)
        ax.imshow(panels[name], cmap="gray" if name.endswith("image") else "viridis")
        ax.set_title(PANEL_TITLES[name], fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    png = out / "panels.png"
    fig.savefig(png, dpi=120)
    plt.close(fig)
    written.append(png)
    return written
