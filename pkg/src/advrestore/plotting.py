"""Matplotlib figures for experiment reports (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import luminance  # noqa: E402

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _series(table, attack: str, eps: str) -> Dict[str, List[tuple]]:
    out: Dict[str, List[tuple]] = {}
    for r in table.rows:
        if r.status != "ok":
            continue
        label = f"{r.architecture}/{r.defense}"
        if r.attack == "none":
            out.setdefault(label, []).append((0, r.psnr))
        elif r.attack == attack and r.epsilon == eps:
            out.setdefault(label, []).append((r.iterations, r.psnr))
    return {k: sorted(v) for k, v in out.items() if len(v) > 1}


def plot_psnr_vs_iterations(table, path) -> Path:
    """One panel per (attack, epsilon): mean PSNR against attack iterations (0 = clean)."""
    combos = sorted({(r.attack, r.epsilon) for r in table.rows if r.attack != "none"})
    fig, axes = plt.subplots(1, max(len(combos), 1), figsize=(5 * max(len(combos), 1), 4), squeeze=False)
    for ax, (attack, eps) in zip(axes[0], combos):
        series = _series(table, attack, eps)
        for label, pts in series.items():
            its, vals = zip(*pts)
            ax.plot(its, vals, marker="o", linestyle="--" if label.endswith("/adv") else "-", label=label)
        ax.set_title(f"{attack}, eps={eps}")
        ax.set_xlabel("attack iterations")
        ax.set_ylabel("mean PSNR (dB)")
        ax.grid(alpha=0.3)
        if series:
            ax.legend(fontsize=7)
    if not combos:
        axes[0][0].text(0.5, 0.5, "no attack cells", ha="center", va="center")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_spectral_scores(table, path) -> Path:
    """Grouped bars of the spectral artifact scores per table row."""
    rows = [r for r in table.rows if r.status == "ok"]
    names = ("hf_energy_ratio", "grid_peak_score", "color_mixing_score")
    fig, axes = plt.subplots(len(names), 1, figsize=(max(6, 0.35 * len(rows)), 9), squeeze=False)
    labels = [r.key if r.attack != "none" else f"{r.architecture}__{r.defense}__clean" for r in rows]
    xs = np.arange(len(rows))
    for ax, name in zip(axes[:, 0], names):
        vals = [getattr(r, name) for r in rows]
        colors = ["tab:gray" if r.attack == "none" else "tab:red" for r in rows]
        ax.bar(xs, vals, color=colors)
        ax.set_ylabel(name, fontsize=8)
        ax.set_xticks(xs)
        ax.set_xticklabels(labels if ax is axes[-1, 0] else [], rotation=90, fontsize=6)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_spectra(images: Dict[str, np.ndarray], path) -> Path:
    """Centred log-magnitude luminance spectra, one panel per named C x H x W image."""
    fig, axes = plt.subplots(1, len(images), figsize=(3 * len(images), 3), squeeze=False)
    for ax, (name, img) in zip(axes[0], images.items()):
        spec = np.fft.fftshift(np.abs(np.fft.fft2(luminance(img))))
        ax.imshow(np.log1p(spec), cmap="magma")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def render_report(table, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    return [plot_psnr_vs_iterations(table, out_dir / "psnr_vs_iterations.png"),
            plot_spectral_scores(table, out_dir / "spectral_scores.png")]
