"""Image-quality metrics and FFT-based spectral artifact scores.

Images are C x H x W float arrays in [0, 1]; batch helpers take N x C x H x W.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # Rec.601
HALF_NYQUIST = 0.25  # cycles / pixel


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE) in dB; identical inputs give PSNR_CAP."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse))


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(plane, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim_plane(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    g = gaussian_window_1d()
    if min(a.shape) < g.size:
        raise ValueError(f"image {a.shape} smaller than the {g.size}x{g.size} SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean local SSIM (Gaussian window 11, sigma 1.5, valid region), averaged over channels."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return ssim_plane(a, b, data_range)
    return float(np.mean([ssim_plane(a[c], b[c], data_range) for c in range(a.shape[0])]))


# --- spectral scores ----------------------------------------------------------------

def luminance(img: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA_WEIGHTS, np.asarray(img, dtype=np.float64), axes=(0, 0))


def dft2_direct(plane: np.ndarray) -> np.ndarray:
    """O(N^2)-per-axis DFT by explicit summation; reference for np.fft.fft2."""
    h, w = plane.shape
    kh = np.exp(-2j * np.pi * np.outer(np.arange(h), np.arange(h)) / h)
    kw = np.exp(-2j * np.pi * np.outer(np.arange(w), np.arange(w)) / w)
    return kh @ plane @ kw.T


def high_frequency_mask(h: int, w: int) -> np.ndarray:
    fy, fx = np.fft.fftfreq(h), np.fft.fftfreq(w)
    return np.maximum(np.abs(fy)[:, None], np.abs(fx)[None, :]) > HALF_NYQUIST


def high_frequency_energy(img: np.ndarray) -> float:
    y = luminance(img) if np.ndim(img) == 3 else np.asarray(img, dtype=np.float64)
    spec = np.abs(np.fft.fft2(y)) ** 2
    return float(spec[high_frequency_mask(*y.shape)].sum())


def high_frequency_fraction(img: np.ndarray) -> float:
    """Share of non-DC luminance energy above half-Nyquist."""
    y = luminance(img) if np.ndim(img) == 3 else np.asarray(img, dtype=np.float64)
    spec = np.abs(np.fft.fft2(y)) ** 2
    total = spec.sum() - spec[0, 0]
    if total <= 0:
        return 0.0
    return float(spec[high_frequency_mask(*y.shape)].sum() / total)


def hf_energy_ratio(restored: np.ndarray, reference: np.ndarray) -> float:
    num, den = high_frequency_energy(restored), high_frequency_energy(reference)
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


def nyquist_peak(img: np.ndarray) -> float:
    """Largest |F|/(H W) on the exact-Nyquist row and column of the luminance spectrum."""
    y = luminance(img) if np.ndim(img) == 3 else np.asarray(img, dtype=np.float64)
    h, w = y.shape
    mag = np.abs(np.fft.fft2(y)) / (h * w)
    vals = []
    if h % 2 == 0:
        vals.append(mag[h // 2, :].max())
    if w % 2 == 0:
        vals.append(mag[:, w // 2].max())
    return float(max(vals)) if vals else 0.0


def grid_peak_score(restored: np.ndarray, reference: np.ndarray) -> float:
    return nyquist_peak(restored) - nyquist_peak(reference)


def _mean_channel_correlation(img: np.ndarray) -> float:
    flat = np.asarray(img, dtype=np.float64).reshape(img.shape[0], -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    norms = np.sqrt((flat * flat).sum(axis=1))
    corrs = []
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            d = norms[i] * norms[j]
            # a flat channel carries no correlation information; count it as 0
            corrs.append(float(flat[i] @ flat[j] / d) if d > 0 else 0.0)
    return float(np.mean(corrs))


def color_mixing_score(restored: np.ndarray, reference: np.ndarray) -> float:
    """1 - (mean inter-channel correlation of restored) / (same for reference)."""
    r_ref = _mean_channel_correlation(reference)
    r_out = _mean_channel_correlation(restored)
    if abs(r_ref) < 1e-12:
        return float(r_ref - r_out)
    return 1.0 - r_out / r_ref


def spectral_artifact_scores(restored: np.ndarray, reference: np.ndarray):
    """(hf_energy_ratio, grid_peak_score, color_mixing_score) for one image pair."""
    restored = np.asarray(restored, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if restored.shape != reference.shape:
        raise ValueError(f"shape mismatch {restored.shape} vs {reference.shape}")
    return (hf_energy_ratio(restored, reference), grid_peak_score(restored, reference),
            color_mixing_score(restored, reference))


# --- reports ----------------------------------------------------------------------

METRIC_COLUMNS = ("psnr", "ssim", "hf_energy_ratio", "grid_peak_score", "color_mixing_score")
CSV_HEADER = ("id",) + METRIC_COLUMNS


@dataclass
class MetricsReport:
    rows: List[Dict[str, float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, image_id: str, restored: np.ndarray, reference: np.ndarray) -> dict:
        hf, grid, color = spectral_artifact_scores(restored, reference)
        row = {"id": image_id, "psnr": psnr(restored, reference), "ssim": ssim(restored, reference),
               "hf_energy_ratio": hf, "grid_peak_score": grid, "color_mixing_score": color}
        self.rows.append(row)
        return row

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def mean(self, name: str) -> float:
        return float(self.column(name).mean()) if self.rows else math.nan

    def std(self, name: str) -> float:
        return float(self.column(name).std()) if self.rows else math.nan

    def aggregates(self) -> Dict[str, Dict[str, float]]:
        return {name: {"mean": self.mean(name), "std": self.std(name)} for name in METRIC_COLUMNS}

    def to_csv(self, path) -> Path:
        """Per-image rows, then ``mean`` and ``std`` rows; columns in CSV_HEADER order."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r["id"]] + [f"{r[c]:.6f}" for c in METRIC_COLUMNS])
            agg = self.aggregates()
            for stat in ("mean", "std"):
                w.writerow([stat] + [f"{agg[c][stat]:.6f}" for c in METRIC_COLUMNS])
        return path


def evaluate_batch(restored: np.ndarray, reference: np.ndarray,
                   ids: Optional[Sequence[str]] = None, config: Optional[dict] = None) -> MetricsReport:
    report = MetricsReport(config=dict(config or {}))
    ids = ids or [str(i) for i in range(len(restored))]
    for i, image_id in enumerate(ids):
        report.add(image_id, restored[i], reference[i])
    return report
