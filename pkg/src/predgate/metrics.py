"""Frame-quality metrics: MSE, MAE and Gaussian-window SSIM."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _check(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def mae(a, b) -> float:
    a, b = _check(a, b, "mae")
    return float(np.mean(np.abs(a - b)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-D image with 1-D window ``g``."""
    k = g.size
    rows = sum(g[i] * img[i:img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:rows.shape[1] - k + 1 + j] for j in range(k))


def _ssim_plane(x: np.ndarray, y: np.ndarray, data_range: float) -> float:
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    if min(x.shape) < SSIM_WINDOW:
        mx, my = x.mean(), y.mean()
        vx, vy = x.var(), y.var()
        cxy = ((x - mx) * (y - my)).mean()
    else:
        g = gaussian_window()
        mx, my = _filter_valid(x, g), _filter_valid(y, g)
        vx = _filter_valid(x * x, g) - mx * mx
        vy = _filter_valid(y * y, g) - my * my
        cxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean local SSIM of two ``(H, W)`` or ``(H, W, C)`` images, averaged over channels.

    Images smaller than the 11x11 window are scored with one global window.
    """
    a, b = _check(a, b, "ssim")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise ConfigError(f"ssim expects (H, W) or (H, W, C) images, got {a.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        warnings.warn(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window; "
                      "using a single global window", stacklevel=2)
    return float(np.mean([_ssim_plane(a[..., ch], b[..., ch], data_range) for ch in range(a.shape[2])]))


@dataclass
class MetricReport:
    mse: float
    mae: float
    ssim: float
    per_frame: list[dict] = field(default_factory=list)


def evaluate_frames(pred, truth, start: int = 1) -> MetricReport:
    """Score predictions against ground truth, both ``(N, T, H, W, C)``.

    Frames before ``start`` are skipped (the first prediction is made from
    an empty state). SSIM is computed per frame and averaged; ``per_frame``
    holds averages across sequences for each frame index.
    """
    pred, truth = _check(pred, truth, "evaluate_frames")
    if pred.ndim != 5:
        raise ConfigError(f"expected (N, T, H, W, C) arrays, got {pred.shape}")
    per_frame = []
    all_ssim = []
    for t in range(start, pred.shape[1]):
        p, y = pred[:, t], truth[:, t]
        s = [ssim(p[i], y[i]) for i in range(p.shape[0])]
        all_ssim.extend(s)
        per_frame.append(dict(frame_index=t, mse=mse(p, y), mae=mae(p, y), ssim=float(np.mean(s))))
    if not per_frame:
        raise ConfigError("no frames left to evaluate")
    p, y = pred[:, start:], truth[:, start:]
    return MetricReport(mse(p, y), mae(p, y), float(np.mean(all_ssim)), per_frame)


def copy_last_frame(sequences) -> np.ndarray:
    """Baseline predictions: frame ``t`` predicted as frame ``t-1`` (frame 0 as zeros)."""
    seq = np.asarray(sequences, dtype=np.float64)
    out = np.zeros_like(seq)
    out[:, 1:] = seq[:, :-1]
    return out
