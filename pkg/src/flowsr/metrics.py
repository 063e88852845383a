"""Fidelity metrics on the Y channel: PSNR and single-scale SSIM.

Inputs are RGB arrays in [0, 1]; both metrics convert through the shared
BT.601 luma transform first. Identical images map to an infinite PSNR
sentinel, which aggregation excludes from means with a warning.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .imageops import rgb_to_y

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _as_batch(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[1] != 3:
        raise ShapeError(f"expected (3, h, w) or (n, 3, h, w) RGB, got {img.shape}")
    return img


def psnr_y(a: np.ndarray, b: np.ndarray, crop_border: int = 0) -> float:
    """10*log10(1 / MSE) on the Y channel; inf for identical inputs."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr_y dim mismatch: {a.shape} vs {b.shape}")
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    if crop_border:
        ya = ya[:, :, crop_border:-crop_border, crop_border:-crop_border]
        yb = yb[:, :, crop_border:-crop_border, crop_border:-crop_border]
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _windowed(y: np.ndarray, win: np.ndarray) -> np.ndarray:
    """Valid-mode separable Gaussian filtering of a (h, w) array."""
    size = win.size
    h, w = y.shape
    rows = np.empty((h, w - size + 1))
    for j in range(size):
        part = y[:, j:j + w - size + 1] * win[j]
        rows = part if j == 0 else rows + part
    out = np.empty((h - size + 1, rows.shape[1]))
    for i in range(size):
        part = rows[i:i + h - size + 1] * win[i]
        out = part if i == 0 else out + part
    return out


def ssim_y(a: np.ndarray, b: np.ndarray, crop_border: int = 0) -> float:
    """Single-scale SSIM on Y: 11x11 Gaussian window, C1/C2 on the [0,1]
    range, mean over valid window positions."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim_y dim mismatch: {a.shape} vs {b.shape}")
    ya, yb = rgb_to_y(a), rgb_to_y(b)
    if crop_border:
        ya = ya[:, :, crop_border:-crop_border, crop_border:-crop_border]
        yb = yb[:, :, crop_border:-crop_border, crop_border:-crop_border]
    if ya.shape[2] < SSIM_WINDOW or ya.shape[3] < SSIM_WINDOW:
        raise ShapeError(f"image {ya.shape[2:]} smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    values = []
    for n in range(ya.shape[0]):
        x, y = ya[n, 0], yb[n, 0]
        mu_x = _windowed(x, win)
        mu_y = _windowed(y, win)
        xx = _windowed(x * x, win) - mu_x * mu_x
        yy = _windowed(y * y, win) - mu_y * mu_y
        xy = _windowed(x * y, win) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * xy + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (xx + yy + SSIM_C2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


@dataclass
class MetricReport:
    per_image: list[tuple[str, float, float]]  # (id, psnr_db, ssim)
    mean_psnr_db: float
    mean_ssim: float
    count: int
    psnr_inf_count: int


def build_report(entries: list[tuple[str, float, float]]) -> MetricReport:
    """Aggregate per-image rows; infinite PSNR entries are excluded from the
    PSNR mean (with a warning), never from the SSIM mean."""
    finite = [p for _, p, _ in entries if math.isfinite(p)]
    inf_count = len(entries) - len(finite)
    if inf_count:
        warnings.warn(f"{inf_count} image pair(s) identical: PSNR 'inf' excluded "
                      "from the aggregate mean", stacklevel=2)
    mean_psnr = float(np.mean(finite)) if finite else math.inf
    mean_ssim = float(np.mean([s for _, _, s in entries])) if entries else 0.0
    return MetricReport(entries, mean_psnr, mean_ssim, len(entries), inf_count)


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def write_report_tsv(report: MetricReport, path: Path) -> None:
    lines = ["id\tpsnr_db\tssim"]
    for rid, p, s in report.per_image:
        lines.append(f"{rid}\t{_fmt(p)}\t{_fmt(s)}")
    lines.append(f"mean\t{_fmt(report.mean_psnr_db)}\t{_fmt(report.mean_ssim)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_report_json(report: MetricReport, path: Path) -> None:
    doc = {
        "count": report.count,
        "psnr_inf_count": report.psnr_inf_count,
        "mean_psnr_db": _fmt(report.mean_psnr_db),
        "mean_ssim": report.mean_ssim,
        "per_image": [{"id": rid, "psnr_db": _fmt(p), "ssim": s}
                      for rid, p, s in report.per_image],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
