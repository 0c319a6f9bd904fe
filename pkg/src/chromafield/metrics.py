"""Image quality metrics: PSNR, single-scale SSIM, and colorfulness.

Colorfulness follows the opponent-axis statistic: with channels scaled to
[0, 255], rg = R - G and yb = (R + G)/2 - B; the score is
sqrt(std(rg)^2 + std(yb)^2) + 0.3 sqrt(mean(rg)^2 + mean(yb)^2).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .color import rgb_to_lab

__all__ = [
    "MetricReport",
    "psnr",
    "ssim",
    "colorfulness",
    "evaluate",
    "write_report",
]


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    colorful_pred: float
    colorful_gt: float

    @property
    def delta_colorful(self) -> float:
        return abs(self.colorful_pred - self.colorful_gt)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """-10 log10(MSE) over all channels for images on [0, 1]; identical
    images report +inf."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image dimensions differ")
    mse = float(((pred - gt) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, gt: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5) of two
    luminance images on [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image dimensions differ")
    if pred.ndim != 2 or min(pred.shape) < 11:
        raise ValueError("need 2-D images at least 11x11")
    kern = _gaussian_kernel()
    c1 = k1**2
    c2 = k2**2

    def filt(img):
        return convolve2d(img, kern, mode="valid")

    mu_x = filt(pred)
    mu_y = filt(gt)
    var_x = filt(pred * pred) - mu_x**2
    var_y = filt(gt * gt) - mu_y**2
    cov = filt(pred * gt) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def colorfulness(img: np.ndarray) -> float:
    """Opponent-axis vividness score of an RGB image on [0, 1]."""
    img = np.asarray(img, dtype=np.float64) * 255.0
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    rg = r - g
    yb = (r + g) / 2.0 - b
    std_root = math.sqrt(rg.std() ** 2 + yb.std() ** 2)
    mean_root = math.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return std_root + 0.3 * mean_root


def _luminance_plane(img: np.ndarray) -> np.ndarray:
    return rgb_to_lab(img)[..., 0] / 100.0


def evaluate(
    pred_views: list[np.ndarray], gt_views: list[np.ndarray]
) -> tuple[list[MetricReport], MetricReport]:
    """Per-view metrics over paired RGB images plus arithmetic means.

    SSIM is computed on the Lab luminance plane of each image.
    """
    if len(pred_views) != len(gt_views):
        raise ValueError("prediction and ground-truth view counts differ")
    if not pred_views:
        raise ValueError("no views to evaluate")
    reports = []
    for pred, gt in zip(pred_views, gt_views):
        reports.append(
            MetricReport(
                psnr=psnr(pred, gt),
                ssim=ssim(_luminance_plane(pred), _luminance_plane(gt)),
                colorful_pred=colorfulness(pred),
                colorful_gt=colorfulness(gt),
            )
        )
    mean = MetricReport(
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        colorful_pred=float(np.mean([r.colorful_pred for r in reports])),
        colorful_gt=float(np.mean([r.colorful_gt for r in reports])),
    )
    return reports, mean


def write_report(reports: list[MetricReport], mean: MetricReport, tsv_path, json_path) -> None:
    """Tab-separated per-view rows plus a JSON summary."""
    header = "view\tpsnr\tssim\tcolorful_pred\tcolorful_gt\tdelta_colorful"
    lines = [header]
    for i, r in enumerate(reports):
        lines.append(
            f"{i}\t{r.psnr!r}\t{r.ssim!r}\t{r.colorful_pred!r}"
            f"\t{r.colorful_gt!r}\t{r.delta_colorful!r}"
        )
    lines.append(
        f"mean\t{mean.psnr!r}\t{mean.ssim!r}\t{mean.colorful_pred!r}"
        f"\t{mean.colorful_gt!r}\t{mean.delta_colorful!r}"
    )
    with open(tsv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    summary = {
        "views": len(reports),
        "mean": {
            "psnr": mean.psnr,
            "ssim": mean.ssim,
            "colorful_pred": mean.colorful_pred,
            "colorful_gt": mean.colorful_gt,
            "delta_colorful": mean.delta_colorful,
        },
    }
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, allow_nan=True)
