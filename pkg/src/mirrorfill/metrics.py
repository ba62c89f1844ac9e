"""Image quality metrics and the held-out evaluation protocol."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import DimensionError, ValidationError

PSNR_CAP = 100.0
SSIM_WINDOW = 8
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0,
         mask: torch.Tensor | None = None) -> float:
    """10 log10(peak^2 / MSE) in dB, capped at 100 for identical inputs.

    With a mask, the MSE runs over masked pixels only (mask is (H, W),
    nonzero = counted).
    """
    if a.shape != b.shape:
        raise DimensionError("psnr inputs must share a shape")
    d2 = (a.double() - b.double()) ** 2
    if mask is not None:
        if mask.shape != a.shape[-2:]:
            raise DimensionError("mask must match the image spatial size")
        sel = mask.double() > 0
        count = sel.sum().item() * (a.shape[0] if a.ndim == 3 else 1)
        if count == 0:
            raise ValidationError("empty mask region")
        mse = (d2 * sel).sum().item() / count
    else:
        mse = d2.mean().item()
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP)


def ssim(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """Mean local SSIM over sliding 8x8 windows, per channel then averaged."""
    if a.shape != b.shape:
        raise DimensionError("ssim inputs must share a shape")
    if a.ndim == 2:
        a = a.unsqueeze(0)
        b = b.unsqueeze(0)
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = a.double().unsqueeze(1)  # treat channels as batch
    y = b.double().unsqueeze(1)

    def win_mean(t):
        return F.avg_pool2d(t, SSIM_WINDOW, stride=1)

    mu_x = win_mean(x)
    mu_y = win_mean(y)
    var_x = win_mean(x * x) - mu_x * mu_x
    var_y = win_mean(y * y) - mu_y * mu_y
    cov = win_mean(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return (num / den).mean().item()


def _hole_bbox(mask: torch.Tensor, min_side: int = SSIM_WINDOW) -> tuple[int, int, int, int]:
    """Bounding box (y0, y1, x0, x1) of the missing region, padded to min_side."""
    hole = mask == 0
    ys, xs = torch.nonzero(hole, as_tuple=True)
    if len(ys) == 0:
        raise ValidationError("mask has no hole")
    h, w = mask.shape
    y0, y1 = ys.min().item(), ys.max().item() + 1
    x0, x1 = xs.min().item(), xs.max().item() + 1
    while y1 - y0 < min_side:
        y0, y1 = max(0, y0 - 1), min(h, y1 + 1)
    while x1 - x0 < min_side:
        x0, x1 = max(0, x0 - 1), min(w, x1 + 1)
    return y0, y1, x0, x1


@dataclass
class MetricReport:
    """Per-image and aggregate quality numbers for one evaluation run."""

    psnr_full: list[float] = field(default_factory=list)
    ssim_full: list[float] = field(default_factory=list)
    psnr_hole: list[float] = field(default_factory=list)
    ssim_hole: list[float] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return sum(self.psnr_full) / len(self.psnr_full)

    @property
    def mean_ssim(self) -> float:
        return sum(self.ssim_full) / len(self.ssim_full)

    @property
    def mean_psnr_hole(self) -> float:
        return sum(self.psnr_hole) / len(self.psnr_hole)

    @property
    def mean_ssim_hole(self) -> float:
        return sum(self.ssim_hole) / len(self.ssim_hole)

    def add(self, pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> None:
        self.psnr_full.append(psnr(pred, gt))
        self.ssim_full.append(ssim(pred, gt))
        self.psnr_hole.append(psnr(pred, gt, mask=1.0 - mask))
        y0, y1, x0, x1 = _hole_bbox(mask)
        self.ssim_hole.append(ssim(pred[:, y0:y1, x0:x1], gt[:, y0:y1, x0:x1]))

    def summary(self) -> dict:
        return {
            "count": len(self.psnr_full),
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "mean_psnr_hole": self.mean_psnr_hole,
            "mean_ssim_hole": self.mean_ssim_hole,
        }

    def to_json(self) -> str:
        return json.dumps(
            {**self.summary(), "psnr_full": self.psnr_full, "ssim_full": self.ssim_full,
             "psnr_hole": self.psnr_hole, "ssim_hole": self.ssim_hole},
            indent=2,
        )


def eval_set(
    completer: Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor],
    samples,
    mask_fn: Callable[[object, int], torch.Tensor],
) -> MetricReport:
    """Run a completion function over held-out samples and aggregate metrics.

    completer(occluded, mask, sample) returns the completed image; mask_fn
    (sample, index) supplies the per-sample hole. Aggregation order is fixed
    by the sample order, so the report is deterministic.
    """
    if len(samples) == 0:
        raise ValidationError("empty evaluation set")
    from .synth import apply_occlusion

    report = MetricReport()
    for i, sample in enumerate(samples):
        mask = mask_fn(sample, i)
        occluded = apply_occlusion(sample.image, mask)
        with torch.no_grad():
            pred = completer(occluded, mask, sample)
        report.add(pred, sample.image, mask)
    return report
