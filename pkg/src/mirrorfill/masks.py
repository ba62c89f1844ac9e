"""Mask algebra and random mask generation.

Convention throughout: a binary mask m has 1 = pixel present, 0 = missing.
From an input mask and a flow we derive
    m_warp : the flipped mask warped back onto the input grid (soft),
    s1     : missing pixels whose mirror partner is visible,
    s2     : missing pixels whose mirror partner is also missing.
With a binarized m_warp, {m, s1, s2} is an exact three-way partition of the
pixel grid. Soft values are kept for loss computation; binarization is only
for reporting and partition checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .errors import DimensionError, ValidationError
from .warp import FlowField, flip_horizontal, warp_mask

MAX_HOLE_FRAC = 0.6
PARTITION_TOL = 1e-6


def _check_binary(m: torch.Tensor, name: str = "mask") -> None:
    if not torch.logical_or(m == 0, m == 1).all():
        raise ValidationError(f"{name} must be exactly binary (0/1)")


def make_s1(m_warp: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Soft indicator of missing pixels with a visible mirror partner."""
    if m_warp.shape != m.shape:
        raise DimensionError("m_warp and m shapes differ")
    _check_binary(m)
    return m_warp * (1.0 - m)


def make_s2(m: torch.Tensor, s1: torch.Tensor) -> torch.Tensor:
    """Soft indicator of missing pixels whose mirror is also missing."""
    if m.shape != s1.shape:
        raise DimensionError("m and s1 shapes differ")
    excess = (m + s1 - 1.0).max().item()
    if excess > PARTITION_TOL:
        raise ValidationError(f"m + s1 exceeds 1 by {excess}")
    return (1.0 - m - s1).clamp(min=0.0)


def binarize(soft: torch.Tensor, threshold: float) -> torch.Tensor:
    """Threshold a soft mask; values >= threshold map to 1."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    return (soft >= threshold).to(soft.dtype)


@dataclass(frozen=True)
class MaskPair:
    """Input mask plus every derived mask the pipeline consumes."""

    m: torch.Tensor
    m_flip: torch.Tensor
    m_warp: torch.Tensor
    s1: torch.Tensor
    s2: torch.Tensor


def build_mask_pair(
    m: torch.Tensor, flow: FlowField, m_warp: torch.Tensor | None = None
) -> MaskPair:
    """Derive the full mask set for an input mask under a flow.

    A caller that already warped the flipped mask (e.g. batched with other
    warps through the same flow) may pass it in.
    """
    _check_binary(m)
    m_flip = flip_horizontal(m)
    if m_warp is None:
        m_warp = warp_mask(m_flip, flow)
    s1 = make_s1(m_warp, m)
    s2 = make_s2(m, s1)
    return MaskPair(m=m, m_flip=m_flip, m_warp=m_warp, s1=s1, s2=s2)


def random_rect_mask(
    rng_seed: int, h: int, w: int, min_frac: float, max_frac: float
) -> torch.Tensor:
    """One axis-aligned rectangular hole with area fraction in [min, max].

    Side lengths are truncated (never rounded up), so the hole area never
    exceeds max_frac * h * w; when the target area is a perfect square the
    fraction is hit exactly.
    """
    if not (0.0 < min_frac <= max_frac <= MAX_HOLE_FRAC):
        raise ValidationError(
            f"need 0 < min_frac <= max_frac <= {MAX_HOLE_FRAC}, got ({min_frac}, {max_frac})"
        )
    rng = np.random.default_rng(rng_seed)
    frac = rng.uniform(min_frac, max_frac) if max_frac > min_frac else min_frac
    area = frac * h * w
    hh = min(max(1, int(np.sqrt(area))), h)
    ww = min(max(1, int(area / hh)), w)
    top = int(rng.integers(0, h - hh + 1))
    left = int(rng.integers(0, w - ww + 1))
    m = torch.ones(h, w)
    m[top : top + hh, left : left + ww] = 0.0
    return m


def _stroke_pixels(rng: np.random.Generator, h: int, w: int) -> list[tuple[int, int]]:
    """4-connected rasterization of one random polyline."""
    n_seg = int(rng.integers(2, 5))
    x = int(rng.integers(0, w))
    y = int(rng.integers(0, h))
    pixels = [(y, x)]
    for _ in range(n_seg):
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(4, max(5.0, min(h, w) / 3))
        x1 = int(np.clip(round(x + length * np.cos(ang)), 0, w - 1))
        y1 = int(np.clip(round(y + length * np.sin(ang)), 0, h - 1))
        dx, dy = abs(x1 - x), abs(y1 - y)
        sx = 1 if x1 > x else -1
        sy = 1 if y1 > y else -1
        err = dx - dy
        while x != x1 or y != y1:
            # one axis per step keeps the stroke 4-connected
            if 2 * err > -dy and x != x1:
                err -= dy
                x += sx
            elif y != y1:
                err += dx
                y += sy
            else:
                err -= dy
                x += sx
            pixels.append((y, x))
    return pixels


def random_irregular_mask(
    rng_seed: int, h: int, w: int, stroke_count: int, max_width: int = 3
) -> torch.Tensor:
    """Union of random polyline strokes removed from an all-present mask."""
    if stroke_count < 1:
        raise ValidationError(f"stroke_count must be >= 1, got {stroke_count}")
    rng = np.random.default_rng(rng_seed)
    hole = np.zeros((h, w), dtype=bool)
    for _ in range(stroke_count):
        stroke = np.zeros((h, w), dtype=bool)
        for (py, px) in _stroke_pixels(rng, h, w):
            stroke[py, px] = True
        width = int(rng.integers(1, max_width + 1)) if max_width > 1 else 1
        if width > 1:
            stroke = ndimage.binary_dilation(stroke, structure=np.ones((width, width)))
        hole |= stroke
    return torch.from_numpy((~hole).astype(np.float32))
