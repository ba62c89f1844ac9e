"""Illumination ratio maps, first-stage compositing, and the consistency loss.

The ratio map R is a per-pixel multiplicative gain between the warped
half-face and the target half-face. It is kept strictly positive by clamping
to [RATIO_MIN, RATIO_MAX]; the raw ratio of two images is unbounded near dark
pixels and would blow up gradients otherwise.
"""

from __future__ import annotations

import torch

from .errors import DimensionError

RATIO_MIN = 0.1
RATIO_MAX = 10.0


def clamp_ratio(r: torch.Tensor) -> torch.Tensor:
    """Clamp a raw nonnegative ratio prediction into [0.1, 10]."""
    return r.clamp(RATIO_MIN, RATIO_MAX)


def compose_stage1(
    i_o: torch.Tensor, i_w: torch.Tensor, r: torch.Tensor, s1: torch.Tensor
) -> torch.Tensor:
    """First-stage completion: reweighted warp inside s1, input elsewhere.

    out = s1 * (i_w * r) + (1 - s1) * i_o, clamped to [0, 1]. Identity
    outside the s1 support; differentiable in i_w, r and s1.
    """
    if i_o.shape != i_w.shape or i_o.shape != r.shape:
        raise DimensionError("i_o, i_w and r shapes differ")
    if s1.shape != i_o.shape[1:]:
        raise DimensionError("s1 must match the spatial size of i_o")
    out = s1 * (i_w * r) + (1.0 - s1) * i_o
    return out.clamp(0.0, 1.0)


def illumination_consistency_loss(
    i_w_prime: torch.Tensor, r: torch.Tensor, i: torch.Tensor
) -> torch.Tensor:
    """Mean squared error between the reweighted warped flip and the target.

    loss = mean((i_w_prime * r - i)^2); zero exactly when the reweighted
    warp reproduces the target everywhere.
    """
    if i_w_prime.shape != r.shape or i_w_prime.shape != i.shape:
        raise DimensionError("i_w_prime, r and i shapes differ")
    return ((i_w_prime * r - i) ** 2).mean()
