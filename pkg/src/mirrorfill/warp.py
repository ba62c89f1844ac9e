"""Flow fields and differentiable bilinear warping.

A flow field stores, for every output pixel, the normalized coordinates of
the location to sample in a source image (the convention produced by a tanh
output head: both channels in [-1, 1], where -1 maps to pixel 0 and +1 to
pixel W-1 or H-1). Pixel coordinates are always a derived view obtained
through :func:`denormalize_flow`; nothing ever mutates the stored normalized
values.

Sampling uses the kernel

    out[c, i, j] = sum_{h,w} src[c, h, w]
                   * max(0, 1 - |y(i,j) - h|) * max(0, 1 - |x(i,j) - w|)

over the 4-neighborhood of (x, y), which implicitly zero-pads out-of-bounds
samples. All operations are pure and differentiable with respect to both the
source values and the flow components.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionError, DomainError, ValidationError

RANGE_TOL = 1e-6


@dataclass(frozen=True)
class FlowField:
    """A 2xHxW field of normalized sampling coordinates.

    Channel 0 is the x (column) coordinate, channel 1 the y (row)
    coordinate, both in [-1, 1].
    """

    u: torch.Tensor

    def __post_init__(self):
        if self.u.ndim != 3 or self.u.shape[0] != 2:
            raise DimensionError(f"flow must be (2, H, W), got {tuple(self.u.shape)}")
        # one pass covers both checks: NaN fails the comparison, inf the bound
        amax = self.u.detach().abs().max().item()
        if not amax <= 1.0 + RANGE_TOL:
            raise ValidationError(
                f"flow components must be finite and in [-1, 1], max |u| = {amax}")

    @property
    def height(self) -> int:
        return self.u.shape[1]

    @property
    def width(self) -> int:
        return self.u.shape[2]

    def detach(self) -> "FlowField":
        return FlowField(self.u.detach())

    def to(self, dtype: torch.dtype) -> "FlowField":
        return FlowField(self.u.to(dtype))


def identity_flow(h: int, w: int, dtype: torch.dtype = torch.float32) -> FlowField:
    """Flow whose every output pixel samples its own location."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return FlowField(torch.stack([gx, gy], dim=0))


def flow_from_pixels(x_pix: torch.Tensor, y_pix: torch.Tensor) -> FlowField:
    """Build a FlowField from pixel-coordinate planes, clamping to bounds."""
    h, w = x_pix.shape
    ux = 2.0 * x_pix.clamp(0, w - 1) / (w - 1) - 1.0
    uy = 2.0 * y_pix.clamp(0, h - 1) / (h - 1) - 1.0
    return FlowField(torch.stack([ux, uy], dim=0))


def flip_horizontal(img: torch.Tensor) -> torch.Tensor:
    """Mirror any (..., W) tensor along its last axis."""
    return torch.flip(img, dims=[-1])


def denormalize_flow(flow: FlowField, h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Map normalized flow components onto pixel coordinates of an h x w grid.

    Returns (x_pix, y_pix), each HxW, with u = -1 -> 0 and u = +1 -> size-1.
    """
    x_pix = (flow.u[0] + 1.0) * 0.5 * (w - 1)
    y_pix = (flow.u[1] + 1.0) * 0.5 * (h - 1)
    return x_pix, y_pix


def sample_bilinear(source: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample a (C, H, W) source at fractional pixel coords with zero padding.

    x and y may have any common shape; the result is (C, *x.shape). Out-of-
    bounds neighbors contribute zero, matching the max(0, 1-|.|) kernel.
    """
    if source.ndim != 3:
        raise DimensionError(f"source must be (C, H, W), got {tuple(source.shape)}")
    if x.shape != y.shape:
        raise DimensionError("x and y coordinate arrays must have equal shapes")
    hs, ws = source.shape[1], source.shape[2]
    dtype = x.dtype

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    # all four corners in one gather: (4, *shape) indices and weights
    xi = torch.stack([x0, x0 + 1.0, x0, x0 + 1.0])
    yi = torch.stack([y0, y0, y0 + 1.0, y0 + 1.0])
    wgt = torch.stack([wy0 * wx0, wy0 * wx1, wy1 * wx0, wy1 * wx1])
    valid = (xi >= 0) & (xi <= ws - 1) & (yi >= 0) & (yi <= hs - 1)
    xc = xi.clamp(0, ws - 1).long()
    yc = yi.clamp(0, hs - 1).long()
    vals = source[:, yc, xc]  # (C, 4, *shape)
    return (vals * (wgt * valid.to(dtype))).sum(dim=1)


def bilinear_warp(source: torch.Tensor, flow: FlowField) -> torch.Tensor:
    """Backward-warp a (C, H, W) image by a flow field of the same H x W."""
    if source.ndim != 3:
        raise DimensionError(f"source must be (C, H, W), got {tuple(source.shape)}")
    if source.shape[1:] != flow.u.shape[1:]:
        raise DimensionError(
            f"source {tuple(source.shape[1:])} and flow {tuple(flow.u.shape[1:])} sizes differ"
        )
    x, y = denormalize_flow(flow, flow.height, flow.width)
    return sample_bilinear(source, x, y)


def warp_mask(mask: torch.Tensor, flow: FlowField) -> torch.Tensor:
    """Warp a single-channel soft mask (H, W); result stays in [0, 1]."""
    if mask.ndim != 2:
        raise DimensionError(f"mask must be (H, W), got {tuple(mask.shape)}")
    if mask.min() < -RANGE_TOL or mask.max() > 1 + RANGE_TOL:
        raise ValidationError("mask values must lie in [0, 1]")
    return bilinear_warp(mask.unsqueeze(0), flow).squeeze(0)


def downsample_flow(flow: FlowField, target_h: int, target_w: int) -> FlowField:
    """Bilinearly resample a flow to a size that divides the source evenly.

    Normalized values are preserved (constant fields stay constant and the
    corner values of each channel are kept, endpoint-aligned resampling).
    """
    h, w = flow.height, flow.width
    if target_h < 1 or target_w < 1 or h % target_h or w % target_w:
        raise DimensionError(
            f"target {target_h}x{target_w} must divide source {h}x{w} evenly"
        )
    u = F.interpolate(
        flow.u.unsqueeze(0), size=(target_h, target_w), mode="bilinear", align_corners=True
    ).squeeze(0)
    return FlowField(u.clamp(-1.0, 1.0))


def downsample_mask(mask: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Companion resampler for soft masks, same convention as downsample_flow."""
    h, w = mask.shape
    if target_h < 1 or target_w < 1 or h % target_h or w % target_w:
        raise DimensionError(
            f"target {target_h}x{target_w} must divide source {h}x{w} evenly"
        )
    out = F.interpolate(
        mask.unsqueeze(0).unsqueeze(0), size=(target_h, target_w),
        mode="bilinear", align_corners=True,
    )
    return out.squeeze(0).squeeze(0)


def eval_flow_at_points(flow: FlowField, pts: torch.Tensor) -> torch.Tensor:
    """Interpolate the pixel-coordinate view of a flow at fractional points.

    pts is (L, 2) with columns (x, y) in pixel units; the result is (L, 2)
    pixel-unit flow values. Points outside [0, W-1] x [0, H-1] are a domain
    error.
    """
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DimensionError(f"points must be (L, 2), got {tuple(pts.shape)}")
    h, w = flow.height, flow.width
    px, py = pts[:, 0], pts[:, 1]
    if (px.min() < 0 or px.max() > w - 1 or py.min() < 0 or py.max() > h - 1):
        raise DomainError("query point outside image bounds")
    x_pix, y_pix = denormalize_flow(flow, h, w)
    field = torch.stack([x_pix, y_pix], dim=0)
    vals = sample_bilinear(field, px, py)
    return vals.transpose(0, 1)
