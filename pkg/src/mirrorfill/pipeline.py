"""The full inference pipeline: occluded image -> completed image.

Order of operations: flip the input, predict the correspondence flow, warp
the flipped image and mask, predict the illumination ratio, composite the
first-stage result inside the visible-mirror region, then feed it with the
generative-region mask into the reconstruction net. In the plain ablation
(no warp subnet) the first stage is skipped and the whole hole is treated
as generative.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import torch

from .errors import DimensionError
from .illum import clamp_ratio, compose_stage1
from .masks import MaskPair, build_mask_pair
from .nets import forward_group_fused
from .warp import FlowField, bilinear_warp, flip_horizontal

PRESERVE_KNOWN_DEFAULT = True


@dataclass
class PipelineOutput:
    """Every intermediate of one completion pass."""

    flow: FlowField | None
    i_w: torch.Tensor | None
    ratio: torch.Tensor | None
    i_hat1: torch.Tensor
    i_hat: torch.Tensor
    output: torch.Tensor
    masks: MaskPair | None
    s2: torch.Tensor
    tap: torch.Tensor
    tap_flip: torch.Tensor | None = None
    i_hat_flip: torch.Tensor | None = None
    extra_warped: torch.Tensor | None = None


def run_pipeline(
    nets: dict,
    i_o: torch.Tensor,
    m: torch.Tensor,
    sym_branch: bool = False,
    preserve_known: bool = PRESERVE_KNOWN_DEFAULT,
    freeze_warp: bool = False,
    extra_warp: torch.Tensor | None = None,
) -> PipelineOutput:
    """One forward pass; differentiable end-to-end unless freeze_warp.

    nets holds "recnet" and, unless running the plain ablation, "flownet"
    and "lightnet". freeze_warp evaluates the warp subnet without gradients
    (second-stage pretraining). extra_warp rides along through the same
    flow sampling (the trainer warps the flipped ground truth this way).
    """
    if i_o.ndim != 3:
        raise DimensionError(f"image must be (C, H, W), got {tuple(i_o.shape)}")
    if m.shape != i_o.shape[1:]:
        raise DimensionError("mask must match the image spatial size")
    i_o_f = flip_horizontal(i_o)
    extra_warped = None

    if nets.get("flownet") is None:
        flow, i_w, ratio, masks = None, None, None, None
        i_hat1 = i_o
        s2 = 1.0 - m
    else:
        ctx = torch.no_grad() if freeze_warp else contextlib.nullcontext()
        with ctx:
            # flow and light nets share the input and the trunk architecture;
            # run them as one grouped pass
            x12 = torch.cat([i_o, i_o_f, i_o, i_o_f], dim=0)
            flow_raw, light_raw = forward_group_fused(
                [nets["flownet"], nets["lightnet"].trunk], x12)
            flow = FlowField(flow_raw)
            ratio = clamp_ratio(light_raw)
            # one gather warps the flipped image, flipped mask, and rider
            src = [i_o_f, flip_horizontal(m).unsqueeze(0)]
            if extra_warp is not None:
                src.append(extra_warp)
            warped = bilinear_warp(torch.cat(src, dim=0), flow)
            i_w = warped[:3]
            m_warp = warped[3]
            if extra_warp is not None:
                extra_warped = warped[4:]
            masks = build_mask_pair(m, flow, m_warp=m_warp)
            i_hat1 = compose_stage1(i_o, i_w, ratio, masks.s1)
            s2 = masks.s2

    rec_in = torch.cat([i_hat1, s2.unsqueeze(0).expand(3, -1, -1)], dim=0)
    tap_flip = None
    i_hat_flip = None
    if sym_branch and flow is not None:
        # both branches in one batched forward
        rec_in_f = torch.cat(
            [flip_horizontal(i_hat1), flip_horizontal(s2).unsqueeze(0).expand(3, -1, -1)],
            dim=0,
        )
        both, taps = nets["recnet"](torch.stack([rec_in, rec_in_f]), return_tap=True)
        i_hat, i_hat_flip = both[0], both[1]
        tap, tap_flip = taps[0], taps[1]
    else:
        i_hat, tap = nets["recnet"](rec_in, return_tap=True)

    output = i_hat * (1.0 - m) + i_o * m if preserve_known else i_hat
    return PipelineOutput(
        flow=flow, i_w=i_w, ratio=ratio, i_hat1=i_hat1, i_hat=i_hat,
        output=output, masks=masks, s2=s2, tap=tap,
        tap_flip=tap_flip, i_hat_flip=i_hat_flip, extra_warped=extra_warped,
    )


def complete(
    nets: dict,
    i_o: torch.Tensor,
    m: torch.Tensor,
    preserve_known: bool = PRESERVE_KNOWN_DEFAULT,
) -> PipelineOutput:
    """Deterministic eval-mode completion."""
    for net in nets.values():
        if net is not None:
            net.eval()
    with torch.no_grad():
        out = run_pipeline(nets, i_o, m, preserve_known=preserve_known)
    return out
