"""The training objective: per-term losses and their weighted combination.

Norm convention: every squared-error term is a MEAN over elements, not a
sum, so weights transfer across resolutions. The landmark loss is averaged
over landmarks for the same reason.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import torch

from .errors import DimensionError, ValidationError
from .landmarks import LandmarkSet
from .warp import FlowField, bilinear_warp, eval_flow_at_points

PROB_EPS = 1e-7

PART_ORDER = ("left_eye", "right_eye", "nose", "mouth")


# ---------------------------------------------------------------------------
# flow-side losses


def landmark_loss(flow: FlowField, lm: LandmarkSet, lm_flip: LandmarkSet) -> torch.Tensor:
    """Mean squared pixel error of the flow against landmark correspondences.

    lm holds landmark positions in the input image, lm_flip the positions of
    the same landmarks (index-to-index, after the flip permutation) in the
    flipped image. The flow queried at each input landmark must point at its
    partner's location in the flip:

        mean_i (flow_x(x_i, y_i) - x'_i)^2 + (flow_y(x_i, y_i) - y'_i)^2

    evaluated in pixel units. Zero exactly on the true mirror
    correspondence; on a frontal face both landmark sets coincide and this
    reduces to requiring the flow to fix every landmark.
    """
    if len(lm) != len(lm_flip):
        raise ValidationError("landmark sets must have equal size")
    pred = eval_flow_at_points(flow, lm.pts)
    diff = pred - lm_flip.pts.to(pred.dtype)
    return (diff ** 2).sum(dim=1).mean()


def tv_loss(flow: FlowField) -> torch.Tensor:
    """Mean squared forward difference of both flow channels.

    Differences past the last row/column are taken as zero and still count
    in the denominator (mean over 2 channels x 2 directions x H x W).
    """
    u = flow.u
    dx = torch.zeros_like(u)
    dy = torch.zeros_like(u)
    dx[:, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    dy[:, :-1, :] = u[:, 1:, :] - u[:, :-1, :]
    return (dx ** 2).mean() * 0.5 + (dy ** 2).mean() * 0.5


def perceptual_symmetry_loss(
    feat: torch.Tensor,
    feat_flip: torch.Tensor,
    flow_ds: FlowField,
    s2_ds: torch.Tensor,
) -> torch.Tensor:
    """Masked feature-space symmetry penalty.

    The flipped-branch features are warped by the downsampled flow and
    compared against the straight-branch features inside the
    generative-region mask:

        mean over (c, i, j) of ((feat - warp(feat_flip)) * s2_ds)^2

    which equals (1/C) * mean over positions of the masked squared norm.
    """
    if feat.shape != feat_flip.shape:
        raise DimensionError("feature maps must have equal shapes")
    if feat.shape[1:] != s2_ds.shape or feat.shape[1:] != flow_ds.u.shape[1:]:
        raise DimensionError("mask/flow must match the feature spatial size")
    warped = bilinear_warp(feat_flip, flow_ds)
    return (((feat - warped) * s2_ds) ** 2).mean()


# ---------------------------------------------------------------------------
# image-side losses


def l2_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error between two images."""
    if pred.shape != gt.shape:
        raise DimensionError("pred and gt shapes differ")
    return ((pred - gt) ** 2).mean()


def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, extractor) -> torch.Tensor:
    """Mean squared feature distance at the extractor's tap layer.

    The 1/(C*H*W) normalization makes this the mean over feature entries.
    """
    if pred.shape != gt.shape:
        raise DimensionError("pred and gt shapes differ")
    fp = extractor(pred)
    fg = extractor(gt)
    return ((fp - fg) ** 2).mean()


def reconstruction_loss(
    pred: torch.Tensor, gt: torch.Tensor, extractor, w: "LossWeights"
) -> torch.Tensor:
    """Weighted pixel + perceptual reconstruction term."""
    out = w.lambda_r2 * l2_loss(pred, gt)
    if w.lambda_rp != 0.0:
        out = out + w.lambda_rp * perceptual_loss(pred, gt, extractor)
    return out


# ---------------------------------------------------------------------------
# adversarial losses


def _clamp_probs(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def patch_d_loss(real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Discriminator binary cross-entropy over a patch grid.

    Averages the real (label 1) and fake (label 0) halves, so an
    uninformative 0.5 output scores ln 2.
    """
    real = _clamp_probs(real)
    fake = _clamp_probs(fake)
    return 0.5 * ((-torch.log(real)).mean() + (-torch.log1p(-fake)).mean())


def patch_g_loss(fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss, -log D(fake) averaged over the grid."""
    return (-torch.log(_clamp_probs(fake))).mean()


def adversarial_losses(
    disc_outputs_real: dict[str, torch.Tensor],
    disc_outputs_fake: dict[str, torch.Tensor],
    w: "LossWeights",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Aggregate (d_loss, g_loss) over the global and part discriminators.

    The generator side is the weighted sum lambda_ag * global +
    sum_i lambda_ap[i] * part_i; the discriminator side is the plain mean of
    per-discriminator BCE terms (each discriminator is an independent
    classifier, the trade-off weights belong to the generator objective).
    """
    if set(disc_outputs_real) != set(disc_outputs_fake):
        raise ValidationError("real/fake discriminator output keys differ")
    d_terms = []
    g_total = None
    for name, real in disc_outputs_real.items():
        fake = disc_outputs_fake[name]
        d_terms.append(patch_d_loss(real, fake))
        lam = w.lambda_ag if name == "global" else w.lambda_ap[PART_ORDER.index(name)]
        g_term = lam * patch_g_loss(fake)
        g_total = g_term if g_total is None else g_total + g_term
    d_loss = torch.stack(d_terms).mean()
    return d_loss, g_total


# ---------------------------------------------------------------------------
# weights, totals, reporting


@dataclass(frozen=True)
class LossWeights:
    """Trade-off coefficients of the full objective (all nonnegative)."""

    lambda_r2: float = 300.0
    lambda_rp: float = 0.01
    lambda_ag: float = 100.0
    lambda_ap: tuple[float, float, float, float] = (100.0, 100.0, 80.0, 80.0)
    lambda_s: float = 50.0
    lambda_l: float = 100.0
    lambda_lm: float = 10.0
    lambda_tv: float = 1.0

    def __post_init__(self):
        vals = [self.lambda_r2, self.lambda_rp, self.lambda_ag, *self.lambda_ap,
                self.lambda_s, self.lambda_l, self.lambda_lm, self.lambda_tv]
        if any(v < 0 for v in vals):
            raise ValidationError("loss weights must be nonnegative")

    def with_adv_scale(self, scale: float) -> "LossWeights":
        """Copy with the adversarial weights scaled (for warm-up ramps)."""
        return LossWeights(
            lambda_r2=self.lambda_r2, lambda_rp=self.lambda_rp,
            lambda_ag=self.lambda_ag * scale,
            lambda_ap=tuple(a * scale for a in self.lambda_ap),
            lambda_s=self.lambda_s, lambda_l=self.lambda_l,
            lambda_lm=self.lambda_lm, lambda_tv=self.lambda_tv,
        )


CSV_FIELDS = (
    "step", "stage", "lr", "l2", "perceptual", "adv_g", "adv_d",
    "symmetry", "illum", "landmark", "tv", "total",
)


@dataclass
class LossReport:
    """Raw per-term values plus the weighted total for one step."""

    step: int = 0
    stage: int = 0
    lr: float = 0.0
    l2: float = 0.0
    perceptual: float = 0.0
    adv_g: float = 0.0  # already lambda-weighted (generator side)
    adv_d: float = 0.0  # not part of the generator total
    symmetry: float = 0.0
    illum: float = 0.0
    landmark: float = 0.0
    tv: float = 0.0
    total: float = 0.0

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerow([getattr(self, f) for f in CSV_FIELDS])
        return buf.getvalue().strip()

    @staticmethod
    def csv_header() -> str:
        return ",".join(CSV_FIELDS)


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def total_loss(
    w: LossWeights,
    l2: torch.Tensor | float = 0.0,
    perceptual: torch.Tensor | float = 0.0,
    adv_g: torch.Tensor | float = 0.0,
    symmetry: torch.Tensor | float = 0.0,
    illum: torch.Tensor | float = 0.0,
    landmark: torch.Tensor | float = 0.0,
    tv: torch.Tensor | float = 0.0,
) -> tuple[torch.Tensor | float, LossReport]:
    """Combine the objective, linear in every weight.

    adv_g arrives already weighted (it carries its own per-discriminator
    lambdas); everything else is weighted here. Returns the differentiable
    total plus a detached report of the raw terms.
    """
    total = (
        w.lambda_r2 * l2
        + w.lambda_rp * perceptual
        + adv_g
        + w.lambda_s * symmetry
        + w.lambda_l * illum
        + w.lambda_lm * landmark
        + w.lambda_tv * tv
    )
    report = LossReport(
        l2=_scalar(l2), perceptual=_scalar(perceptual), adv_g=_scalar(adv_g),
        symmetry=_scalar(symmetry), illum=_scalar(illum), landmark=_scalar(landmark),
        tv=_scalar(tv), total=_scalar(total),
    )
    return total, report
