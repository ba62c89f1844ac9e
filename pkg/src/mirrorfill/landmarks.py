"""Landmark sets with a flip permutation and optional facial-part grouping."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ValidationError

PART_NAMES = ("left_eye", "right_eye", "nose", "mouth")


@dataclass(frozen=True)
class LandmarkSet:
    """L points (x, y) in pixel units.

    flip_perm[i] is the index of the landmark that takes landmark i's role
    under a horizontal flip (an involution: left/right pairs swap, centered
    points map to themselves). part_indices groups landmark indices by
    facial part for cropping.
    """

    pts: torch.Tensor
    flip_perm: torch.Tensor
    part_indices: dict[str, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.pts.ndim != 2 or self.pts.shape[1] != 2:
            raise ValidationError(f"pts must be (L, 2), got {tuple(self.pts.shape)}")
        if self.flip_perm.shape != (self.pts.shape[0],):
            raise ValidationError("flip_perm length must match the number of points")
        perm = self.flip_perm.long()
        if not torch.equal(perm[perm], torch.arange(len(perm))):
            raise ValidationError("flip_perm must be an involution")

    def __len__(self) -> int:
        return self.pts.shape[0]

    def flipped(self, width: int) -> "LandmarkSet":
        """The landmark set of the horizontally flipped image.

        Positions are mirrored and indices re-ordered by flip_perm, so index
        i still refers to the same role (e.g. flipped landmark i is the
        mirror image of landmark flip_perm[i]) and the two sets correspond
        index-to-index.
        """
        perm = self.flip_perm.long()
        pts = self.pts[perm].clone()
        pts[:, 0] = (width - 1) - pts[:, 0]
        # re-indexing by flip_perm restores semantic grouping, so the same
        # index groups still name the same parts
        return LandmarkSet(
            pts=pts, flip_perm=self.flip_perm.clone(), part_indices=dict(self.part_indices)
        )
