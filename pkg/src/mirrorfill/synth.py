"""Procedural symmetric face-like images with exact oracles.

Each sample is built from a mirror-symmetric base (smooth compact-support
blobs for the face oval, eyes, nose and mouth, exactly symmetrized), then

  * sheared horizontally by a per-row integer shift (a staircase shear:
    round(shear * (row - center))), and
  * multiplied by a smooth left/right illumination gain field.

Quantizing the shear to whole pixels per row keeps every derived oracle
exact: the flow that maps each pixel to its mirror partner in the flipped
image samples only lattice points, so warping the flipped image by it
reproduces the unlit base to interpolation-free precision, and the landmark
loss of that flow is zero. Landmarks sit on integer rows for the same
reason.

The mirror flow in pixel units is x' = x - 2*shift(row), y' = y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, ValidationError
from .landmarks import LandmarkSet
from .warp import FlowField, flow_from_pixels

MAX_SHEAR = 0.12
MAX_ILLUM_DELTA = 0.5
# absolute transition half-width in pixels; pixel centers sit >= 0.5 px from
# the mirror line on even sizes, so each column sees its side's full gain
ILLUM_TRANSITION_PX = 0.12

SKIN_RGB = (0.62, 0.53, 0.45)
SCLERA_RGB = (0.16, 0.16, 0.17)
IRIS_RGB = (-0.38, -0.30, -0.12)
NOSE_RGB = (-0.10, -0.08, -0.06)
MOUTH_RGB = (0.14, -0.10, -0.06)

FLIP_PERM = (5, 4, 3, 2, 1, 0, 6, 9, 8, 7)
PART_INDICES = {
    "left_eye": (0, 1, 2),
    "right_eye": (3, 4, 5),
    "nose": (6,),
    "mouth": (7, 8, 9),
}


@dataclass(frozen=True)
class SyntheticFaceSample:
    """One generated face with every ground-truth quantity the losses need."""

    image: torch.Tensor          # lit, sheared, (3, N, N), [0, 1]
    base: torch.Tensor           # unlit sheared image (identical when illum_delta = 0)
    gain: torch.Tensor           # per-column illumination gain, (N,)
    landmarks: LandmarkSet
    illum_gain: tuple[float, float]
    shear: float
    mirror_flow: FlowField
    seed: int
    size: int

    @property
    def row_shifts(self) -> np.ndarray:
        c = (self.size - 1) / 2.0
        return np.rint(self.shear * (np.arange(self.size) - c)).astype(np.int64)


def _bump(xs, ys, cx, cy, rx, ry):
    """Compactly supported C2 radial bump, peak 1 at the center."""
    d2 = ((xs[None, :] - cx) / rx) ** 2 + ((ys[:, None] - cy) / ry) ** 2
    return np.clip(1.0 - d2, 0.0, None) ** 3


def _shift_rows(img: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """Shift each row by an integer column offset, zero-filling."""
    out = np.zeros_like(img)
    n = img.shape[-1]
    for y, d in enumerate(shifts):
        d = int(d)
        if d == 0:
            out[:, y, :] = img[:, y, :]
        elif d > 0:
            out[:, y, d:] = img[:, y, : n - d]
        else:
            out[:, y, :n + d] = img[:, y, -d:]
    return out


def generate_face(
    seed: int,
    size: int,
    illum_delta: float = 0.0,
    shear: float = 0.0,
    n_landmarks: int = 10,
    dtype: torch.dtype = torch.float32,
) -> SyntheticFaceSample:
    """Deterministically render one face-like sample.

    illum_delta in [0, 0.5] sets the left/right gain contrast
    (g_left, g_right) = (1 + d/2, 1 - d/2); shear in [-0.12, 0.12] sets the
    staircase horizontal shear. Per-seed jitter varies the feature layout
    and iris color so samples carry identity information.
    """
    if size < 32:
        raise ValidationError(f"size must be >= 32, got {size}")
    if not 0.0 <= illum_delta <= MAX_ILLUM_DELTA:
        raise ValidationError(f"illum_delta must be in [0, {MAX_ILLUM_DELTA}]")
    if abs(shear) > MAX_SHEAR:
        raise ValidationError(f"|shear| must be <= {MAX_SHEAR}")
    if n_landmarks < 10:
        raise ValidationError("need at least the 10 canonical landmarks")

    rng = np.random.default_rng(seed)
    n = size
    c = (n - 1) / 2.0
    xs = np.arange(n, dtype=np.float64)
    ys = np.arange(n, dtype=np.float64)

    def jit(lo, hi):
        return rng.uniform(lo, hi)

    oval_rx = n * jit(0.27, 0.31)
    oval_ry = n * jit(0.35, 0.40)
    eye_dx = n * jit(0.115, 0.145)
    eye_y = int(round(c - n * jit(0.07, 0.11)))
    eye_r = n * jit(0.050, 0.066)
    iris_r = n * jit(0.026, 0.038)
    nose_y = int(round(c + n * jit(0.05, 0.09)))
    mouth_y = int(round(c + n * jit(0.19, 0.24)))
    mouth_w = n * jit(0.09, 0.12)
    iris_rgb = np.array(IRIS_RGB) * rng.uniform(0.75, 1.25, size=3)
    skin_rgb = np.array(SKIN_RGB) * rng.uniform(0.92, 1.05, size=3)

    base = np.zeros((3, n, n), dtype=np.float64)

    def paint(rgb, cx, cy, rx, ry):
        w = _bump(xs, ys, cx, cy, rx, ry)
        for ch in range(3):
            base[ch] += rgb[ch] * w

    paint(skin_rgb, c, c, oval_rx, oval_ry)
    for ex in (c - eye_dx, c + eye_dx):
        paint(np.array(SCLERA_RGB), ex, eye_y, eye_r * 1.25, eye_r * 0.85)
        paint(iris_rgb, ex, eye_y, iris_r, iris_r)
    paint(np.array(NOSE_RGB), c, nose_y - n * 0.04, n * 0.035, n * 0.09)
    paint(np.array(MOUTH_RGB), c, mouth_y, mouth_w, n * 0.035)
    base = np.clip(base, 0.0, 1.0)
    base = 0.5 * (base + base[:, :, ::-1])  # exact mirror symmetry

    shifts = np.rint(shear * (ys - c)).astype(np.int64)
    sheared = _shift_rows(base, shifts)

    g_left = 1.0 + illum_delta / 2.0
    g_right = 1.0 - illum_delta / 2.0
    gain = g_left + (g_right - g_left) / (1.0 + np.exp(-(xs - c) / ILLUM_TRANSITION_PX))
    lit = np.clip(sheared * gain[None, None, :], 0.0, 1.0)

    # mirror flow: sample the flipped image at x - 2*shift(row)
    xx = xs[None, :] - 2.0 * shifts[:, None].astype(np.float64)
    yy = np.broadcast_to(ys[:, None], (n, n)).copy()
    flow = flow_from_pixels(
        torch.from_numpy(np.clip(xx, 0, n - 1)), torch.from_numpy(yy)
    )

    pts = [
        (c - eye_dx - eye_r, eye_y), (c - eye_dx, eye_y), (c - eye_dx + eye_r, eye_y),
        (c + eye_dx - eye_r, eye_y), (c + eye_dx, eye_y), (c + eye_dx + eye_r, eye_y),
        (c, nose_y),
        (c - mouth_w, mouth_y), (c, mouth_y), (c + mouth_w, mouth_y),
    ]
    perm = list(FLIP_PERM)
    extra = n_landmarks - 10
    # extra landmarks come in mirrored pairs on the oval rim, one pair per row
    n_pairs = extra // 2
    for k in range(n_pairs):
        row = int(round(c + (k + 1) * 0.8 * oval_ry / (n_pairs + 1) - 0.4 * oval_ry))
        row = min(max(row, 0), n - 1)
        off = oval_rx * 0.8 * np.sqrt(max(0.0, 1.0 - ((row - c) / oval_ry) ** 2))
        i = len(pts)
        pts.append((c - off, row))
        pts.append((c + off, row))
        perm.extend([i + 1, i])
    if extra % 2 == 1:
        row = min(int(round(c + 0.9 * oval_ry)), n - 1)
        pts.append((c, row))  # chin point, self-paired
        perm.append(len(pts) - 1)

    # landmarks live in the sheared image: shift by the row's offset
    pts = [(x + float(shifts[int(y)]), float(y)) for (x, y) in pts]
    landmarks = LandmarkSet(
        pts=torch.tensor(pts, dtype=torch.float64),
        flip_perm=torch.tensor(perm, dtype=torch.long),
        part_indices=dict(PART_INDICES),
    )

    return SyntheticFaceSample(
        image=torch.from_numpy(lit).to(dtype),
        base=torch.from_numpy(sheared).to(dtype),
        gain=torch.from_numpy(gain).to(dtype),
        landmarks=landmarks,
        illum_gain=(g_left, g_right),
        shear=shear,
        mirror_flow=flow.to(torch.float64 if dtype == torch.float64 else torch.float32),
        seed=seed,
        size=size,
    )


def exact_mirror_flow(sample: SyntheticFaceSample) -> FlowField:
    """The analytically known flow onto each pixel's mirror partner."""
    return sample.mirror_flow


def apply_occlusion(image, mask: torch.Tensor) -> torch.Tensor:
    """Gray-fill the missing region: image * m + 0.5 * (1 - m)."""
    img = image.image if isinstance(image, SyntheticFaceSample) else image
    if mask.shape != img.shape[1:]:
        raise DimensionError("mask must match the image spatial size")
    m = mask.to(img.dtype)
    return img * m + 0.5 * (1.0 - m)


def left_eye_hole_mask(sample: SyntheticFaceSample, inflate: float = 2.4) -> torch.Tensor:
    """Rectangular hole covering the left eye, sized from its landmarks."""
    idx = list(sample.landmarks.part_indices["left_eye"])
    pts = sample.landmarks.pts[idx]
    cx = pts[:, 0].mean().item()
    cy = pts[:, 1].mean().item()
    spread = max(
        (pts[:, 0].max() - pts[:, 0].min()).item(),
        (pts[:, 1].max() - pts[:, 1].min()).item(),
        4.0,
    )
    half = inflate * spread / 2.0
    n = sample.size
    x0 = max(0, int(np.floor(cx - half)))
    x1 = min(n, int(np.ceil(cx + half)) + 1)
    y0 = max(0, int(np.floor(cy - half)))
    y1 = min(n, int(np.ceil(cy + half)) + 1)
    m = torch.ones(n, n)
    m[y0:y1, x0:x1] = 0.0
    return m


def dataset_params(seed: int, max_illum_delta: float, max_shear: float) -> tuple[float, float]:
    """Per-seed asymmetry draw used for dataset synthesis."""
    rng = np.random.default_rng((seed + 1) * 0x9E3779B9 % (2 ** 63))
    return (
        float(rng.uniform(0.0, max_illum_delta)),
        float(rng.uniform(-max_shear, max_shear)),
    )


def make_dataset(
    seed_start: int,
    count: int,
    size: int,
    max_illum_delta: float = 0.4,
    max_shear: float = 0.1,
    dtype: torch.dtype = torch.float32,
) -> list[SyntheticFaceSample]:
    """Samples for seeds [seed_start, seed_start + count); disjoint ranges
    give disjoint datasets."""
    out = []
    for s in range(seed_start, seed_start + count):
        delta, shear = dataset_params(s, max_illum_delta, max_shear)
        out.append(generate_face(s, size, illum_delta=delta, shear=shear, dtype=dtype))
    return out
