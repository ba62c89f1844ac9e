"""Network construction: warp/light/reconstruction generators, PatchGAN
discriminators, the frozen perceptual feature stack, and facial part crops.

Every network is built by interpreting a flat list of LayerSpec entries, and
the same list drives pure shape propagation, so the tests check exactly the
structure the modules execute. The generators are encoder-decoder stacks of
4x4 stride-2 (transposed) convolutions; the reconstruction net additionally
concatenates each encoder level into the mirrored decoder level and exposes
a decoder feature tap. Channel widths scale with a width multiplier; depth
follows the input size (one downsampling per power of two down to 1x1).

Normalization note: batch statistics degenerate at batch size 1, so the
"norm" layer kind is realized as per-instance normalization (affine), used
identically in train and eval mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import DimensionError, ValidationError
from .illum import RATIO_MAX, RATIO_MIN
from .landmarks import PART_NAMES, LandmarkSet
from .warp import sample_bilinear

SUPPORTED_SCALES = (1.0, 0.5, 0.25, 0.125)
BASE_WIDTH = 64
WIDTH_CAP_MULT = 16
LRELU_SLOPE = 0.2
DROPOUT_P = 0.5
MIN_PART_SIDE = 16.0
PART_BOX_SCALE = 2.5


@dataclass(frozen=True)
class LayerSpec:
    """One executable layer: conv | tconv | norm | act | dropout | concat."""

    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 0
    padding: int = 0
    activation: str = ""  # lrelu | relu | tanh | sigmoid
    concat_from: int = -1  # flat index of the layer whose output is concatenated

    def __post_init__(self):
        if self.kind in ("conv", "tconv") and (self.kernel < 1 or self.stride < 1):
            raise ValidationError("conv layers need positive kernel and stride")


def propagate_shapes(
    specs: list[LayerSpec], in_shape: tuple[int, int, int]
) -> list[tuple[int, int, int]]:
    """Per-layer output shapes (C, H, W) for an input shape, no tensors."""
    shapes: list[tuple[int, int, int]] = []
    c, h, w = in_shape
    for spec in specs:
        if spec.kind == "conv":
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            c = spec.out_channels
            if h < 1 or w < 1:
                raise DimensionError("input smaller than the network's receptive field")
        elif spec.kind == "tconv":
            h = (h - 1) * spec.stride - 2 * spec.padding + spec.kernel
            w = (w - 1) * spec.stride - 2 * spec.padding + spec.kernel
            c = spec.out_channels
        elif spec.kind == "concat":
            if not 0 <= spec.concat_from < len(shapes):
                raise ValidationError(f"concat_from {spec.concat_from} out of range")
            sc, sh, sw = shapes[spec.concat_from]
            if (sh, sw) != (h, w):
                raise DimensionError("concat source spatial size mismatch")
            c = c + sc
        # norm / act / dropout keep the shape
        shapes.append((c, h, w))
    return shapes


def _check_build_args(scale: float | None, input_size: int, base_width: int | None) -> int:
    if base_width is None:
        if scale not in SUPPORTED_SCALES:
            raise ValidationError(f"scale must be one of {SUPPORTED_SCALES}, got {scale}")
        base_width = int(round(BASE_WIDTH * scale))
    if input_size < 32 or input_size & (input_size - 1):
        raise ValidationError(f"input_size must be a power of two >= 32, got {input_size}")
    return base_width


def _encoder_widths(base: int, n_down: int) -> list[int]:
    return [base * min(2 ** i, WIDTH_CAP_MULT) for i in range(n_down)]


def generator_specs(
    base: int, input_size: int, out_channels: int, head_act: str, skips: bool
) -> list[LayerSpec]:
    """Flat layer list for one encoder-decoder generator.

    skips=False gives the plain trunk (lrelu encoder, relu decoder);
    skips=True adds dropout on the three innermost decoder blocks, a concat
    from each encoder level, and lrelu decoder activations.
    """
    n_down = int(math.log2(input_size))
    enc = _encoder_widths(base, n_down)
    specs: list[LayerSpec] = []
    enc_out_idx: list[int] = []  # flat index of each encoder block's activation
    for i, ch in enumerate(enc):
        specs.append(LayerSpec("conv", ch, 4, 2, 1))
        if 0 < i < n_down - 1:
            specs.append(LayerSpec("norm", ch))
        specs.append(LayerSpec("act", activation="lrelu"))
        enc_out_idx.append(len(specs) - 1)

    dec_act = "lrelu" if skips else "relu"
    dec_outs = enc[-2::-1]  # mirror of the encoder, bottleneck excluded
    n_dropout = min(3, len(dec_outs))
    for i, ch in enumerate(dec_outs):
        specs.append(LayerSpec("tconv", ch, 4, 2, 1))
        specs.append(LayerSpec("norm", ch))
        if skips and i < n_dropout:
            specs.append(LayerSpec("dropout"))
        if skips:
            specs.append(LayerSpec("concat", concat_from=enc_out_idx[n_down - 2 - i]))
        specs.append(LayerSpec("act", activation=dec_act))
    specs.append(LayerSpec("tconv", out_channels, 4, 2, 1))
    specs.append(LayerSpec("act", activation=head_act))
    return specs


def discriminator_specs(base: int, n_stride2: int) -> list[LayerSpec]:
    """PatchGAN stack: n_stride2 downsamplings, then stride-1 tail + head."""
    specs: list[LayerSpec] = []
    widths = [base * 2 ** i for i in range(n_stride2 + 1)]
    for i, ch in enumerate(widths):
        stride = 2 if i < n_stride2 else 1
        specs.append(LayerSpec("conv", ch, 4, stride, 1))
        if i > 0:
            specs.append(LayerSpec("norm", ch))
        specs.append(LayerSpec("act", activation="lrelu"))
    specs.append(LayerSpec("conv", 1, 4, 1, 1))
    specs.append(LayerSpec("act", activation="sigmoid"))
    return specs


_ACTS = {
    "lrelu": lambda: nn.LeakyReLU(LRELU_SLOPE),
    "relu": nn.ReLU,
    "tanh": nn.Tanh,
    "sigmoid": nn.Sigmoid,
}


class InstanceNorm(nn.Module):
    """Per-instance, per-channel normalization with affine parameters.

    Executed as group normalization with one group per channel, which is
    numerically identical and has the faster CPU kernel.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.group_norm(x, self.channels, self.weight, self.bias, self.eps)


class SpecNet(nn.Module):
    """Executes a flat LayerSpec list; optionally exposes one tapped layer."""

    def __init__(self, specs: list[LayerSpec], in_channels: int, tap_index: int | None = None):
        super().__init__()
        self.specs = specs
        self.in_channels = in_channels
        self.tap_index = tap_index
        ops: list[nn.Module] = []
        c = in_channels
        for i, spec in enumerate(specs):
            # a following norm layer subsumes the conv bias
            bias = not (i + 1 < len(specs) and specs[i + 1].kind == "norm")
            if spec.kind == "conv":
                ops.append(nn.Conv2d(c, spec.out_channels, spec.kernel, spec.stride,
                                     spec.padding, bias=bias))
                c = spec.out_channels
            elif spec.kind == "tconv":
                ops.append(nn.ConvTranspose2d(c, spec.out_channels, spec.kernel, spec.stride,
                                              spec.padding, bias=bias))
                c = spec.out_channels
            elif spec.kind == "norm":
                ops.append(InstanceNorm(c))
            elif spec.kind == "act":
                ops.append(_ACTS[spec.activation]())
            elif spec.kind == "dropout":
                ops.append(nn.Dropout(DROPOUT_P))
            elif spec.kind == "concat":
                ops.append(nn.Identity())
                c = c + _out_channels_at(specs, spec.concat_from, in_channels)
            else:
                raise ValidationError(f"unknown layer kind {spec.kind!r}")
        self.ops = nn.ModuleList(ops)
        self.out_channels = c

    def forward(self, x: torch.Tensor, return_tap: bool = False):
        squeeze = x.ndim == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.in_channels:
            raise DimensionError(
                f"expected {self.in_channels} input channels, got {x.shape[1]}"
            )
        outs: list[torch.Tensor] = []
        for spec, op in zip(self.specs, self.ops):
            if spec.kind == "concat":
                x = torch.cat([x, outs[spec.concat_from]], dim=1)
            else:
                x = op(x)
            outs.append(x)
        tap = None
        if return_tap:
            if self.tap_index is None:
                raise ValidationError("network has no tap layer")
            tap = outs[self.tap_index]
            if squeeze:
                tap = tap.squeeze(0)
        if squeeze:
            x = x.squeeze(0)
        return (x, tap) if return_tap else x


class ClampedRatioNet(nn.Module):
    """Wraps the light trunk so its nonnegative head lands in [0.1, 10]."""

    def __init__(self, trunk: SpecNet):
        super().__init__()
        self.trunk = trunk
        self.specs = trunk.specs
        self.in_channels = trunk.in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x).clamp(RATIO_MIN, RATIO_MAX)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled normal init over the module's parameters."""
    gen = torch.Generator().manual_seed(seed)
    gain = math.sqrt(2.0 / (1.0 + LRELU_SLOPE ** 2))
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            w = m.weight
            fan_in = w.shape[1] * w.shape[2] * w.shape[3]
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = w.shape[0] * w.shape[2] * w.shape[3]
            std = gain / math.sqrt(fan_in)
            with torch.no_grad():
                w.copy_(torch.normal(0.0, std, w.shape, generator=gen))
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, InstanceNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_flownet(
    scale: float | None = None, input_size: int = 64,
    base_width: int | None = None, seed: int = 0,
) -> SpecNet:
    """Correspondence net: 6-channel input, 2-channel tanh head."""
    base = _check_build_args(scale, input_size, base_width)
    net = SpecNet(generator_specs(base, input_size, 2, "tanh", skips=False), in_channels=6)
    init_parameters(net, seed)
    return net


def build_lightnet(
    scale: float | None = None, input_size: int = 64,
    base_width: int | None = None, seed: int = 1,
) -> ClampedRatioNet:
    """Illumination-ratio net: same trunk, 3-channel nonnegative head."""
    base = _check_build_args(scale, input_size, base_width)
    trunk = SpecNet(generator_specs(base, input_size, 3, "relu", skips=False), in_channels=6)
    init_parameters(trunk, seed)
    return ClampedRatioNet(trunk)


def build_recnet(
    scale: float | None = None, input_size: int = 64,
    base_width: int | None = None, seed: int = 2, tap: int = 1,
) -> SpecNet:
    """Reconstruction U-net: 6-channel input, sigmoid head, decoder tap.

    tap counts decoder blocks back from the head: tap=1 is the last full
    decoder block, producing features at input_size / 2.
    """
    base = _check_build_args(scale, input_size, base_width)
    n_down = int(math.log2(input_size))
    if not 1 <= tap <= n_down - 1:
        raise ValidationError(f"tap must be in [1, {n_down - 1}], got {tap}")
    specs = generator_specs(base, input_size, 3, "sigmoid", skips=True)
    # decoder blocks close with [..., concat, act]; collect those activations
    act_indices = [
        i for i, s in enumerate(specs)
        if s.kind == "act" and i > 0 and specs[i - 1].kind == "concat"
    ]
    tap_index = act_indices[len(act_indices) - tap]
    net = SpecNet(specs, in_channels=6, tap_index=tap_index)
    init_parameters(net, seed)
    return net


def build_global_discriminator(
    scale: float | None = None, input_size: int = 256,
    base_width: int | None = None, seed: int = 3,
) -> SpecNet:
    """Whole-image PatchGAN: three stride-2 levels, 1x30x30 grid at 256."""
    base = _check_build_args(scale, input_size, base_width)
    net = SpecNet(discriminator_specs(base, n_stride2=3), in_channels=3)
    init_parameters(net, seed)
    return net


def build_part_discriminator(
    scale: float | None = None, part_size: int = 128,
    base_width: int | None = None, seed: int = 4,
) -> SpecNet:
    """Facial-part PatchGAN: two stride-2 levels, 1x30x30 grid at 128."""
    base = _check_build_args(scale, part_size, base_width)
    net = SpecNet(discriminator_specs(base, n_stride2=2), in_channels=3)
    init_parameters(net, seed)
    return net


def forward_group_fused(nets: list[SpecNet], x: torch.Tensor) -> list[torch.Tensor]:
    """Run k same-architecture networks as one grouped-conv pass.

    x is (N, k*in_channels, H, W) with each net's input stacked channel-wise.
    Layers are executed fused (groups=k) while the nets' specs agree on
    out_channels; any diverging tail (e.g. different heads) runs per net on
    its channel slice. Gradients flow back to each net's own parameters
    through the weight concatenation; results match per-net execution.

    Only plain sequences fuse (no concat/dropout layers).
    """
    k = len(nets)
    specs = nets[0].specs
    for net in nets[1:]:
        if len(net.specs) != len(specs):
            raise ValidationError("fused networks must have equal depth")
    split = len(specs)
    for i, spec in enumerate(specs):
        if spec.kind in ("concat", "dropout"):
            raise ValidationError("fused execution supports plain sequences only")
        if any(net.specs[i] != spec for net in nets[1:]):
            split = i
            break

    squeeze = x.ndim == 3
    if squeeze:
        x = x.unsqueeze(0)
    ops_per_net = [list(net.ops) for net in nets]
    for i in range(split):
        spec = specs[i]
        layer_ops = [ops[i] for ops in ops_per_net]
        if spec.kind == "conv":
            w = torch.cat([op.weight for op in layer_ops], dim=0)
            b = None if layer_ops[0].bias is None else torch.cat([op.bias for op in layer_ops])
            x = nn.functional.conv2d(x, w, b, spec.stride, spec.padding, groups=k)
        elif spec.kind == "tconv":
            w = torch.cat([op.weight for op in layer_ops], dim=0)
            b = None if layer_ops[0].bias is None else torch.cat([op.bias for op in layer_ops])
            x = nn.functional.conv_transpose2d(x, w, b, spec.stride, spec.padding, groups=k)
        elif spec.kind == "norm":
            w = torch.cat([op.weight for op in layer_ops])
            b = torch.cat([op.bias for op in layer_ops])
            x = nn.functional.group_norm(x, x.shape[1], w, b, layer_ops[0].eps)
        else:  # activation
            x = ops_per_net[0][i](x)

    if split == len(specs):
        c = x.shape[1] // k
        outs = [x[:, j * c:(j + 1) * c] for j in range(k)]
    else:
        c = x.shape[1] // k
        outs = []
        for j, net in enumerate(nets):
            y = x[:, j * c:(j + 1) * c]
            for spec, op in list(zip(net.specs, net.ops))[split:]:
                y = op(y)
            outs.append(y)
    if squeeze:
        outs = [o.squeeze(0) for o in outs]
    return outs


def _out_channels_at(specs: list[LayerSpec], idx: int, in_channels: int) -> int:
    c = in_channels
    for spec in specs[: idx + 1]:
        if spec.kind in ("conv", "tconv"):
            c = spec.out_channels
        elif spec.kind == "concat":
            c = c + _out_channels_at(specs, spec.concat_from, in_channels)
    return c


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# frozen perceptual feature stack


EXTRACTOR_WIDTHS = (16, 32, 64, 128, 128)
EXTRACTOR_SEED = 7777


def build_feature_extractor(
    seed: int = EXTRACTOR_SEED, widths: tuple[int, ...] = EXTRACTOR_WIDTHS,
    dtype: torch.dtype = torch.float32,
) -> nn.Module:
    """Fixed-seed frozen conv stack; features are tapped after the last block."""
    layers: list[nn.Module] = []
    c = 3
    for w in widths:
        layers.append(nn.Conv2d(c, w, 3, 2, 1))
        layers.append(nn.LeakyReLU(LRELU_SLOPE))
        c = w
    net = nn.Sequential(*layers)
    init_parameters(net, seed)
    net.to(dtype)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)

    class _Extractor(nn.Module):
        def __init__(self, stack):
            super().__init__()
            self.stack = stack

        def forward(self, x):
            squeeze = x.ndim == 3
            if squeeze:
                x = x.unsqueeze(0)
            y = self.stack(x)
            return y.squeeze(0) if squeeze else y

    return _Extractor(net)


# ---------------------------------------------------------------------------
# facial part crops


def part_box(lm: LandmarkSet, part: str) -> tuple[float, float, float]:
    """(center_x, center_y, side) of a part's square crop box.

    The box is centered on the part's landmark centroid with side
    PART_BOX_SCALE x the landmark spread, floored at MIN_PART_SIDE (also the
    fallback for degenerate zero-spread parts).
    """
    if part not in lm.part_indices:
        raise ValidationError(f"landmark set has no part {part!r}")
    pts = lm.pts[list(lm.part_indices[part])]
    cx = pts[:, 0].mean().item()
    cy = pts[:, 1].mean().item()
    spread = max(
        (pts[:, 0].max() - pts[:, 0].min()).item(),
        (pts[:, 1].max() - pts[:, 1].min()).item(),
    )
    side = max(PART_BOX_SCALE * spread, MIN_PART_SIDE)
    return cx, cy, side


def _part_grid(lm: LandmarkSet, part: str, part_size: int,
               dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    cx, cy, side = part_box(lm, part)
    half = side / 2.0
    xs = torch.linspace(cx - half, cx + half, part_size, dtype=dtype)
    ys = torch.linspace(cy - half, cy + half, part_size, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return gx, gy


def crop_part(img: torch.Tensor, lm: LandmarkSet, part: str, part_size: int) -> torch.Tensor:
    """Differentiable square crop of one facial part, resized to part_size."""
    gx, gy = _part_grid(lm, part, part_size, img.dtype)
    return sample_bilinear(img, gx, gy)


def crop_parts(img: torch.Tensor, lm: LandmarkSet, part_size: int) -> dict[str, torch.Tensor]:
    """All four part crops (left eye, right eye, nose, mouth), one gather."""
    h, w = img.shape[1], img.shape[2]
    if (lm.pts[:, 0].min() < 0 or lm.pts[:, 0].max() > w - 1
            or lm.pts[:, 1].min() < 0 or lm.pts[:, 1].max() > h - 1):
        raise ValidationError("landmarks out of image bounds")
    grids = [_part_grid(lm, name, part_size, img.dtype) for name in PART_NAMES]
    gx = torch.stack([g[0] for g in grids])
    gy = torch.stack([g[1] for g in grids])
    crops = sample_bilinear(img, gx, gy)  # (C, 4, ps, ps)
    return {name: crops[:, i] for i, name in enumerate(PART_NAMES)}
