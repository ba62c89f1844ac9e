"""File formats: 8-bit PNG images/masks, SYMC checkpoints, SFLW flow dumps.

Checkpoint layout (little-endian throughout):
    magic "SYMC", u32 version, u32 array count, then per array:
    u16 name length, name bytes (utf-8), u8 rank, rank x u32 dims,
    float32 payload. Round-trips are bit-exact.

Flow debug dump: magic "SFLW", u16 H, u16 W, then the two normalized
channel planes (x first) as float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DimensionError, FormatError
from .warp import FlowField

CHECKPOINT_MAGIC = b"SYMC"
CHECKPOINT_VERSION = 1
FLOW_MAGIC = b"SFLW"


# ---------------------------------------------------------------------------
# images and masks


def save_image_png(path, img: torch.Tensor) -> None:
    """Write a (C, H, W) or (H, W) tensor in [0, 1] as an 8-bit PNG."""
    arr = img.detach().cpu().numpy()
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def load_image_png(path) -> torch.Tensor:
    """Read a PNG as a float (3, H, W) tensor scaled to [0, 1]."""
    img = Image.open(path).convert("RGB")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return torch.from_numpy(np.transpose(arr, (2, 0, 1)).copy())


def save_mask_png(path, mask: torch.Tensor) -> None:
    """Write a binary mask as an 8-bit PNG, white = present."""
    save_image_png(path, mask)


def load_mask_png(path) -> torch.Tensor:
    """Read a mask PNG; any value >= 128 maps to present (1)."""
    img = Image.open(path).convert("L")
    arr = np.asarray(img)
    return torch.from_numpy((arr >= 128).astype(np.float32))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arrays: dict[str, torch.Tensor]) -> None:
    """Serialize named float arrays; values are stored as float32."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(arrays))
    for name, tensor in arrays.items():
        data = tensor.detach().cpu().to(torch.float32).numpy()
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise FormatError(f"array name too long: {name}")
        blob += struct.pack("<H", len(name_b))
        blob += name_b
        blob += struct.pack("<B", data.ndim)
        for d in data.shape:
            blob += struct.pack("<I", d)
        blob += data.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> dict[str, torch.Tensor]:
    """Read a checkpoint; malformed content raises FormatError with offset."""
    raw = Path(path).read_bytes()
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=off)
        chunk = raw[off : off + n]
        off += n
        return chunk

    if need(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, count = struct.unpack("<II", need(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    arrays: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", need(1, "rank"))
        dims = [struct.unpack("<I", need(4, "dims"))[0] for _ in range(rank)]
        numel = int(np.prod(dims)) if dims else 1
        payload = need(4 * numel, f"payload of {name}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
        arrays[name] = torch.from_numpy(arr.copy())
    if off != len(raw):
        raise FormatError("trailing bytes after last array", offset=off)
    return arrays


# ---------------------------------------------------------------------------
# flow and ratio debug exports


def save_flow_raw(path, flow: FlowField) -> None:
    h, w = flow.height, flow.width
    if h > 0xFFFF or w > 0xFFFF:
        raise DimensionError("flow too large for the raw header")
    blob = FLOW_MAGIC + struct.pack("<HH", h, w)
    blob += flow.u.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
    Path(path).write_bytes(blob)


def load_flow_raw(path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != FLOW_MAGIC:
        raise FormatError("bad flow magic", offset=0)
    h, w = struct.unpack("<HH", raw[4:8])
    expect = 8 + 2 * h * w * 4
    if len(raw) != expect:
        raise FormatError(f"flow payload size mismatch (expected {expect} bytes)", offset=8)
    u = np.frombuffer(raw[8:], dtype="<f4").reshape(2, h, w)
    return FlowField(torch.from_numpy(u.copy()))


def ratio_to_falsecolor(r: torch.Tensor) -> torch.Tensor:
    """Map a positive ratio map to a diverging palette on log scale.

    log10(r) = -1 maps to blue, 0 to white, +1 to red; the input may be
    (3, H, W) (averaged) or (H, W).
    """
    if r.ndim == 3:
        r = r.mean(dim=0)
    v = torch.clamp(torch.log10(r.clamp(min=1e-6)), -1.0, 1.0)
    pos = v.clamp(min=0.0)
    neg = (-v).clamp(min=0.0)
    red = 1.0 - neg
    green = 1.0 - pos.maximum(neg)
    blue = 1.0 - pos
    return torch.stack([red, green, blue], dim=0)
