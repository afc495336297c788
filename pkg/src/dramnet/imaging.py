"""Bit matrices to grayscale fingerprint images, resizing, crops and PGM I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError

CROP_TAGS = ("tl", "tr", "bl", "br", "c", "full")
DEFAULT_CROP_FRACTION = 0.875


@dataclass(frozen=True, eq=False)
class FingerprintImage:
    pixels: np.ndarray  # uint8, (rows, cols)
    label: int | None = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DimensionError(f"image must be a non-empty 2D raster, got shape {self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise ParameterError(f"pixels must be uint8, got {self.pixels.dtype}")

    @property
    def rows(self) -> int:
        return self.pixels.shape[0]

    @property
    def cols(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class NormalizedInput:
    values: np.ndarray  # (height, width, 1), in [0, 1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    channels = 1


def to_image(measurement) -> FingerprintImage:
    bits = np.asarray(measurement.bits, dtype=np.uint8)
    return FingerprintImage(
        bits * np.uint8(255),
        label=measurement.device_id,
        source={"measurement_seed": measurement.measurement_seed, "crop": "full"},
    )


def to_bits(image: FingerprintImage) -> np.ndarray:
    return (image.pixels >= 128).astype(np.uint8)


def block_mean(pixels: np.ndarray, target_rows: int, target_cols: int) -> np.ndarray:
    """Mean over non-overlapping blocks, rounded half-up. Works on (..., H, W) stacks."""
    h, w = pixels.shape[-2:]
    if target_rows < 1 or target_cols < 1 or h % target_rows or w % target_cols:
        raise DimensionError(f"{h}x{w} cannot be block-averaged to {target_rows}x{target_cols}")
    bh, bw = h // target_rows, w // target_cols
    blocks = pixels.reshape(*pixels.shape[:-2], target_rows, bh, target_cols, bw)
    sums = blocks.sum(axis=(-3, -1), dtype=np.int64)
    n = bh * bw
    # floor(sum / n + 1/2) in exact integer arithmetic
    return ((2 * sums + n) // (2 * n)).astype(np.uint8)


def nearest(pixels: np.ndarray, target_rows: int, target_cols: int) -> np.ndarray:
    h, w = pixels.shape[-2:]
    ri = (np.arange(target_rows) * h) // target_rows
    ci = (np.arange(target_cols) * w) // target_cols
    return pixels[..., ri[:, None], ci[None, :]]


def resize(pixels: np.ndarray, target_rows: int, target_cols: int) -> np.ndarray:
    """Block mean when the target divides the source, nearest neighbour otherwise."""
    h, w = pixels.shape[-2:]
    if (h, w) == (target_rows, target_cols):
        return pixels.copy()
    if h % target_rows == 0 and w % target_cols == 0:
        return block_mean(pixels, target_rows, target_cols)
    return nearest(pixels, target_rows, target_cols)


def downscale(image: FingerprintImage, target_rows: int, target_cols: int) -> FingerprintImage:
    return replace(image, pixels=block_mean(image.pixels, target_rows, target_cols))


def crop_boxes(rows: int, cols: int, fraction: float) -> dict[str, tuple[int, int, int, int]]:
    """(top, left, height, width) of each crop, keyed by crop tag."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"crop fraction must be in (0, 1], got {fraction}")
    h = max(1, int(np.floor(fraction * rows)))
    w = max(1, int(np.floor(fraction * cols)))
    return {
        "tl": (0, 0, h, w),
        "tr": (0, cols - w, h, w),
        "bl": (rows - h, 0, h, w),
        "br": (rows - h, cols - w, h, w),
        "c": ((rows - h) // 2, (cols - w) // 2, h, w),
        "full": (0, 0, rows, cols),
    }


def crop_stack(pixels: np.ndarray, fraction: float = DEFAULT_CROP_FRACTION) -> np.ndarray:
    """Six resized crops of every image in a (N, H, W) stack -> (N, 6, H, W), CROP_TAGS order."""
    rows, cols = pixels.shape[-2:]
    boxes = crop_boxes(rows, cols, fraction)
    out = [resize(pixels[..., t : t + h, l : l + w], rows, cols) for t, l, h, w in (boxes[k] for k in CROP_TAGS)]
    return np.stack(out, axis=-3)


def six_crops(image: FingerprintImage, fraction: float = DEFAULT_CROP_FRACTION) -> list[FingerprintImage]:
    stack = crop_stack(image.pixels, fraction)
    return [
        FingerprintImage(stack[i], label=image.label, source={**image.source, "crop": tag})
        for i, tag in enumerate(CROP_TAGS)
    ]


def normalize(image: FingerprintImage) -> NormalizedInput:
    return NormalizedInput((image.pixels / 255.0)[:, :, None])


# --- PGM (binary P5, maxval 255) -------------------------------------------------

_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def encode_pgm(pixels: np.ndarray) -> bytes:
    rows, cols = pixels.shape
    return f"P5\n{cols} {rows}\n255\n".encode("ascii") + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic != b"P5":
        raise FormatError(f"expected binary PGM magic P5, got {magic.decode(errors='replace')}")
    try:
        cols, rows, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("non-numeric PGM header field") from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if rows < 1 or cols < 1:
        raise FormatError(f"invalid PGM size {cols}x{rows}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header")
    payload = data[pos + 1 :]
    if len(payload) != rows * cols:
        raise FormatError(f"PGM payload is {len(payload)} bytes, expected {rows * cols}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols).copy()


def export_pgm(image: FingerprintImage, path) -> None:
    Path(path).write_bytes(encode_pgm(image.pixels))


def import_pgm(path) -> FingerprintImage:
    return FingerprintImage(decode_pgm(Path(path).read_bytes()))
