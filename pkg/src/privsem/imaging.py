"""Core pixel-domain types and the masking algebra shared by every module.

Images are (C, H, W) float32 tensors with values in [0, 1]. Masked regions
are filled with a reserved sentinel color; the receiver recovers the mask by
detecting pixels within a small tolerance of that color, which works because
the source quantizer never emits codewords inside the tolerance band for
ordinary content.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from privsem.errors import DimensionError, EmptyRegionError

DEFAULT_SENTINEL_TOLERANCE = 1.0 / 512.0


@dataclass(frozen=True)
class Image:
    """Dense pixel tensor of shape (C, H, W), each value in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3:
            raise DimensionError(f"image must be (C, H, W), got shape {px.shape}")
        if not np.isfinite(px).all():
            raise ValueError("image contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class BinaryMask:
    """(H, W) indicator of the privacy region; entries are exactly 0 or 1."""

    bits: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bits)
        if b.ndim != 2:
            raise DimensionError(f"mask must be (H, W), got shape {b.shape}")
        if not np.isin(b, (0, 1)).all():
            raise ValueError("mask entries must be exactly 0 or 1")
        object.__setattr__(self, "bits", b.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def any(self) -> bool:
        return bool(self.bits.any())

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class SentinelSpec:
    """Reserved fill color for masked regions plus the detection tolerance.

    The tolerance must stay below half the distance from the sentinel to the
    nearest content codeword of the source quantizer; the codec checks that
    invariant when it is configured.
    """

    color: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    tolerance: float = DEFAULT_SENTINEL_TOLERANCE

    def __post_init__(self):
        c = np.asarray(self.color, dtype=np.float32).reshape(-1)
        if c.min() < 0.0 or c.max() > 1.0:
            raise ValueError("sentinel color must lie in [0, 1] per channel")
        if self.tolerance < 0.0:
            raise ValueError("tolerance must be nonnegative")
        object.__setattr__(self, "color", c)


def apply_mask(image: Image, mask: BinaryMask, sentinel: SentinelSpec) -> Image:
    """Replace masked pixels with the sentinel color; the rest pass through.

    With a zero sentinel this is exactly the elementwise product of the image
    with the mask complement.
    """
    if mask.shape != (image.height, image.width):
        raise DimensionError(f"mask shape {mask.shape} does not match image {image.shape}")
    if sentinel.color.shape[0] != image.channels:
        raise DimensionError("sentinel color channel count does not match image")
    m = mask.bits.astype(bool)[None, :, :]
    fill = sentinel.color.astype(np.float32)[:, None, None]
    out = np.where(m, fill, image.pixels)
    return Image(out)


def recover_mask(received: Image, sentinel: SentinelSpec) -> BinaryMask:
    """Mark every pixel whose max-channel distance to the sentinel is within tolerance."""
    if sentinel.color.shape[0] != received.channels:
        raise DimensionError("sentinel color channel count does not match image")
    dist = np.abs(received.pixels - sentinel.color[:, None, None]).max(axis=0)
    return BinaryMask((dist <= sentinel.tolerance).astype(np.uint8))


def mask_bbox(mask: BinaryMask) -> tuple[int, int, int, int]:
    """Tight bounding box (r0, r1, c0, c1) of set bits, end-exclusive."""
    if not mask.any():
        raise EmptyRegionError("mask has no set bits")
    rows = np.flatnonzero(mask.bits.any(axis=1))
    cols = np.flatnonzero(mask.bits.any(axis=0))
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def region_crop(image: Image, mask: BinaryMask) -> Image:
    """Crop to the bounding box of the mask.

    Pixels inside the box but outside the mask are retained (box semantics).
    """
    if mask.shape != (image.height, image.width):
        raise DimensionError(f"mask shape {mask.shape} does not match image {image.shape}")
    r0, r1, c0, c1 = mask_bbox(mask)
    return Image(image.pixels[:, r0:r1, c0:c1])


def save_png(image: Image, path: str | Path) -> None:
    """Write as 8-bit PNG (lossless for 8-bit content)."""
    arr = np.round(image.pixels * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        pil = PILImage.fromarray(arr[0], mode="L")
    elif arr.shape[0] == 3:
        pil = PILImage.fromarray(np.transpose(arr, (1, 2, 0)), mode="RGB")
    else:
        raise DimensionError(f"cannot write {arr.shape[0]}-channel image as PNG")
    pil.save(Path(path), format="PNG")


def load_png(path: str | Path) -> Image:
    pil = PILImage.open(Path(path))
    if pil.mode == "L":
        arr = np.asarray(pil, dtype=np.float32)[None, :, :]
    else:
        arr = np.transpose(np.asarray(pil.convert("RGB"), dtype=np.float32), (2, 0, 1))
    return Image(arr / 255.0)


def save_mask_png(mask: BinaryMask, path: str | Path) -> None:
    PILImage.fromarray(mask.bits * np.uint8(255), mode="L").save(Path(path), format="PNG")


def load_mask_png(path: str | Path) -> BinaryMask:
    arr = np.asarray(PILImage.open(Path(path)).convert("L"))
    return BinaryMask((arr >= 128).astype(np.uint8))
