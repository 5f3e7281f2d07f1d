"""Saliency-map post-processing: binarization with fallbacks, bbox, crop.

The learned detector is not part of this package. Maps come from PGM files
or from :func:`toy_saliency`, which degrades a known foreground indicator.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

PRIMARY_THRESHOLD = 0.8
REFINED_THRESHOLD = 0.2
MIN_POSITIVE_FRACTION = 0.005
CENTRAL_MARGIN = 0.1


class EmptyMaskError(ValueError):
    """A bounding box was requested for a mask with no positive pixels."""


class MaskSource(enum.Enum):
    PRIMARY_THRESHOLD = "primary_threshold"
    REFINED_THRESHOLD = "refined_threshold"
    CENTRAL_FALLBACK = "central_fallback"
    EXTERNAL_FILE = "external_file"
    TOY_GENERATOR = "toy_generator"


@dataclass(frozen=True)
class MaskProvenance:
    source: MaskSource
    threshold_used: float | None = None


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel bounds."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    @property
    def height(self):
        return self.row_max - self.row_min + 1

    @property
    def width(self):
        return self.col_max - self.col_min + 1

    def to_text(self) -> str:
        return (
            f"row_min:{self.row_min}\ncol_min:{self.col_min}\n"
            f"row_max:{self.row_max}\ncol_max:{self.col_max}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "BoundingBox":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise ValueError(f"malformed bbox line {line!r}")
            fields[key.strip()] = int(value)
        return cls(**{k: fields[k] for k in ("row_min", "col_min", "row_max", "col_max")})


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant map becomes all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def binarize(saliency: np.ndarray, d_alpha: float) -> np.ndarray:
    return (np.asarray(saliency) >= d_alpha).astype(np.uint8)


def is_corrupted(mask: np.ndarray, min_fraction: float = MIN_POSITIVE_FRACTION) -> bool:
    positives = int(mask.sum())
    return positives == 0 or positives < min_fraction * mask.size


def central_mask(height: int, width: int, margin: float = CENTRAL_MARGIN) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    mr = int(np.floor(margin * height))
    mc = int(np.floor(margin * width))
    mask[mr : height - mr, mc : width - mc] = 1
    return mask


def extract_mask(
    saliency: np.ndarray,
    primary: float = PRIMARY_THRESHOLD,
    refined: float = REFINED_THRESHOLD,
    min_fraction: float = MIN_POSITIVE_FRACTION,
) -> tuple[np.ndarray, MaskProvenance]:
    """Binarize a normalized map, falling back to a lower threshold and then
    to the central region when the result is empty or nearly empty."""
    mask = binarize(saliency, primary)
    if not is_corrupted(mask, min_fraction):
        return mask, MaskProvenance(MaskSource.PRIMARY_THRESHOLD, primary)
    mask = binarize(saliency, refined)
    if not is_corrupted(mask, min_fraction):
        return mask, MaskProvenance(MaskSource.REFINED_THRESHOLD, refined)
    h, w = np.shape(saliency)
    return central_mask(h, w), MaskProvenance(MaskSource.CENTRAL_FALLBACK)


def bounding_box(mask: np.ndarray) -> BoundingBox:
    rows = np.flatnonzero(np.any(mask, axis=1))
    cols = np.flatnonzero(np.any(mask, axis=0))
    if rows.size == 0:
        raise EmptyMaskError("bounding box of an empty mask")
    return BoundingBox(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def _bilinear_axis(n_in, n_out):
    # corner-aligned: output sample 0 and n_out-1 hit input pixels 0 and n_in-1
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    r0, r1, fr = _bilinear_axis(image.shape[0], height)
    c0, c1, fc = _bilinear_axis(image.shape[1], width)
    extra = (1,) * (image.ndim - 2)
    fr = fr.reshape(-1, 1, *extra)
    fc = fc.reshape(1, -1, *extra)
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bottom = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def resize_nearest(array: np.ndarray, height: int, width: int) -> np.ndarray:
    h, w = array.shape[:2]
    rows = np.minimum(((np.arange(height) + 0.5) * h / height).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * w / width).astype(np.int64), w - 1)
    return array[rows][:, cols]


def crop_and_resize(image, mask, box: BoundingBox, target: int):
    """Crop both arrays to ``box`` and resize to ``target`` x ``target``.

    The image is resampled bilinearly, the mask by nearest neighbour so it
    stays binary.
    """
    if target <= 0:
        raise ValueError(f"target side must be positive, got {target}")
    h, w = np.shape(mask)[:2]
    if not (0 <= box.row_min <= box.row_max < h and 0 <= box.col_min <= box.col_max < w):
        raise ValueError(f"{box} outside a {h}x{w} image")
    rs = slice(box.row_min, box.row_max + 1)
    cs = slice(box.col_min, box.col_max + 1)
    img = resize_bilinear(np.asarray(image)[rs, cs], target, target)
    msk = resize_nearest(np.asarray(mask)[rs, cs], target, target)
    return img, msk


def toy_saliency(foreground: np.ndarray, blur: float = 0.0, noise: float = 0.0, seed=0) -> np.ndarray:
    """Stand-in detector output: the known foreground indicator, optionally
    blurred (Gaussian, sigma ``blur`` pixels) and corrupted with pixelwise
    Gaussian noise of std ``noise``, clipped to [0, 1]."""
    sal = np.asarray(foreground, dtype=np.float64)
    if blur > 0:
        sal = gaussian_filter(sal, sigma=blur, mode="nearest")
    if noise > 0:
        rng = np.random.default_rng(seed)
        sal = sal + rng.normal(0.0, noise, size=sal.shape)
    return np.clip(sal, 0.0, 1.0)
