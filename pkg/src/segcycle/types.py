"""Core raster types: probability maps, label maps, class remapping tables.

All types are immutable after construction; the wrapped numpy arrays are
copied and marked read-only so instances can be shared across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from .errors import ValidationError

# The ignore value is fixed globally: 255 marks unlabeled pixels everywhere,
# which caps usable class ids at 254 and class counts at 255.
IGNORE_LABEL = 255
MAX_CLASSES = 255

# Allowed drift of per-pixel probability sums away from 1.0.
PROB_SUM_TOL = 1e-4


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True, order="C")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ProbMap:
    """Per-frame class probability tensor.

    Stored channel-major as a (C, H, W) float32 array: the full H*W plane of
    class 0 comes first. Every value lies in [0, 1] and each pixel's
    probabilities sum to 1 within PROB_SUM_TOL. Out-of-range values are
    rejected, never clamped.
    """

    planes: np.ndarray

    def __post_init__(self) -> None:
        planes = self.planes
        if not isinstance(planes, np.ndarray) or planes.ndim != 3:
            raise ValidationError("probability map must be a (C, H, W) numpy array")
        if planes.dtype != np.float32:
            raise ValidationError(f"probability map must be float32, got {planes.dtype}")
        c, h, w = planes.shape
        if h < 1 or w < 1:
            raise ValidationError(f"probability map needs positive dimensions, got {h}x{w}")
        if not 2 <= c <= MAX_CLASSES:
            raise ValidationError(f"class count must be in [2, {MAX_CLASSES}], got {c}")
        if not np.isfinite(planes).all():
            raise ValidationError("probability map contains non-finite values")
        lo = float(planes.min())
        hi = float(planes.max())
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"probabilities must lie in [0, 1], found range [{lo:g}, {hi:g}]")
        sums = planes.sum(axis=0, dtype=np.float64)
        drift = float(np.abs(sums - 1.0).max())
        if drift > PROB_SUM_TOL:
            raise ValidationError(
                f"per-pixel probabilities must sum to 1 within {PROB_SUM_TOL:g}, "
                f"worst drift {drift:g}"
            )
        object.__setattr__(self, "planes", _frozen(planes))

    @property
    def num_classes(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @classmethod
    def from_pixel_probs(cls, probs: np.ndarray) -> "ProbMap":
        """Build from a pixel-major (H, W, C) float array."""
        if not isinstance(probs, np.ndarray) or probs.ndim != 3:
            raise ValidationError("pixel probabilities must be a (H, W, C) numpy array")
        return cls(np.ascontiguousarray(np.moveaxis(probs, -1, 0)).astype(np.float32))

    def pixel_probs(self) -> np.ndarray:
        """Read-only (H, W, C) view of the same data."""
        return np.moveaxis(self.planes, 0, -1)


@dataclass(frozen=True)
class LabelMap:
    """Per-frame hard labels: (H, W) uint8, row-major.

    Values are class ids; IGNORE_LABEL (255) marks pixels without a label.
    Whether an id is in range for a given class count is checked at the point
    of use (metrics, losses, remapping), since the map itself does not know C.
    """

    pixels: np.ndarray

    def __post_init__(self) -> None:
        pixels = self.pixels
        if not isinstance(pixels, np.ndarray) or pixels.ndim != 2:
            raise ValidationError("label map must be a (H, W) numpy array")
        if pixels.dtype != np.uint8:
            raise ValidationError(f"label map must be uint8, got {pixels.dtype}")
        h, w = pixels.shape
        if h < 1 or w < 1:
            raise ValidationError(f"label map needs positive dimensions, got {h}x{w}")
        object.__setattr__(self, "pixels", _frozen(pixels))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "LabelMap":
        """Build from any integer array after range-checking [0, 255]."""
        arr = np.asarray(arr)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError(f"labels must be integers, got {arr.dtype}")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValidationError("labels must fit in uint8 (0..255)")
        return cls(arr.astype(np.uint8))


@dataclass(frozen=True)
class ClassMapping:
    """Table translating source class ids to target class ids.

    Source ids absent from the table map to IGNORE_LABEL; IGNORE_LABEL always
    maps to itself. Target ids may be IGNORE_LABEL to drop a source class.
    """

    source_class_count: int
    entries: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not isinstance(self.source_class_count, int) or not 1 <= self.source_class_count <= MAX_CLASSES:
            raise ValidationError(
                f"source class count must be in [1, {MAX_CLASSES}], got {self.source_class_count!r}"
            )
        checked: dict[int, int] = {}
        for src, dst in dict(self.entries).items():
            if not isinstance(src, int) or not 0 <= src < self.source_class_count:
                raise ValidationError(f"mapping source id {src!r} outside [0, {self.source_class_count})")
            if not isinstance(dst, int) or not 0 <= dst <= IGNORE_LABEL:
                raise ValidationError(f"mapping target id {dst!r} outside [0, {IGNORE_LABEL}]")
            checked[src] = dst
        object.__setattr__(self, "entries", MappingProxyType(checked))

    def lookup_table(self) -> np.ndarray:
        """Dense uint8 table of size 256; unmapped sources and 255 give 255."""
        lut = np.full(256, IGNORE_LABEL, dtype=np.uint8)
        for src, dst in self.entries.items():
            lut[src] = dst
        return lut
