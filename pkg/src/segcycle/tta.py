"""Test-time augmentation: multi-scale and mirror inference aggregation.

The resize kernel is bilinear with half-pixel centers,

    src = (dst + 0.5) * (src_size / dst_size) - 0.5,

clamped to the image border, applied per class plane in float64. Resizing a
probability map renormalizes every pixel afterwards; resizing to identical
dimensions is a bit-exact copy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ContractError, ValidationError
from .types import ProbMap

# Scale ladder expressed relative to a 896-pixel base edge, mirror enabled.
DEFAULT_SCALES = tuple(s / 896.0 for s in (512, 640, 768, 896, 1024, 1152, 1280, 1408))
MAX_SCALE = 8.0


class Segmenter(Protocol):
    """Model contract: map an (H, W, channels) feature frame to a same-size ProbMap."""

    def __call__(self, frame: np.ndarray) -> ProbMap: ...


@dataclass(frozen=True)
class TtaConfig:
    scales: tuple[float, ...] = DEFAULT_SCALES
    flip: bool = True

    def __post_init__(self) -> None:
        scales = tuple(float(s) for s in self.scales)
        if not scales:
            raise ValidationError("scale list cannot be empty")
        for s in scales:
            if not np.isfinite(s) or not 0.0 < s <= MAX_SCALE:
                raise ValidationError(f"scales must lie in (0, {MAX_SCALE:g}], got {s!r}")
        if len(set(scales)) != len(scales):
            raise ValidationError(f"duplicate scales in {scales}")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "flip", bool(self.flip))

    def run_count(self) -> int:
        return len(self.scales) * (2 if self.flip else 1)


def _axis_coords(src: int, dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    coords = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    np.clip(coords, 0.0, src - 1.0, out=coords)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, coords - lo


def _resize_stack(planes: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (K, H, W) float64 stack; identity size is a copy."""
    _, h, w = planes.shape
    if (h, w) == (out_h, out_w):
        return planes.copy()
    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    rows0 = planes[:, y0, :]
    rows1 = planes[:, y1, :]
    top = rows0[:, :, x0] * (1.0 - fx) + rows0[:, :, x1] * fx
    bottom = rows1[:, :, x0] * (1.0 - fx) + rows1[:, :, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def bilinear_resize(frame: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, channels) float frame per channel; no renormalization."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise ValidationError("frame must be a (H, W, channels) array")
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target dimensions must be positive, got {out_h}x{out_w}")
    stack = np.moveaxis(frame, -1, 0)
    return np.ascontiguousarray(np.moveaxis(_resize_stack(stack, out_h, out_w), 0, -1))


def resize_prob(pm: ProbMap, out_h: int, out_w: int) -> ProbMap:
    """Resize a probability map, renormalizing each output pixel."""
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"target dimensions must be positive, got {out_h}x{out_w}")
    if (pm.height, pm.width) == (out_h, out_w):
        return ProbMap(pm.planes)  # bit-exact copy
    planes = _resize_stack(pm.planes.astype(np.float64), out_h, out_w)
    planes /= planes.sum(axis=0)  # convex combinations keep sums near 1, never 0
    return ProbMap(planes.astype(np.float32))


def hflip_prob(pm: ProbMap) -> ProbMap:
    """Mirror a probability map left-right; an involution, bit-exact."""
    return ProbMap(pm.planes[:, :, ::-1])


def tta_aggregate(model: Segmenter, frame: np.ndarray, cfg: TtaConfig) -> ProbMap:
    """Average model outputs over the augmentation grid.

    For each scale, in listed order: run the model on the resized frame, then
    (when flip is on) on its mirror with the output mirrored back; resize every
    output to the frame's own size and take the arithmetic mean in that fixed
    order, renormalizing per pixel. A single-run grid returns the model output
    unchanged, so scales=(1.0,) with flip off is bit-exact raw inference.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[0] < 1 or frame.shape[1] < 1:
        raise ValidationError("frame must be a non-empty (H, W, channels) array")
    height, width = frame.shape[:2]

    outputs: list[ProbMap] = []
    for scale in cfg.scales:
        scaled_h = max(1, round(height * scale))
        scaled_w = max(1, round(width * scale))
        scaled = bilinear_resize(frame, scaled_h, scaled_w)
        runs = [(scaled, False)]
        if cfg.flip:
            runs.append((np.ascontiguousarray(scaled[:, ::-1]), True))
        for array, mirrored in runs:
            out = model(array)
            tag = f"scale {scale:g}" + (" (mirrored)" if mirrored else "")
            if not isinstance(out, ProbMap):
                raise ContractError(f"model returned {type(out).__name__} instead of ProbMap at {tag}")
            if (out.height, out.width) != (scaled_h, scaled_w):
                raise ContractError(
                    f"model returned {out.height}x{out.width} for a "
                    f"{scaled_h}x{scaled_w} input at {tag}"
                )
            if outputs and out.num_classes != outputs[0].num_classes:
                raise ContractError(
                    f"model changed class count from {outputs[0].num_classes} "
                    f"to {out.num_classes} at {tag}"
                )
            if mirrored:
                out = hflip_prob(out)
            outputs.append(resize_prob(out, height, width))

    if len(outputs) == 1:
        return outputs[0]
    acc = np.zeros((outputs[0].num_classes, height, width), dtype=np.float64)
    for out in outputs:  # sequential, canonical order
        acc += out.planes
    acc /= len(outputs)
    acc /= acc.sum(axis=0)
    return ProbMap(acc.astype(np.float32))
