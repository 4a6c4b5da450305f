"""Model ensembling, hard-label extraction, pseudo labels, label remapping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .types import IGNORE_LABEL, ClassMapping, LabelMap, ProbMap

ENSEMBLE_STRATEGIES = ("mean", "max")


@dataclass(frozen=True)
class PseudoLabelConfig:
    """Confidence gate for pseudo labels.

    A pixel receives its argmax class only when the maximum probability is
    strictly greater than the threshold; otherwise it becomes IGNORE_LABEL.
    The ignore value is fixed package-wide and kept here only for visibility.
    """

    threshold: float = 0.4
    ignore_value: int = IGNORE_LABEL

    def __post_init__(self) -> None:
        if not isinstance(self.threshold, (int, float)) or not 0.0 <= float(self.threshold) <= 1.0:
            raise ValidationError(f"threshold must lie in [0, 1], got {self.threshold!r}")
        object.__setattr__(self, "threshold", float(self.threshold))
        if self.ignore_value != IGNORE_LABEL:
            raise ValidationError(f"ignore value is fixed at {IGNORE_LABEL}")


def _check_compatible(maps: Sequence[ProbMap]) -> None:
    first = maps[0]
    for i, pm in enumerate(maps[1:], start=1):
        if (pm.height, pm.width) != (first.height, first.width):
            raise ValidationError(
                f"map {i} is {pm.height}x{pm.width}, map 0 is {first.height}x{first.width}"
            )
        if pm.num_classes != first.num_classes:
            raise ValidationError(
                f"map {i} has {pm.num_classes} classes, map 0 has {first.num_classes}"
            )


def ensemble_probs(maps: Sequence[ProbMap], strategy: str = "mean") -> ProbMap:
    """Combine per-model probability maps of identical shape.

    "mean": per-pixel per-class arithmetic mean in input order, renormalized.
    "max": per pixel, copy the whole class vector of whichever input has the
    highest top-class probability (earliest input wins ties), so the winning
    confidence survives unchanged for downstream thresholding.
    """
    maps = list(maps)
    if not maps:
        raise ValidationError("ensemble needs at least one probability map")
    if strategy not in ENSEMBLE_STRATEGIES:
        raise ValidationError(f"strategy must be one of {ENSEMBLE_STRATEGIES}, got {strategy!r}")
    _check_compatible(maps)
    if len(maps) == 1:
        return ProbMap(maps[0].planes)  # identical output

    if strategy == "mean":
        acc = np.zeros(maps[0].planes.shape, dtype=np.float64)
        for pm in maps:  # sequential, canonical order
            acc += pm.planes
        acc /= len(maps)
        acc /= acc.sum(axis=0)
        return ProbMap(acc.astype(np.float32))

    stack = np.stack([pm.planes for pm in maps])           # (N, C, H, W)
    tops = stack.max(axis=1)                               # (N, H, W)
    winner = tops.argmax(axis=0)                           # first max wins ties
    chosen = np.take_along_axis(stack, winner[None, None], axis=0)[0]
    return ProbMap(chosen)


def argmax_label(pm: ProbMap) -> LabelMap:
    """Hard labels; ties break to the lowest class index."""
    return LabelMap(pm.planes.argmax(axis=0).astype(np.uint8))


def pseudo_label(pm: ProbMap, cfg: PseudoLabelConfig = PseudoLabelConfig()) -> LabelMap:
    """Thresholded hard labels: confident pixels keep their argmax class.

    The comparison runs in double precision on the stored float32 values, so
    threshold 0 reproduces argmax_label and threshold 1 ignores everything.
    """
    top = pm.planes.max(axis=0).astype(np.float64)
    labels = pm.planes.argmax(axis=0).astype(np.uint8)
    confident = top > cfg.threshold
    return LabelMap(np.where(confident, labels, np.uint8(IGNORE_LABEL)))


def remap_labels(lm: LabelMap, mapping: ClassMapping) -> LabelMap:
    """Translate class ids through the mapping table.

    Sources absent from the table become IGNORE_LABEL; IGNORE_LABEL passes
    through; any other id at or above the source class count is an error.
    """
    values = lm.pixels
    bad = (values != IGNORE_LABEL) & (values >= mapping.source_class_count)
    if bad.any():
        worst = int(values[bad].max())
        raise ValidationError(
            f"label map contains class id {worst} outside [0, {mapping.source_class_count})"
        )
    return LabelMap(mapping.lookup_table()[values])
