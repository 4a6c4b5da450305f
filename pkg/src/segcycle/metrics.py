"""Confusion-matrix accumulation and the IoU / video-consistency metric suite.

Conventions, fixed across the package:
  * counts[gt][pred]; ground-truth 255 pixels are skipped entirely;
  * predicted 255 under a valid ground truth is tallied separately as an
    abstention and excluded from every IoU denominator;
  * IoU_c = diag_c / (row_c + col_c - diag_c), classes with a zero
    denominator are excluded from the unweighted mean;
  * weighted IoU weights each class by its share of counted GT pixels;
  * VC_n slides stride-1 windows of n frames, scoring each window as
    |pixels predicted correctly in all n frames| / |pixels whose non-ignore
    GT is identical across all n frames| and skipping empty windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import ValidationError
from .types import IGNORE_LABEL, LabelMap, _frozen

LabelLike = Union[LabelMap, np.ndarray]


def _label_pixels(value: LabelLike, name: str) -> np.ndarray:
    if isinstance(value, LabelMap):
        return value.pixels
    arr = np.asarray(value)
    if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"{name} must be a LabelMap or 2-d integer array")
    return arr


@dataclass(frozen=True)
class ConfusionMatrix:
    """C x C uint64 matrix of counts[gt][pred], plus the abstained tally."""

    counts: np.ndarray
    abstained: int = 0

    def __post_init__(self) -> None:
        counts = self.counts
        if not isinstance(counts, np.ndarray) or counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValidationError("confusion matrix must be a square 2-d array")
        if counts.dtype != np.uint64:
            raise ValidationError(f"confusion matrix must be uint64, got {counts.dtype}")
        if counts.shape[0] < 1:
            raise ValidationError("confusion matrix needs at least one class")
        if self.abstained < 0:
            raise ValidationError("abstained count cannot be negative")
        object.__setattr__(self, "counts", _frozen(counts))

    @classmethod
    def zero(cls, class_count: int) -> "ConfusionMatrix":
        if not 1 <= class_count <= 255:
            raise ValidationError(f"class count must be in [1, 255], got {class_count}")
        return cls(np.zeros((class_count, class_count), dtype=np.uint64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred: LabelLike, gt: LabelLike) -> ConfusionMatrix:
    """Fold one frame pair into the matrix, returning a new matrix.

    Pure so frames can be counted in parallel into per-worker matrices and
    merged afterwards; merge(acc(zero, a), acc(zero, b)) == acc(acc(zero, a), b).
    """
    p = _label_pixels(pred, "pred")
    g = _label_pixels(gt, "gt")
    if p.shape != g.shape:
        raise ValidationError(f"pred shape {p.shape} does not match gt shape {g.shape}")
    c = cm.num_classes
    for name, arr in (("pred", p), ("gt", g)):
        bad = (arr != IGNORE_LABEL) & (arr >= c)
        if bad.any():
            worst = int(arr[bad].max())
            raise ValidationError(f"{name} contains class id {worst} outside [0, {c})")
    counted = (g != IGNORE_LABEL) & (p != IGNORE_LABEL)
    abstained = int(((g != IGNORE_LABEL) & (p == IGNORE_LABEL)).sum())
    flat = g[counted].astype(np.int64) * c + p[counted].astype(np.int64)
    delta = np.bincount(flat, minlength=c * c).reshape(c, c).astype(np.uint64)
    return ConfusionMatrix(cm.counts + delta, cm.abstained + abstained)


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    if a.num_classes != b.num_classes:
        raise ValidationError(
            f"cannot merge confusion matrices with {a.num_classes} and {b.num_classes} classes"
        )
    return ConfusionMatrix(a.counts + b.counts, a.abstained + b.abstained)


def per_class_iou(cm: ConfusionMatrix) -> list[float | None]:
    """IoU per class; None where the class appears in neither gt nor pred."""
    counts = cm.counts.astype(np.int64)
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    denom = rows + cols - diag
    out: list[float | None] = []
    for c in range(cm.num_classes):
        out.append(float(diag[c] / denom[c]) if denom[c] > 0 else None)
    return out


def miou(cm: ConfusionMatrix) -> float:
    """Unweighted mean IoU over classes with a defined IoU."""
    defined = [v for v in per_class_iou(cm) if v is not None]
    if not defined:
        raise ValidationError("empty evaluation: no class has any counted pixel")
    return float(np.mean(defined))


def weighted_iou(cm: ConfusionMatrix) -> float:
    """IoU weighted by each class's share of counted ground-truth pixels."""
    counts = cm.counts.astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ValidationError("empty evaluation: no counted ground-truth pixels")
    rows = counts.sum(axis=1)
    ious = per_class_iou(cm)
    acc = 0.0
    for c, iou in enumerate(ious):
        if rows[c] > 0:
            acc += (rows[c] / total) * iou  # rows[c] > 0 implies iou is defined
    return float(acc)


# ---------------------------------------------------------------------------
# Video consistency
# ---------------------------------------------------------------------------

def _stack_video(preds: Sequence[LabelLike], gts: Sequence[LabelLike]) -> tuple[np.ndarray, np.ndarray]:
    if len(preds) != len(gts):
        raise ValidationError(f"got {len(preds)} predictions for {len(gts)} ground-truth frames")
    if not gts:
        raise ValidationError("video has no frames")
    p_arrs = [_label_pixels(p, "pred") for p in preds]
    g_arrs = [_label_pixels(g, "gt") for g in gts]
    shape = g_arrs[0].shape
    for i, (p, g) in enumerate(zip(p_arrs, g_arrs)):
        if p.shape != shape or g.shape != shape:
            raise ValidationError(f"frame {i}: shape mismatch within video")
    return np.stack(p_arrs), np.stack(g_arrs)


def _window_scores(preds: Sequence[LabelLike], gts: Sequence[LabelLike], n: int) -> list[float]:
    p_stack, g_stack = _stack_video(preds, gts)
    frames = g_stack.shape[0]
    scores: list[float] = []
    for t in range(frames - n + 1):
        g_win = g_stack[t:t + n]
        base = g_win[0]
        consistent = (base != IGNORE_LABEL) & np.all(g_win == base[None], axis=0)
        support = int(consistent.sum())
        if support == 0:
            continue  # skipped, never scored as 1
        correct = consistent & np.all(p_stack[t:t + n] == base[None], axis=0)
        scores.append(int(correct.sum()) / support)
    return scores


def video_consistency(preds: Sequence[LabelLike], gts: Sequence[LabelLike], n: int) -> float:
    """Mean window score over one video's stride-1 windows of length n.

    With n=1 this is the mean per-frame pixel accuracy on non-ignore pixels.
    """
    if not isinstance(n, int) or n < 1:
        raise ValidationError(f"window length must be a positive integer, got {n!r}")
    scores = _window_scores(preds, gts, n)
    if not scores:
        raise ValidationError(f"no windows: video contributes no scorable windows of length {n}")
    return float(np.mean(scores))


def video_consistency_over_videos(
    videos: Sequence[tuple[Sequence[LabelLike], Sequence[LabelLike]]],
    n: int,
    per_video: bool = False,
) -> float:
    """Pool VC_n across videos.

    Default pools every window from every video into one mean; per_video=True
    averages each video's own mean instead. Videos shorter than n (or with no
    scorable window) contribute nothing; if nothing contributes this raises.
    """
    if not isinstance(n, int) or n < 1:
        raise ValidationError(f"window length must be a positive integer, got {n!r}")
    pooled: list[float] = []
    means: list[float] = []
    for preds, gts in videos:
        scores = _window_scores(preds, gts, n)
        pooled.extend(scores)
        if scores:
            means.append(float(np.mean(scores)))
    if not pooled:
        raise ValidationError(f"no windows: no video contributes a scorable window of length {n}")
    return float(np.mean(means if per_video else pooled))


# ---------------------------------------------------------------------------
# Metric report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricReport:
    """Bundle of dataset-level metric values, all fractions in [0, 1]."""

    miou: float
    weighted_iou: float | None = None
    vc: Mapping[int, float] = field(default_factory=dict)
    per_class_iou: tuple[float | None, ...] = ()
    abstained: int = 0

    def __post_init__(self) -> None:
        for name, value in (("miou", self.miou), ("weighted_iou", self.weighted_iou)):
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {value!r}")
        checked: dict[int, float] = {}
        for n, value in dict(self.vc).items():
            if not isinstance(n, int) or n < 1:
                raise ValidationError(f"vc window length must be a positive integer, got {n!r}")
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"vc{n} must lie in [0, 1], got {value!r}")
            checked[n] = float(value)
        object.__setattr__(self, "vc", MappingProxyType(checked))
        for value in self.per_class_iou:
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValidationError(f"per-class IoU must lie in [0, 1], got {value!r}")
        object.__setattr__(self, "per_class_iou", tuple(self.per_class_iou))
        if self.abstained < 0:
            raise ValidationError("abstained count cannot be negative")

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "weighted_iou": self.weighted_iou,
            "vc": {str(n): v for n, v in sorted(self.vc.items())},
            "per_class_iou": list(self.per_class_iou),
            "abstained": self.abstained,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricReport":
        if not isinstance(doc, dict) or "miou" not in doc:
            raise ValidationError("metric report document must be an object with a 'miou' field")
        try:
            vc = {int(k): float(v) for k, v in dict(doc.get("vc", {})).items()}
        except (TypeError, ValueError):
            raise ValidationError("metric report 'vc' must map window lengths to fractions") from None
        per_class = tuple(None if v is None else float(v) for v in doc.get("per_class_iou", []))
        weighted = doc.get("weighted_iou")
        return cls(
            miou=float(doc["miou"]),
            weighted_iou=None if weighted is None else float(weighted),
            vc=vc,
            per_class_iou=per_class,
            abstained=int(doc.get("abstained", 0)),
        )


def report_from_confusion(cm: ConfusionMatrix, vc: Mapping[int, float] | None = None) -> MetricReport:
    return MetricReport(
        miou=miou(cm),
        weighted_iou=weighted_iou(cm),
        vc=dict(vc or {}),
        per_class_iou=tuple(per_class_iou(cm)),
        abstained=cm.abstained,
    )
