"""Shared test helpers: random object builders and brute-force oracles.

The oracles here are deliberately slow and dumb (python loops, sets) so
they cannot share a bug with the vectorized implementations they check.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from segcycle import (
    IGNORE_LABEL,
    DatasetManifest,
    FrameRecord,
    LabelMap,
    ProbMap,
    VideoRecord,
    save_manifest,
    write_image,
    write_label_map,
)


# ---------------------------------------------------------------------------
# Random object builders
# ---------------------------------------------------------------------------

def random_prob_map(rng, classes=3, height=4, width=5):
    """Valid random ProbMap: dirichlet-ish normalized positives."""
    raw = rng.random((classes, height, width)).astype(np.float64) + 1e-3
    raw /= raw.sum(axis=0)
    return ProbMap(raw.astype(np.float32))


def random_labels(rng, classes=3, height=4, width=5, ignore_frac=0.1):
    arr = rng.integers(0, classes, size=(height, width)).astype(np.uint8)
    if ignore_frac > 0:
        mask = rng.random((height, width)) < ignore_frac
        arr[mask] = IGNORE_LABEL
    return LabelMap(arr)


def write_frame_files(dir_path: Path, rng, classes=3, height=8, width=8, labeled=True):
    """Write one ppm/pgm pair, return (image_path, label_path | None)."""
    dir_path.mkdir(parents=True, exist_ok=True)
    image = rng.integers(0, 256, size=(height, width, 3)).astype(np.uint8)
    image_path = dir_path / "frame.ppm"
    write_image(image, image_path)
    if not labeled:
        return image_path, None
    labels = random_labels(rng, classes, height, width, ignore_frac=0.05)
    label_path = dir_path / "frame.pgm"
    write_label_map(labels, label_path)
    return image_path, label_path


def build_manifest(tmp_path: Path, rng, *, classes=3, videos=2, frames=3,
                   labeled=True, split="train", height=8, width=8,
                   name="set") -> DatasetManifest:
    """Write ppm/pgm files under tmp_path and return an in-memory manifest."""
    video_records = []
    for vi in range(videos):
        video_id = f"{name}_v{vi:02d}"
        frame_records = []
        for fi in range(frames):
            frame_dir = tmp_path / video_id / f"f{fi}"
            image_path, label_path = write_frame_files(
                frame_dir, rng, classes, height, width, labeled
            )
            frame_records.append(
                FrameRecord(
                    frame_id=fi,
                    image=image_path,
                    label=label_path,
                    kind="true" if labeled else "none",
                )
            )
        video_records.append(VideoRecord(video_id=video_id, frames=tuple(frame_records)))
    manifest = DatasetManifest(
        class_count=classes, split=split, videos=tuple(video_records)
    )
    save_manifest(manifest, tmp_path / f"{name}.json")
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# Brute-force oracles
# ---------------------------------------------------------------------------

def oracle_confusion(pred, gt, classes):
    """Per-pixel python-loop confusion counts plus abstained tally."""
    counts = [[0] * classes for _ in range(classes)]
    abstained = 0
    h, w = gt.shape
    for y in range(h):
        for x in range(w):
            g = int(gt[y, x])
            p = int(pred[y, x])
            if g == IGNORE_LABEL:
                continue
            if p == IGNORE_LABEL:
                abstained += 1
                continue
            counts[g][p] += 1
    return counts, abstained


def oracle_iou(counts):
    """Set-free IoU from confusion counts; None where the class is absent."""
    classes = len(counts)
    out = []
    for c in range(classes):
        inter = counts[c][c]
        row = sum(counts[c])
        col = sum(counts[r][c] for r in range(classes))
        denom = row + col - inter
        out.append(None if denom == 0 else inter / denom)
    return out


def oracle_iou_sets(pred, gt, classes):
    """Second independent IoU oracle built on pixel-coordinate sets."""
    out = []
    h, w = gt.shape
    coords = [(y, x) for y in range(h) for x in range(w)]
    valid = [(y, x) for (y, x) in coords if gt[y, x] != IGNORE_LABEL and pred[y, x] != IGNORE_LABEL]
    for c in range(classes):
        gt_set = {p for p in valid if gt[p] == c}
        pr_set = {p for p in valid if pred[p] == c}
        union = gt_set | pr_set
        if not union:
            out.append(None)
            continue
        out.append(len(gt_set & pr_set) / len(union))
    return out


def oracle_video_consistency(preds, gts, n):
    """Python-loop sliding-window consistency for one video.

    Returns (correct_total, consistent_total) over all stride-1 windows.
    """
    frames = len(gts)
    h, w = gts[0].shape
    correct = 0
    consistent = 0
    for start in range(frames - n + 1):
        for y in range(h):
            for x in range(w):
                g0 = int(gts[start][y, x])
                if g0 == IGNORE_LABEL:
                    continue
                if any(int(gts[start + k][y, x]) != g0 for k in range(1, n)):
                    continue
                consistent += 1
                p0 = int(preds[start][y, x])
                if p0 == g0 and all(
                    int(preds[start + k][y, x]) == g0 for k in range(1, n)
                ):
                    correct += 1
    return correct, consistent


def oracle_bilinear_scalar(src, dst_h, dst_w):
    """Per-output-pixel python bilinear resize with half-pixel alignment."""
    src = np.asarray(src, dtype=np.float64)
    src_h, src_w = src.shape
    out = np.empty((dst_h, dst_w), dtype=np.float64)
    for dy in range(dst_h):
        sy = (dy + 0.5) * (src_h / dst_h) - 0.5
        sy = min(max(sy, 0.0), src_h - 1.0)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, src_h - 1)
        fy = sy - y0
        for dx in range(dst_w):
            sx = (dx + 0.5) * (src_w / dst_w) - 0.5
            sx = min(max(sx, 0.0), src_w - 1.0)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, src_w - 1)
            fx = sx - x0
            top = src[y0, x0] * (1 - fx) + src[y0, x1] * fx
            bot = src[y1, x0] * (1 - fx) + src[y1, x1] * fx
            out[dy, dx] = top * (1 - fy) + bot * fy
    return out


def finite_difference_grad(fn, x, step=1e-5):
    """Central-difference gradient of scalar fn at x, same shape as x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn(x)
        flat[i] = orig - step
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad
