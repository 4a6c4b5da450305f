"""Synthetic separable video datasets for demos and end-to-end tests.

Each video shows vertical class bands whose boundaries drift from frame to
frame; pixel colors are class base colors plus Gaussian noise, so the scene
is linearly separable in RGB up to the noise level. A color_shift moves the
base colors, which makes it easy to generate a labeled source split and a
shifted unlabeled/eval split the way a train/test distribution gap would.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import ValidationError
from .formats import write_image, write_label_map
from .manifest import DatasetManifest, FrameRecord, VideoRecord, save_manifest
from .types import LabelMap

BASE_COLORS = np.array(
    [
        [0.82, 0.22, 0.20],
        [0.20, 0.78, 0.24],
        [0.22, 0.26, 0.84],
        [0.80, 0.76, 0.22],
        [0.70, 0.24, 0.78],
    ]
)


def _band_labels(height: int, width: int, offsets: Sequence[float], tilt: float) -> np.ndarray:
    """Class id per pixel: vertical bands split at the given fractional offsets."""
    xs = np.arange(width, dtype=np.float64)[None, :]
    ys = np.arange(height, dtype=np.float64)[:, None]
    coord = (xs + tilt * ys) / max(width - 1, 1)
    labels = np.zeros((height, width), dtype=np.uint8)
    for boundary in offsets:
        labels += (coord > boundary).astype(np.uint8)
    return labels


def generate_dataset(
    out_dir: Union[str, Path],
    *,
    name: str,
    seed: int,
    class_count: int = 3,
    videos: int = 4,
    frames_per_video: int = 5,
    height: int = 32,
    width: int = 32,
    noise: float = 0.18,
    color_shift: float = 0.0,
    labeled: bool = True,
    split: str = "train",
) -> Path:
    """Write frames, optional labels, and a manifest; returns the manifest path.

    Deterministic for a given seed. color_shift nudges every class color by a
    fixed per-class direction, modelling a distribution gap between splits.
    """
    if not 2 <= class_count <= len(BASE_COLORS):
        raise ValidationError(f"class_count must be in [2, {len(BASE_COLORS)}], got {class_count}")
    if videos < 1 or frames_per_video < 1:
        raise ValidationError("need at least one video and one frame per video")
    out_dir = Path(out_dir)
    frames_dir = out_dir / name
    frames_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.Generator(np.random.Philox(seed))
    shift_dirs = np.array([[1.0, -0.5, 0.5], [-0.5, 1.0, -0.5], [0.5, -0.5, 1.0],
                           [-1.0, 0.5, 0.5], [0.5, 1.0, -1.0]])[:class_count]
    colors = np.clip(BASE_COLORS[:class_count] + color_shift * shift_dirs, 0.0, 1.0)

    video_records = []
    for vi in range(videos):
        video_id = f"{name}_v{vi:02d}"
        video_dir = frames_dir / video_id
        video_dir.mkdir(parents=True, exist_ok=True)
        base_offsets = np.sort(rng.uniform(0.15, 0.85, size=class_count - 1))
        drift = rng.uniform(-0.03, 0.03, size=class_count - 1)
        tilt = float(rng.uniform(-0.25, 0.25))
        frame_records = []
        for fi in range(frames_per_video):
            offsets = np.clip(base_offsets + fi * drift, 0.05, 0.95)
            labels = _band_labels(height, width, offsets, tilt)
            clean = colors[labels]
            image = np.clip(clean + rng.normal(0.0, noise, size=clean.shape), 0.0, 1.0)
            image_u8 = np.round(image * 255.0).astype(np.uint8)

            image_path = video_dir / f"{fi}.ppm"
            write_image(image_u8, image_path)
            label_path = None
            if labeled:
                label_path = video_dir / f"{fi}.pgm"
                write_label_map(LabelMap(labels), label_path)
            frame_records.append(
                FrameRecord(fi, image_path, label_path, "true" if labeled else "none")
            )
        video_records.append(VideoRecord(video_id, tuple(frame_records)))

    manifest = DatasetManifest(class_count, split, tuple(video_records))
    manifest_path = out_dir / f"{name}.json"
    save_manifest(manifest, manifest_path)
    return manifest_path


def generate_benchmark(
    out_dir: Union[str, Path],
    *,
    seed: int = 7,
    class_count: int = 3,
    height: int = 32,
    width: int = 32,
    noise: float = 0.18,
    color_shift: float = 0.10,
    labeled_videos: int = 4,
    labeled_frames: int = 5,
    unlabeled_videos: int = 4,
    unlabeled_frames: int = 5,
    eval_videos: int = 2,
    eval_frames: int = 16,
) -> dict[str, Path]:
    """Write the standard three-manifest fixture.

    The labeled split uses the base colors; the unlabeled and eval splits share
    a shifted color distribution, so pseudo-labeling the unlabeled frames gives
    the model a way to adapt to the evaluation distribution.
    """
    labeled = generate_dataset(
        out_dir, name="labeled", seed=seed, class_count=class_count,
        videos=labeled_videos, frames_per_video=labeled_frames,
        height=height, width=width, noise=noise, color_shift=0.0,
        labeled=True, split="train",
    )
    unlabeled = generate_dataset(
        out_dir, name="unlabeled", seed=seed + 1, class_count=class_count,
        videos=unlabeled_videos, frames_per_video=unlabeled_frames,
        height=height, width=width, noise=noise, color_shift=color_shift,
        labeled=False, split="test",
    )
    eval_ = generate_dataset(
        out_dir, name="eval", seed=seed + 2, class_count=class_count,
        videos=eval_videos, frames_per_video=eval_frames,
        height=height, width=width, noise=noise, color_shift=color_shift,
        labeled=True, split="val",
    )
    return {"labeled": labeled, "unlabeled": unlabeled, "eval": eval_}
