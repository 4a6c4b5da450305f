"""Dataset manifests: JSON schema, loading, validation, serialization.

On disk a manifest is JSON shaped as

    {"class_count": C, "split": "train",
     "videos": [{"id": "...", "frames": [
         {"id": 0, "image": "rel/path.ppm", "label": "rel/path.pgm", "kind": "true"},
         ...]}]}

with every path relative to the manifest's own directory. In memory paths are
resolved to absolute ones so manifests from different directories can be
merged; save_manifest relativizes them again against the output location.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Union

from .errors import ManifestError, ValidationError
from .types import MAX_CLASSES

VALID_SPLITS = ("train", "val", "test")
VALID_KINDS = ("true", "pseudo", "none")


class ManifestWarning(UserWarning):
    """Non-fatal manifest normalization, e.g. re-sorting unsorted frames."""


@dataclass(frozen=True)
class FrameRecord:
    """One video frame: image path plus optional label and its provenance."""

    frame_id: int
    image: Path
    label: Path | None
    kind: str

    def __post_init__(self) -> None:
        if not isinstance(self.frame_id, int) or self.frame_id < 0:
            raise ManifestError(f"frame id must be a non-negative integer, got {self.frame_id!r}")
        if self.kind not in VALID_KINDS:
            raise ManifestError(f"frame kind must be one of {VALID_KINDS}, got {self.kind!r}")
        if (self.kind == "none") != (self.label is None):
            raise ManifestError(
                f"frame {self.frame_id}: kind {self.kind!r} inconsistent with "
                f"label {'absent' if self.label is None else 'present'}"
            )


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    frames: tuple[FrameRecord, ...]

    def __post_init__(self) -> None:
        if not self.video_id or not isinstance(self.video_id, str):
            raise ManifestError(f"video id must be a non-empty string, got {self.video_id!r}")
        if any(sep in self.video_id for sep in ("/", "\\")) or self.video_id in (".", ".."):
            raise ManifestError(f"video id {self.video_id!r} is not filesystem-safe")
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ManifestError(f"video {self.video_id!r} has duplicate frame ids")
        if ids != sorted(ids):
            raise ManifestError(f"video {self.video_id!r} frames are not sorted by id")


@dataclass(frozen=True)
class DatasetManifest:
    class_count: int
    split: str
    videos: tuple[VideoRecord, ...]

    def __post_init__(self) -> None:
        if not isinstance(self.class_count, int) or not 2 <= self.class_count <= MAX_CLASSES:
            raise ManifestError(
                f"class_count must be an integer in [2, {MAX_CLASSES}], got {self.class_count!r}"
            )
        if self.split not in VALID_SPLITS:
            raise ManifestError(f"split must be one of {VALID_SPLITS}, got {self.split!r}")
        ids = [v.video_id for v in self.videos]
        if len(set(ids)) != len(ids):
            raise ManifestError("manifest contains duplicate video ids")

    def iter_frames(self) -> Iterator[tuple[VideoRecord, FrameRecord]]:
        for video in self.videos:
            for frame in video.frames:
                yield video, frame

    def labeled_frames(self) -> list[tuple[VideoRecord, FrameRecord]]:
        return [(v, f) for v, f in self.iter_frames() if f.label is not None]

    def frame_count(self) -> int:
        return sum(len(v.frames) for v in self.videos)

    def has_true_labels(self) -> bool:
        return any(f.kind == "true" for _, f in self.iter_frames())


def _expect(condition: bool, field: str, message: str) -> None:
    if not condition:
        raise ManifestError(f"{field}: {message}")


def _resolve(root: Path, rel: str, field: str) -> Path:
    _expect(isinstance(rel, str) and rel != "", field, "path must be a non-empty string")
    _expect(not os.path.isabs(rel), field, f"path must be relative to the manifest directory, got {rel!r}")
    return Path(os.path.normpath(root / rel))


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Parse and validate a manifest file, resolving paths to absolute ones.

    Frames listed out of order are re-sorted with a ManifestWarning; every
    schema violation raises ManifestError naming the offending field.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    root = path.parent.absolute()

    _expect(isinstance(doc, dict), "manifest", "top level must be a JSON object")
    _expect(isinstance(doc.get("class_count"), int) and not isinstance(doc.get("class_count"), bool),
            "class_count", f"must be an integer, got {doc.get('class_count')!r}")
    _expect(doc.get("split") in VALID_SPLITS, "split",
            f"must be one of {VALID_SPLITS}, got {doc.get('split')!r}")
    _expect(isinstance(doc.get("videos"), list), "videos", "must be a list")

    videos = []
    for vi, vdoc in enumerate(doc["videos"]):
        vfield = f"videos[{vi}]"
        _expect(isinstance(vdoc, dict), vfield, "must be an object")
        vid = vdoc.get("id")
        _expect(isinstance(vid, str) and vid != "", f"{vfield}.id", f"must be a non-empty string, got {vid!r}")
        _expect(isinstance(vdoc.get("frames"), list), f"{vfield}.frames", "must be a list")
        frames = []
        for fi, fdoc in enumerate(vdoc["frames"]):
            ffield = f"{vfield}.frames[{fi}]"
            _expect(isinstance(fdoc, dict), ffield, "must be an object")
            fid = fdoc.get("id")
            _expect(isinstance(fid, int) and not isinstance(fid, bool) and fid >= 0,
                    f"{ffield}.id", f"must be a non-negative integer, got {fid!r}")
            kind = fdoc.get("kind")
            _expect(kind in VALID_KINDS, f"{ffield}.kind",
                    f"must be one of {VALID_KINDS}, got {kind!r}")
            image = _resolve(root, fdoc.get("image"), f"{ffield}.image")
            label_rel = fdoc.get("label")
            _expect((kind == "none") == (label_rel is None), f"{ffield}.label",
                    f"kind {kind!r} requires label to be {'absent' if kind == 'none' else 'present'}")
            label = None if label_rel is None else _resolve(root, label_rel, f"{ffield}.label")
            frames.append(FrameRecord(fid, image, label, kind))
        ids = [f.frame_id for f in frames]
        _expect(len(set(ids)) == len(ids), f"{vfield}.frames", f"duplicate frame ids in video {vid!r}")
        if ids != sorted(ids):
            warnings.warn(
                f"video {vid!r}: frames were not sorted by id, re-sorting",
                ManifestWarning,
                stacklevel=2,
            )
            frames.sort(key=lambda f: f.frame_id)
        videos.append(VideoRecord(vid, tuple(frames)))

    return DatasetManifest(doc["class_count"], doc["split"], tuple(videos))


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> None:
    """Serialize with all paths rewritten relative to the output directory."""
    from .formats import atomic_write_bytes

    path = Path(path)
    root = path.parent.absolute()
    doc = {
        "class_count": manifest.class_count,
        "split": manifest.split,
        "videos": [
            {
                "id": video.video_id,
                "frames": [
                    {
                        "id": frame.frame_id,
                        "image": os.path.relpath(frame.image, root),
                        "kind": frame.kind,
                        **({} if frame.label is None else {"label": os.path.relpath(frame.label, root)}),
                    }
                    for frame in video.frames
                ],
            }
            for video in manifest.videos
        ],
    }
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def validate_manifest_paths(manifest: DatasetManifest) -> None:
    """Check every referenced file exists; dangling paths are validation errors."""
    for video, frame in manifest.iter_frames():
        where = f"video {video.video_id!r} frame {frame.frame_id}"
        if not frame.image.is_file():
            raise ValidationError(f"{where}: image file missing: {frame.image}")
        if frame.label is not None and not frame.label.is_file():
            raise ValidationError(f"{where}: label file missing: {frame.label}")
