"""Recyclable semi-supervised rounds: teacher pair, pseudo-label branch, merging.

One round trains two differently configured models on the labeled manifest,
ensembles their TTA outputs per unlabeled frame, thresholds the result into
pseudo labels, and merges those into a new training manifest. The loop feeds
each round's merged manifest into the next round's training step, regenerating
(never stacking) pseudo labels, so the recipe can be recycled for any number
of rounds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import report as report_mod
from .ensemble import ENSEMBLE_STRATEGIES, PseudoLabelConfig, argmax_label, ensemble_probs, pseudo_label
from .errors import SegcycleError, ValidationError
from .formats import read_image, write_label_map, write_prob_map
from .manifest import DatasetManifest, FrameRecord, VideoRecord, save_manifest
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    accumulate,
    report_from_confusion,
    video_consistency_over_videos,
)
from .tta import TtaConfig, tta_aggregate
from .train import (
    LinearSegmenter,
    ModelParams,
    TrainConfig,
    TrainResult,
    features_for,
    forward,
    load_train_config,
    train,
)
from .types import IGNORE_LABEL, LabelMap, ProbMap

# Seed offset applied per round so every round draws a fresh but reproducible
# stream from the same base configuration.
ROUND_SEED_STRIDE = 9973

emit_report = report_mod.emit_report  # canonical report entry point lives here too


@dataclass(frozen=True)
class RoundConfig:
    """Everything one recycling round needs besides the manifests."""

    train_a: TrainConfig
    train_b: TrainConfig
    tta: TtaConfig = field(default_factory=TtaConfig)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    strategy: str = "mean"
    fine_tune: bool = True
    round_index: int = 1

    def __post_init__(self) -> None:
        if self.train_a == self.train_b:
            raise ValidationError(
                "the two training configs must differ in at least one field"
            )
        if self.strategy not in ENSEMBLE_STRATEGIES:
            raise ValidationError(f"strategy must be one of {ENSEMBLE_STRATEGIES}, got {self.strategy!r}")
        if not isinstance(self.round_index, int) or self.round_index < 1:
            raise ValidationError(f"round index must be a positive integer, got {self.round_index!r}")

    @classmethod
    def default_pair(cls, seed: int = 0, crop_a: int = 32, crop_b: int = 48, **overrides) -> "RoundConfig":
        """Teacher pair differing in crop size and seed, mirroring a two-crop recipe."""
        return cls(
            train_a=TrainConfig(seed=seed, crop_size=crop_a),
            train_b=TrainConfig(seed=seed + 1, crop_size=crop_b),
            **overrides,
        )


def load_round_config(path: Union[str, Path]) -> RoundConfig:
    """Read a RoundConfig from JSON; fields map one-to-one, unknown keys fail."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid round config JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("round config must be a JSON object")
    known = {f.name for f in fields(RoundConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown round config fields: {sorted(unknown)}")
    if "train_a" not in doc or "train_b" not in doc:
        raise ValidationError("round config needs both 'train_a' and 'train_b'")
    kwargs: dict = {
        "train_a": load_train_config(doc["train_a"]),
        "train_b": load_train_config(doc["train_b"]),
    }
    if "tta" in doc:
        tta_doc = doc["tta"]
        if not isinstance(tta_doc, dict) or set(tta_doc) - {"scales", "flip"}:
            raise ValidationError("tta config accepts only 'scales' and 'flip'")
        kwargs["tta"] = TtaConfig(
            scales=tuple(tta_doc.get("scales", TtaConfig().scales)),
            flip=tta_doc.get("flip", True),
        )
    if "pseudo" in doc:
        pseudo_doc = doc["pseudo"]
        if not isinstance(pseudo_doc, dict) or set(pseudo_doc) - {"threshold"}:
            raise ValidationError("pseudo config accepts only 'threshold'")
        kwargs["pseudo"] = PseudoLabelConfig(threshold=pseudo_doc.get("threshold", 0.4))
    for key in ("strategy", "fine_tune", "round_index"):
        if key in doc:
            kwargs[key] = doc[key]
    return RoundConfig(**kwargs)


@dataclass(frozen=True)
class RoundArtifacts:
    """Everything a finished round leaves behind, on disk and in memory."""

    round_index: int
    round_dir: Path
    model_a_path: Path
    model_b_path: Path
    prob_dir: Path
    pseudo_dir: Path
    pseudo_manifest_path: Path
    merged_manifest_path: Path
    params_a: ModelParams
    params_b: ModelParams
    merged_manifest: DatasetManifest
    losses_a: tuple[float, ...]
    losses_b: tuple[float, ...]
    coverage: float
    report_before: MetricReport | None = None
    report_after: MetricReport | None = None


def merge_datasets(labeled: DatasetManifest, pseudo: DatasetManifest) -> DatasetManifest:
    """Union of two manifests with disjoint video ids; the result is a train split.

    Frame provenance (true/pseudo kinds) is preserved, so true labels can never
    be overwritten by pseudo ones.
    """
    if labeled.class_count != pseudo.class_count:
        raise ValidationError(
            f"class counts differ: {labeled.class_count} vs {pseudo.class_count}"
        )
    labeled_ids = {v.video_id for v in labeled.videos}
    collisions = sorted(labeled_ids & {v.video_id for v in pseudo.videos})
    if collisions:
        raise ValidationError(f"video ids present in both manifests: {collisions}")
    return DatasetManifest(labeled.class_count, "train", labeled.videos + pseudo.videos)


def _stage(stage: str, where: str, exc: SegcycleError) -> SegcycleError:
    return type(exc)(f"[{stage}] {where}: {exc}")


def _ensemble_for_frame(
    models: Sequence[tuple[ModelParams, LinearSegmenter]],
    image: np.ndarray,
    tta_cfg: TtaConfig,
    strategy: str,
) -> ProbMap:
    outputs = []
    for params, segmenter in models:
        feats = features_for(params, image)
        outputs.append(tta_aggregate(segmenter, feats, tta_cfg))
    return ensemble_probs(outputs, strategy)


def evaluate_model_pair(
    params_list: Sequence[ModelParams],
    manifest: DatasetManifest,
    vc_lengths: Sequence[int] = (8, 16),
    per_video: bool = False,
) -> MetricReport:
    """Score the (plain forward) ensemble of the given models on labeled frames.

    VC lengths that no video can support are silently omitted from the report.
    """
    from .formats import read_label_map

    if not params_list:
        raise ValidationError("need at least one model to evaluate")
    cm = ConfusionMatrix.zero(manifest.class_count)
    videos: list[tuple[list[LabelMap], list[LabelMap]]] = []
    for video in manifest.videos:
        preds: list[LabelMap] = []
        gts: list[LabelMap] = []
        for frame in video.frames:
            if frame.label is None:
                continue
            image = read_image(frame.image).astype(np.float64) / 255.0
            maps = [forward(p, features_for(p, image)) for p in params_list]
            pred = argmax_label(ensemble_probs(maps))
            gt = read_label_map(frame.label)
            cm = accumulate(cm, pred, gt)
            preds.append(pred)
            gts.append(gt)
        if gts:
            videos.append((preds, gts))
    vc: dict[int, float] = {}
    for n in vc_lengths:
        try:
            vc[n] = video_consistency_over_videos(videos, n, per_video=per_video)
        except ValidationError:
            pass  # no video long enough for this window
    return report_from_confusion(cm, vc)


def evaluate_predictions(
    pred_dir: Union[str, Path],
    manifest: DatasetManifest,
    vc_lengths: Sequence[int] = (8, 16),
    per_video: bool = False,
) -> MetricReport:
    """Score stored prediction label maps laid out as pred_dir/<video>/<frame>.pgm."""
    from .formats import read_label_map

    pred_dir = Path(pred_dir)
    cm = ConfusionMatrix.zero(manifest.class_count)
    videos: list[tuple[list[LabelMap], list[LabelMap]]] = []
    for video in manifest.videos:
        preds: list[LabelMap] = []
        gts: list[LabelMap] = []
        for frame in video.frames:
            if frame.label is None:
                continue
            pred_path = pred_dir / video.video_id / f"{frame.frame_id}.pgm"
            if not pred_path.is_file():
                raise ValidationError(
                    f"missing prediction for video {video.video_id!r} frame {frame.frame_id}: {pred_path}"
                )
            pred = read_label_map(pred_path)
            gt = read_label_map(frame.label)
            cm = accumulate(cm, pred, gt)
            preds.append(pred)
            gts.append(gt)
        if gts:
            videos.append((preds, gts))
    vc: dict[int, float] = {}
    for n in vc_lengths:
        try:
            vc[n] = video_consistency_over_videos(videos, n, per_video=per_video)
        except ValidationError:
            pass
    return report_from_confusion(cm, vc)


def _validate_round_inputs(labeled: DatasetManifest, unlabeled: DatasetManifest) -> None:
    if labeled.class_count != unlabeled.class_count:
        raise ValidationError(
            f"labeled and unlabeled class counts differ: "
            f"{labeled.class_count} vs {unlabeled.class_count}"
        )
    if not labeled.has_true_labels():
        raise ValidationError("labeled manifest carries no true labels")
    for video, frame in unlabeled.iter_frames():
        if frame.kind != "none":
            raise ValidationError(
                f"unlabeled manifest video {video.video_id!r} frame {frame.frame_id} "
                f"has kind {frame.kind!r}, expected 'none'"
            )


def _replace_pseudo_videos(labeled: DatasetManifest, pseudo: DatasetManifest) -> DatasetManifest:
    """Drop all-pseudo videos that the new pseudo manifest regenerates."""
    regenerated = {v.video_id for v in pseudo.videos}
    kept = []
    for video in labeled.videos:
        if video.video_id in regenerated:
            if any(frame.kind != "pseudo" for frame in video.frames):
                raise ValidationError(
                    f"video id {video.video_id!r} collides with an unlabeled video "
                    f"but carries non-pseudo labels"
                )
            continue  # replaced by this round's regenerated labels
        kept.append(video)
    return DatasetManifest(labeled.class_count, labeled.split, tuple(kept))


def run_round(
    labeled: DatasetManifest,
    unlabeled: DatasetManifest,
    cfg: RoundConfig,
    out_dir: Union[str, Path],
    *,
    init_a: ModelParams | None = None,
    init_b: ModelParams | None = None,
    eval_manifest: DatasetManifest | None = None,
    vc_lengths: Sequence[int] = (8, 16),
) -> RoundArtifacts:
    """Run one recycling round and write its artifact tree.

    Steps: train the two models on the labeled manifest, run TTA plus
    ensembling for every unlabeled frame, threshold into pseudo labels, and
    merge those with the labeled data (replacing any pseudo videos a previous
    round put there). Retraining on the merged manifest is the next round's
    job. When an eval manifest is given the round also scores the incoming
    and the freshly trained ensemble on it.
    """
    _validate_round_inputs(labeled, unlabeled)
    out_dir = Path(out_dir)
    round_dir = out_dir / f"round_{cfg.round_index:02d}"
    prob_dir = round_dir / "probs"
    pseudo_dir = round_dir / "pseudo"
    round_dir.mkdir(parents=True, exist_ok=True)

    report_before = None
    if eval_manifest is not None:
        incoming_a = init_a or ModelParams.zeros(labeled.class_count, cfg.train_a.feature_dim)
        incoming_b = init_b or ModelParams.zeros(labeled.class_count, cfg.train_b.feature_dim)
        report_before = evaluate_model_pair([incoming_a, incoming_b], eval_manifest, vc_lengths)
        report_mod.save_report(report_before, round_dir / "report_before.json")

    try:
        result_a = train(labeled, cfg.train_a, init=init_a)
    except SegcycleError as exc:
        raise _stage("train model_a", f"round {cfg.round_index}", exc) from exc
    try:
        result_b = train(labeled, cfg.train_b, init=init_b)
    except SegcycleError as exc:
        raise _stage("train model_b", f"round {cfg.round_index}", exc) from exc

    model_a_path = round_dir / "model_a.segw"
    model_b_path = round_dir / "model_b.segw"
    from .train import write_model_params

    write_model_params(result_a.params, model_a_path)
    write_model_params(result_b.params, model_b_path)
    report_mod.write_loss_csv(result_a.losses, round_dir / "loss_a.csv")
    report_mod.write_loss_csv(result_b.losses, round_dir / "loss_b.csv")
    if result_a.losses or result_b.losses:
        report_mod.save_loss_figure(
            {"model_a": result_a.losses, "model_b": result_b.losses},
            round_dir / "loss_curves.png",
        )

    models = [
        (result_a.params, LinearSegmenter(result_a.params)),
        (result_b.params, LinearSegmenter(result_b.params)),
    ]
    pseudo_videos = []
    covered = 0
    total = 0
    for video in unlabeled.videos:
        frame_records = []
        for frame in video.frames:
            where = f"video {video.video_id!r} frame {frame.frame_id}"
            try:
                image = read_image(frame.image).astype(np.float64) / 255.0
                combined = _ensemble_for_frame(models, image, cfg.tta, cfg.strategy)
                prob_path = prob_dir / video.video_id / f"{frame.frame_id}.segp"
                write_prob_map(combined, prob_path)
                labels = pseudo_label(combined, cfg.pseudo)
                label_path = pseudo_dir / video.video_id / f"{frame.frame_id}.pgm"
                write_label_map(labels, label_path)
            except SegcycleError as exc:
                raise _stage("pseudo-label", where, exc) from exc
            covered += int((labels.pixels != IGNORE_LABEL).sum())
            total += labels.pixels.size
            frame_records.append(FrameRecord(frame.frame_id, frame.image, label_path, "pseudo"))
        if frame_records:
            pseudo_videos.append(VideoRecord(video.video_id, tuple(frame_records)))

    pseudo_manifest = DatasetManifest(labeled.class_count, "train", tuple(pseudo_videos))
    pseudo_manifest_path = round_dir / "pseudo_manifest.json"
    save_manifest(pseudo_manifest, pseudo_manifest_path)

    merged = merge_datasets(_replace_pseudo_videos(labeled, pseudo_manifest), pseudo_manifest)
    merged_manifest_path = round_dir / "merged_manifest.json"
    save_manifest(merged, merged_manifest_path)

    coverage = covered / total if total else 0.0

    report_after = None
    if eval_manifest is not None:
        report_after = evaluate_model_pair([result_a.params, result_b.params], eval_manifest, vc_lengths)
        report_mod.save_report(report_after, round_dir / "report_after.json")

    summary = {
        "round_index": cfg.round_index,
        "pseudo_coverage": coverage,
        "pseudo_frames": sum(len(v.frames) for v in pseudo_videos),
        "strategy": cfg.strategy,
        "threshold": cfg.pseudo.threshold,
    }
    from .formats import atomic_write_bytes

    atomic_write_bytes(
        round_dir / "summary.json",
        (json.dumps(summary, indent=2, sort_keys=True) + "\n").encode("utf-8"),
    )

    return RoundArtifacts(
        round_index=cfg.round_index,
        round_dir=round_dir,
        model_a_path=model_a_path,
        model_b_path=model_b_path,
        prob_dir=prob_dir,
        pseudo_dir=pseudo_dir,
        pseudo_manifest_path=pseudo_manifest_path,
        merged_manifest_path=merged_manifest_path,
        params_a=result_a.params,
        params_b=result_b.params,
        merged_manifest=merged,
        losses_a=result_a.losses,
        losses_b=result_b.losses,
        coverage=coverage,
        report_before=report_before,
        report_after=report_after,
    )


def _round_seeds(cfg: RoundConfig, round_index: int) -> RoundConfig:
    offset = (round_index - 1) * ROUND_SEED_STRIDE
    return replace(
        cfg,
        round_index=round_index,
        train_a=replace(cfg.train_a, seed=cfg.train_a.seed + offset),
        train_b=replace(cfg.train_b, seed=cfg.train_b.seed + offset),
    )


def run_loop(
    labeled: DatasetManifest,
    unlabeled: DatasetManifest,
    base_cfg: RoundConfig,
    rounds: int,
    out_dir: Union[str, Path],
    *,
    eval_manifest: DatasetManifest | None = None,
    vc_lengths: Sequence[int] = (8, 16),
) -> list[RoundArtifacts]:
    """Run the recycling loop for an explicit number of rounds.

    Round 1 trains on the labeled manifest; each later round trains on the
    previous round's merged manifest with that round's regenerated pseudo
    labels. Per-round seeds derive deterministically from the base seeds and
    the round index. With fine_tune (the default) each round continues from
    the previous round's parameters, otherwise every round starts fresh.
    """
    if not isinstance(rounds, int) or rounds < 1:
        raise ValidationError(f"round count must be a positive integer, got {rounds!r}")
    out_dir = Path(out_dir)
    artifacts: list[RoundArtifacts] = []
    training_manifest = labeled
    init_a: ModelParams | None = None
    init_b: ModelParams | None = None

    for round_index in range(1, rounds + 1):
        cfg = _round_seeds(base_cfg, round_index)
        art = run_round(
            training_manifest,
            unlabeled,
            cfg,
            out_dir,
            init_a=init_a,
            init_b=init_b,
            eval_manifest=eval_manifest,
            vc_lengths=vc_lengths,
        )
        artifacts.append(art)
        training_manifest = art.merged_manifest
        if base_cfg.fine_tune:
            init_a, init_b = art.params_a, art.params_b

    report_mod.write_csv(
        out_dir / "coverage.csv",
        ["round", "pseudo_coverage"],
        [[art.round_index, repr(art.coverage)] for art in artifacts],
    )
    if eval_manifest is not None:
        reports = [art.report_after for art in artifacts if art.report_after is not None]
        labels = [f"Round {art.round_index}" for art in artifacts if art.report_after is not None]
        if reports:
            report_mod.write_report_outputs(reports, labels, out_dir)
    return artifacts
