"""Command-line interface.

Subcommands: synth, train, tta, ensemble, pseudolabel, remap, metrics,
report, loop. Exit codes: 0 on success, 1 for validation/usage errors, 2 for
I/O failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline, report as report_mod, synthdata
from .ensemble import ENSEMBLE_STRATEGIES, PseudoLabelConfig, ensemble_probs, pseudo_label, remap_labels
from .errors import SegcycleError, ValidationError
from .formats import (
    load_class_mapping,
    read_image,
    read_label_map,
    read_prob_map,
    write_label_map,
    write_prob_map,
)
from .manifest import load_manifest, validate_manifest_paths
from .tta import TtaConfig, tta_aggregate
from .train import LinearSegmenter, features_for, read_model_params, train, write_model_params


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors follow the package exit-code contract."""

    def error(self, message):  # noqa: D102
        raise ValidationError(f"{self.prog}: {message}")


def _parse_scales(text: str) -> tuple[float, ...]:
    scales = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            if "/" in token:
                num, den = token.split("/", 1)
                scales.append(float(num) / float(den))
            else:
                scales.append(float(token))
        except (ValueError, ZeroDivisionError):
            raise ValidationError(f"bad scale {token!r}; use floats or fractions like 512/896") from None
    if not scales:
        raise ValidationError("scale list is empty")
    return tuple(scales)


def _parse_vc(text: str) -> tuple[int, ...]:
    try:
        lengths = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise ValidationError(f"bad VC window list {text!r}; use e.g. 8,16") from None
    if not lengths or any(n < 1 for n in lengths):
        raise ValidationError(f"VC window lengths must be positive integers, got {text!r}")
    return lengths


def _tta_config(args) -> TtaConfig:
    scales = _parse_scales(args.scales) if args.scales else TtaConfig().scales
    return TtaConfig(scales=scales, flip=args.flip)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    paths = synthdata.generate_benchmark(
        args.out_dir,
        seed=args.seed,
        class_count=args.classes,
        height=args.size,
        width=args.size,
        noise=args.noise,
        color_shift=args.shift,
        labeled_videos=args.videos,
        labeled_frames=args.frames,
        unlabeled_videos=args.videos,
        unlabeled_frames=args.frames,
        eval_videos=args.eval_videos,
        eval_frames=args.eval_frames,
    )
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    validate_manifest_paths(manifest)
    cfg = pipeline.load_train_config(args.config) if args.config else pipeline.TrainConfig()
    init = read_model_params(args.init) if args.init else None
    result = train(manifest, cfg, init=init)
    write_model_params(result.params, args.out)
    if args.loss_csv:
        report_mod.write_loss_csv(result.losses, args.loss_csv)
    if result.losses:
        print(f"trained {cfg.iterations} iterations, final loss {result.losses[-1]:.6f}")
    else:
        print("trained 0 iterations, parameters unchanged")
    print(f"model written to {args.out}")
    return 0


def _cmd_tta(args) -> int:
    params = read_model_params(args.model)
    manifest = load_manifest(args.frames)
    validate_manifest_paths(manifest)
    segmenter = LinearSegmenter(params)
    out_dir = Path(args.out_dir)
    count = 0
    for video, frame in manifest.iter_frames():
        image = read_image(frame.image).astype(np.float64) / 255.0
        if args.base_size:
            long_side = max(image.shape[:2])
            base_scales = _parse_scales(args.scales) if args.scales else TtaConfig().scales
            cfg = TtaConfig(
                scales=tuple(s * args.base_size / long_side for s in base_scales),
                flip=args.flip,
            )
        else:
            cfg = _tta_config(args)
        combined = tta_aggregate(segmenter, features_for(params, image), cfg)
        write_prob_map(combined, out_dir / video.video_id / f"{frame.frame_id}.segp")
        count += 1
    print(f"wrote {count} probability maps to {out_dir}")
    return 0


def _iter_segp_tree(root: Path):
    for path in sorted(root.rglob("*.segp")):
        yield path.relative_to(root)


def _cmd_ensemble(args) -> int:
    if bool(args.inputs) == bool(args.input_dirs):
        raise ValidationError("give either --inputs files or --input-dirs directories")
    if args.inputs:
        if not args.out:
            raise ValidationError("--out is required with --inputs")
        maps = [read_prob_map(path) for path in args.inputs]
        write_prob_map(ensemble_probs(maps, args.strategy), args.out)
        print(f"ensembled {len(maps)} maps into {args.out}")
        return 0
    if not args.out_dir:
        raise ValidationError("--out-dir is required with --input-dirs")
    roots = [Path(d) for d in args.input_dirs]
    rel_paths = list(_iter_segp_tree(roots[0]))
    if not rel_paths:
        raise ValidationError(f"no .segp files under {roots[0]}")
    for rel in rel_paths:
        maps = []
        for root in roots:
            path = root / rel
            if not path.is_file():
                raise ValidationError(f"missing counterpart {path}")
            maps.append(read_prob_map(path))
        write_prob_map(ensemble_probs(maps, args.strategy), Path(args.out_dir) / rel)
    print(f"ensembled {len(rel_paths)} frames into {args.out_dir}")
    return 0


def _cmd_pseudolabel(args) -> int:
    cfg = PseudoLabelConfig(threshold=args.threshold)
    if bool(args.input) == bool(args.in_dir):
        raise ValidationError("give either --in a file or --in-dir a directory")
    if args.input:
        if not args.out:
            raise ValidationError("--out is required with --in")
        write_label_map(pseudo_label(read_prob_map(args.input), cfg), args.out)
        print(f"pseudo labels written to {args.out}")
        return 0
    if not args.out_dir:
        raise ValidationError("--out-dir is required with --in-dir")
    root = Path(args.in_dir)
    rel_paths = list(_iter_segp_tree(root))
    if not rel_paths:
        raise ValidationError(f"no .segp files under {root}")
    for rel in rel_paths:
        labels = pseudo_label(read_prob_map(root / rel), cfg)
        write_label_map(labels, (Path(args.out_dir) / rel).with_suffix(".pgm"))
    print(f"pseudo-labeled {len(rel_paths)} frames into {args.out_dir}")
    return 0


def _cmd_remap(args) -> int:
    mapping = load_class_mapping(args.mapping, args.source_classes)
    write_label_map(remap_labels(read_label_map(args.input), mapping), args.out)
    print(f"remapped labels written to {args.out}")
    return 0


def _cmd_metrics(args) -> int:
    manifest = load_manifest(args.gt_manifest)
    report = pipeline.evaluate_predictions(
        args.pred_dir, manifest, _parse_vc(args.vc), per_video=args.per_video
    )
    label = args.label or Path(args.pred_dir).name or "predictions"
    table = report_mod.emit_report([report], [label])
    sys.stdout.write(table)
    if report.abstained:
        print(f"abstained pixels (pred=255 under valid gt): {report.abstained}")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        report_mod.write_report_outputs([report], [label], out_dir)
        report_mod.save_report(report, out_dir / "report.json")
        print(f"report files written to {out_dir}")
    return 0


def _cmd_report(args) -> int:
    reports = [report_mod.load_report(path) for path in args.inputs]
    if args.labels:
        if len(args.labels) != len(reports):
            raise ValidationError(f"{len(reports)} inputs but {len(args.labels)} labels")
        labels = args.labels
    else:
        labels = [Path(p).stem for p in args.inputs]
    sys.stdout.write(report_mod.emit_report(reports, labels))
    if args.out_dir:
        report_mod.write_report_outputs(reports, labels, args.out_dir)
        print(f"report files written to {args.out_dir}")
    return 0


def _cmd_loop(args) -> int:
    labeled = load_manifest(args.labeled)
    unlabeled = load_manifest(args.unlabeled)
    validate_manifest_paths(labeled)
    validate_manifest_paths(unlabeled)
    if args.config:
        cfg = pipeline.load_round_config(args.config)
    else:
        cfg = pipeline.RoundConfig.default_pair(seed=args.seed)
    if args.from_scratch:
        from dataclasses import replace

        cfg = replace(cfg, fine_tune=False)
    if args.val_manifest and args.include_val:
        val = load_manifest(args.val_manifest)
        validate_manifest_paths(val)
        labeled = pipeline.merge_datasets(labeled, val)
    eval_manifest = None
    if args.eval_manifest:
        eval_manifest = load_manifest(args.eval_manifest)
        validate_manifest_paths(eval_manifest)
    artifacts = pipeline.run_loop(
        labeled, unlabeled, cfg, args.rounds, args.out_dir, eval_manifest=eval_manifest
    )
    for art in artifacts:
        line = f"round {art.round_index}: pseudo coverage {art.coverage:.4f}"
        if art.report_after is not None:
            line += f", eval mIoU {art.report_after.miou:.4f}"
        print(line)
    print(f"artifacts written to {args.out_dir}")
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segcycle", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic labeled/unlabeled/eval benchmark")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.18)
    p.add_argument("--shift", type=float, default=0.10)
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--eval-videos", type=int, default=2)
    p.add_argument("--eval-frames", type=int, default=16)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train the linear segmenter on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--out", required=True, help="output .segw model file")
    p.add_argument("--init", help="optional .segw file to fine-tune from")
    p.add_argument("--loss-csv", help="optional CSV path for the loss curve")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("tta", help="write multi-scale/mirror ensembled probability maps")
    p.add_argument("--model", required=True, help=".segw model file")
    p.add_argument("--frames", required=True, help="manifest of frames to process")
    p.add_argument("--scales", help="comma list of factors or fractions, e.g. 512/896,1.0")
    p.add_argument("--flip", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--base-size", type=int,
                   help="treat scales as targets for the long side of base-size pixels")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_tta)

    p = sub.add_parser("ensemble", help="average probability maps across models")
    p.add_argument("--inputs", nargs="+", help="two or more .segp files")
    p.add_argument("--input-dirs", nargs="+", help="two or more directories of .segp trees")
    p.add_argument("--strategy", choices=ENSEMBLE_STRATEGIES, default="mean")
    p.add_argument("--out", help="output .segp (file mode)")
    p.add_argument("--out-dir", help="output directory (directory mode)")
    p.set_defaults(func=_cmd_ensemble)

    p = sub.add_parser("pseudolabel", help="threshold probability maps into pseudo labels")
    p.add_argument("--in", dest="input", help="input .segp file")
    p.add_argument("--in-dir", help="directory of .segp files")
    p.add_argument("--threshold", type=float, default=0.4)
    p.add_argument("--out", help="output .pgm (file mode)")
    p.add_argument("--out-dir", help="output directory (directory mode)")
    p.set_defaults(func=_cmd_pseudolabel)

    p = sub.add_parser("remap", help="translate label ids through a mapping table")
    p.add_argument("--mapping", required=True, help="text file with 'source target' lines")
    p.add_argument("--in", dest="input", required=True, help="input .pgm")
    p.add_argument("--out", required=True, help="output .pgm")
    p.add_argument("--source-classes", type=int,
                   help="source class count (default: max mapped source + 1)")
    p.set_defaults(func=_cmd_remap)

    p = sub.add_parser("metrics", help="score stored predictions against a manifest")
    p.add_argument("--pred-dir", required=True, help="predictions at <dir>/<video>/<frame>.pgm")
    p.add_argument("--gt-manifest", required=True)
    p.add_argument("--vc", default="8,16", help="comma list of VC window lengths")
    p.add_argument("--per-video", action="store_true",
                   help="average per-video VC means instead of pooling windows")
    p.add_argument("--label", help="row label for the table")
    p.add_argument("--out-dir", help="also write report.json, CSVs and figures here")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("report", help="render stored metric reports as one table")
    p.add_argument("--inputs", nargs="+", required=True, help="report JSON files")
    p.add_argument("--labels", nargs="+", help="row labels (default: file stems)")
    p.add_argument("--out-dir", help="also write table, CSVs and figures here")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("loop", help="run the recyclable semi-supervised loop")
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--config", help="JSON file with RoundConfig fields")
    p.add_argument("--seed", type=int, default=0, help="base seed when no config is given")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--eval-manifest", help="labeled manifest scored before/after each round")
    p.add_argument("--val-manifest", help="extra labeled manifest, folded in with --include-val")
    p.add_argument("--include-val", action="store_true")
    p.add_argument("--from-scratch", action="store_true",
                   help="retrain each round from zero instead of fine-tuning")
    p.set_defaults(func=_cmd_loop)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except SegcycleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
