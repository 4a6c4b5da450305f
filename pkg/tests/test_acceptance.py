"""Release gate: one test per headline guarantee, one printed line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
[PASS]/[FAIL] lines alongside pytest's own verdicts. Every check pins its
own seed, so a pass here is reproducible bit for bit.
"""

import hashlib
import io
import json
import time
from pathlib import Path

import numpy as np
import pytest

import segcycle as sc
from segcycle import FormatError, LabelMap, ModelParams, ProbMap
from segcycle.cli import main as cli_main
from segcycle.ensemble import PseudoLabelConfig
from segcycle.pipeline import RoundConfig, TrainConfig, run_loop
from segcycle.train import LinearSegmenter
from segcycle.tta import TtaConfig, bilinear_resize, hflip_prob, resize_prob, tta_aggregate
from segcycle.types import IGNORE_LABEL

from conftest import finite_difference_grad, oracle_iou_sets, random_prob_map


def _report(criterion: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}"
    if detail:
        line += f" ({detail})"
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. Frame metrics agree with a set-based oracle
# ---------------------------------------------------------------------------

def test_criterion_01_metric_oracle_equivalence():
    rng = np.random.default_rng(101)
    started = time.monotonic()
    worst = 0.0
    for _ in range(200):
        gt = rng.integers(0, 5, size=(16, 16)).astype(np.uint8)
        gt[rng.random((16, 16)) < 0.10] = IGNORE_LABEL
        pred = rng.integers(0, 5, size=(16, 16)).astype(np.uint8)

        cm = sc.accumulate(sc.ConfusionMatrix.zero(5), pred, gt)
        got_miou = sc.miou(cm)
        got_weighted = sc.weighted_iou(cm)

        ious = oracle_iou_sets(pred, gt, 5)
        want_miou = float(np.mean([v for v in ious if v is not None]))
        valid = gt != IGNORE_LABEL
        total = int(valid.sum())
        want_weighted = 0.0
        for c, iou in enumerate(ious):
            gt_count = int((gt[valid] == c).sum())
            if gt_count > 0:
                want_weighted += (gt_count / total) * iou

        worst = max(worst, abs(got_miou - want_miou), abs(got_weighted - want_weighted))
    elapsed = time.monotonic() - started
    _report(
        "frame metrics match set-based oracle on 200 random pairs",
        worst <= 1e-12 and elapsed < 5.0,
        f"max abs diff {worst:.2e}, {elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# 2. Video consistency agrees with a window enumerator
# ---------------------------------------------------------------------------

def _drifting_video(rng, frames, h=8, w=8, classes=3):
    """Temporally correlated gt/pred streams so windows have stable support."""
    gt = rng.integers(0, classes, size=(h, w)).astype(np.uint8)
    gt[rng.random((h, w)) < 0.10] = IGNORE_LABEL
    pred = np.where(rng.random((h, w)) < 0.8, gt, rng.integers(0, classes, size=(h, w))).astype(np.uint8)
    gts, preds = [], []
    for _ in range(frames):
        mut = rng.random((h, w)) < 0.12
        gt = gt.copy()
        gt[mut] = rng.integers(0, classes, size=int(mut.sum()))
        mut = rng.random((h, w)) < 0.15
        pred = pred.copy()
        pred[mut] = rng.integers(0, classes, size=int(mut.sum()))
        gts.append(gt.copy())
        preds.append(pred.copy())
    return preds, gts


def _oracle_window_scores(preds, gts, n):
    """Python-loop score per stride-1 window; unstable-support windows skipped."""
    h, w = gts[0].shape
    scores = []
    for start in range(len(gts) - n + 1):
        correct = consistent = 0
        for y in range(h):
            for x in range(w):
                g0 = int(gts[start][y, x])
                if g0 == IGNORE_LABEL:
                    continue
                if any(int(gts[start + k][y, x]) != g0 for k in range(1, n)):
                    continue
                consistent += 1
                if all(int(preds[start + k][y, x]) == g0 for k in range(n)):
                    correct += 1
        if consistent:
            scores.append(correct / consistent)
    return scores


def test_criterion_02_video_consistency_oracle_equivalence():
    rng = np.random.default_rng(202)
    started = time.monotonic()
    videos = [_drifting_video(rng, int(rng.integers(6, 21))) for _ in range(50)]

    worst = 0.0
    for n in (2, 4):
        all_scores = []
        for preds, gts in videos:
            scores = _oracle_window_scores(preds, gts, n)
            all_scores.extend(scores)
            worst = max(worst, abs(sc.video_consistency(preds, gts, n) - float(np.mean(scores))))
        pooled = sc.video_consistency_over_videos(videos, n)
        worst = max(worst, abs(pooled - float(np.mean(all_scores))))

    vc1_worst = 0.0
    for preds, gts in videos:
        accs = []
        for p, g in zip(preds, gts):
            valid = g != IGNORE_LABEL
            accs.append(float((p[valid] == g[valid]).mean()))
        vc1_worst = max(vc1_worst, abs(sc.video_consistency(preds, gts, 1) - float(np.mean(accs))))

    elapsed = time.monotonic() - started
    _report(
        "video consistency matches window enumerator on 50 videos, unit window is accuracy",
        worst <= 1e-12 and vc1_worst <= 1e-12 and elapsed < 5.0,
        f"max abs diff {max(worst, vc1_worst):.2e}, {elapsed:.2f}s",
    )


# ---------------------------------------------------------------------------
# 3. Perfect predictions score exactly 1.0 everywhere
# ---------------------------------------------------------------------------

def test_criterion_03_identity_suite():
    # 2048 pixels: 1024 ignored, the rest split 512/256/256 so every
    # ground-truth share is an exact binary fraction.
    gt = np.full((32, 64), IGNORE_LABEL, dtype=np.uint8)
    flat = gt.reshape(-1)
    flat[:512] = 0
    flat[512:768] = 1
    flat[768:1024] = 2
    pred = gt.copy()

    cm = sc.accumulate(sc.ConfusionMatrix.zero(3), pred, gt)
    ok = sc.miou(cm) == 1.0 and sc.weighted_iou(cm) == 1.0

    frames = [gt.copy() for _ in range(16)]
    vc8 = sc.video_consistency(frames, frames, 8)
    vc16 = sc.video_consistency(frames, frames, 16)
    ok = ok and vc8 == 1.0 and vc16 == 1.0

    _report(
        "perfect predictions score exactly 1.0 on every metric",
        ok,
        f"miou={sc.miou(cm)!r} weighted={sc.weighted_iou(cm)!r} vc8={vc8!r} vc16={vc16!r}",
    )


# ---------------------------------------------------------------------------
# 4. Analytic loss gradients match finite differences
# ---------------------------------------------------------------------------

def test_criterion_04_gradient_checks():
    worst = 0.0
    zeros_exact = True
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        logits = rng.normal(size=(4, 4, 3))
        labels = rng.integers(0, 3, size=(4, 4)).astype(np.int64)
        ignored = [(0, 0), tuple(rng.integers(0, 4, size=2))]
        for y, x in ignored:
            labels[y, x] = IGNORE_LABEL
        probs = sc.softmax(logits)

        cases = [
            (lambda z: sc.cross_entropy_loss(sc.softmax(z), labels)[0],
             sc.cross_entropy_loss(probs, labels)[1], logits),
            (lambda p: sc.dice_loss(p, labels)[0],
             sc.dice_loss(probs, labels)[1], probs),
            (lambda z: sc.joint_loss(sc.softmax(z), labels, 1.0, 1.0)[0],
             sc.joint_loss(probs, labels, 1.0, 1.0)[1], logits),
        ]
        for fn, analytic, point in cases:
            fd = finite_difference_grad(fn, point.copy(), step=1e-5)
            rel = float(np.linalg.norm(fd - analytic) / max(np.linalg.norm(analytic), 1e-30))
            worst = max(worst, rel)
            for y, x in ignored:
                if not (analytic[y, x] == 0.0).all():
                    zeros_exact = False

    _report(
        "loss gradients match central finite differences on 20 random fixtures",
        worst < 1e-4 and zeros_exact,
        f"max relative error {worst:.2e}, ignored pixels exactly zero: {zeros_exact}",
    )


# ---------------------------------------------------------------------------
# 5. Degenerate augmentation settings are bit-exact no-ops
# ---------------------------------------------------------------------------

def test_criterion_05_tta_degenerate_bit_exact():
    rng = np.random.default_rng(505)
    params = ModelParams(rng.normal(size=(3, 6)), rng.normal(size=3))
    image = rng.random((10, 12, 3))
    feats = sc.features_for(params, image)

    raw = sc.forward(params, feats)
    combined = tta_aggregate(LinearSegmenter(params), feats, TtaConfig(scales=(1.0,), flip=False))
    identity_run = np.array_equal(combined.planes, raw.planes)

    pm = random_prob_map(rng, 4, 7, 9)
    involution = np.array_equal(hflip_prob(hflip_prob(pm)).planes, pm.planes)

    same_size = np.array_equal(resize_prob(pm, 7, 9).planes, pm.planes)
    frame = rng.random((6, 5, 3))
    same_frame = np.array_equal(bilinear_resize(frame, 6, 5), frame)

    _report(
        "unit scale without mirroring reproduces the raw forward pass bit for bit",
        identity_run and involution and same_size and same_frame,
        f"identity_run={identity_run} involution={involution} identity_resize={same_size and same_frame}",
    )


# ---------------------------------------------------------------------------
# 6. Pseudo-label threshold law
# ---------------------------------------------------------------------------

def test_criterion_06_pseudo_label_threshold_law():
    confident = ProbMap(np.array([0.5, 0.3, 0.2], np.float32).reshape(3, 1, 1))
    hesitant = ProbMap(np.array([0.35, 0.33, 0.32], np.float32).reshape(3, 1, 1))
    cfg = PseudoLabelConfig(threshold=0.4)
    examples_ok = (
        sc.pseudo_label(confident, cfg).pixels[0, 0] == 0
        and sc.pseudo_label(hesitant, cfg).pixels[0, 0] == IGNORE_LABEL
    )

    rng = np.random.default_rng(606)
    monotone = True
    for _ in range(50):
        pm = random_prob_map(rng, 4, 6, 6)
        fractions = []
        for tau in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
            labels = sc.pseudo_label(pm, PseudoLabelConfig(threshold=tau))
            fractions.append(float((labels.pixels == IGNORE_LABEL).mean()))
        if any(a > b for a, b in zip(fractions, fractions[1:])):
            monotone = False

    _report(
        "pseudo-label ignore fraction is monotone in the threshold, worked examples hold",
        examples_ok and monotone,
        f"worked_examples={examples_ok} monotone={monotone}",
    )


# ---------------------------------------------------------------------------
# 7. Ensembling never flips a unanimous argmax
# ---------------------------------------------------------------------------

def test_criterion_07_ensemble_agreement_law():
    rng = np.random.default_rng(707)
    ok = True
    for _ in range(50):
        a = random_prob_map(rng, 4, 8, 8)
        b_planes = random_prob_map(rng, 4, 8, 8).planes.copy()
        # swap each pixel's max value into a's argmax channel so the pair agrees
        ys, xs = np.indices((8, 8))
        arg_a = a.planes.argmax(axis=0)
        arg_b = b_planes.argmax(axis=0)
        vmax = b_planes[arg_b, ys, xs].copy()
        vat = b_planes[arg_a, ys, xs].copy()
        b_planes[arg_a, ys, xs] = vmax
        b_planes[arg_b, ys, xs] = vat
        b = ProbMap(b_planes)
        assert np.array_equal(b.planes.argmax(axis=0), arg_a)

        for strategy in ("mean", "max"):
            merged = sc.ensemble_probs([a, b], strategy)
            if not np.array_equal(merged.planes.argmax(axis=0), arg_a):
                ok = False

    _report("ensembling preserves every unanimous per-pixel argmax", ok)


# ---------------------------------------------------------------------------
# 8. The recycling loop beats its labeled-only baseline
# ---------------------------------------------------------------------------

def test_criterion_08_recycling_loop_improves_holdout(tmp_path):
    started = time.monotonic()
    paths = sc.synthdata.generate_benchmark(
        tmp_path / "data", seed=7, class_count=3, height=32, width=32,
        noise=0.45, color_shift=0.35,
        labeled_videos=4, labeled_frames=5,
        unlabeled_videos=4, unlabeled_frames=5,
        eval_videos=4, eval_frames=16,
    )
    labeled = sc.load_manifest(paths["labeled"])
    unlabeled = sc.load_manifest(paths["unlabeled"])
    holdout = sc.load_manifest(paths["eval"])

    base = dict(learning_rate=0.5, weight_decay=0.0, iterations=300, batch_pixels=1024)
    cfg = RoundConfig(
        train_a=TrainConfig(crop_size=24, seed=0, **base),
        train_b=TrainConfig(crop_size=28, seed=1, **base),
        tta=TtaConfig(scales=(0.75, 1.0), flip=True),
        pseudo=PseudoLabelConfig(threshold=0.7),
        fine_tune=False,
    )
    arts = run_loop(labeled, unlabeled, cfg, 2, tmp_path / "runs", eval_manifest=holdout)
    baseline = arts[0].report_after.miou   # trained on true labels only
    recycled = arts[1].report_after.miou   # retrained on labels + pseudo labels
    gain = recycled - baseline
    elapsed = time.monotonic() - started

    _report(
        "one recycling round lifts held-out mIoU by at least 0.01",
        gain >= 0.01 and elapsed < 60.0,
        f"baseline {baseline:.4f} -> recycled {recycled:.4f}, gain {gain:+.4f}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 9. Identical seeds produce byte-identical artifact trees
# ---------------------------------------------------------------------------

def _hash_tree(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


def test_criterion_09_loop_determinism(tmp_path):
    assert cli_main([
        "synth", "--out-dir", str(tmp_path / "data"), "--seed", "3",
        "--size", "24", "--videos", "2", "--frames", "4",
        "--eval-videos", "1", "--eval-frames", "6",
    ]) == 0
    (tmp_path / "round.json").write_text(json.dumps({
        "train_a": {"iterations": 60, "crop_size": 12, "learning_rate": 0.4,
                    "weight_decay": 0.0, "batch_pixels": 256, "seed": 0},
        "train_b": {"iterations": 60, "crop_size": 16, "learning_rate": 0.4,
                    "weight_decay": 0.0, "batch_pixels": 256, "seed": 1},
        "tta": {"scales": [0.75, 1.0], "flip": True},
    }))
    argv_tail = [
        "--labeled", str(tmp_path / "data" / "labeled.json"),
        "--unlabeled", str(tmp_path / "data" / "unlabeled.json"),
        "--rounds", "2", "--config", str(tmp_path / "round.json"),
        "--eval-manifest", str(tmp_path / "data" / "eval.json"),
    ]
    assert cli_main(["loop", "--out-dir", str(tmp_path / "run_a"), *argv_tail]) == 0
    assert cli_main(["loop", "--out-dir", str(tmp_path / "run_b"), *argv_tail]) == 0

    hashes_a = _hash_tree(tmp_path / "run_a")
    hashes_b = _hash_tree(tmp_path / "run_b")
    _report(
        "two identically seeded loop runs write byte-identical artifact trees",
        hashes_a == hashes_b and len(hashes_a) > 0,
        f"{len(hashes_a)} files compared, figures included",
    )


# ---------------------------------------------------------------------------
# 10. Binary formats round-trip bit-exactly and reject corrupt headers
# ---------------------------------------------------------------------------

def test_criterion_10_format_round_trips():
    rng = np.random.default_rng(1010)
    exact = True
    for _ in range(50):
        pm = random_prob_map(rng, int(rng.integers(2, 7)),
                             int(rng.integers(1, 11)), int(rng.integers(1, 11)))
        buf = io.BytesIO()
        sc.write_prob_map(pm, buf)
        buf.seek(0)
        if not np.array_equal(sc.read_prob_map(buf).planes, pm.planes):
            exact = False
    for _ in range(50):
        pixels = rng.integers(0, 256, size=(int(rng.integers(1, 11)), int(rng.integers(1, 11))))
        lm = LabelMap(pixels.astype(np.uint8))
        buf = io.BytesIO()
        sc.write_label_map(lm, buf)
        buf.seek(0)
        if not np.array_equal(sc.read_label_map(buf).pixels, lm.pixels):
            exact = False

    pm = random_prob_map(rng, 2, 2, 2)
    good = io.BytesIO()
    sc.write_prob_map(pm, good)
    blob = good.getvalue()
    rejected = 0
    corruptions = [
        b"SEGQ" + blob[4:],                      # wrong magic
        blob[:4] + b"\x02\x00\x00\x00" + blob[8:],  # unsupported version
        blob[:-3],                               # truncated payload
        blob + b"\x00",                          # trailing garbage
    ]
    for bad in corruptions:
        with pytest.raises(FormatError):
            sc.read_prob_map(io.BytesIO(bad))
        rejected += 1

    lm = LabelMap(np.zeros((2, 2), np.uint8))
    good = io.BytesIO()
    sc.write_label_map(lm, good)
    blob = good.getvalue()
    for bad in (b"P4" + blob[2:], blob.replace(b"255", b"254"), blob[:-1]):
        with pytest.raises(FormatError):
            sc.read_label_map(io.BytesIO(bad))
        rejected += 1

    _report(
        "probability and label formats round-trip bit-exactly, corrupt headers rejected",
        exact and rejected == 7,
        f"100 round-trips exact, {rejected} corruptions rejected",
    )


# ---------------------------------------------------------------------------
# 11. Report table renders fixture values at four decimals
# ---------------------------------------------------------------------------

def test_criterion_11_report_rendering():
    gt = np.concatenate([np.zeros(10000, np.uint8), np.ones(6297, np.uint8)]).reshape(1, -1)
    pred = np.concatenate([
        np.zeros(6297, np.uint8), np.ones(3703, np.uint8), np.ones(6297, np.uint8),
    ]).reshape(1, -1)
    cm = sc.accumulate(sc.ConfusionMatrix.zero(2), pred, gt)

    stable_gt = np.zeros((100, 100), np.uint8)
    pred8 = np.zeros((100, 100), np.uint8)
    pred8.reshape(-1)[9316:] = 1
    pred16 = np.zeros((100, 100), np.uint8)
    pred16.reshape(-1)[9051:] = 1
    vc8 = sc.video_consistency([pred8] * 8, [stable_gt] * 8, 8)
    vc16 = sc.video_consistency([pred16] * 16, [stable_gt] * 16, 16)

    report = sc.report_from_confusion(cm, vc={8: vc8, 16: vc16})
    table = sc.emit_report([report], ["ensemble"])
    lines = table.splitlines()
    header, row = lines[0].split(), lines[1].split()

    ok = (
        header == ["Method", "mIoU", "WeightIoU", "VC8", "VC16"]
        and row[0] == "ensemble"
        and row[1] == "0.6297"
        and row[3] == "0.9316"
        and row[4] == "0.9051"
    )
    _report(
        "report table renders the fixture scores at four decimals",
        ok,
        f"row rendered as {' '.join(row)}",
    )
