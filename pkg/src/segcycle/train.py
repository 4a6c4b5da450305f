"""Toy per-pixel linear segmenter: losses, augmentation, deterministic training.

The model is logits = W @ features + bias per pixel, softmaxed. Features are
derived from the RGB frame: normalized red/green/blue, normalized x and y
coordinates, and optionally a 3x3 local mean intensity, all within [-1, 1].
Training math runs in float64; probability maps handed to the rest of the
pipeline are float32.

Optimization is plain mini-batch gradient descent with decoupled weight decay.
Defaults follow the large-scale recipe where it transfers (weight decay 0.05,
resize ratios [0.5, 2.0], flip 0.5); the learning rate is raised to 1e-2
because the linear model needs it, the large-model recipe value being 1e-5.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import FormatError, ValidationError
from .formats import atomic_write_bytes, read_image, read_label_map
from .manifest import DatasetManifest
from .tta import bilinear_resize
from .types import IGNORE_LABEL, LabelMap, ProbMap, _frozen

PROB_FLOOR = 1e-12       # clamp inside the CE log
DICE_EPS = 1e-6

SEGW_MAGIC = b"SEGW"
SEGW_VERSION = 1
SEGW_HEADER = struct.Struct("<4sIII")

ProbsLike = Union[ProbMap, np.ndarray]
LabelsLike = Union[LabelMap, np.ndarray]


# ---------------------------------------------------------------------------
# Parameters and their binary format
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelParams:
    """Linear segmenter parameters: (C, F) float64 weights and (C,) bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        w, b = self.weights, self.bias
        if not isinstance(w, np.ndarray) or w.ndim != 2:
            raise ValidationError("weights must be a (C, F) array")
        if not isinstance(b, np.ndarray) or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValidationError("bias must be a (C,) array matching the weights")
        if not 2 <= w.shape[0] <= 255:
            raise ValidationError(f"class count must be in [2, 255], got {w.shape[0]}")
        if w.shape[1] < 1:
            raise ValidationError("feature dimension must be positive")
        w = w.astype(np.float64)
        b = b.astype(np.float64)
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValidationError("model parameters contain non-finite values")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, class_count: int, feature_dim: int) -> "ModelParams":
        return cls(np.zeros((class_count, feature_dim)), np.zeros(class_count))


def write_model_params(params: ModelParams, destination) -> None:
    header = SEGW_HEADER.pack(SEGW_MAGIC, SEGW_VERSION, params.num_classes, params.feature_dim)
    payload = params.weights.astype("<f8", copy=False).tobytes() + params.bias.astype("<f8", copy=False).tobytes()
    if hasattr(destination, "write"):
        destination.write(header + payload)
    else:
        atomic_write_bytes(destination, header + payload)


def read_model_params(source) -> ModelParams:
    data = source.read() if hasattr(source, "read") else Path(source).read_bytes()
    if len(data) < SEGW_HEADER.size:
        raise FormatError(f"SEGW stream truncated: {len(data)} bytes")
    magic, version, classes, feature_dim = SEGW_HEADER.unpack_from(data)
    if magic != SEGW_MAGIC:
        raise FormatError(f"bad SEGW magic {magic!r}")
    if version != SEGW_VERSION:
        raise FormatError(f"unsupported SEGW version {version}")
    if not 2 <= classes <= 255 or feature_dim < 1:
        raise FormatError(f"implausible SEGW dimensions C={classes}, F={feature_dim}")
    expected = 8 * (classes * feature_dim + classes)
    actual = len(data) - SEGW_HEADER.size
    if actual != expected:
        raise FormatError(f"SEGW payload size mismatch: expected {expected} bytes, found {actual}")
    values = np.frombuffer(data, dtype="<f8", offset=SEGW_HEADER.size)
    weights = values[: classes * feature_dim].reshape(classes, feature_dim)
    bias = values[classes * feature_dim:]
    return ModelParams(weights.astype(np.float64), bias.astype(np.float64))


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    weight_decay: float = 0.05
    iterations: int = 300
    batch_pixels: int = 1024
    seed: int = 0
    crop_size: int = 32
    resize_range: tuple[float, float] = (0.5, 2.0)
    hflip_prob: float = 0.5
    jitter: float = 0.1
    include_local_mean: bool = True
    ce_weight: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.learning_rate!r}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight decay cannot be negative, got {self.weight_decay!r}")
        if not isinstance(self.iterations, int) or self.iterations < 0:
            raise ValidationError(f"iterations must be a non-negative integer, got {self.iterations!r}")
        if not isinstance(self.batch_pixels, int) or self.batch_pixels < 1:
            raise ValidationError(f"batch size must be a positive pixel count, got {self.batch_pixels!r}")
        if not isinstance(self.crop_size, int) or self.crop_size < 1:
            raise ValidationError(f"crop size must be a positive integer, got {self.crop_size!r}")
        lo, hi = self.resize_range
        if not (0 < lo <= hi):
            raise ValidationError(f"resize range must satisfy 0 < low <= high, got {self.resize_range!r}")
        object.__setattr__(self, "resize_range", (float(lo), float(hi)))
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValidationError(f"flip probability must lie in [0, 1], got {self.hflip_prob!r}")
        if self.jitter < 0:
            raise ValidationError(f"jitter amplitude cannot be negative, got {self.jitter!r}")
        if self.ce_weight < 0 or self.dice_weight < 0:
            raise ValidationError("loss weights cannot be negative")

    @property
    def feature_dim(self) -> int:
        return 6 if self.include_local_mean else 5


def load_train_config(doc: Union[dict, str, "object"]) -> TrainConfig:
    """Build a TrainConfig from a dict or a JSON file path; unknown keys fail."""
    import json

    if not isinstance(doc, dict):
        try:
            doc = json.loads(Path(doc).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"train config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ValidationError("train config must be a JSON object")
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown train config fields: {sorted(unknown)}")
    kwargs = dict(doc)
    if "resize_range" in kwargs:
        rr = kwargs["resize_range"]
        if not isinstance(rr, (list, tuple)) or len(rr) != 2:
            raise ValidationError(f"resize_range must be a [low, high] pair, got {rr!r}")
        kwargs["resize_range"] = (float(rr[0]), float(rr[1]))
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad train config: {exc}") from None


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis, in float64."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, grad_probs: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. probabilities through the softmax, per pixel."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def _prob_array(probs: ProbsLike) -> np.ndarray:
    if isinstance(probs, ProbMap):
        return probs.pixel_probs().astype(np.float64)
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim < 2:
        raise ValidationError("probabilities must have shape (..., C)")
    return arr


def _label_values(labels: LabelsLike) -> np.ndarray:
    if isinstance(labels, LabelMap):
        return labels.pixels
    arr = np.asarray(labels)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got {arr.dtype}")
    return arr


def _valid_mask(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    if p.shape[:-1] != y.shape:
        raise ValidationError(f"probabilities {p.shape} do not match labels {y.shape}")
    classes = p.shape[-1]
    bad = (y != IGNORE_LABEL) & ((y < 0) | (y >= classes))
    if bad.any():
        raise ValidationError(f"labels contain class ids outside [0, {classes})")
    valid = y != IGNORE_LABEL
    if not valid.any():
        raise ValidationError("no supervision: every pixel is ignored")
    return valid


def _onehot(y: np.ndarray, classes: int, valid: np.ndarray) -> np.ndarray:
    onehot = np.zeros(y.shape + (classes,), dtype=np.float64)
    safe = np.where(valid, y, 0).astype(np.intp)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    onehot[~valid] = 0.0
    return onehot


def cross_entropy_loss(probs: ProbsLike, labels: LabelsLike) -> tuple[float, np.ndarray]:
    """Mean -log p[gt] over non-ignore pixels.

    Returns (loss, gradient w.r.t. logits) assuming probs = softmax(logits):
    the gradient is (p - onehot) / n_valid, exactly zero at ignored pixels.
    """
    p = _prob_array(probs)
    y = _label_values(labels)
    valid = _valid_mask(p, y)
    n_valid = int(valid.sum())
    safe = np.where(valid, y, 0).astype(np.intp)
    picked = np.take_along_axis(p, safe[..., None], axis=-1)[..., 0]
    loss = float(-np.log(np.maximum(picked, PROB_FLOOR))[valid].mean())
    grad = (p - _onehot(y, p.shape[-1], valid)) / n_valid
    grad[~valid] = 0.0
    return loss, grad


def dice_loss(probs: ProbsLike, labels: LabelsLike, eps: float = DICE_EPS) -> tuple[float, np.ndarray]:
    """Soft Dice loss over the classes present in the ground truth.

    Per class c, over non-ignore pixels:
        D_c = (2 * sum(p_c * g_c) + eps) / (sum(p_c) + sum(g_c) + eps)
    and the loss is 1 - mean_c D_c. Returns (loss, gradient w.r.t. the
    probabilities); chain it through the softmax yourself when optimizing
    logits. Ignored pixels have exactly zero gradient.
    """
    p = _prob_array(probs)
    y = _label_values(labels)
    valid = _valid_mask(p, y)
    classes = p.shape[-1]
    onehot = _onehot(y, classes, valid)
    p_masked = p * valid[..., None]

    flat_p = p_masked.reshape(-1, classes)
    flat_g = onehot.reshape(-1, classes)
    overlap = (flat_p * flat_g).sum(axis=0)
    p_sum = flat_p.sum(axis=0)
    g_sum = flat_g.sum(axis=0)
    present = g_sum > 0
    denom = p_sum + g_sum + eps
    dice = (2.0 * overlap + eps) / denom
    loss = float(1.0 - dice[present].mean())

    k = int(present.sum())
    # dD_c/dp_ci = (2*g_ci*(denom_c) - (2*overlap_c + eps)) / denom_c^2
    numer = 2.0 * onehot * denom - (2.0 * overlap + eps)
    grad = -(numer / (denom ** 2)) / k
    grad[..., ~present] = 0.0
    grad[~valid] = 0.0
    return loss, grad


def joint_loss(
    probs: ProbsLike,
    labels: LabelsLike,
    ce_weight: float = 1.0,
    dice_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Weighted sum of cross-entropy and Dice.

    Returns (loss, gradient w.r.t. logits); the Dice part is chained through
    the softmax here. A zero weight skips its term entirely, so (1, 0)
    reproduces cross_entropy_loss bit for bit and (0, 1) reproduces the
    dice_loss value (its gradient re-expressed in logit space).
    """
    if ce_weight < 0 or dice_weight < 0:
        raise ValidationError("loss weights cannot be negative")
    if ce_weight == 0 and dice_weight == 0:
        raise ValidationError("at least one loss weight must be positive")
    p = _prob_array(probs)
    y = _label_values(labels)

    loss = 0.0
    grad = np.zeros_like(p)
    if ce_weight != 0:
        ce, ce_grad = cross_entropy_loss(p, y)
        loss += ce_weight * ce if ce_weight != 1.0 else ce
        grad += ce_weight * ce_grad
    if dice_weight != 0:
        dc, dc_grad = dice_loss(p, y)
        loss += dice_weight * dc if dice_weight != 1.0 else dc
        grad += dice_weight * softmax_backward(p, dc_grad)
    return float(loss), grad


# ---------------------------------------------------------------------------
# Features and forward pass
# ---------------------------------------------------------------------------

def pixel_features(image: np.ndarray, include_local_mean: bool = True) -> np.ndarray:
    """Per-pixel features from an (H, W, 3) float image with values in [0, 1].

    Feature order: red, green, blue, x, y, then optionally the 3x3 local mean
    intensity. Coordinates span [-1, 1] (a single row or column maps to 0);
    color features stay in [0, 1], so everything lies within [-1, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError("image must be a (H, W, 3) array")
    if not np.isfinite(image).all() or image.min() < 0.0 or image.max() > 1.0:
        raise ValidationError("image values must be finite and lie in [0, 1]")
    h, w = image.shape[:2]
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    grid_y = np.broadcast_to(ys[:, None], (h, w))
    grid_x = np.broadcast_to(xs[None, :], (h, w))
    channels = [image[..., 0], image[..., 1], image[..., 2], grid_x, grid_y]
    if include_local_mean:
        gray = image.mean(axis=-1)
        padded = np.pad(gray, 1, mode="edge")
        acc = np.zeros_like(gray)
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                acc += padded[dy:dy + h, dx:dx + w]
        channels.append(acc / 9.0)
    return np.stack(channels, axis=-1)


def _forward_probs(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[-1] != params.feature_dim:
        raise ValidationError(
            f"features have dimension {feats.shape[-1]}, model expects {params.feature_dim}"
        )
    logits = feats @ params.weights.T + params.bias
    return softmax(logits)


def forward(params: ModelParams, feats: np.ndarray) -> ProbMap:
    """Per-pixel linear logits, softmaxed; deterministic."""
    if np.asarray(feats).ndim != 3:
        raise ValidationError("feature frame must be (H, W, F)")
    return ProbMap.from_pixel_probs(_forward_probs(params, feats).astype(np.float32))


class LinearSegmenter:
    """Callable wrapper satisfying the TTA Segmenter contract."""

    def __init__(self, params: ModelParams, *, include_local_mean: bool | None = None):
        self.params = params
        # feature layout is implied by F unless stated explicitly
        if include_local_mean is None:
            include_local_mean = params.feature_dim == 6
        self.include_local_mean = include_local_mean

    def __call__(self, frame: np.ndarray) -> ProbMap:
        return forward(self.params, frame)


def features_for(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Featurize an image to match a model's expected dimension."""
    if params.feature_dim not in (5, 6):
        raise ValidationError(f"no featurizer for dimension {params.feature_dim}")
    return pixel_features(image, include_local_mean=params.feature_dim == 6)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def _nearest_resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = labels.shape
    if (h, w) == (out_h, out_w):
        return labels.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    yi = np.clip(np.floor(ys + 0.5), 0, h - 1).astype(np.intp)
    xi = np.clip(np.floor(xs + 0.5), 0, w - 1).astype(np.intp)
    return labels[yi][:, xi]


def augment(
    image: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Random resize, crop, horizontal flip, color jitter, in that order.

    The image is interpolated bilinearly, labels by nearest neighbor (never
    interpolated, so no new class ids appear). Crops shorter than the crop
    size are padded bottom/right with zeros in the image and IGNORE_LABEL in
    the labels. Jitter shifts each color channel by a uniform offset and
    applies to the image only.
    """
    image = np.asarray(image, dtype=np.float64)
    labels = _label_values(labels)
    if image.shape[:2] != labels.shape:
        raise ValidationError(f"image {image.shape[:2]} does not match labels {labels.shape}")
    h, w = labels.shape

    ratio = float(rng.uniform(cfg.resize_range[0], cfg.resize_range[1]))
    new_h = max(1, round(h * ratio))
    new_w = max(1, round(w * ratio))
    if (new_h, new_w) != (h, w):
        image = bilinear_resize(image, new_h, new_w)
        labels = _nearest_resize_labels(labels, new_h, new_w)

    crop = cfg.crop_size
    pad_h = max(0, crop - new_h)
    pad_w = max(0, crop - new_w)
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)))
        labels = np.pad(labels, ((0, pad_h), (0, pad_w)), constant_values=IGNORE_LABEL)
    top = int(rng.integers(0, image.shape[0] - crop + 1))
    left = int(rng.integers(0, image.shape[1] - crop + 1))
    image = image[top:top + crop, left:left + crop]
    labels = labels[top:top + crop, left:left + crop]

    if rng.random() < cfg.hflip_prob:
        image = image[:, ::-1]
        labels = labels[:, ::-1]

    if cfg.jitter > 0:
        shift = rng.uniform(-cfg.jitter, cfg.jitter, size=3)
        image = np.clip(image + shift, 0.0, 1.0)

    return np.ascontiguousarray(image), np.ascontiguousarray(labels)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainResult:
    params: ModelParams
    losses: tuple[float, ...] = field(default_factory=tuple)


def _load_usable_frames(manifest: DatasetManifest, class_count: int) -> list[tuple[np.ndarray, np.ndarray]]:
    usable = []
    for video, frame in manifest.labeled_frames():
        where = f"video {video.video_id!r} frame {frame.frame_id}"
        image = read_image(frame.image).astype(np.float64) / 255.0
        label_map = read_label_map(frame.label)
        labels = label_map.pixels
        if labels.shape != image.shape[:2]:
            raise ValidationError(
                f"{where}: label {labels.shape} does not match image {image.shape[:2]}"
            )
        bad = (labels != IGNORE_LABEL) & (labels >= class_count)
        if bad.any():
            raise ValidationError(
                f"{where}: label contains class id {int(labels[bad].max())} outside [0, {class_count})"
            )
        if (labels != IGNORE_LABEL).any():
            usable.append((image, labels))
    return usable


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    init: ModelParams | None = None,
) -> TrainResult:
    """Mini-batch gradient descent over randomly sampled augmented crops.

    Deterministic for a given (manifest, cfg, init): the RNG is a seeded
    counter-based Philox generator and every reduction is sequential. With
    iterations=0 the initial parameters come back unchanged. Weight decay is
    decoupled (applied directly to the weights, not through the gradient) and
    leaves the bias alone.
    """
    class_count = manifest.class_count
    feature_dim = cfg.feature_dim
    if init is None:
        params = ModelParams.zeros(class_count, feature_dim)
    else:
        if (init.num_classes, init.feature_dim) != (class_count, feature_dim):
            raise ValidationError(
                f"init params are C={init.num_classes}, F={init.feature_dim}; "
                f"expected C={class_count}, F={feature_dim}"
            )
        params = init

    if not manifest.labeled_frames():
        raise ValidationError("manifest has no labeled frames to train on")
    usable = _load_usable_frames(manifest, class_count)
    if not usable:
        raise ValidationError("no labeled pixels in any frame")

    if cfg.iterations == 0:
        return TrainResult(params, ())

    rng = np.random.Generator(np.random.Philox(cfg.seed))
    weights = params.weights.copy()
    bias = params.bias.copy()
    losses: list[float] = []

    for _ in range(cfg.iterations):
        for _attempt in range(50):
            image, labels = usable[int(rng.integers(len(usable)))]
            crop_img, crop_lab = augment(image, labels, cfg, rng)
            valid_idx = np.flatnonzero(crop_lab != IGNORE_LABEL)
            if valid_idx.size:
                break
        else:
            # pathological crop sequence; fall back to the full frame
            crop_img, crop_lab = image, labels
            valid_idx = np.flatnonzero(crop_lab != IGNORE_LABEL)

        if valid_idx.size > cfg.batch_pixels:
            picked = rng.choice(valid_idx.size, size=cfg.batch_pixels, replace=False)
            valid_idx = valid_idx[np.sort(picked)]

        feats = pixel_features(crop_img, cfg.include_local_mean).reshape(-1, feature_dim)[valid_idx]
        batch_labels = crop_lab.reshape(-1)[valid_idx]
        probs = softmax(feats @ weights.T + bias)
        loss, grad_logits = joint_loss(
            probs[None], batch_labels[None], cfg.ce_weight, cfg.dice_weight
        )
        grad_logits = grad_logits[0]
        weights *= 1.0 - cfg.learning_rate * cfg.weight_decay
        weights -= cfg.learning_rate * (grad_logits.T @ feats)
        bias -= cfg.learning_rate * grad_logits.sum(axis=0)
        losses.append(loss)

    return TrainResult(ModelParams(weights, bias), tuple(losses))
