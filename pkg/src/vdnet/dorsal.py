"""One-stage anchor detector trained on (optionally masked) images.

A small convolutional backbone produces, for every anchor on a regular
grid, ``1 + num_classes`` logits (background is class 0) and four box
offsets. Training minimises

    (1 / n_cls) * sum_i CE(p_i, p*_i) + lam * (1 / n_reg) * sum_i p*_i * smoothL1(t_i - t*_i)

over a sampled anchor minibatch per image.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import network as N
from . import tensor as T
from .data import Scene
from .evaluation import Detection, iou_matrix, nms
from .network import Model, Schedule, TrainingReport
from .tensor import Tensor
from .ventral import Ventral

logger = logging.getLogger(__name__)

IGNORE, NEGATIVE, POSITIVE = -1, 0, 1
_MAX_LOG_SCALE = math.log(1000.0 / 16)


class GeometryError(ValueError):
    pass


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class Anchor:
    center_x: float
    center_y: float
    width: float
    height: float
    grid_index: tuple[int, int, int]

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"anchor extent must be positive: {self.width}x{self.height}")

    @property
    def box(self) -> tuple[float, float, float, float]:
        hw, hh = self.width / 2, self.height / 2
        return (self.center_x - hw, self.center_y - hh, self.center_x + hw, self.center_y + hh)


@dataclass(frozen=True)
class BoxDelta:
    t_x: float
    t_y: float
    t_w: float
    t_h: float


def generate_anchors(image_size: int | tuple[int, int], grid_stride: int,
                     scales: Sequence[float], aspect_ratios: Sequence[float]) -> list[Anchor]:
    """One anchor per (cell, scale, ratio), centred on cell centres, row-major.

    ``ratio`` is height / width; an anchor of scale ``s`` has area ``s**2``.
    """
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    if grid_stride < 1 or h % grid_stride or w % grid_stride:
        raise GeometryError(f"stride {grid_stride} does not divide image {h}x{w}")
    if not scales or not aspect_ratios:
        raise GeometryError("need at least one scale and one aspect ratio")
    shapes = [(s / math.sqrt(r), s * math.sqrt(r)) for s in scales for r in aspect_ratios]
    anchors = []
    for row in range(h // grid_stride):
        for col in range(w // grid_stride):
            cx, cy = (col + 0.5) * grid_stride, (row + 0.5) * grid_stride
            for slot, (aw, ah) in enumerate(shapes):
                anchors.append(Anchor(cx, cy, aw, ah, (row, col, slot)))
    return anchors


def anchor_array(anchors: Sequence[Anchor]) -> np.ndarray:
    """``[n, 4]`` array of ``(cx, cy, w, h)``."""
    if not anchors:
        raise GeometryError("no anchors")
    return np.array([(a.center_x, a.center_y, a.width, a.height) for a in anchors])


def cxcywh_to_corners(a: np.ndarray) -> np.ndarray:
    return np.stack([a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2,
                     a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2], axis=1)


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorised encoding of ``[n, 4]`` corner boxes against ``[n, 4]`` cxcywh anchors."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gw, gh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise GeometryError("ground-truth boxes need positive extent")
    gx, gy = boxes[:, 0] + gw / 2, boxes[:, 1] + gh / 2
    ax, ay, aw, ah = anchors.T
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    ax, ay, aw, ah = anchors.T
    tx, ty, tw, th = np.asarray(deltas, dtype=np.float64).T
    cx, cy = ax + tx * aw, ay + ty * ah
    w = aw * np.exp(np.minimum(tw, _MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(th, _MAX_LOG_SCALE))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode_box(gt: Sequence[float], anchor: Anchor) -> BoxDelta:
    a = np.array([[anchor.center_x, anchor.center_y, anchor.width, anchor.height]])
    return BoxDelta(*encode_boxes(np.asarray([gt]), a)[0].tolist())


def decode_box(delta: BoxDelta, anchor: Anchor) -> tuple[float, float, float, float]:
    a = np.array([[anchor.center_x, anchor.center_y, anchor.width, anchor.height]])
    d = np.array([[delta.t_x, delta.t_y, delta.t_w, delta.t_h]])
    return tuple(decode_boxes(d, a)[0].tolist())


# ---------------------------------------------------------------- targets


@dataclass(frozen=True)
class AnchorTarget:
    label: int
    delta: BoxDelta | None = None
    class_id: int | None = None


@dataclass
class TargetArrays:
    """Per-anchor targets: ``labels`` in {1, 0, -1}, ``classes`` (0 = background), ``deltas``."""

    labels: np.ndarray
    classes: np.ndarray
    deltas: np.ndarray
    matched_gt: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def as_list(self) -> list[AnchorTarget]:
        out = []
        for lab, cls, d in zip(self.labels, self.classes, self.deltas):
            if lab == POSITIVE:
                out.append(AnchorTarget(POSITIVE, BoxDelta(*d.tolist()), int(cls) - 1))
            else:
                out.append(AnchorTarget(int(lab)))
        return out

    @staticmethod
    def concat(parts: Sequence["TargetArrays"]) -> "TargetArrays":
        return TargetArrays(*(np.concatenate([getattr(p, f) for p in parts])
                              for f in ("labels", "classes", "deltas", "matched_gt")))


def assign_target_arrays(anchors: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                         iou_pos: float = 0.5, iou_neg: float = 0.3) -> TargetArrays:
    """Label anchors against ground truth.

    Positive when IoU with some box is at least ``iou_pos``, or when the
    anchor is a box's best match (each box claims its own best unclaimed
    anchor, so every box gets a positive). Negative when the best IoU is
    below ``iou_neg``; ignored otherwise. ``gt_classes`` are 0-based object
    classes; ``classes`` in the result are shifted by one.
    """
    if iou_neg >= iou_pos:
        raise ValueError(f"iou_neg {iou_neg} must be below iou_pos {iou_pos}")
    n = len(anchors)
    if n == 0:
        raise GeometryError("no anchors to assign")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.intp).reshape(-1)
    labels = np.full(n, NEGATIVE, dtype=np.intp)
    classes = np.zeros(n, dtype=np.intp)
    deltas = np.zeros((n, 4))
    matched = np.full(n, -1, dtype=np.intp)
    if len(gt_boxes) == 0:
        return TargetArrays(labels, classes, deltas, matched)
    overlaps = iou_matrix(cxcywh_to_corners(anchors), gt_boxes)  # [n, g]
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    labels[best_iou >= iou_neg] = IGNORE
    pos = best_iou >= iou_pos
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    claimed: set[int] = set()
    for j in range(len(gt_boxes)):
        order = np.argsort(-overlaps[:, j], kind="stable")
        i = next(int(i) for i in order if int(i) not in claimed)
        claimed.add(i)
        labels[i] = POSITIVE
        matched[i] = j
    p = labels == POSITIVE
    classes[p] = gt_classes[matched[p]] + 1
    deltas[p] = encode_boxes(gt_boxes[matched[p]], anchors[p])
    return TargetArrays(labels, classes, deltas, matched)


def assign_targets(anchors: Sequence[Anchor], gt_boxes, gt_classes=None,
                   iou_pos: float = 0.5, iou_neg: float = 0.3) -> list[AnchorTarget]:
    if not anchors:
        raise GeometryError("no anchors to assign")
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_classes is None:
        gt_classes = np.zeros(len(gt_boxes), dtype=np.intp)
    return assign_target_arrays(anchor_array(anchors), gt_boxes, gt_classes, iou_pos, iou_neg).as_list()


def sample_anchors(targets: TargetArrays, rng: np.random.Generator, batch: int = 32,
                   positive_fraction: float = 0.25) -> TargetArrays:
    """Keep at most ``batch`` labelled anchors, up to ``positive_fraction`` of them positive."""
    labels = targets.labels.copy()
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(pos), int(round(batch * positive_fraction)))
    n_neg = min(len(neg), batch - n_pos)
    keep_pos = rng.choice(pos, n_pos, replace=False) if n_pos < len(pos) else pos
    keep_neg = rng.choice(neg, n_neg, replace=False) if n_neg < len(neg) else neg
    labels[:] = IGNORE
    labels[keep_pos] = POSITIVE
    labels[keep_neg] = NEGATIVE
    return TargetArrays(labels, targets.classes, targets.deltas, targets.matched_gt)


# ---------------------------------------------------------------- loss


def detection_loss(cls_scores: Tensor, box_deltas: Tensor, targets: TargetArrays,
                   lam: float = 10.0, n_cls: float = 32, n_reg: float = 2400,
                   return_terms: bool = False):
    """Two-term detection loss over non-ignored anchors.

    ``cls_scores`` is ``[n, 1 + classes]`` logits, ``box_deltas`` is ``[n, 4]``.
    The regression term is the constant 0 when no anchor is positive.
    """
    n = len(targets)
    if cls_scores.ndim != 2 or cls_scores.shape[0] != n or box_deltas.shape != (n, 4):
        raise T.ShapeError(
            f"misaligned inputs: scores {cls_scores.shape}, deltas {box_deltas.shape}, {n} targets")
    if n_cls <= 0 or n_reg <= 0:
        raise ValueError("n_cls and n_reg must be positive")
    used = np.flatnonzero(targets.labels != IGNORE)
    if len(used):
        ce = T.cross_entropy_rows(T.take_rows(cls_scores, used), targets.classes[used])
        cls_term = T.scale(T.sum_all(ce), 1.0 / n_cls)
    else:
        cls_term = Tensor(0.0)
    pos = np.flatnonzero(targets.labels == POSITIVE)
    if len(pos) and lam != 0:
        reg = T.smooth_l1(T.take_rows(box_deltas, pos), targets.deltas[pos])
        reg_term = T.scale(T.sum_all(reg), lam / n_reg)
    else:
        reg_term = Tensor(0.0)
    total = T.add(cls_term, reg_term)
    return (total, cls_term, reg_term) if return_terms else total


# ---------------------------------------------------------------- model


@dataclass
class DetectorConfig:
    image_size: int = 64
    channels: int = 3
    class_names: tuple[str, ...] = ("circle", "square", "triangle")
    grid_stride: int = 8
    scales: tuple[float, ...] = (12.0, 18.0, 24.0)
    aspect_ratios: tuple[float, ...] = (1.0,)
    widths: tuple[int, ...] = (16, 32, 48, 64)
    iou_pos: float = 0.5
    iou_neg: float = 0.3
    anchors_per_image: int = 32
    positive_fraction: float = 0.25
    lam: float = 10.0
    n_cls: float | None = None
    n_reg: float | None = None
    flip_augment: bool = True

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def anchors(self) -> list[Anchor]:
        return generate_anchors(self.image_size, self.grid_stride, self.scales, self.aspect_ratios)

    def normalizers(self) -> tuple[float, float]:
        n_cls = self.n_cls if self.n_cls is not None else self.anchors_per_image
        n_reg = self.n_reg if self.n_reg is not None else len(self.anchors())
        return float(n_cls), float(n_reg)

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("class_names", "scales", "aspect_ratios", "widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "DetectorConfig":
        obj = dict(obj)
        for k in ("class_names", "scales", "aspect_ratios", "widths"):
            obj[k] = tuple(obj[k])
        return cls(**obj)


def build_detector(config: DetectorConfig = DetectorConfig(), seed: int = 0) -> Model:
    """Backbone of 3x3 conv/relu blocks, halving resolution until the grid stride, then a 1x1 head."""
    pools = int(round(math.log2(config.grid_stride)))
    if 2 ** pools != config.grid_stride or len(config.widths) < pools + 1:
        raise GeometryError(f"grid stride {config.grid_stride} needs {pools + 1} backbone widths")
    layers = []
    for i, width in enumerate(config.widths):
        layers += [N.conv(width, 3, padding=1), N.relu()]
        if i < pools:
            layers.append(N.maxpool(2))
    layers.append(N.conv(config.anchors_per_cell * (config.num_classes + 5), 1))
    return Model.build((config.channels, config.image_size, config.image_size), layers,
                       list(config.class_names), seed=seed,
                       metadata={"role": "detector", "detector": config.to_json()})


def detector_config(model: Model) -> DetectorConfig:
    return DetectorConfig.from_json(model.metadata["detector"])


def head_outputs(model: Model, images: Tensor, config: DetectorConfig,
                 params=None) -> tuple[Tensor, Tensor]:
    """Flattened per-anchor logits ``[b*n, 1+C]`` and deltas ``[b*n, 4]``, anchor-major per image."""
    out, _ = N.forward(model, images, params=params)
    if out.ndim == 3:
        out = T.reshape(out, (1, *out.shape))
    b, _, gh, gw = out.shape
    a, k = config.anchors_per_cell, config.num_classes + 5
    per = T.transpose(T.reshape(out, (b, a, k, gh, gw)), (0, 3, 4, 1, 2))
    cols = T.transpose(T.reshape(per, (b * gh * gw * a, k)), (1, 0))
    logits = T.transpose(T.take_rows(cols, np.arange(k - 4)), (1, 0))
    deltas = T.transpose(T.take_rows(cols, np.arange(k - 4, k)), (1, 0))
    return logits, deltas


def flip_boxes(boxes: np.ndarray, size: int, code: int) -> np.ndarray:
    """Boxes after mirroring: bit 0 of ``code`` flips left-right, bit 1 flips up-down."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    if code & 1:
        b[:, [0, 2]] = size - b[:, [2, 0]]
    if code & 2:
        b[:, [1, 3]] = size - b[:, [3, 1]]
    return b


def flip_images(images: np.ndarray, code: int) -> np.ndarray:
    if code & 1:
        images = images[..., ::-1]
    if code & 2:
        images = images[..., ::-1, :]
    return images


def scene_targets(scenes: Sequence[Scene], config: DetectorConfig,
                  code: int = 0) -> list[TargetArrays]:
    anchors = anchor_array(config.anchors())
    out = []
    for s in scenes:
        if s.annotations is None:
            raise AnnotationError(f"scene {s.seed} has no annotations")
        boxes = flip_boxes(s.boxes, config.image_size, code)
        out.append(assign_target_arrays(anchors, boxes, s.classes, config.iou_pos, config.iou_neg))
    return out


def prepare_images(scenes: Sequence[Scene], ventral: Ventral | None) -> np.ndarray:
    images = np.stack([s.image for s in scenes])
    if ventral is None:
        return images
    masked, _ = ventral.mask_batch(images)
    return masked


def train_detector(model: Model, scenes: Sequence[Scene], ventral: Ventral | None = None,
                   schedule: Schedule = Schedule(epochs=40, batch_size=8, learning_rate=0.01),
                   images: np.ndarray | None = None) -> TrainingReport:
    """Momentum-SGD training on the detection loss.

    With ``ventral`` every image is replaced by its masked version before
    training. ``images`` may supply those inputs precomputed. When the
    config enables ``flip_augment`` each batch image is mirrored by a
    random flip drawn from the schedule's seeded generator.
    """
    if not scenes:
        raise ValueError("cannot train on an empty dataset")
    config = detector_config(model)
    codes = range(4) if config.flip_augment else range(1)
    targets = [scene_targets(scenes, config, code) for code in codes]
    if images is None:
        images = prepare_images(scenes, ventral)
    n_cls, n_reg = config.normalizers()
    rng = np.random.default_rng(schedule.seed)
    state = N.SgdMomentumState(schedule.learning_rate, schedule.momentum)
    report = TrainingReport(batches_per_epoch=math.ceil(len(scenes) / schedule.batch_size),
                            extra={"cls_loss": [], "reg_loss": []})
    for epoch in range(schedule.epochs):
        state.learning_rate = schedule.lr_at(epoch)
        tot = cls_tot = reg_tot = 0.0
        for idx in N.batches(len(scenes), schedule.batch_size, rng):
            flips = rng.integers(0, len(targets), len(idx))
            batch_t = TargetArrays.concat([
                sample_anchors(targets[f][i], rng, config.anchors_per_image, config.positive_fraction)
                for i, f in zip(idx, flips)])
            batch = np.stack([flip_images(images[i], f) for i, f in zip(idx, flips)])
            logits, deltas = head_outputs(model, Tensor(batch), config)
            loss, lc, lr_ = detection_loss(logits, deltas, batch_t, config.lam, n_cls, n_reg,
                                           return_terms=True)
            loss = T.scale(loss, 1.0 / len(idx))
            if not np.isfinite(loss.item()):
                raise N.DivergenceError(f"detection loss became {loss.item()} in epoch {epoch}")
            grads = T.backward(loss)
            model.params, state = N.sgd_step(state, model.params, N.param_grads(model.params, grads))
            tot += loss.item() * len(idx)
            cls_tot += lc.item()
            reg_tot += lr_.item()
        report.epoch_loss.append(tot / len(scenes))
        report.extra["cls_loss"].append(cls_tot / len(scenes))
        report.extra["reg_loss"].append(reg_tot / len(scenes))
        logger.info("epoch %d loss %.4f (cls %.4f reg %.4f)", epoch, report.epoch_loss[-1],
                    report.extra["cls_loss"][-1], report.extra["reg_loss"][-1])
    return report


# ---------------------------------------------------------------- inference


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def detections_from_outputs(logits: np.ndarray, deltas: np.ndarray, config: DetectorConfig,
                            score_thresh: float = 0.05, nms_thresh: float = 0.45,
                            image: str = "", max_detections: int = 100) -> list[Detection]:
    anchors = anchor_array(config.anchors())
    probs = _softmax(logits)
    if probs.shape[0] > 1 and float(np.ptp(probs[:, 0])) < 1e-9:
        warnings.warn("detector scores are degenerate; the model looks untrained", RuntimeWarning)
    boxes = decode_boxes(deltas, anchors)
    size = float(config.image_size)
    boxes = np.clip(boxes, 0.0, size)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    cands = []
    for c in range(1, probs.shape[1]):
        for i in np.flatnonzero(valid & (probs[:, c] > score_thresh)):
            cands.append(Detection(tuple(float(v) for v in boxes[i]), c - 1,
                                   float(min(probs[i, c], 1.0)), image))
    return nms(cands, nms_thresh)[:max_detections]


def detect(model: Model, image: np.ndarray, ventral: Ventral | None = None,
           score_thresh: float = 0.05, nms_thresh: float = 0.45, stem: str = "") -> list[Detection]:
    """Detections for one ``[c, m, n]`` image, highest score first."""
    if not (0.0 <= score_thresh <= 1.0 and 0.0 <= nms_thresh <= 1.0):
        raise ValueError("thresholds must lie in [0, 1]")
    config = detector_config(model)
    image = np.asarray(image, dtype=np.float64)
    if ventral is not None:
        image = ventral(image)
    logits, deltas = head_outputs(model, Tensor(image), config)
    return detections_from_outputs(logits.data, deltas.data, config, score_thresh, nms_thresh, stem)


def detect_batch(model: Model, images: np.ndarray, stems: Sequence[str],
                 score_thresh: float = 0.05, nms_thresh: float = 0.45,
                 batch_size: int = 32) -> list[Detection]:
    """Detections for a stack of already-prepared images."""
    config = detector_config(model)
    n = config.anchors_per_cell * (config.image_size // config.grid_stride) ** 2
    out: list[Detection] = []
    for i in range(0, len(images), batch_size):
        logits, deltas = head_outputs(model, Tensor(images[i:i + batch_size]), config)
        for j in range(logits.shape[0] // n):
            sl = slice(j * n, (j + 1) * n)
            out += detections_from_outputs(logits.data[sl], deltas.data[sl], config,
                                           score_thresh, nms_thresh, stems[i + j])
    return out
