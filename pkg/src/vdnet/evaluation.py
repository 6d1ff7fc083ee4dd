"""Detection metrics: IoU, greedy NMS, all-points AP and mAP at a fixed IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Box = tuple[float, float, float, float]


class DegenerateBoxError(ValueError):
    pass


class DatasetMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float
    image: str = ""

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise DegenerateBoxError(f"detection box {self.box} has no area")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_json(self, class_names: Sequence[str]) -> dict:
        return {"image": self.image, "class": class_names[self.class_id],
                "score": float(self.score), "box": [float(v) for v in self.box]}


@dataclass(frozen=True)
class GroundTruthBox:
    image: str
    class_id: int
    box: Box


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two ``(x_min, y_min, x_max, y_max)`` boxes."""
    if not (a[0] < a[2] and a[1] < a[3]) or not (b[0] < b[2] and b[1] < b[3]):
        raise DegenerateBoxError(f"boxes need positive extent: {tuple(a)}, {tuple(b)}")
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU for ``[n, 4]`` and ``[m, 4]`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(w, 0, None) * np.clip(h, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _by_score(dets: Sequence[Detection]) -> list[Detection]:
    # stable sort: equal scores keep insertion order
    return sorted(dets, key=lambda d: -d.score)


def nms(dets: Sequence[Detection], thresh: float) -> list[Detection]:
    """Greedy suppression of same-class, same-image boxes with IoU above ``thresh``."""
    if not 0.0 <= thresh <= 1.0:
        raise ValueError(f"nms threshold {thresh} outside [0, 1]")
    keep: list[Detection] = []
    for d in _by_score(dets):
        if all(k.class_id != d.class_id or k.image != d.image or iou(k.box, d.box) <= thresh
               for k in keep):
            keep.append(d)
    return keep


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                     iou_thresh: float = 0.5) -> list[bool]:
    """True-positive flags for ``dets`` in descending-score order.

    Each detection is compared with the unmatched-or-not ground truth of its
    image that it overlaps most; it is a true positive when that overlap is at
    least ``iou_thresh`` and the box was not already claimed.
    """
    by_image: dict[str, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image, []).append(j)
    claimed = [False] * len(gts)
    flags = []
    for d in _by_score(dets):
        best, best_j = -1.0, -1
        for j in by_image.get(d.image, ()):
            o = iou(d.box, gts[j].box)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh and not claimed[best_j]:
            claimed[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def precision_recall(dets, gts, iou_thresh: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    tp = np.array(match_detections(dets, gts, iou_thresh), dtype=np.float64)
    ctp, cfp = np.cumsum(tp), np.cumsum(1.0 - tp)
    recall = ctp / max(len(gts), 1)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    return precision, recall


def ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-points interpolation)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                      iou_thresh: float = 0.5) -> float:
    """Single-class AP. No ground truth gives 0.0; callers exclude such classes."""
    if not gts:
        return 0.0
    precision, recall = precision_recall(dets, gts, iou_thresh)
    return ap_from_pr(precision, recall)


@dataclass
class EvalReport:
    class_names: list[str]
    per_class_ap: dict[str, float]
    mean_ap: float
    iou_threshold: float
    pr_curves: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    num_ground_truth: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"iou_threshold": self.iou_threshold, "mAP": self.mean_ap,
                "per_class_ap": self.per_class_ap, "num_ground_truth": self.num_ground_truth,
                "pr_curves": self.pr_curves, "interpolation": "all-points"}


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
             class_names: Sequence[str], iou_thresh: float = 0.5) -> EvalReport:
    """Per-class AP and their mean over classes that have ground truth."""
    per_class, curves, counts = {}, {}, {}
    for c, name in enumerate(class_names):
        cg = [g for g in gts if g.class_id == c]
        counts[name] = len(cg)
        if not cg:
            continue
        cd = [d for d in dets if d.class_id == c]
        precision, recall = precision_recall(cd, cg, iou_thresh)
        per_class[name] = ap_from_pr(precision, recall)
        curves[name] = {"precision": precision.tolist(), "recall": recall.tolist()}
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return EvalReport(list(class_names), per_class, mean_ap, iou_thresh, curves, counts)


# ---------------------------------------------------------------- comparison


@dataclass
class ComparisonReport:
    plain: EvalReport
    masked: EvalReport
    mask_coverage: dict[str, float] = field(default_factory=dict)
    object_coverage: dict[str, float] = field(default_factory=dict)

    @property
    def delta(self) -> float:
        return self.masked.mean_ap - self.plain.mean_ap

    def to_json(self) -> dict:
        cov = list(self.mask_coverage.values())
        obj = list(self.object_coverage.values())
        return {
            "iou_threshold": self.plain.iou_threshold,
            "mAP_plain": self.plain.mean_ap,
            "mAP_masked": self.masked.mean_ap,
            "mAP_delta": self.delta,
            "per_class_ap_plain": self.plain.per_class_ap,
            "per_class_ap_masked": self.masked.per_class_ap,
            "per_class_delta": {k: self.masked.per_class_ap[k] - self.plain.per_class_ap[k]
                                for k in self.plain.per_class_ap},
            "mask_coverage": {"per_image": self.mask_coverage,
                              "mean": float(np.mean(cov)) if cov else None,
                              "min": float(np.min(cov)) if cov else None,
                              "max": float(np.max(cov)) if cov else None},
            "object_pixel_coverage": {"per_image": self.object_coverage,
                                      "mean": float(np.mean(obj)) if obj else None,
                                      "min": float(np.min(obj)) if obj else None},
        }

    def table(self) -> str:
        names = [n for n in self.plain.class_names if n in self.plain.per_class_ap]
        head = ["Method", "mAP", *names]
        rows = [["plain (no mask)", self.plain], ["ventral mask", self.masked]]
        lines = [head]
        for label, rep in rows:
            lines.append([label, f"{100 * rep.mean_ap:.1f}",
                          *(f"{100 * rep.per_class_ap[n]:.1f}" for n in names)])
        widths = [max(len(r[i]) for r in lines) for i in range(len(head))]
        fmt = lambda r: " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))
        out = [fmt(lines[0]), "-+-".join("-" * w for w in widths)]
        out += [fmt(r) for r in lines[1:]]
        out.append(f"mAP delta (masked - plain): {100 * self.delta:+.1f}  "
                   f"[IoU {self.plain.iou_threshold}]")
        return "\n".join(out)


def compare_reports(plain_dets: Sequence[Detection], masked_dets: Sequence[Detection],
                    gts: Sequence[GroundTruthBox], class_names: Sequence[str],
                    images_plain: Iterable[str], images_masked: Iterable[str],
                    iou_thresh: float = 0.5, mask_coverage: dict | None = None,
                    object_coverage: dict | None = None) -> ComparisonReport:
    """Pair the two arms; both must have been run on exactly the same images."""
    ip, im = sorted(set(images_plain)), sorted(set(images_masked))
    if ip != im:
        raise DatasetMismatchError("plain and masked arms were evaluated on different images")
    known = set(ip)
    for d in (*plain_dets, *masked_dets):
        if d.image not in known:
            raise DatasetMismatchError(f"detection for unknown image {d.image!r}")
    return ComparisonReport(evaluate(plain_dets, gts, class_names, iou_thresh),
                            evaluate(masked_dets, gts, class_names, iou_thresh),
                            dict(mask_coverage or {}), dict(object_coverage or {}))


def write_detections(path, dets: Sequence[Detection], class_names: Sequence[str]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_json(class_names)) + "\n")
