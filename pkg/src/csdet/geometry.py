"""Axis-aligned box arithmetic: IoU, anchors, label assignment, deltas, NMS, flips.

Boxes use continuous corner coordinates (x1, y1) top-left, (x2, y2)
bottom-right with x1 < x2 and y1 < y2; area is (x2 - x1) * (y2 - y1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"
IGNORE = "ignore"


class EmptyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {self}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class BoxDelta:
    """Dimensionless box regression offsets (dx, dy on centers; dw, dh in log space)."""

    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


@dataclass(frozen=True)
class AnchorAssignment:
    label: str
    matched_gt: int | None = None
    target_delta: BoxDelta | None = None

    def __post_init__(self) -> None:
        if self.label not in (POSITIVE, NEGATIVE, IGNORE):
            raise ValueError(f"bad label {self.label!r}")
        has_match = self.matched_gt is not None and self.target_delta is not None
        if (self.label == POSITIVE) != has_match:
            raise ValueError("positive assignments carry a matched gt and target delta; "
                             "others carry neither")


def box_array(boxes: Sequence[Box]) -> np.ndarray:
    """Stack boxes into an (n, 4) float64 array of [x1, y1, x2, y2]."""
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) corner arrays."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def generate_anchors(
    image_w: int,
    image_h: int,
    stride: int,
    scales: Sequence[float],
    ratios: Sequence[float],
) -> list[Box]:
    """One anchor per (grid cell, scale, ratio), clipped to the image.

    Cells are stride x stride; anchors sit on cell centers.  A scale is the
    side length of the square (ratio 1) anchor; a ratio r is height/width
    with the area held at scale^2.  Order: row-major cells, then scale, then
    ratio.
    """
    if not scales or not ratios:
        raise EmptyConfigError("scales and ratios must be nonempty")
    if stride <= 0 or image_w // stride < 1 or image_h // stride < 1:
        raise EmptyConfigError(
            f"stride {stride} leaves no grid cells in a {image_w}x{image_h} image"
        )
    shapes = []
    for s in scales:
        for r in ratios:
            if s <= 0 or r <= 0:
                raise EmptyConfigError(f"scales and ratios must be positive, got {s}, {r}")
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            shapes.append((w, h))
    anchors: list[Box] = []
    for gy in range(image_h // stride):
        cy = (gy + 0.5) * stride
        for gx in range(image_w // stride):
            cx = (gx + 0.5) * stride
            for w, h in shapes:
                anchors.append(
                    Box(
                        max(0.0, cx - 0.5 * w),
                        max(0.0, cy - 0.5 * h),
                        min(float(image_w), cx + 0.5 * w),
                        min(float(image_h), cy + 0.5 * h),
                    )
                )
    return anchors


def encode_delta(anchor: Box, gt: Box) -> BoxDelta:
    """Offsets that map the anchor onto the target box."""
    ax, ay = anchor.center
    gx, gy = gt.center
    return BoxDelta(
        tx=(gx - ax) / anchor.width,
        ty=(gy - ay) / anchor.height,
        tw=math.log(gt.width / anchor.width),
        th=math.log(gt.height / anchor.height),
    )


def decode_delta(anchor: Box, d: BoxDelta) -> Box:
    """Inverse of encode_delta: apply offsets to an anchor."""
    ax, ay = anchor.center
    cx = ax + d.tx * anchor.width
    cy = ay + d.ty * anchor.height
    w = anchor.width * math.exp(d.tw)
    h = anchor.height * math.exp(d.th)
    return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized decode over (n, 4) anchors and (n, 4) deltas."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def assign_anchor_labels(
    anchors: Sequence[Box],
    gt_boxes: Sequence[Box],
    pos_thresh: float = 0.7,
    neg_thresh: float = 0.3,
) -> list[AnchorAssignment]:
    """Positive / negative / ignore labels for anchors against ground truth.

    An anchor is positive when its best IoU reaches pos_thresh, or when it is
    the argmax anchor for some ground-truth box (so every overlapped box gets
    at least one positive).  Anchors at or below neg_thresh are negative; the
    rest are ignored.  Positives carry the encoded delta to their best box.
    """
    if not 0.0 <= neg_thresh <= pos_thresh <= 1.0:
        raise ValueError(f"need 0 <= neg_thresh <= pos_thresh <= 1, got {neg_thresh}, {pos_thresh}")
    if not gt_boxes:
        return [AnchorAssignment(NEGATIVE) for _ in anchors]
    m = iou_matrix(box_array(anchors), box_array(gt_boxes))
    best_gt = m.argmax(axis=1)
    best_iou = m[np.arange(len(anchors)), best_gt]

    positive = best_iou >= pos_thresh
    for j in range(len(gt_boxes)):
        col = m[:, j]
        if col.max() > 0.0:
            positive[col.argmax()] = True

    out: list[AnchorAssignment] = []
    for i, anchor in enumerate(anchors):
        if positive[i]:
            j = int(best_gt[i])
            out.append(AnchorAssignment(POSITIVE, j, encode_delta(anchor, gt_boxes[j])))
        elif best_iou[i] <= neg_thresh:
            out.append(AnchorAssignment(NEGATIVE))
        else:
            out.append(AnchorAssignment(IGNORE))
    return out


def nms(
    scored_boxes: Sequence[tuple[Box, float]], iou_thresh: float
) -> list[tuple[Box, float]]:
    """Greedy non-maximum suppression, highest score first.

    Ties keep input order.  A box is dropped when its IoU with an already
    kept box exceeds the threshold.  Output is sorted by descending score.
    """
    if not scored_boxes:
        return []
    scores = np.array([s for _, s in scored_boxes], dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    arr = box_array([b for b, _ in scored_boxes])
    order = np.argsort(-scores, kind="stable")
    alive = np.ones(len(scored_boxes), dtype=bool)
    kept: list[int] = []
    for i in order:
        if not alive[i]:
            continue
        kept.append(int(i))
        overl = iou_matrix(arr[i : i + 1], arr[alive])[0]
        drop = np.flatnonzero(alive)[overl > iou_thresh]
        alive[drop] = False
        alive[i] = False
    return [scored_boxes[i] for i in kept]


def horizontal_flip(
    raster: np.ndarray, boxes: Sequence[Box]
) -> tuple[np.ndarray, list[Box]]:
    """Mirror pixel columns and box x-coordinates; an involution."""
    w = float(raster.shape[1])
    flipped = np.ascontiguousarray(raster[:, ::-1])
    return flipped, [Box(w - b.x2, b.y1, w - b.x1, b.y2) for b in boxes]
