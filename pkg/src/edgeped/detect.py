"""Turn raw head tensors into final detections: decode, threshold, NMS.

Decode uses the standard YOLO-style sigmoid/exponential parameterization:
for cell (i, j) and anchor a,

    cx = (sigmoid(tx) + j) * stride      w = anchor_w * exp(tw)
    cy = (sigmoid(ty) + i) * stride      h = anchor_h * exp(th)
    confidence = sigmoid(t_obj) * sigmoid(t_class)

One detection is emitted per (cell, anchor, class) whose confidence clears
the threshold. NMS is greedy, class-wise, and suppresses strictly-greater
overlap than the IoU threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import HeadSpec
from .model import Model, forward
from .tensor import DimensionError, Tensor

# exp() argument clamp; keeps decoded box sizes finite on random weights.
EXP_CLAMP = 10.0

DEFAULT_CONF_THRESHOLD = 0.3
DEFAULT_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in input-image pixels, center + size form."""

    cx: float
    cy: float
    w: float
    h: float

    @property
    def x1(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def y1(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def x2(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def y2(self) -> float:
        return self.cy + self.h / 2.0

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    confidence: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))


def decode_head(
    raw: Tensor,
    head: HeadSpec,
    input_size: int,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
) -> list[Detection]:
    """Decode one head's raw map into thresholded detections.

    Output order is deterministic: row-major over cells, then anchor,
    then class.
    """
    n_anchors = len(head.anchors)
    per_anchor = 5 + head.class_count
    if raw.c != n_anchors * per_anchor:
        raise DimensionError(
            "channels",
            f"head raw map has {raw.c} channels, expected "
            f"{n_anchors} anchors x {per_anchor}",
        )
    grid = input_size // head.stride
    if raw.h != grid or raw.w != grid:
        raise DimensionError(
            "height", f"head raw map is {raw.h}x{raw.w}, expected {grid}x{grid}"
        )

    # (anchor, field, i, j) view of the single-batch map.
    data = raw.data[0].reshape(n_anchors, per_anchor, grid, grid).astype(np.float64)
    tx, ty, tw, th, tobj = data[:, 0], data[:, 1], data[:, 2], data[:, 3], data[:, 4]
    cls_logits = data[:, 5:]

    cols = np.arange(grid, dtype=np.float64).reshape(1, 1, grid)
    rows = np.arange(grid, dtype=np.float64).reshape(1, grid, 1)
    anchor_w = np.array([a[0] for a in head.anchors]).reshape(n_anchors, 1, 1)
    anchor_h = np.array([a[1] for a in head.anchors]).reshape(n_anchors, 1, 1)

    cx = (_sigmoid(tx) + cols) * head.stride
    cy = (_sigmoid(ty) + rows) * head.stride
    w = anchor_w * np.exp(np.minimum(tw, EXP_CLAMP))
    h = anchor_h * np.exp(np.minimum(th, EXP_CLAMP))
    obj = _sigmoid(tobj)
    cls_prob = _sigmoid(cls_logits)  # (anchor, class, i, j)
    conf = obj[:, None, :, :] * cls_prob

    keep = np.argwhere(conf >= conf_threshold)  # rows: (anchor, class, i, j)
    # argwhere is row-major over (a, c, i, j); reorder to (i, j, a, c).
    order = np.lexsort((keep[:, 1], keep[:, 0], keep[:, 3], keep[:, 2]))
    detections = []
    for a, k, i, j in keep[order]:
        detections.append(
            Detection(
                bbox=BBox(
                    float(cx[a, i, j]), float(cy[a, i, j]),
                    float(w[a, i, j]), float(h[a, i, j]),
                ),
                class_id=int(k),
                confidence=float(conf[a, k, i, j]),
            )
        )
    return detections


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union in [0, 1]; 0 when the union is empty."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(
    dets: list[Detection], iou_threshold: float = DEFAULT_IOU_THRESHOLD
) -> list[Detection]:
    """Greedy class-wise non-maximum suppression.

    Repeatedly keeps the highest-confidence unsuppressed detection and
    suppresses same-class detections overlapping it with IoU strictly above
    the threshold. Ties sort by (confidence desc, class_id asc, input order).
    """
    order = sorted(
        range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].class_id, i)
    )
    kept: list[Detection] = []
    suppressed = [False] * len(dets)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(dets[i])
        for j in order:
            if suppressed[j] or j == i:
                continue
            if dets[j].class_id != dets[i].class_id:
                continue
            if iou(dets[i].bbox, dets[j].bbox) > iou_threshold:
                suppressed[j] = True
    return kept


def run_detection(
    model: Model,
    frame: Tensor,
    conf_threshold: float = DEFAULT_CONF_THRESHOLD,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> list[Detection]:
    """Full pass: forward, decode both heads, one NMS over the union."""
    raw32, raw16 = forward(model, frame)
    cfg = model.config
    dets = decode_head(raw32, cfg.head32, cfg.input_size, conf_threshold)
    dets += decode_head(raw16, cfg.head16, cfg.input_size, conf_threshold)
    return nms(dets, iou_threshold)
