"""Average-precision scoring of detections against ground truth.

AP is all-point interpolated: the precision/recall curve's envelope is made
monotonically non-increasing and integrated over recall. Matching consumes
at most one ground truth per detection (best IoU wins), processed globally
in descending confidence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .detect import BBox, Detection, iou

DEFAULT_MATCH_IOU = 0.5


class EvalInputError(ValueError):
    """Detections reference images absent from the ground truth set."""


@dataclass
class GroundTruthSet:
    """Per-image lists of (box, class_id) annotations."""

    boxes: dict[str, list[tuple[BBox, int]]] = field(default_factory=dict)

    def add(self, image_id: str, box: BBox, class_id: int) -> None:
        self.boxes.setdefault(image_id, []).append((box, class_id))

    def total(self, class_id: int | None = None) -> int:
        n = 0
        for anns in self.boxes.values():
            for _, cid in anns:
                if class_id is None or cid == class_id:
                    n += 1
        return n

    def class_ids(self) -> list[int]:
        ids = {cid for anns in self.boxes.values() for _, cid in anns}
        return sorted(ids)


def load_ground_truth(path: str) -> GroundTruthSet:
    """Read the ground-truth JSON: {image_id: [{x1,y1,x2,y2,class}, ...]}."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    gts = GroundTruthSet()
    for image_id, anns in payload.items():
        gts.boxes.setdefault(image_id, [])
        for ann in anns:
            box = BBox.from_corners(ann["x1"], ann["y1"], ann["x2"], ann["y2"])
            gts.add(image_id, box, int(ann["class"]))
    return gts


def match_detections(
    dets: dict[str, list[Detection]],
    gts: GroundTruthSet,
    iou_threshold: float = DEFAULT_MATCH_IOU,
    class_id: int | None = None,
) -> list[tuple[float, bool]]:
    """Flag every detection TP/FP, globally ordered by descending confidence.

    A detection is a true positive when its best-IoU unmatched same-class
    ground truth in the same image reaches the threshold; that ground truth
    is then consumed. Ties in confidence break by (image id, input order).
    Returns (confidence, is_tp) pairs in processing order.
    """
    unknown = sorted(set(dets) - set(gts.boxes))
    if unknown:
        raise EvalInputError(f"detections reference unknown image ids: {unknown}")

    pool = []
    for image_id in sorted(dets):
        for order, det in enumerate(dets[image_id]):
            if class_id is None or det.class_id == class_id:
                pool.append((image_id, order, det))
    pool.sort(key=lambda item: (-item[2].confidence, item[0], item[1]))

    matched: dict[str, set[int]] = {image_id: set() for image_id in gts.boxes}
    flags: list[tuple[float, bool]] = []
    for image_id, _, det in pool:
        anns = gts.boxes.get(image_id, [])
        best_iou = 0.0
        best_idx = -1
        for idx, (box, cid) in enumerate(anns):
            if cid != det.class_id or idx in matched[image_id]:
                continue
            overlap = iou(det.bbox, box)
            if overlap > best_iou:
                best_iou = overlap
                best_idx = idx
        if best_idx >= 0 and best_iou >= iou_threshold:
            matched[image_id].add(best_idx)
            flags.append((det.confidence, True))
        else:
            flags.append((det.confidence, False))
    return flags


def average_precision(flags: list[tuple[float, bool]], total_gt: int) -> float:
    """Area under the monotone precision envelope over recall.

    Flags must already be ordered by descending confidence. Returns 0.0 when
    there is nothing to recall.
    """
    if total_gt < 0:
        raise ValueError(f"total_gt must be >= 0, got {total_gt}")
    if total_gt == 0 or not flags:
        return 0.0

    precisions = []
    recalls = []
    tp = fp = 0
    for _, is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        precisions.append(tp / (tp + fp))
        recalls.append(tp / total_gt)

    # Monotone envelope, right to left.
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])

    ap = 0.0
    prev_recall = 0.0
    for p, r in zip(precisions, recalls):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return ap


def mean_average_precision(per_class_aps: dict[int, float]) -> float:
    """Unweighted mean over classes."""
    if not per_class_aps:
        raise ValueError("mean over an empty class list is undefined")
    return sum(per_class_aps.values()) / len(per_class_aps)


def evaluate(
    dets: dict[str, list[Detection]],
    gts: GroundTruthSet,
    iou_threshold: float = DEFAULT_MATCH_IOU,
) -> dict:
    """Full report: per-class AP, mAP, and TP/FP/GT tallies."""
    class_ids = gts.class_ids()
    if not class_ids:
        class_ids = sorted(
            {d.class_id for image_dets in dets.values() for d in image_dets}
        )
    per_class: dict[int, float] = {}
    tp = fp = 0
    for cid in class_ids:
        flags = match_detections(dets, gts, iou_threshold, class_id=cid)
        per_class[cid] = average_precision(flags, gts.total(cid))
        tp += sum(1 for _, ok in flags if ok)
        fp += sum(1 for _, ok in flags if not ok)
    return {
        "per_class_ap": {str(cid): ap for cid, ap in per_class.items()},
        "map": mean_average_precision(per_class) if per_class else 0.0,
        "tp": tp,
        "fp": fp,
        "total_gt": gts.total(),
    }
