"""Independent reference implementations used to check the real ones.

Everything here is deliberately naive (explicit loops, corner-based box
arithmetic, max-over-suffix envelopes) and shares no code with the package
beyond public data types.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_oracle(x, weights, bias, stride, padding, groups):
    """Quintuple-loop grouped cross-correlation. x: (n,c,h,w), weights:
    (out_ch, c//g, k, k). Accumulates in float64."""
    n, c, h, w = x.shape
    out_ch, cpg, k, _ = weights.shape
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    opg = out_ch // groups
    out = np.zeros((n, out_ch, h_out, w_out), dtype=np.float64)
    for ni in range(n):
        for oc in range(out_ch):
            group = oc // opg
            for oh in range(h_out):
                for ow in range(w_out):
                    acc = 0.0
                    for ci in range(cpg):
                        ic = group * cpg + ci
                        for kh in range(k):
                            ih = oh * stride + kh - padding
                            if ih < 0 or ih >= h:
                                continue
                            for kw in range(k):
                                iw = ow * stride + kw - padding
                                if iw < 0 or iw >= w:
                                    continue
                                acc += float(x[ni, ic, ih, iw]) * float(
                                    weights[oc, ci, kh, kw]
                                )
                    if bias is not None:
                        acc += float(bias[oc])
                    out[ni, oc, oh, ow] = acc
    return out


def maxpool_oracle(x, k, stride):
    n, c, h, w = x.shape
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    out = np.zeros((n, c, h_out, w_out), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oh in range(h_out):
                for ow in range(w_out):
                    best = -math.inf
                    for kh in range(k):
                        for kw in range(k):
                            best = max(best, x[ni, ci, oh * stride + kh, ow * stride + kw])
                    out[ni, ci, oh, ow] = best
    return out


def iou_corners(a, b):
    """IoU on (x1, y1, x2, y2) tuples."""
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    area_a = max(a[2] - a[0], 0.0) * max(a[3] - a[1], 0.0)
    area_b = max(b[2] - b[0], 0.0) * max(b[3] - b[1], 0.0)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _corners(det):
    b = det.bbox
    return (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def nms_oracle(dets, iou_threshold):
    """Greedy suppression re-done from scratch over corner boxes."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].class_id, i))
    alive = set(range(len(dets)))
    kept = []
    for i in order:
        if i not in alive:
            continue
        kept.append(i)
        for j in order:
            if j == i or j not in alive:
                continue
            if dets[j].class_id != dets[i].class_id:
                continue
            if iou_corners(_corners(dets[i]), _corners(dets[j])) > iou_threshold:
                alive.discard(j)
    return [dets[i] for i in kept]


def decode_oracle(raw, anchors, class_count, stride, conf_threshold):
    """Scalar per-cell decoder; raw is the (channels, grid, grid) array."""

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    grid = raw.shape[1]
    per_anchor = 5 + class_count
    found = []
    for a, (aw, ah) in enumerate(anchors):
        base = a * per_anchor
        for i in range(grid):
            for j in range(grid):
                tx = float(raw[base + 0, i, j])
                ty = float(raw[base + 1, i, j])
                tw = float(raw[base + 2, i, j])
                th = float(raw[base + 3, i, j])
                to = float(raw[base + 4, i, j])
                for k in range(class_count):
                    conf = sigmoid(to) * sigmoid(float(raw[base + 5 + k, i, j]))
                    if conf >= conf_threshold:
                        found.append(
                            (
                                (sigmoid(tx) + j) * stride,
                                (sigmoid(ty) + i) * stride,
                                aw * math.exp(min(tw, 10.0)),
                                ah * math.exp(min(th, 10.0)),
                                k,
                                conf,
                            )
                        )
    return found


def match_oracle(dets_by_image, gt_by_image, iou_threshold):
    """Exhaustive matching: every detection scans every ground truth.

    dets: {image: [(corners, class_id, conf)]}, gts: {image: [(corners, cid)]}.
    Returns (conf, is_tp) in global confidence order.
    """
    pool = []
    for image in sorted(dets_by_image):
        for order, (corners, cid, conf) in enumerate(dets_by_image[image]):
            pool.append((image, order, corners, cid, conf))
    pool.sort(key=lambda t: (-t[4], t[0], t[1]))
    used = {image: set() for image in gt_by_image}
    flags = []
    for image, _, corners, cid, conf in pool:
        best = (0.0, -1)
        for idx, (gt_corners, gt_cid) in enumerate(gt_by_image.get(image, [])):
            if gt_cid != cid or idx in used.setdefault(image, set()):
                continue
            overlap = iou_corners(corners, gt_corners)
            if overlap > best[0]:
                best = (overlap, idx)
        if best[1] >= 0 and best[0] >= iou_threshold:
            used[image].add(best[1])
            flags.append((conf, True))
        else:
            flags.append((conf, False))
    return flags


def ap_oracle(flags, total_gt):
    """All-point AP via explicit max-over-suffix envelope integration."""
    if total_gt == 0 or not flags:
        return 0.0
    points = []
    tp = fp = 0
    for _, is_tp in flags:
        if is_tp:
            tp += 1
        else:
            fp += 1
        points.append((tp / total_gt, tp / (tp + fp)))
    area = 0.0
    prev_r = 0.0
    for r in sorted({r for r, _ in points}):
        if r <= prev_r:
            continue
        envelope = max(p for rr, p in points if rr >= r)
        area += (r - prev_r) * envelope
        prev_r = r
    return area


def topic_match_oracle(filter_text, topic):
    """Truth-table style matcher: expand the filter against the topic."""
    fsegs = filter_text.split("/")
    tsegs = topic.split("/")

    def match(fi, ti):
        if fi == len(fsegs):
            return ti == len(tsegs)
        if fsegs[fi] == "#":
            return fi == len(fsegs) - 1
        if ti == len(tsegs):
            return False
        if fsegs[fi] == "+" or fsegs[fi] == tsegs[ti]:
            return match(fi + 1, ti + 1)
        return False

    return match(0, 0)
