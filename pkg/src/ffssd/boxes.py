"""Prior boxes, IoU, offset encoding, prior matching and NMS.

Boxes are float arrays with a trailing axis of 4, either in corner form
``(xmin, ymin, xmax, ymax)`` or center form ``(cx, cy, w, h)``; functions
say which form they expect.
"""
import math

import numpy as np

VARIANCES = (0.1, 0.2)


def center_to_corner(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def corner_to_center(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def shapes_per_cell(aspect_ratios):
    return len(aspect_ratios) + 1


def generate_priors(fmap_sizes, scales, aspect_ratios, max_scale):
    """Default boxes in center form, ordered (tap, row, col, shape).

    ``scales[k]`` is the box size at tap ``k``; each cell gets one box per
    aspect ratio plus a square box of size ``sqrt(s_k * s_{k+1})``, with
    ``max_scale`` standing in for ``s_{k+1}`` at the last tap.
    """
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(f"prior scales must strictly increase, got {scales}")
    nexts = list(scales[1:]) + [max_scale]
    out = []
    for f, s, s_next, ratios in zip(fmap_sizes, scales, nexts, aspect_ratios):
        fh, fw = (f, f) if np.isscalar(f) else f
        cell = []
        for a in ratios:
            cell.append((s * math.sqrt(a), s / math.sqrt(a)))
        extra = math.sqrt(s * s_next)
        cell.append((extra, extra))
        cell = np.array(cell)
        ys, xs = np.meshgrid((np.arange(fh) + 0.5) / fh, (np.arange(fw) + 0.5) / fw, indexing="ij")
        centers = np.stack([xs, ys], axis=-1).reshape(-1, 1, 2)
        boxes = np.concatenate([np.broadcast_to(centers, (fh * fw, len(cell), 2)),
                                np.broadcast_to(cell, (fh * fw, len(cell), 2))], axis=-1)
        out.append(boxes.reshape(-1, 4))
    return np.concatenate(out, axis=0)


def iou(a, b):
    """IoU of two corner-form boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def iou_matrix(a, b):
    """Pairwise IoU between corner-form ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1), 0.0)


def encode_box(gt, prior, variances=VARIANCES):
    """Offsets of center-form ``gt`` relative to center-form ``prior``."""
    gt = np.asarray(gt, dtype=np.float64)
    prior = np.asarray(prior, dtype=np.float64)
    if np.any(gt[..., 2:] <= 0):
        raise ValueError("ground-truth boxes need positive width and height")
    vc, vs = variances
    return np.concatenate([(gt[..., :2] - prior[..., :2]) / (prior[..., 2:] * vc),
                           np.log(gt[..., 2:] / prior[..., 2:]) / vs], axis=-1)


def decode_box(offsets, prior, variances=VARIANCES):
    """Inverse of :func:`encode_box`; returns center form."""
    offsets = np.asarray(offsets)
    prior = np.asarray(prior)
    vc, vs = variances
    return np.concatenate([prior[..., :2] + offsets[..., :2] * vc * prior[..., 2:],
                           prior[..., 2:] * np.exp(offsets[..., 2:] * vs)], axis=-1)


def match_priors(gt_boxes, gt_labels, priors, threshold=0.5, variances=VARIANCES):
    """Assign a training target to every prior.

    ``gt_boxes`` are corner form, ``gt_labels`` are 0-based categories and
    ``priors`` are center form. Returns ``(labels, offsets, gt_index)`` where
    ``labels`` is 0 for background and ``category + 1`` otherwise.
    """
    n_priors = len(priors)
    labels = np.zeros(n_priors, dtype=np.int64)
    offsets = np.zeros((n_priors, 4))
    owner = np.full(n_priors, -1, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0 or n_priors == 0:
        return labels, offsets, owner

    overlaps = iou_matrix(gt_boxes, center_to_corner(priors))
    # each gt claims its best prior, greedily by descending IoU
    work = overlaps.copy()
    forced = np.zeros(n_priors, dtype=bool)
    for _ in range(min(len(gt_boxes), n_priors)):
        g, p = np.unravel_index(np.argmax(work), work.shape)
        owner[p] = g
        forced[p] = True
        work[g, :] = -1
        work[:, p] = -1
    best_gt = overlaps.argmax(axis=0)
    best_iou = overlaps.max(axis=0)
    extra = (~forced) & (best_iou > threshold)
    owner[extra] = best_gt[extra]

    pos = owner >= 0
    labels[pos] = np.asarray(gt_labels)[owner[pos]] + 1
    offsets[pos] = encode_box(corner_to_center(gt_boxes[owner[pos]]), priors[pos], variances)
    return labels, offsets, owner


def nms(boxes, scores, iou_threshold=0.45, top_k=200):
    """Greedy non-maximum suppression; returns kept indices by descending score.

    Ties in score keep the original order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep = []
    while order.size and len(keep) < top_k:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ov = np.where(inter > 0, inter / np.where(union > 0, union, 1), 0.0)
        order = rest[ov <= iou_threshold]
    return keep
