"""VOC-style average precision at IoU 0.5, with a small-object variant.

Detections are matched greedily in descending score order to the best
still-unmatched ground truth of the same image and category with IoU >= 0.5.
AP is the area under the precision/recall curve after taking the monotone
(non-increasing) precision envelope, integrated at every recall point.

For the small-object score, ground truths that are not size-class ``small``
become "ignored": a detection that can only be matched to an ignored box
counts neither as a true nor a false positive, however many detections
land on it.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou_matrix
from .synth import atomic_write_text


@dataclass
class EvalReport:
    categories: tuple
    ap: dict = field(default_factory=dict)
    ap_small: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    @property
    def mAP(self):
        return float(np.mean(list(self.ap.values()))) if self.ap else 0.0

    @property
    def mAP_small(self):
        return float(np.mean(list(self.ap_small.values()))) if self.ap_small else 0.0

    def format(self):
        lines = [f"{self.categories[c]}\t{self.ap[c]:.6f}" for c in sorted(self.ap)]
        lines.append(f"mAP\t{self.mAP:.6f}")
        lines.append(f"mAP_small\t{self.mAP_small:.6f}")
        return "\n".join(lines) + "\n"


def average_precision(recall, precision):
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def category_ap(dets, gts, iou_threshold=0.5):
    """AP for one category.

    ``dets``: list of ``(image_id, score, box)``. ``gts``: ``{image_id:
    (boxes (G, 4), ignored (G,) bool)}``. Returns ``None`` when there is no
    non-ignored ground truth.
    """
    n_pos = sum(int((~ign).sum()) for _, ign in gts.values())
    if n_pos == 0:
        return None
    if not dets:
        return 0.0
    order = np.argsort(-np.array([d[1] for d in dets], dtype=np.float64), kind="stable")
    used = {k: np.zeros(len(v[0]), dtype=bool) for k, v in gts.items()}
    tp, fp = [], []
    for i in order:
        image_id, _, box = dets[i]
        hit = _match(box, gts.get(image_id), used.get(image_id), iou_threshold)
        if hit == "ignore":
            continue
        tp.append(hit == "tp")
        fp.append(hit == "fp")
    tp = np.cumsum(tp, dtype=np.float64)
    fp = np.cumsum(fp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    recall = tp / n_pos
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return average_precision(recall, precision)


def _match(box, gt, used, iou_threshold):
    if gt is None or len(gt[0]) == 0:
        return "fp"
    boxes, ignored = gt
    ov = iou_matrix(np.asarray(box)[None], boxes)[0]
    ok = (ov >= iou_threshold) & ~used
    cand = ok & ~ignored
    if cand.any():
        j = int(np.argmax(np.where(cand, ov, -1.0)))
        used[j] = True
        return "tp"
    # ignored boxes absorb any number of detections
    if ((ov >= iou_threshold) & ignored).any():
        return "ignore"
    return "fp"


def evaluate(detections, annotations, categories, iou_threshold=0.5):
    """Score detections against ground truth.

    ``detections``: iterable of ``(image_id, category, score, box)`` with
    pixel corner boxes. ``annotations``: ``{image_id: [Annotation]}``.
    """
    categories = tuple(categories)
    report = EvalReport(categories)
    by_cat = {c: [] for c in range(len(categories))}
    for image_id, cat, score, box in detections:
        if not 0 <= cat < len(categories):
            raise ValueError(f"unknown category id {cat}")
        by_cat[cat].append((image_id, score, box))
    for c in range(len(categories)):
        full, small = {}, {}
        n_gt = n_small = 0
        for image_id, anns in annotations.items():
            mine = [a for a in anns if a.category == c]
            boxes = np.array([a.box for a in mine], dtype=np.float64).reshape(-1, 4)
            is_small = np.array([a.size_class == "small" for a in mine], dtype=bool)
            full[image_id] = (boxes, np.zeros(len(mine), dtype=bool))
            small[image_id] = (boxes, ~is_small)
            n_gt += len(mine)
            n_small += int(is_small.sum())
        ap = category_ap(by_cat[c], full, iou_threshold)
        if ap is not None:
            report.ap[c] = ap
        ap_s = category_ap(by_cat[c], small, iou_threshold)
        if ap_s is not None:
            report.ap_small[c] = ap_s
        report.counts[categories[c]] = {"gt": n_gt, "gt_small": n_small, "dets": len(by_cat[c])}
    return report


def detect_split(model, split, batch_size=16, **kw):
    """Run a model over every image of a split; pixel-space detection tuples."""
    canvas = model.cfg.input_size
    out = []
    ids = list(split.image_ids)
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        images = np.concatenate([split.image(i) for i in chunk])
        for image_id, dets in zip(chunk, model.detect(images, **kw)):
            for d in dets:
                out.append((image_id, d.category, d.score, tuple(float(v) * canvas for v in d.box)))
    return out


def evaluate_model(model, split, **kw):
    dets = detect_split(model, split, **kw)
    return evaluate(dets, split.annotations, split.categories)


def format_detections(detections, categories):
    lines = []
    for image_id, cat, score, box in detections:
        coords = " ".join(f"{v:.6f}" for v in box)
        lines.append(f"{image_id}\t{categories[cat]}\t{score:.6f}\t{coords}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_detections(path, detections, categories):
    atomic_write_text(path, format_detections(detections, categories))


def read_detections(path, categories):
    index = {name: i for i, name in enumerate(categories)}
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line:
            continue
        try:
            image_id, name, score, coords = line.split("\t")
            box = tuple(float(v) for v in coords.split(" "))
            score = float(score)
        except ValueError:
            raise ValueError(f"{path}:{lineno}: malformed detection line {line!r}") from None
        if name not in index:
            raise ValueError(f"{path}:{lineno}: unknown category {name!r}")
        out.append((image_id, index[name], score, box))
    return out
