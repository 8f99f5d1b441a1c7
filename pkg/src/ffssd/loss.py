"""Multibox loss: smooth-L1 localisation + softmax cross-entropy with hard negative mining."""
from dataclasses import dataclass

import numpy as np


@dataclass
class LossStats:
    loss: float
    loc: float
    conf: float
    positives: int
    negatives: int


def log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def smooth_l1(d):
    a = np.abs(d)
    return np.where(a < 1, 0.5 * d * d, a - 0.5)


def smooth_l1_grad(d):
    return np.clip(d, -1, 1)


def hard_negatives(bg_loss, labels, neg_pos_ratio):
    """Mask of the highest-loss background priors, ``ratio * positives`` per image."""
    selected = np.zeros(labels.shape, dtype=bool)
    for i in range(labels.shape[0]):
        pos = labels[i] > 0
        k = min(int(neg_pos_ratio * pos.sum()), int((~pos).sum()))
        if k == 0:
            continue
        cand = np.where(pos, -np.inf, bg_loss[i])
        order = np.argsort(-cand, kind="stable")
        selected[i, order[:k]] = True
    return selected


def multibox_loss(conf_logits, loc_preds, labels, loc_targets, neg_pos_ratio=3):
    """Loss and gradients for a batch.

    ``conf_logits`` is (n, P, K) with class 0 as background, ``loc_preds``
    and ``loc_targets`` are (n, P, 4), ``labels`` is (n, P). Returns
    ``(LossStats, d_conf, d_loc)``; everything is normalised by the batch's
    positive count, and a batch without positives yields zero loss and
    zero gradients.
    """
    if conf_logits.shape[:2] != labels.shape or loc_preds.shape[:2] != labels.shape \
            or loc_targets.shape != loc_preds.shape:
        raise ValueError(f"misaligned loss inputs: conf {conf_logits.shape}, loc {loc_preds.shape}, "
                         f"labels {labels.shape}, targets {loc_targets.shape}")
    d_conf = np.zeros_like(conf_logits)
    d_loc = np.zeros_like(loc_preds)
    pos = labels > 0
    n_pos = int(pos.sum())
    if n_pos == 0:
        return LossStats(0.0, 0.0, 0.0, 0, 0), d_conf, d_loc

    logp = log_softmax(conf_logits)
    neg = hard_negatives(-logp[..., 0], labels, neg_pos_ratio)
    used = pos | neg
    ce = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    conf_loss = float(ce[used].sum())

    diff = loc_preds - loc_targets
    loc_loss = float(smooth_l1(diff[pos]).sum())

    probs = np.exp(logp)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    d_conf[used] = (probs - onehot)[used] / n_pos
    d_loc[pos] = smooth_l1_grad(diff[pos]) / n_pos
    total = (loc_loss + conf_loss) / n_pos
    return LossStats(total, loc_loss / n_pos, conf_loss / n_pos, n_pos, int(neg.sum())), d_conf, d_loc
