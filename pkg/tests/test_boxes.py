import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ffssd.boxes import (center_to_corner, corner_to_center, decode_box, encode_box, generate_priors, iou,
                         iou_matrix, match_priors, nms)
from ffssd.model import ModelConfig, SSD

from oracles import match_brute, nms_recursive


def random_boxes(rng, n, lo=0.0, hi=1.0, min_size=0.01):
    xy = rng.uniform(lo, hi - min_size, size=(n, 2))
    wh = rng.uniform(min_size, hi - xy)
    return np.concatenate([xy, xy + wh], axis=1)


def test_prior_count_small_case():
    assert len(generate_priors([2], [0.3], [(1, 2)], 0.6)) == 12


def test_single_prior():
    p = generate_priors([1], [0.5], [(1,)], 0.5)
    assert np.allclose(p[0], [0.5, 0.5, 0.5, 0.5])


def test_default_prior_count():
    cfg = ModelConfig()
    assert cfg.num_priors() == 846
    assert len(SSD(cfg).priors) == 846


def test_prior_order_is_tap_row_col_shape():
    p = generate_priors([2, 1], [0.2, 0.6], [(1, 2), (1,)], 0.9)
    assert np.allclose(p[:3, :2], [[0.25, 0.25]] * 3)
    assert np.allclose(p[3, :2], [0.75, 0.25])      # next column
    assert np.allclose(p[6, :2], [0.25, 0.75])      # next row
    assert np.allclose(p[12:, :2], [[0.5, 0.5]] * 2)
    assert np.allclose(p[2, 2:], [math.sqrt(0.2 * 0.6)] * 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 8), st.integers(1, 4)), min_size=1, max_size=4))
def test_prior_count_formula(taps):
    sizes = [f for f, _ in taps]
    ratios = [tuple([1.0, 2.0, 0.5, 3.0][:r]) for _, r in taps]
    scales = list(np.linspace(0.1, 0.9, len(taps)))
    priors = generate_priors(sizes, scales, ratios, 0.95)
    assert len(priors) == sum(f * f * (r + 1) for f, r in taps)


def test_scales_must_increase():
    with pytest.raises(ValueError):
        generate_priors([2, 1], [0.5, 0.5], [(1,), (1,)], 0.9)


def test_iou_examples():
    assert iou((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert np.allclose(iou_matrix([(0, 0, 2, 2)], [(1, 0, 3, 2), (0, 0, 2, 2)]), [[1 / 3, 1.0]])


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 20), random_boxes(rng, 15)
    m = iou_matrix(a, b)
    for i in range(20):
        for j in range(15):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)


def test_center_corner_inverse():
    b = random_boxes(np.random.default_rng(1), 50)
    assert np.allclose(center_to_corner(corner_to_center(b)), b)


def test_encode_fixed_point_and_example():
    p = np.array([0.5, 0.5, 0.2, 0.2])
    assert np.allclose(encode_box(p, p), 0)
    got = encode_box([0.55, 0.5, 0.4, 0.2], p)
    assert got == pytest.approx([2.5, 0.0, math.log(2) / 0.2, 0.0])
    assert got[2] == pytest.approx(3.4657, abs=1e-4)


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
def test_encode_decode_round_trip(dtype, tol):
    rng = np.random.default_rng(2)
    gt = corner_to_center(random_boxes(rng, 10_000, min_size=0.02))
    pr = corner_to_center(random_boxes(rng, 10_000, min_size=0.02))
    off = encode_box(gt, pr).astype(dtype)
    back = decode_box(off, pr.astype(dtype))
    assert back.dtype == dtype
    assert np.max(np.abs(back - gt)) < tol


def test_encode_rejects_degenerate():
    with pytest.raises(ValueError):
        encode_box([0.5, 0.5, 0.0, 0.1], [0.5, 0.5, 0.2, 0.2])


def test_match_no_gts():
    labels, offsets, owner = match_priors(np.zeros((0, 4)), [], SSD(ModelConfig()).priors)
    assert not labels.any() and not offsets.any() and np.all(owner == -1)


def test_match_exact_prior():
    priors = np.array([[0.25, 0.25, 0.2, 0.2], [0.75, 0.75, 0.2, 0.2]])
    labels, offsets, _ = match_priors(center_to_corner(priors[:1]), [3], priors)
    assert list(labels) == [4, 0]
    assert np.allclose(offsets[0], 0)


def test_match_two_overlapping_priors():
    gt = np.array([[0.0, 0.0, 1.0, 1.0]])
    # priors shaped to overlap the gt at IoU 0.7 and 0.6
    priors = corner_to_center(np.array([[0.0, 0.0, 1.0, 0.7], [0.0, 0.0, 0.6, 1.0], [2.0, 2.0, 3.0, 3.0]]))
    ov = iou_matrix(gt, center_to_corner(priors))[0]
    assert ov[:2] == pytest.approx([0.7, 0.6])
    labels, _, owner = match_priors(gt, [0], priors)
    assert list(labels) == [1, 1, 0] and list(owner) == [0, 0, -1]


def test_match_forced_below_threshold():
    priors = np.array([[0.5, 0.5, 0.1, 0.1]])
    labels, _, _ = match_priors(np.array([[0.0, 0.0, 1.0, 1.0]]), [1], priors)
    assert labels[0] == 2


def test_match_equals_brute_force():
    rng = np.random.default_rng(3)
    priors = generate_priors([4, 2], [0.2, 0.5], [(1, 2, 0.5), (1, 2)], 0.8)
    pc = center_to_corner(priors)
    for _ in range(200):
        g = int(rng.integers(0, 5))
        gts = random_boxes(rng, g, min_size=0.05)
        cats = list(rng.integers(0, 6, size=g))
        labels, _, owner = match_priors(gts, cats, priors)
        want_labels, want_owner = match_brute(gts, cats, pc, 0.5)
        assert list(labels) == want_labels and list(owner) == want_owner


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.floats(0.0, 1.0))
def test_every_gt_gets_a_prior(seed, g, thr):
    rng = np.random.default_rng(seed)
    priors = generate_priors([3], [0.3], [(1, 2)], 0.6)
    _, _, owner = match_priors(random_boxes(rng, g), [0] * g, priors, threshold=thr)
    assert set(range(g)) <= set(owner.tolist())


def test_nms_examples():
    assert nms([[0, 0, 1, 1]], [0.3]) == [0]
    assert nms([[0, 0, 1, 1], [0, 0, 1, 1]], [0.8, 0.9]) == [1]
    assert nms(np.zeros((0, 4)), []) == []


def test_nms_top_k():
    boxes = np.array([[i, 0, i + 1, 1] for i in range(10)], dtype=float)
    assert nms(boxes, np.arange(10.0), top_k=3) == [9, 8, 7]


def test_nms_equals_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        boxes = random_boxes(rng, n, min_size=0.05)
        scores = rng.random(n).round(2)   # coarse scores exercise tie ordering
        keep = nms(boxes, scores, 0.45, 200)
        assert keep == nms_recursive(boxes, scores, 0.45, 200)
        assert all(scores[a] >= scores[b] for a, b in zip(keep, keep[1:]))
