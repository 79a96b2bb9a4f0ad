from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import alignment_loss_direct, dense_miou
from trackselect import tensor as tc
from trackselect.masks import MaskTrack, TrackSet
from trackselect.supervision import (
    LossWeights,
    alignment_loss,
    bce_loss,
    init_anchor_bank,
    make_pseudo_labels,
    positive_anchor,
    total_loss,
)
from trackselect.tensor import ParamStore, Tensor


def T(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _frame(h, w, cells):
    m = np.zeros((h, w), bool)
    for y, x in cells:
        m[y, x] = True
    return m


def test_pseudo_label_examples():
    gt = MaskTrack.from_dense(np.stack([_frame(2, 10, [(0, i) for i in range(10)])]), "gt")
    cand = []
    for k in (9, 4, 6):
        # k of gt's 10 pixels -> IoU k/10
        cand.append(MaskTrack.from_dense(np.stack([_frame(2, 10, [(0, i) for i in range(k)])]), f"c{k}"))
    labels = make_pseudo_labels(TrackSet(cand), gt, 0.5)
    np.testing.assert_allclose(labels.miou, [0.9, 0.4, 0.6])
    np.testing.assert_array_equal(labels.y, [1, 0, 1])
    assert make_pseudo_labels([gt], gt).y[0] == 1


def test_pseudo_label_exact_half_is_negative():
    gt = np.zeros((1, 4, 4), bool)
    gt[0, :2] = True
    half = np.zeros((1, 4, 4), bool)
    half[0, 0] = True
    assert dense_miou(half, gt) == 0.5
    labels = make_pseudo_labels([MaskTrack.from_dense(half)], MaskTrack.from_dense(gt), 0.5)
    assert labels.miou[0] == 0.5 and labels.y[0] == 0


def test_positive_anchor_examples():
    v = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(positive_anchor(T(v)).data, v[0])
    np.testing.assert_array_equal(positive_anchor(T(np.repeat(v, 2, axis=0))).data, v[0])
    x = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_allclose(positive_anchor(T(x)).data, x.mean(axis=0), atol=1e-15)


def test_bce_examples():
    assert bce_loss(T([0.5]), [1]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(T([1 - 1e-9]), [1]).item() < 1e-6
    ref = -0.5 * (math.log(0.9) + math.log(0.8))
    assert bce_loss(T([0.9, 0.2]), [1, 0]).item() == pytest.approx(ref, abs=1e-12)
    assert ref == pytest.approx(0.1643, abs=1e-4)
    with pytest.raises(ValueError):
        bce_loss(T([0.5, 0.5]), [1])


def test_bce_clamps_saturated_scores():
    assert math.isfinite(bce_loss(T([0.0, 1.0]), [1, 0]).item())


def test_alignment_trivial_cases():
    a_p = T([1.0, 0.0])
    assert alignment_loss(T([[1.0, 0.0]]), [1], a_p, T([[0.0, 1.0]])).item() == pytest.approx(-1.0, abs=1e-12)
    assert alignment_loss(T([[0.0, 1.0]]), [0], a_p, T([[0.0, 1.0]])).item() == pytest.approx(-1.0, abs=1e-12)
    assert alignment_loss(T([[1.0, 0.0]]), [1], a_p, T([[0.0, 1.0]]), sign=-1).item() == pytest.approx(1.0)


def test_alignment_matches_direct_formula():
    rng = np.random.default_rng(1)
    for _ in range(50):
        o, a_p, anchors = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=(3, 6))
        y = rng.integers(0, 2, size=4)
        for sign in (1.0, -1.0):
            got = alignment_loss(T(o), y, T(a_p), T(anchors), sign).item()
            assert got == pytest.approx(alignment_loss_direct(o, y, a_p, anchors, sign), abs=1e-12)


def test_alignment_tie_picks_lowest_index():
    o = T([[1.0, 0.0]])
    anchors = T([[0.0, 1.0], [0.0, -1.0]])  # both at distance 1
    # y=0: d_near=1 (index 0), sum of the rest = 1
    got = alignment_loss(o, [0], T([1.0, 1.0]), anchors).item()
    d_pos = 1 - 1 / math.sqrt(2)
    assert got == pytest.approx(1 - d_pos - 1, abs=1e-12)


@pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
def test_alignment_scale_invariant(alpha):
    rng = np.random.default_rng(2)
    o, a_p, anchors = rng.normal(size=(5, 8)), rng.normal(size=8), rng.normal(size=(4, 8))
    y = [1, 0, 0, 1, 0]
    base = alignment_loss(T(o), y, T(a_p), T(anchors)).item()
    assert alignment_loss(T(alpha * o), y, T(a_p), T(anchors)).item() == pytest.approx(base, abs=1e-6)


def test_total_loss_components():
    rng = np.random.default_rng(3)
    s = T(rng.uniform(0.05, 0.95, size=4))
    o, a_p, anchors = T(rng.normal(size=(4, 6))), T(rng.normal(size=6)), T(rng.normal(size=(3, 6)))
    y = [1, 0, 1, 0]
    bce = bce_loss(s, y).item()
    align = alignment_loss(o, y, a_p, anchors).item()
    assert total_loss(s, o, y, a_p, anchors, LossWeights(1.0, 0.0))[0].item() == bce
    assert total_loss(s, o, y, a_p, anchors, LossWeights(0.0, 1.0))[0].item() == pytest.approx(align, abs=1e-15)
    loss, parts = total_loss(s, o, y, a_p, anchors)
    assert loss.item() == pytest.approx(1.0 * bce + 0.3 * align, abs=1e-12)
    assert parts["bce"] == bce and parts["align"] == align
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.3)


def test_anchor_gradients_flow():
    store = ParamStore("float64")
    anchors = init_anchor_bank(store, 4, 6)
    assert anchors.shape == (4, 6)
    store.add("o", np.random.default_rng(4).normal(size=(3, 6)))
    store.add("s", [0.2, 0.4, 0.6])
    a_p = T(np.ones(6))

    def f(st):
        return total_loss(tc.sigmoid(st["s"]), st["o"], [1, 0, 0], a_p, st["anchors.neg"])[0]

    tc.backward(f(store), store)
    assert np.any(store.grads["anchors.neg"] != 0)
    assert np.any(store.grads["o"] != 0)
    assert tc.grad_check(f, store, n_samples=None) < 1e-6
    with pytest.raises(ValueError):
        init_anchor_bank(ParamStore(), 0, 4)
