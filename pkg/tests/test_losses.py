import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ddacdn import ndgrad as nd
from ddacdn.boxes import BBox, iou
from ddacdn.detector import ScaleTargets, TargetAssignment
from ddacdn.losses import (FocalParams, GeometryError, LossWeights, bce_logits, box_loss,
                           cls_loss, focal, giou, giou_tensor, obj_loss, total_loss)
from ddacdn.ndgrad import Tensor, grad_check

logit = st.floats(-30, 30, allow_nan=False)
unit = st.floats(0, 1, allow_nan=False)


def s_focal(p, x, alpha=0.25, gamma=1.5):
    sig = 1 / (1 + math.exp(-x))
    one_minus_pt = p / (1 + math.exp(x)) + (1 - p) * sig
    bce = max(x, 0) - x * p + math.log1p(math.exp(-abs(x)))
    at = 1.0 if alpha is None else (alpha if p == 1 else 1 - alpha)
    return at * one_minus_pt ** gamma * bce


def test_bce_examples():
    assert bce_logits(1.0, Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bce_logits(0.0, Tensor(-50.0)).item() < 1e-20
    assert bce_logits(1.0, Tensor(-2.0)).item() == pytest.approx(math.log1p(math.e ** 2), abs=1e-12)


def test_focal_examples():
    # 0.25 * 0.5**1.5 * ln 2 = 0.0612661...
    assert focal(1.0, Tensor(0.0)).item() == pytest.approx(0.25 * 0.5 ** 1.5 * math.log(2),
                                                           rel=1e-15)
    assert focal(1.0, Tensor(60.0)).item() < 1e-30


@given(arrays(np.float64, 20, elements=logit), arrays(np.float64, 20, elements=unit))
def test_focal_gamma0_equals_bce(x, p):
    a = focal(p, Tensor(x), FocalParams(alpha=None, gamma=0.0)).data
    np.testing.assert_allclose(a, bce_logits(p, Tensor(x)).data, rtol=0, atol=1e-12)


@given(logit, st.sampled_from([0.0, 1.0]))
def test_focal_bounds(x, p):
    f = focal(p, Tensor(x)).item()
    at = 0.25 if p == 1 else 0.75
    assert 0 <= f <= at * bce_logits(p, Tensor(x)).item() + 1e-15
    assert f == pytest.approx(s_focal(p, x), rel=1e-9, abs=1e-300)


def test_focal_params_validation():
    with pytest.raises(ValueError):
        FocalParams(alpha=1.5)
    with pytest.raises(ValueError):
        FocalParams(gamma=-1)


# --- GIoU -------------------------------------------------------------------------

def test_giou_examples():
    a = BBox(0, 0, 2 / 3, 2 / 3)
    b = BBox(1 / 3, 1 / 3, 1, 1)
    assert giou(a, b) == pytest.approx(1 / 7 - 2 / 9, abs=1e-9)
    assert giou(BBox(0, 0, 0.1, 0.1), BBox(0.9, 0, 1.0, 0.1)) == pytest.approx(-0.8, abs=1e-9)
    assert giou(a, a) == 1.0


def test_giou_degenerate_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        assert giou(BBox(0.5, 0.5, 0.5, 0.5), BBox(0.5, 0.5, 0.5, 0.5)) == 0.0
    assert any("degenerate" in str(x.message) for x in w)


boxes = st.tuples(unit, unit, unit, unit).filter(
    lambda t: t[0] < t[2] - 1e-3 and t[1] < t[3] - 1e-3).map(lambda t: BBox(*t))


@given(boxes, boxes)
def test_giou_properties(a, b):
    g = giou(a, b)
    assert -1 <= g <= iou(a, b) + 1e-12
    assert g == pytest.approx(giou(b, a), abs=1e-12)
    assert giou_tensor(np.array([a]), np.array([b])).data[0] == pytest.approx(g, abs=1e-12)


def test_giou_equals_iou_when_nested():
    outer, inner = BBox(0.1, 0.1, 0.9, 0.9), BBox(0.2, 0.3, 0.5, 0.6)
    assert giou(outer, inner) == pytest.approx(iou(outer, inner), abs=1e-15)


# --- grid losses ----------------------------------------------------------------------

def random_assignment(rng, sizes=(4, 2), batch=2, m=1, c=3, density=0.4):
    scales = []
    for s in sizes:
        obj = (rng.random((batch, s, s, m)) < density).astype(float)
        cell = obj.any(axis=-1).astype(float)
        cls = np.zeros((batch, s, s, c))
        idx = rng.integers(0, c, (batch, s, s))
        np.put_along_axis(cls, idx[..., None], 1.0, axis=-1)
        cls *= cell[..., None]
        cxcy = rng.uniform(0.2, 0.8, (batch, s, s, m, 2))
        wh = rng.uniform(0.1, 0.4, (batch, s, s, m, 2))
        scales.append(ScaleTargets(obj, cell, cls, np.concatenate([cxcy, wh], -1)))
    return TargetAssignment(scales)


def random_boxes(rng, shape):
    xy = rng.uniform(0.05, 0.5, shape + (2,))
    wh = rng.uniform(0.1, 0.45, shape + (2,))
    return np.concatenate([xy, xy + wh], -1)


def test_grid_losses_match_loop_oracle(rng):
    w = LossWeights()
    for _ in range(5):
        m = int(rng.integers(1, 3))
        a = random_assignment(rng, m=m)
        cls_p = [rng.normal(0, 2, sc.cls.shape) for sc in a.scales]
        obj_p = [rng.normal(0, 2, sc.obj.shape) for sc in a.scales]
        box_p = [random_boxes(rng, sc.obj.shape) for sc in a.scales]
        want_cls = want_obj = want_box = 0.0
        for h, sc, cp, op, bp in zip(w.balance, a.scales, cls_p, obj_p, box_p):
            B, S, _, M = sc.obj.shape
            tb = sc.box_xyxy()
            for b in range(B):
                for r in range(S):
                    for col in range(S):
                        if sc.cell_obj[b, r, col]:
                            want_cls += sum(s_focal(sc.cls[b, r, col, k], cp[b, r, col, k])
                                            for k in range(sc.cls.shape[-1]))
                        gs = []
                        for j in range(M):
                            want_obj += h * s_focal(sc.obj[b, r, col, j], op[b, r, col, j])
                            if sc.obj[b, r, col, j]:
                                gs.append(giou(BBox(*tb[b, r, col, j]), BBox(*bp[b, r, col, j])))
                        if gs:
                            want_box += len(gs) * (1 - np.mean(gs))
        assert cls_loss(a, [Tensor(x) for x in cls_p]).item() == pytest.approx(want_cls, abs=1e-10)
        assert obj_loss(a, [Tensor(x) for x in obj_p], w).item() == pytest.approx(want_obj, abs=1e-10)
        assert box_loss(a, [Tensor(x) for x in box_p]).item() == pytest.approx(want_box, abs=1e-10)


def single_object(s=2, c=2, cls=0):
    obj = np.zeros((1, s, s, 1))
    obj[0, 1, 1, 0] = 1
    cl = np.zeros((1, s, s, c))
    cl[0, 1, 1, cls] = 1
    box = np.zeros((1, s, s, 1, 4))
    box[0, 1, 1, 0] = (0.05, 0.05, 0.1, 0.1)
    return TargetAssignment([ScaleTargets(obj, obj[..., 0], cl, box)])


def test_cls_loss_examples():
    empty = TargetAssignment([ScaleTargets(np.zeros((1, 2, 2, 1)), np.zeros((1, 2, 2)),
                                           np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 1, 4)))])
    assert cls_loss(empty, [Tensor(np.zeros((1, 2, 2, 2)))]).item() == 0.0
    a = single_object()
    perfect = np.full((1, 2, 2, 2), -50.0)
    perfect[0, 1, 1, 0] = 50.0
    assert cls_loss(a, [Tensor(perfect)]).item() < 1e-10
    got = cls_loss(a, [Tensor(np.zeros((1, 2, 2, 2)))]).item()
    assert got == pytest.approx(focal(1.0, Tensor(0.0)).item() + focal(0.0, Tensor(0.0)).item())


def test_obj_loss_examples():
    a = single_object()
    neg = TargetAssignment([ScaleTargets(np.zeros((1, 2, 2, 1)), np.zeros((1, 2, 2)),
                                         np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 1, 4)))])
    assert obj_loss(neg, [Tensor(np.full((1, 2, 2, 1), -50.0))],
                    LossWeights(balance=(1.0, 1.0, 1.0))).item() < 1e-20
    x = np.zeros((1, 2, 2, 1))
    v_pos, v_neg = focal(1.0, Tensor(0.0)).item(), focal(0.0, Tensor(0.0)).item()
    got = obj_loss(a, [Tensor(x)], LossWeights(balance=(4.0, 1.0, 1.0))).item()
    assert got == pytest.approx(4.0 * (v_pos + 3 * v_neg))


def test_obj_loss_balance_linearity(rng):
    a = random_assignment(rng, sizes=(4, 2, 1))
    preds = [Tensor(rng.normal(size=sc.obj.shape)) for sc in a.scales]
    base = obj_loss(a, preds, LossWeights(balance=(1.0, 1.0, 1.0))).item()
    doubled = obj_loss(a, preds, LossWeights(balance=(1.0, 2.0, 1.0))).item()
    only2 = obj_loss(a, preds, LossWeights(balance=(1e-300, 1.0, 1e-300))).item()
    assert doubled - base == pytest.approx(only2, rel=1e-12)


def test_box_loss_examples():
    a = single_object()
    pred = np.zeros((1, 2, 2, 1, 4))
    pred[0, 1, 1, 0] = a.scales[0].box_xyxy()[0, 1, 1, 0]
    assert box_loss(a, [Tensor(pred)]).item() == pytest.approx(0.0, abs=1e-15)
    # target (0,0,0.1,0.1), prediction (0.9,0,1,0.1): GIoU -0.8
    pred[0, 1, 1, 0] = (0.9, 0.0, 1.0, 0.1)
    assert box_loss(a, [Tensor(pred)]).item() == pytest.approx(1.8, abs=1e-12)
    empty = random_assignment(np.random.default_rng(0), sizes=(2,), batch=1, density=0.0)
    assert box_loss(empty, [Tensor(np.zeros((1, 2, 2, 1, 4)))]).item() == 0.0


def test_geometry_mismatch():
    a = single_object()
    with pytest.raises(GeometryError):
        cls_loss(a, [Tensor(np.zeros((1, 3, 3, 2)))])
    with pytest.raises(GeometryError):
        box_loss(a, [])


def test_total_loss_examples():
    assert total_loss(0.0, 0.0, 0.0, 0.0, 1) == 0.0
    assert total_loss(1.0, 2.0, 3.0, 0.5, 1) == pytest.approx(4.55)
    assert total_loss(1.0, 2.0, 3.0, 0.5, 0) == total_loss(1.0, 99.0, -7.0, 0.5, 0)
    with pytest.raises(ValueError):
        total_loss(1.0, 2.0, 3.0, 0.5, 2)


def test_loss_weight_defaults_and_validation():
    w = LossWeights()
    assert (w.eta_box, w.eta_cls, w.eta_obj) == (0.05, 0.5, 1.0)
    assert w.balance == (4.0, 1.0, 0.4) and w.beta == (0.1, 0.1, 0.1)
    with pytest.raises(ValueError):
        LossWeights(eta_box=-1.0)


# --- gradients --------------------------------------------------------------------------

def test_focal_gradient(rng):
    p = rng.integers(0, 2, 30).astype(float)
    assert grad_check(lambda x: focal(p, x).sum(), rng.normal(0, 2, 30)) < 1e-4


def test_giou_gradient(rng):
    bt = random_boxes(rng, (6,))
    # shift the predictions so no coordinate ties with the target (min/max kinks)
    bp = random_boxes(rng, (6,)) + 0.013
    assert grad_check(lambda b: giou_tensor(bt, b).sum(), bp) < 1e-4


def test_grid_loss_gradients(rng):
    a = random_assignment(rng, m=2)
    for fn, shape in ((lambda p: cls_loss(a, p), lambda sc: sc.cls.shape),
                      (lambda p: obj_loss(a, p), lambda sc: sc.obj.shape)):
        x = rng.normal(size=shape(a.scales[0]))
        rest = [Tensor(rng.normal(size=shape(sc))) for sc in a.scales[1:]]
        assert grad_check(lambda t: fn([t] + rest), x) < 1e-4
    x = random_boxes(rng, a.scales[0].obj.shape) + 0.007
    rest = [Tensor(random_boxes(rng, sc.obj.shape)) for sc in a.scales[1:]]
    assert grad_check(lambda t: box_loss(a, [t] + rest), x) < 1e-4
