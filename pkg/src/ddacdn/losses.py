"""Detection objective: focal classification/objectness, GIoU boxes, total.

Elementwise losses accept numpy arrays or Tensors and return Tensors, so they
can be differentiated. Grid losses sum over every image in the batch; the
trainer divides by batch size.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .boxes import BBox, giou as giou_scalar
from .ndgrad import Tensor


@dataclass(frozen=True)
class FocalParams:
    alpha: float | None = 0.25  # None disables alpha balancing (alpha_t = 1)
    gamma: float = 1.5

    def __post_init__(self):
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


@dataclass(frozen=True)
class LossWeights:
    eta_box: float = 0.05
    eta_cls: float = 0.5
    eta_obj: float = 1.0
    beta: tuple[float, float, float] = (0.1, 0.1, 0.1)
    balance: tuple[float, float, float] = (4.0, 1.0, 0.4)

    def __post_init__(self):
        vals = (self.eta_box, self.eta_cls, self.eta_obj, *self.beta, *self.balance)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and non-negative")
        if len(self.beta) != 3 or len(self.balance) != 3:
            raise ValueError("beta and balance need one value per scale")
        if any(h <= 0 for h in self.balance):
            raise ValueError("balance values must be positive")


class GeometryError(ValueError):
    """Predictions do not match the target assignment layout."""


def bce_logits(p, p_hat) -> Tensor:
    """Binary cross-entropy with logits, max(x,0) - x*p + log(1+exp(-|x|))."""
    return nd.bce_with_logits(p_hat, np.broadcast_to(np.asarray(p, dtype=np.float64),
                                                     nd._as_tensor(p_hat).shape))


def focal(p, p_hat, params: FocalParams = FocalParams()) -> Tensor:
    """alpha_t * (1 - p_t) ** gamma * bce, with p_t the probability of the target."""
    p = np.asarray(p, dtype=np.float64)
    # 1 - [(1-p)(1-s) + p s] == p sig(-x) + (1-p) sig(x), free of cancellation
    mod = nd.sigmoid(nd.neg(p_hat)) * p + nd.sigmoid(p_hat) * (1.0 - p)
    loss = bce_logits(p, p_hat)
    if params.gamma != 0:
        loss = nd.power(mod, params.gamma) * loss
    if params.alpha is not None:
        loss = loss * np.where(p == 1.0, params.alpha, 1.0 - params.alpha)
    return loss


def giou(b_t: BBox, b_p: BBox) -> float:
    return giou_scalar(BBox(*b_t), BBox(*b_p))


def giou_tensor(bt, bp) -> Tensor:
    """Row-wise GIoU of (n, 4) xyxy boxes; either side may be a Tensor."""
    bt, bp = nd._as_tensor(bt), nd._as_tensor(bp)
    tx1, ty1, tx2, ty2 = (bt[:, k] for k in range(4))
    px1, py1, px2, py2 = (bp[:, k] for k in range(4))
    iw = nd.relu(nd.minimum(tx2, px2) - nd.maximum(tx1, px1))
    ih = nd.relu(nd.minimum(ty2, py2) - nd.maximum(ty1, py1))
    inter = iw * ih
    union = (tx2 - tx1) * (ty2 - ty1) + (px2 - px1) * (py2 - py1) - inter
    cw = nd.maximum(tx2, px2) - nd.minimum(tx1, px1)
    ch = nd.maximum(ty2, py2) - nd.minimum(ty1, py1)
    enclose = cw * ch
    return inter / union - (enclose - union) / enclose


# --- grid losses --------------------------------------------------------------

def _check(assign, preds, field: str, tail: int) -> None:
    if len(preds) != len(assign.scales):
        raise GeometryError(f"expected {len(assign.scales)} scales, got {len(preds)}")
    for sc, pr in zip(assign.scales, preds):
        want = getattr(sc, field).shape[:-1] + (tail,) if tail else getattr(sc, field).shape
        if tuple(pr.shape) != tuple(want):
            raise GeometryError(f"{field}: prediction shape {tuple(pr.shape)} != target {want}")


def cls_loss(assign, preds, params: FocalParams = FocalParams()) -> Tensor:
    """Sum of focal terms over responsible cells and all classes.

    Args:
        assign: batched :class:`~ddacdn.detector.TargetAssignment`.
        preds: per scale, class logits shaped (B, S, S, C).
    """
    _check(assign, preds, "cls", preds[0].shape[-1] if len(preds) else 0)
    total = Tensor(0.0)
    for sc, logits in zip(assign.scales, preds):
        b, r, c = np.nonzero(sc.cell_obj)
        if len(b) == 0:
            continue
        picked = nd.getitem(logits, (b, r, c))
        total = total + focal(sc.cls[b, r, c], picked, params).sum()
    return total


def obj_loss(assign, preds, weights: LossWeights = LossWeights(),
             params: FocalParams = FocalParams()) -> Tensor:
    """Scale-balanced focal objectness summed over every cell and slot.

    Responsible slots have target 1, all other slots target 0.

    Args:
        preds: per scale, objectness logits shaped (B, S, S, M).
    """
    _check(assign, preds, "obj", 0)
    total = Tensor(0.0)
    for h, sc, logits in zip(weights.balance, assign.scales, preds):
        total = total + focal(sc.obj, logits, params).sum() * h
    return total


def box_loss(assign, preds) -> Tensor:
    """Sum over responsible slots of 1 - GIoU.

    Within a cell the GIoU is averaged over its responsible slots before the
    ``1 - .``; with one slot per cell this is the plain per-slot value.

    Args:
        preds: per scale, decoded xyxy boxes shaped (B, S, S, M, 4).
    """
    _check(assign, preds, "box", 4)
    total = Tensor(0.0)
    for sc, boxes in zip(assign.scales, preds):
        b, r, c, m = np.nonzero(sc.obj)
        if len(b) == 0:
            continue
        target = sc.box_xyxy()[b, r, c, m]
        g = giou_tensor(target, nd.getitem(boxes, (b, r, c, m)))
        cells = np.stack([b, r, c], axis=1)
        _, inv, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        if np.all(counts == 1):
            total = total + (1.0 - g).sum()
            continue
        # mean GIoU per cell, weighted by that cell's responsible-slot count
        onehot = np.zeros((len(counts), len(b)))
        onehot[inv, np.arange(len(b))] = 1.0
        cell_mean = nd.matmul(Tensor(onehot / counts[:, None]), nd.reshape(g, (-1, 1)))
        total = total + ((1.0 - nd.reshape(cell_mean, (-1,))) * counts.astype(float)).sum()
    return total


def total_loss(box, cls, obj, dom, lambda_obj: int, weights: LossWeights = LossWeights()):
    """eta_box*L_box + lambda_obj*(eta_cls*L_cls + eta_obj*L_obj) + L_dom."""
    if lambda_obj not in (0, 1):
        raise ValueError("lambda_obj must be 0 or 1")
    if lambda_obj:
        return weights.eta_box * box + (weights.eta_cls * cls + weights.eta_obj * obj) + dom
    return weights.eta_box * box + dom
