import itertools

import numpy as np
import pytest
import shapely.geometry as sg
from hypothesis import given, strategies as st

from ddacdn.boxes import BBox
from ddacdn.detector import Detection
from ddacdn.metrics import (METRICS_HEADER, SWEEP_THRESHOLDS, evaluate, image_level_counts,
                            iou_sweep, match_detections, metrics, pr_csv, pr_curve)


def shapely_iou(a, b):
    pa, pb = sg.box(*a), sg.box(*b)
    union = pa.union(pb).area
    return pa.intersection(pb).area / union if union else 0.0


def oracle_counts(dets, gts, thr, num_classes):
    """Enumerate every one-to-one assignment and keep the lexicographically best.

    Detections are ranked by confidence (stable); each detection prefers higher
    IoU, then lower ground-truth index, and any match over none.
    """
    tp = np.zeros(num_classes, int)
    fp = np.zeros(num_classes, int)
    fn = np.zeros(num_classes, int)
    for c in range(num_classes):
        ds = sorted([d for d in dets if d.cls == c], key=lambda d: -d.conf)
        gs = [b for k, b in gts if k == c]
        options = [None] + list(range(len(gs)))
        best_key, best = None, None
        for choice in itertools.product(options, repeat=len(ds)):
            used = [j for j in choice if j is not None]
            if len(used) != len(set(used)):
                continue
            if any(j is not None and shapely_iou(d.box, gs[j]) < thr for d, j in zip(ds, choice)):
                continue
            key = tuple((0,) if j is None else (1, shapely_iou(d.box, gs[j]), -j)
                        for d, j in zip(ds, choice))
            if best_key is None or key > best_key:
                best_key, best = key, choice
        m = sum(j is not None for j in best) if best is not None else 0
        tp[c], fp[c], fn[c] = m, len(ds) - m, len(gs) - m
    return tp, fp, fn


def rand_box(rng):
    x1, y1 = rng.uniform(0, 0.7, 2)
    return BBox(x1, y1, x1 + rng.uniform(0.05, 0.3), y1 + rng.uniform(0.05, 0.3))


def test_matching_against_exhaustive_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n_gt = int(rng.integers(0, 4))
        n_det = int(rng.integers(0, 6 - n_gt))
        gts = [(int(rng.integers(2)), rand_box(rng)) for _ in range(n_gt)]
        dets = []
        for _ in range(n_det):
            if gts and rng.uniform() < 0.6:  # jittered copy of a ground truth
                c, g = gts[int(rng.integers(len(gts)))]
                b = BBox(*(np.asarray(g) + rng.normal(0, 0.02, 4)))
                b = BBox(min(b.x1, b.x2 - 1e-3), min(b.y1, b.y2 - 1e-3), b.x2, b.y2)
            else:
                c, b = int(rng.integers(2)), rand_box(rng)
            dets.append(Detection(c, float(rng.uniform()), b))
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        got = match_detections(dets, gts, thr, 2)
        tp, fp, fn = oracle_counts(dets, gts, thr, 2)
        assert got.tp.tolist() == tp.tolist()
        assert got.fp.tolist() == fp.tolist()
        assert got.fn.tolist() == fn.tolist()
        # order invariance
        shuffled = [dets[i] for i in rng.permutation(len(dets))]
        again = match_detections(shuffled, gts, thr, 2)
        if len({d.conf for d in dets}) == len(dets):
            assert again.tp.tolist() == got.tp.tolist()


def test_matching_examples():
    gts = [(0, BBox(0.1, 0.1, 0.3, 0.3)), (2, BBox(0.5, 0.5, 0.9, 0.8))]
    perfect = [Detection(c, 0.9, b) for c, b in gts]
    r = match_detections(perfect, gts, 0.5)
    assert r.total()[:3] == (2, 0, 0)
    assert match_detections([], gts, 0.5).total()[:3] == (0, 0, 2)
    with pytest.raises(ValueError):
        match_detections([], gts, 1.0)
    # tie: equal IoU to two ground truths -> earlier index
    b = BBox(0.2, 0.2, 0.4, 0.4)
    g = [(0, BBox(0.1, 0.2, 0.4, 0.4)), (0, BBox(0.2, 0.2, 0.5, 0.4))]
    res = match_detections([Detection(0, 0.9, b), Detection(0, 0.8, g[1][1])], g, 0.5, 1)
    assert res.tp[0] == 2  # the second detection still finds the later ground truth


def test_image_level_examples():
    gts = [(0, BBox(0.1, 0.1, 0.3, 0.3))]
    hit = image_level_counts([Detection(0, 0.5, BBox(0.6, 0.6, 0.7, 0.7))], gts)
    assert hit.row(0) == (1, 0, 0, 0) and hit.tn[1:].tolist() == [1, 1, 1]
    wrong = image_level_counts([Detection(1, 0.5, BBox(0.1, 0.1, 0.3, 0.3))], gts)
    assert wrong.row(0) == (0, 0, 1, 0) and wrong.row(1) == (0, 1, 0, 0)
    assert wrong.tn.tolist() == [0, 0, 1, 1]


def test_metrics_examples():
    assert metrics(5, 5, 0, 0) == pytest.approx((0.5, 1.0, 2 / 3, 0.5))
    assert metrics(0, 0, 0, 10) == (0.0, 0.0, 0.0, 1.0)
    assert metrics(0, 0, 0, 0) == (0.0, 0.0, 0.0, 0.0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_metrics_ranges(tp, fp, fn, tn):
    m = metrics(tp, fp, fn, tn)
    assert all(0.0 <= v <= 1.0 for v in m)
    if m[0] == m[1]:
        assert m[2] == pytest.approx(m[0])


@given(st.integers(1, 50), st.integers(0, 50))
def test_f1_harmonic_identity(tp, k):
    p, r, f1, _ = metrics(tp, k, k)  # P == R by construction
    assert p == pytest.approx(r) and f1 == pytest.approx(p)


def test_pr_single_perfect_detection():
    g = [(1, BBox(0.2, 0.2, 0.6, 0.6))]
    curves = pr_curve([[Detection(1, 0.8, g[0][1])]], [g], 0.5, 101)
    for t, p, r in curves[1]:
        assert (p, r) == ((1.0, 1.0) if t <= 0.8 else (0.0, 0.0))
    assert len(curves["all"]) == 101
    assert pr_csv(curves).splitlines()[0] == "class,threshold,precision,recall"
    with pytest.raises(ValueError):
        pr_curve([[]], [[]], 0.5, 1)


def test_pr_pointwise_oracle():
    rng = np.random.default_rng(10)
    gts = [[(int(rng.integers(4)), rand_box(rng)) for _ in range(2)] for _ in range(5)]
    dets = [[Detection(c, float(rng.uniform()), BBox(*(np.asarray(b) + rng.normal(0, 0.03, 4))))
             for c, b in g] for g in gts]
    dets = [[Detection(d.cls, d.conf, BBox(min(d.box.x1, d.box.x2 - 1e-3),
                                           min(d.box.y1, d.box.y2 - 1e-3), d.box.x2, d.box.y2))
             for d in per] for per in dets]
    curves = pr_curve(dets, gts, 0.5, 21)
    recalls = [r for _, _, r in curves["all"]]
    assert recalls == sorted(recalls, reverse=True)
    for t, p, r in curves["all"]:
        tp = fp = fn = 0
        for ds, gs in zip(dets, gts):
            c = match_detections([d for d in ds if d.conf >= t], gs, 0.5)
            tp, fp, fn = tp + c.tp.sum(), fp + c.fp.sum(), fn + c.fn.sum()
        assert (p, r) == metrics(tp, fp, fn)[:2]


def test_iou_sweep():
    gts = [[(0, BBox(0.1, 0.1, 0.3, 0.3))], [(3, BBox(0.4, 0.2, 0.8, 0.5))]]
    perfect = [[Detection(c, 0.7, b) for c, b in g] for g in gts]
    table = iou_sweep(perfect, gts)
    assert len(table.rows) == 9 and [r[0] for r in table.rows] == list(SWEEP_THRESHOLDS)
    assert all(r[3] == 1.0 for r in table.rows) and table.best_threshold == 0.1
    shifted = [[Detection(0, 0.7, BBox(0.12, 0.1, 0.32, 0.3))], []]
    table = iou_sweep(shifted, gts)
    for t, p, r, f1, acc in table.rows:
        c = [match_detections(d, g, t) for d, g in zip(shifted, gts)]
        tot = [sum(int(getattr(x, k).sum()) for x in c) for k in ("tp", "fp", "fn")]
        assert (p, r, f1, acc) == metrics(*tot)


def test_csv_layout():
    gts = [[(0, BBox(0.1, 0.1, 0.3, 0.3))]]
    res = evaluate([[Detection(0, 0.9, gts[0][0][1])]], gts)
    lines = res.to_csv().splitlines()
    assert lines[0] == METRICS_HEADER
    assert len(lines) == 1 + 2 * 5
    assert lines[1].startswith("box,0,1,0,0,0,1.000000")
    assert lines[6].startswith("image,0,1,0,0,0")
    assert res.macro_f1() == pytest.approx(0.25)
    with pytest.raises(ValueError):
        evaluate([], gts)
