import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cueing import metrics as M
from cueing.data import BBox


def _box(x1, y1, x2, y2):
    return BBox("car", x1, y1, x2, y2)


def test_focus_rule_examples():
    g = np.zeros((10, 10))
    b = _box(2, 2, 6, 6)
    assert not M.focus_decision(g, b)
    g[3, 3] = 0.6
    assert M.focus_decision(g, b)
    g[3, 3] = 0.5
    assert not M.focus_decision(g, b)
    with pytest.raises(M.MetricError):
        M.focus_decision(g, _box(20, 20, 30, 30))


def random_case(seed, n_frames=5, n_objects=100, size=16):
    rng = np.random.default_rng(seed)
    frames = []
    per = np.full(n_frames, n_objects // n_frames)
    for k in per:
        pred = rng.uniform(size=(size, size)) * rng.uniform(0.3, 1.2)
        gt = rng.uniform(size=(size, size)) * rng.uniform(0.3, 1.2)
        boxes = []
        for _ in range(k):
            x1, y1 = rng.integers(0, size - 1, 2)
            w, h = rng.integers(1, 5, 2)
            boxes.append(_box(int(x1), int(y1), int(min(x1 + w, size)), int(min(y1 + h, size))))
        frames.append((np.clip(pred, 0, 1), np.clip(gt, 0, 1), boxes))
    return frames


def confusion_oracle(frames, thr=0.5):
    tp = fp = tn = fn = 0
    scores, labels = [], []
    for pred, gt, boxes in frames:
        for b in boxes:
            pm = max(pred[y][x] for y in range(b.y1, b.y2) for x in range(b.x1, b.x2))
            gm = max(gt[y][x] for y in range(b.y1, b.y2) for x in range(b.x1, b.x2))
            p, t = pm > thr, gm > thr
            tp += p and t
            fp += p and not t
            tn += (not p) and (not t)
            fn += (not p) and t
            scores.append(pm)
            labels.append(t)
    # pairwise AUC with ties as 1/2
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    auc = None
    if pos and neg:
        auc = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg) / (len(pos) * len(neg))
    return tp, fp, tn, fn, auc


@pytest.mark.parametrize("seed", range(5))
def test_object_metrics_vs_oracle(seed):
    frames = random_case(seed)
    got = M.object_level_metrics(frames)
    tp, fp, tn, fn, auc = confusion_oracle(frames)
    assert (got.tp, got.fp, got.tn, got.fn) == (tp, fp, tn, fn)
    assert got.n_objects == 100
    assert got.accuracy == 100.0 * (tp + tn) / 100
    assert got.precision == (100.0 * tp / (tp + fp) if tp + fp else 0.0)
    assert got.recall == (100.0 * tp / (tp + fn) if tp + fn else 0.0)
    assert got.auc == auc


def test_perfect_predictor():
    frames = [(gt, gt, boxes) for _, gt, boxes in random_case(3)]
    m = M.object_level_metrics(frames)
    assert m.accuracy == 100 and m.f1 == pytest.approx(100) and m.auc == 1.0


def test_all_focused_half_true():
    g = np.zeros((4, 8))
    g[:, :4] = 0.9
    pred = np.ones((4, 8))
    boxes = [_box(0, 0, 2, 4), _box(2, 0, 4, 4), _box(4, 0, 6, 4), _box(6, 0, 8, 4)]
    m = M.object_level_metrics([(pred, g, boxes)])
    assert m.recall == 100.0 and m.precision == 50.0


def test_no_objects_and_single_class():
    with pytest.raises(M.MetricError):
        M.object_level_metrics([(np.zeros((4, 4)), np.zeros((4, 4)), [])])
    m = M.object_level_metrics([(np.zeros((4, 4)), np.zeros((4, 4)), [_box(0, 0, 2, 2)])])
    assert m.auc is None


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.01, 10))
def test_scaling_never_unfocuses(seed, factor):
    frames = random_case(seed, n_frames=2, n_objects=20)
    for pred, gt, boxes in frames:
        before = [s[1] for s in M.object_scores(pred, gt, boxes)]
        after = [s[1] for s in M.object_scores(np.clip(pred * factor, 0, 1), gt, boxes)]
        assert all(a or not b for a, b in zip(after, before))


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(size=30).round(2)
    labels = rng.uniform(size=30) < 0.5
    a = M.roc_auc(s, labels)
    b = M.roc_auc(np.exp(3 * s) - 7, labels)
    assert a == b
    if a is not None:
        assert 0 <= a <= 1


# -- pixel metrics ---------------------------------------------------------------


def kl_loop(pred, gt, eps=1e-7):
    p = [v + eps for v in pred.ravel()]
    q = [v + eps for v in gt.ravel()]
    sp, sq = sum(p), sum(q)
    return sum((qi / sq) * math.log((qi / sq) / (pi / sp)) for pi, qi in zip(p, q))


def cc_loop(a, b):
    a = list(a.ravel())
    b = list(b.ravel())
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1))
def test_kl_cc_vs_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(size=(9, 11)) ** 3
    gt = rng.uniform(size=(9, 11)) ** 3
    kl, cc = M.pixel_level_metrics(pred, gt)
    assert abs(kl - kl_loop(pred, gt)) <= 1e-10
    assert abs(cc - cc_loop(pred, gt)) <= 1e-10


def test_pixel_metric_examples(rng):
    g = rng.uniform(size=(8, 8))
    kl, cc = M.pixel_level_metrics(g, g)
    assert kl <= 1e-6 and abs(cc - 1) <= 1e-9
    blob = np.zeros((8, 8))
    blob[3, 4] = 1
    assert M.kl_divergence(np.full((8, 8), 0.3), blob) > 0
    assert M.correlation(np.full((8, 8), 0.3), blob) is None
    with pytest.raises(M.MetricError):
        M.kl_divergence(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10), st.floats(-5, 5))
def test_cc_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=(2, 6, 6))
    assert M.correlation(a * x + b, y) == pytest.approx(M.correlation(x, y), abs=1e-9)


def test_pixel_auc():
    gt = np.zeros((4, 4))
    gt[1, 1] = 1.0
    pred = np.zeros((4, 4))
    pred[1, 1] = 0.9
    assert M.pixel_auc(pred, gt) == 1.0
    assert M.pixel_auc(pred, np.zeros((4, 4))) is None


def test_report_serialization():
    rec = M.FrameRecord("a", 1.5, None, 2, 1, 0, 1, 0)
    r = M.MetricReport(100.0, 100.0, 100.0, 100.0, None, 1.5, None, 2, 1, frames=[rec])
    text = r.to_text()
    assert "auc=absent" in text and "kl=1.5" in text and "n_objects=2" in text
    line = json.loads(r.frames_jsonl())
    assert line["id"] == "a" and line["cc"] is None
