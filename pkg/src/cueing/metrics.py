"""Object-level focus metrics and pixel-level KL / CC."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .data import BBox

FOCUS_THRESHOLD = 0.5
KL_EPS = 1e-7


class MetricError(ValueError):
    pass


def box_max(gaze: np.ndarray, box: BBox) -> float:
    h, w = gaze.shape
    b = box.clamp(w, h)
    if b.area == 0:
        raise MetricError(f"degenerate box {box} for a {w}x{h} map")
    return float(gaze[b.y1 : b.y2, b.x1 : b.x2].max())


def focus_decision(gaze: np.ndarray, box: BBox, thr: float = FOCUS_THRESHOLD) -> bool:
    """True iff the largest gaze value inside ``box`` strictly exceeds ``thr``."""
    return box_max(gaze, box) > thr


def roc_auc(scores: Sequence[float], labels: Sequence[bool]) -> Optional[float]:
    """Mann-Whitney AUC with ties counted as 1/2; None for single-class labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class ObjectMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n_objects(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _pct(num: int, den: int) -> float:
    return 100.0 * num / den if den else 0.0


def confusion_metrics(pred: Sequence[bool], truth: Sequence[bool], scores: Sequence[float]) -> ObjectMetrics:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.size == 0:
        raise MetricError("no objects to evaluate")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    precision = _pct(tp, tp + fp)
    recall = _pct(tp, tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ObjectMetrics(_pct(tp + tn, pred.size), precision, recall, f1, roc_auc(scores, truth), tp, fp, tn, fn)


def object_scores(pred_map: np.ndarray, gt_map: np.ndarray, boxes: Iterable[BBox], thr: float = FOCUS_THRESHOLD):
    """Per-object (predicted max, predicted focus, ground-truth focus)."""
    if pred_map.shape != gt_map.shape:
        raise MetricError(f"prediction {pred_map.shape} and ground truth {gt_map.shape} differ in size")
    out = []
    for b in boxes:
        s = box_max(pred_map, b)
        out.append((s, s > thr, focus_decision(gt_map, b, thr)))
    return out


def object_level_metrics(frames: Iterable[Tuple[np.ndarray, np.ndarray, Sequence[BBox]]], thr: float = FOCUS_THRESHOLD) -> ObjectMetrics:
    """Pool objects over ``(pred_map, gt_map, boxes)`` triples."""
    scores, pred, truth = [], [], []
    for pred_map, gt_map, boxes in frames:
        for s, p, t in object_scores(pred_map, gt_map, boxes, thr):
            scores.append(s)
            pred.append(p)
            truth.append(t)
    return confusion_metrics(pred, truth, scores)


def pixel_auc(pred: np.ndarray, gt: np.ndarray, thr: float = FOCUS_THRESHOLD) -> Optional[float]:
    """ROC AUC over pixels: ground-truth pixels above ``thr`` are positives."""
    return roc_auc(pred.reshape(-1), gt.reshape(-1) > thr)


def kl_divergence(pred: np.ndarray, gt: np.ndarray, eps: float = KL_EPS) -> float:
    """KL(gt || pred) after adding ``eps`` and normalizing both maps to sum 1."""
    if pred.shape != gt.shape:
        raise MetricError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    p = np.asarray(pred, dtype=np.float64) + eps
    q = np.asarray(gt, dtype=np.float64) + eps
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(q * np.log(q / p)))


def correlation(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    """Pearson CC of the flattened maps; None if either map is constant."""
    if pred.shape != gt.shape:
        raise MetricError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    a = np.asarray(pred, dtype=np.float64).reshape(-1)
    b = np.asarray(gt, dtype=np.float64).reshape(-1)
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0.0:
        return None
    return float(np.clip((a @ b) / den, -1.0, 1.0))


def pixel_level_metrics(pred: np.ndarray, gt: np.ndarray) -> Tuple[float, Optional[float]]:
    return kl_divergence(pred, gt), correlation(pred, gt)


# -- reports ----------------------------------------------------------------------


@dataclass
class FrameRecord:
    id: str
    kl: float
    cc: Optional[float]
    n_objects: int
    tp: int
    fp: int
    tn: int
    fn: int


@dataclass
class MetricReport:
    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    auc: Optional[float]
    kl: float
    cc: Optional[float]
    n_objects: int
    n_frames: int
    auc_variant: str = "roc_objects"
    frames: List[FrameRecord] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("frames")
        return d

    def to_text(self) -> str:
        lines = []
        for k, v in self.summary().items():
            if v is None:
                v = "absent"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def frames_jsonl(self) -> str:
        return "".join(json.dumps(asdict(f), sort_keys=True) + "\n" for f in self.frames)
