"""Training, fine-tune sampling and evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from . import metrics as M
from .data import DatasetManifest, Frame, load_frames
from .model import FREEZE_MASKS, CueingModel
from .nn.optim import AdamState, adam_step
from .render import default_sigma, normalize_max, upsample_points
from .tokenizer import downsample_gaze

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    steps: Optional[int] = None  # stop after this many optimizer steps
    drop_empty_gaze: bool = False
    freeze_mask: str = "none"
    eval_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps is not None and self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.freeze_mask not in FREEZE_MASKS:
            raise ValueError(f"freeze_mask must be one of {FREEZE_MASKS}, got {self.freeze_mask!r}")
        return self


def _as_frames(model: CueingModel, data) -> List[Frame]:
    cfg = model.config
    frames = load_frames(data, cfg.width, cfg.height) if isinstance(data, DatasetManifest) else list(data)
    for f in frames:
        if f.image.shape != (3, cfg.height, cfg.width):
            raise ValueError(f"frame {f.id}: image {f.image.shape} does not match model input (3, {cfg.height}, {cfg.width})")
    return frames


def training_arrays(model: CueingModel, frames: Sequence[Frame]):
    X = np.stack([f.image for f in frames]).astype(model.dtype)
    Y = np.stack([downsample_gaze(f.gaze, model.config.tokens) for f in frames]).astype(model.dtype)
    return X, Y


def train(model: CueingModel, data: Union[DatasetManifest, Sequence[Frame]], cfg: TrainConfig, callback=None):
    """Fit ``model`` in place with Adam on BCE against downsampled gaze.

    Returns ``(model, history)`` where history holds the mean batch loss of
    each epoch.  ``callback(epoch, model)`` runs every ``cfg.eval_every``
    epochs when set.
    """
    cfg.validate()
    frames = _as_frames(model, data)
    if cfg.drop_empty_gaze:
        frames = [f for f in frames if np.any(f.gaze > 0)]
    if not frames:
        raise ValueError("cannot train on an empty dataset")
    X, Y = training_arrays(model, frames)
    model.freeze(cfg.freeze_mask)
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    n = len(frames)
    epochs = cfg.epochs
    if cfg.steps is not None:
        epochs = math.ceil(cfg.steps / math.ceil(n / cfg.batch_size))
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            if cfg.steps is not None and state.step >= cfg.steps:
                break
            idx = order[start : start + cfg.batch_size]
            loss, grads = model.loss_and_grads(X[idx], Y[idx])
            adam_step(model.params, grads, state)
            total += loss * len(idx)
            seen += len(idx)
        if seen:
            history.append(total / seen)
            log.info("epoch %d loss %.6f", epoch + 1, history[-1])
        if callback and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            callback(epoch + 1, model)
    return model, history


def mean_loss(model: CueingModel, data) -> float:
    X, Y = training_arrays(model, _as_frames(model, data))
    return model.loss(X, Y)


def sample_finetune_subset(manifest: DatasetManifest, fraction: float = 0.02, seed: int = 0) -> DatasetManifest:
    """ceil(fraction * N) entries drawn uniformly without replacement, in manifest order."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(manifest)
    if n == 0:
        raise ValueError("cannot sample from an empty manifest")
    k = min(n, math.ceil(round(fraction * n, 9)))
    idx = np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
    return manifest.subset(int(i) for i in idx)


# -- evaluation ---------------------------------------------------------------------


@dataclass(frozen=True)
class RenderParams:
    """How point predictions become full-resolution maps for scoring.

    ``normalize`` rescales each predicted map to peak 1 before the focus rule
    (point values are per-token means, so raw maps rarely reach 0.5).
    """

    sigma: Optional[float] = None
    kind: str = "bilinear"
    normalize: bool = True
    threshold: float = M.FOCUS_THRESHOLD
    auc_variant: str = "roc_objects"


def predict_map(model: CueingModel, image: np.ndarray, params: RenderParams = RenderParams()) -> np.ndarray:
    cfg = model.config
    points = model.predict(image)
    sigma = default_sigma(cfg.width) if params.sigma is None else params.sigma
    m = upsample_points(points, cfg.tokens, cfg.height, cfg.width, sigma, params.kind)
    return normalize_max(m) if params.normalize else m


def evaluate(model: CueingModel, data, params: RenderParams = RenderParams(), threads: int = 1, return_maps: bool = False):
    """Score the model on every frame; object metrics pool all objects,
    pixel metrics average over frames."""
    if params.auc_variant not in ("roc_objects", "pixel_roc"):
        raise ValueError(f"unknown AUC variant {params.auc_variant!r}")
    frames = _as_frames(model, data)
    if not frames:
        raise ValueError("cannot evaluate an empty dataset")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            maps = list(pool.map(lambda f: predict_map(model, f.image, params), frames))
    else:
        maps = [predict_map(model, f.image, params) for f in frames]

    records = []
    scores, pred, truth = [], [], []
    pixel_aucs = []
    for f, m in zip(frames, maps):
        kl, cc = M.pixel_level_metrics(m, f.gaze)
        objs = M.object_scores(m, f.gaze, f.boxes, params.threshold)
        s = [o[0] for o in objs]
        p = np.array([o[1] for o in objs], dtype=bool)
        t = np.array([o[2] for o in objs], dtype=bool)
        scores += s
        pred += list(p)
        truth += list(t)
        if params.auc_variant == "pixel_roc":
            pixel_aucs.append(M.pixel_auc(m, f.gaze, params.threshold))
        records.append(
            M.FrameRecord(
                f.id, kl, cc, len(objs),
                int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)),
            )
        )
    obj = M.confusion_metrics(pred, truth, scores)
    auc = obj.auc
    if params.auc_variant == "pixel_roc":
        valid = [a for a in pixel_aucs if a is not None]
        auc = float(np.mean(valid)) if valid else None
    ccs = [r.cc for r in records if r.cc is not None]
    report = M.MetricReport(
        accuracy=obj.accuracy,
        precision=obj.precision,
        recall=obj.recall,
        f1=obj.f1,
        auc=auc,
        kl=float(np.mean([r.kl for r in records])),
        cc=float(np.mean(ccs)) if ccs else None,
        n_objects=obj.n_objects,
        n_frames=len(records),
        auc_variant=params.auc_variant,
        frames=records,
    )
    return (report, maps) if return_maps else report
