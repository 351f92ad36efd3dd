import dataclasses

import numpy as np
import pytest

from cueing import metrics as M
from cueing.data import BBox, DatasetManifest, Frame, ManifestEntry, load_frames
from cueing.model import CueingModel, ModelConfig
from cueing.train import (
    RenderParams,
    TrainConfig,
    evaluate,
    mean_loss,
    sample_finetune_subset,
    train,
)

from conftest import SMALL


@pytest.fixture(scope="module")
def frames(small_dataset):
    return load_frames(small_dataset, 64, 64)


def _changed(model, before):
    return {k for k, v in before.items() if not np.array_equal(v, model.params[k].value)}


def test_lr_zero_keeps_params(frames):
    m = CueingModel.init(SMALL, seed=0)
    before = m.params.snapshot()
    train(m, frames, TrainConfig(epochs=2, batch_size=2, lr=0.0))
    assert not _changed(m, before)


def test_training_reduces_loss(frames):
    m = CueingModel.init(SMALL, seed=0)
    start = mean_loss(m, frames)
    _, hist = train(m, frames, TrainConfig(epochs=30, batch_size=4, lr=3e-3))
    assert len(hist) == 30 and hist[-1] < start
    assert mean_loss(m, frames) < start


@pytest.mark.parametrize(
    "mask,expected",
    [
        ("all_except_linear", lambda n: n.startswith("head.")),
        ("attention", lambda n: not n.startswith("encoder.")),
        ("none", lambda n: True),
    ],
)
def test_freeze_masks(frames, mask, expected):
    m = CueingModel.init(SMALL, seed=1)
    before = m.params.snapshot()
    train(m, frames, TrainConfig(epochs=3, batch_size=2, freeze_mask=mask))
    changed = _changed(m, before)
    for name in before:
        if not expected(name):
            assert name not in changed
    assert "head.weight" in changed


def test_steps_cap_and_history(frames):
    m = CueingModel.init(SMALL, seed=0)
    _, hist = train(m, frames, TrainConfig(epochs=100, batch_size=3, steps=5))
    assert len(hist) == 3  # two steps per epoch over 4 frames


def test_train_errors(frames):
    m = CueingModel.init(SMALL, seed=0)
    with pytest.raises(ValueError, match="empty"):
        train(m, [], TrainConfig())
    big = CueingModel.init(dataclasses.replace(SMALL, width=128), seed=0)
    with pytest.raises(ValueError, match="does not match"):
        train(big, frames, TrainConfig())
    for bad in (TrainConfig(batch_size=0), TrainConfig(epochs=0), TrainConfig(freeze_mask="x")):
        with pytest.raises(ValueError):
            bad.validate()


def test_drop_empty_gaze(frames):
    empty = Frame(frames[0].image, np.zeros_like(frames[0].gaze), [], "empty")
    with pytest.raises(ValueError, match="empty"):
        train(CueingModel.init(SMALL, seed=0), [empty], TrainConfig(drop_empty_gaze=True))
    train(CueingModel.init(SMALL, seed=0), [empty], TrainConfig(epochs=1))


def test_training_is_seed_deterministic(frames):
    runs = []
    for _ in range(2):
        m = CueingModel.init(SMALL, seed=4)
        train(m, frames, TrainConfig(epochs=3, batch_size=2, seed=9))
        runs.append(m.params.snapshot())
    assert all(np.array_equal(runs[0][k], runs[1][k]) for k in runs[0])


def _manifest(n):
    return DatasetManifest(".", [ManifestEntry(f"{i}.png", f"g{i}.png") for i in range(n)])


def test_finetune_subset_sizes():
    assert len(sample_finetune_subset(_manifest(100), 0.02, seed=0)) == 2
    assert len(sample_finetune_subset(_manifest(30), 0.02, seed=0)) == 1
    assert len(sample_finetune_subset(_manifest(7), 1.0, seed=0)) == 7
    a = sample_finetune_subset(_manifest(100), 0.1, seed=5)
    b = sample_finetune_subset(_manifest(100), 0.1, seed=5)
    assert a.entries == b.entries
    idx = [int(e.image_path.split(".")[0]) for e in a]
    assert idx == sorted(idx) and len(set(idx)) == 10
    with pytest.raises(ValueError):
        sample_finetune_subset(_manifest(0))
    with pytest.raises(ValueError):
        sample_finetune_subset(_manifest(5), 0.0)


# -- evaluation ----------------------------------------------------------------------


class StubModel:
    """Returns fixed point vectors, one per call, in order."""

    def __init__(self, cfg, outputs):
        self.config = cfg
        self.outputs = list(outputs)
        self.dtype = np.float64

    def predict(self, image):
        return self.outputs.pop(0)


# token 0 weight along an 8-pixel axis split into 2 tokens, anchored at centres 1.5 and 5.5
W0 = np.array([1, 1, 0.875, 0.625, 0.375, 0.125, 0, 0])
W1 = 1 - W0


def test_two_frame_fixture():
    cfg = ModelConfig(tokens=4, width=8, height=8)
    img = np.zeros((3, 8, 8))
    a, b = BBox("car", 0, 0, 2, 2), BBox("bus", 6, 6, 8, 8)
    g1 = np.zeros((8, 8))
    g1[0, 0] = 0.9
    g2 = np.zeros((8, 8))
    g2[1, 1] = 0.8
    g2[7, 7] = 1.0
    frames = [Frame(img, g1, [a, b], "f1"), Frame(img, g2, [a, b], "f2")]
    stub = StubModel(cfg, [np.array([1.0, 0, 0, 0]), np.array([0, 0, 0, 1.0])])
    report = evaluate(stub, frames, RenderParams(sigma=0))
    # frame 1: a predicted and truly focused (tp), b neither (tn)
    # frame 2: a missed (fn), b hit (tp)
    assert (report.n_objects, report.n_frames) == (4, 2)
    assert report.accuracy == 75.0 and report.precision == 100.0
    assert report.recall == pytest.approx(200 / 3) and report.f1 == pytest.approx(80.0)
    # positive scores 1, 0, 1 against the negative 0
    assert report.auc == pytest.approx(2.5 / 3)
    m1, m2 = np.outer(W0, W0), np.outer(W1, W1)
    assert report.kl == pytest.approx((M.kl_divergence(m1, g1) + M.kl_divergence(m2, g2)) / 2, abs=1e-12)
    assert report.cc == pytest.approx((M.correlation(m1, g1) + M.correlation(m2, g2)) / 2, abs=1e-12)
    assert [(r.tp, r.fp, r.tn, r.fn) for r in report.frames] == [(1, 0, 1, 0), (1, 0, 0, 1)]


def test_single_frame_aggregate_equals_frame(small_dataset):
    m = CueingModel.init(dataclasses.replace(SMALL), seed=0)
    one = small_dataset.subset([0])
    r = evaluate(m, one)
    f = r.frames[0]
    assert r.n_frames == 1 and r.kl == f.kl and r.cc == f.cc and r.n_objects == f.n_objects


def test_evaluate_deterministic_and_threads(small_dataset):
    m = CueingModel.init(SMALL, seed=0)
    a = evaluate(m, small_dataset)
    b = evaluate(m, small_dataset)
    c = evaluate(m, small_dataset, threads=3)
    assert a.to_text() == b.to_text() == c.to_text()
    assert a.frames_jsonl() == c.frames_jsonl()


def test_evaluate_variants(small_dataset):
    m = CueingModel.init(SMALL, seed=0)
    r = evaluate(m, small_dataset, RenderParams(auc_variant="pixel_roc", kind="bicubic"))
    assert r.auc_variant == "pixel_roc" and (r.auc is None or 0 <= r.auc <= 1)
    assert r.kl >= -1e-6 and (r.cc is None or -1 <= r.cc <= 1)
    with pytest.raises(ValueError):
        evaluate(m, small_dataset, RenderParams(auc_variant="judd"))
    with pytest.raises(ValueError):
        evaluate(m, [])
