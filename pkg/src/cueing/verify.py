"""Finite-difference verification of every primitive and of the full model.

Each check draws a random projection ``R`` and differentiates the scalar
``sum(op(inputs) * R)``; the analytic side is the op's backward applied to R.
"""

from __future__ import annotations

import time
from typing import Callable, Dict, List, Tuple

import numpy as np

from .model import CueingModel, ModelConfig, activation_digest
from .nn import functional as F
from .nn import layers as L
from .nn.gradcheck import GradCheckReport, grad_check

PRIMITIVE_TOL = 1e-4
MODEL_TOL = 1e-3
TINY_CONFIG = ModelConfig(tokens=16, width=64, height=64, pool_h=4, pool_w=4, heads=2)


def _projected(forward, inputs, backward, rng, tol, pattern=None, **kw) -> GradCheckReport:
    out = forward(inputs)
    R = rng.standard_normal(np.shape(out))
    analytic = backward(R)
    f = lambda: float(np.sum(forward(inputs) * R))
    return grad_check(f, inputs, analytic, tol, rng=rng, pattern=pattern, **kw)


def check_conv2d(rng, tol=PRIMITIVE_TOL):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    inputs = {
        "x": rng.standard_normal((2, 3, 7, 6)),
        "weight": rng.standard_normal((4, 3, 3, 3)),
        "bias": rng.standard_normal(4),
    }
    fwd = lambda p: F.conv2d_forward(p["x"], p["weight"], p["bias"], stride, pad)[0]

    def bwd(R):
        _, cache = F.conv2d_forward(inputs["x"], inputs["weight"], inputs["bias"], stride, pad)
        dx, dw, db = F.conv2d_backward(R, cache)
        return {"x": dx, "weight": dw, "bias": db}

    return _projected(fwd, inputs, bwd, rng, tol)


def check_linear(rng, tol=PRIMITIVE_TOL):
    inputs = {"x": rng.standard_normal((3, 4, 5)), "weight": rng.standard_normal((6, 5)), "bias": rng.standard_normal(6)}
    fwd = lambda p: F.linear_forward(p["x"], p["weight"], p["bias"])[0]

    def bwd(R):
        dx, dw, db = F.linear_backward(R, F.linear_forward(inputs["x"], inputs["weight"], inputs["bias"])[1])
        return {"x": dx, "weight": dw, "bias": db}

    return _projected(fwd, inputs, bwd, rng, tol)


def _unary(forward, backward, x, rng, tol, pattern=None):
    inputs = {"x": x}
    fwd = lambda p: forward(p["x"])[0]
    bwd = lambda R: {"x": backward(R, forward(inputs["x"])[1])}
    return _projected(fwd, inputs, bwd, rng, tol, pattern=pattern)


def check_relu(rng, tol=PRIMITIVE_TOL):
    x = rng.standard_normal((4, 5))
    # keep away from the kink at 0
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    return _unary(F.relu_forward, F.relu_backward, x, rng, tol)


def check_sigmoid(rng, tol=PRIMITIVE_TOL):
    return _unary(F.sigmoid_forward, F.sigmoid_backward, 3 * rng.standard_normal((4, 5)), rng, tol)


def check_softmax(rng, tol=PRIMITIVE_TOL):
    axis = int(rng.integers(0, 2))
    return _unary(lambda x: F.softmax_forward(x, axis), F.softmax_backward, rng.standard_normal((4, 5)), rng, tol)


def check_mean(rng, tol=PRIMITIVE_TOL):
    axes = [(0,), (1, 2), (0, 1, 2), (-1,)][int(rng.integers(0, 4))]
    return _unary(lambda x: F.mean_forward(x, axes), F.mean_backward, rng.standard_normal((3, 4, 5)), rng, tol)


def check_layer_norm(rng, tol=PRIMITIVE_TOL):
    inputs = {"x": rng.standard_normal((3, 6)), "gain": rng.standard_normal(6), "bias": rng.standard_normal(6)}
    fwd = lambda p: F.layer_norm_forward(p["x"], p["gain"], p["bias"])[0]

    def bwd(R):
        dx, dg, db = F.layer_norm_backward(R, F.layer_norm_forward(inputs["x"], inputs["gain"], inputs["bias"])[1])
        return {"x": dx, "gain": dg, "bias": db}

    return _projected(fwd, inputs, bwd, rng, tol)


def check_adaptive_pool(rng, tol=PRIMITIVE_TOL):
    h, w = int(rng.integers(2, 9)), int(rng.integers(2, 9))
    return _unary(
        lambda x: F.adaptive_avg_pool_forward(x, 4, 3), F.adaptive_avg_pool_backward, rng.standard_normal((2, h, w)), rng, tol
    )


def check_bce(rng, tol=PRIMITIVE_TOL):
    inputs = {"yhat": rng.uniform(0.05, 0.95, 16)}
    y = rng.uniform(0, 1, 16)
    return grad_check(lambda: F.bce_loss(inputs["yhat"], y), inputs, {"yhat": F.bce_backward(inputs["yhat"], y)}, tol, rng=rng)


def check_bce_logits(rng, tol=PRIMITIVE_TOL):
    inputs = {"z": 3 * rng.standard_normal(16)}
    y = rng.uniform(0, 1, 16)
    return grad_check(
        lambda: F.bce_with_logits(inputs["z"], y), inputs, {"z": F.bce_with_logits_backward(inputs["z"], y)}, tol, rng=rng
    )


def _random_params(shapes, rng, scale=0.5):
    return {k: scale * rng.standard_normal(s) for k, s in shapes.items()}


def check_encoder_layer(rng, tol=PRIMITIVE_TOL, heads=2, symmetric_qk=False):
    d, T = 8, 5
    params = _random_params(L.encoder_param_shapes(d, 2 * d, symmetric_qk), rng)
    params["ln1.gain"] += 1.0
    params["ln2.gain"] += 1.0
    inputs = {"x": rng.standard_normal((2, T, d)), **params}
    p_only = lambda p: {k: v for k, v in p.items() if k != "x"}
    fwd = lambda p: L.encoder_layer_forward(p["x"], p_only(p), heads, symmetric_qk)[0]

    def bwd(R):
        _, cache = L.encoder_layer_forward(inputs["x"], p_only(inputs), heads, symmetric_qk)
        dx, g = L.encoder_layer_backward(R, cache)
        return {"x": dx, **g}

    pattern = lambda: L.encoder_layer_forward(inputs["x"], p_only(inputs), heads, symmetric_qk)[1][4].tobytes()
    return _projected(fwd, inputs, bwd, rng, tol, pattern=pattern)


def check_channel_attention(rng, tol=PRIMITIVE_TOL, plain=False):
    C = 8
    params = _random_params(L.channel_attention_param_shapes(C, 4, plain), rng)
    inputs = {"v": rng.standard_normal((3, C, 4, 5)), **params}
    p_only = lambda p: {k: v for k, v in p.items() if k != "v"}

    def fwd(p):
        _, vw, _ = L.channel_attention_forward(p["v"], p_only(p), plain)
        return L.channel_mean_forward(vw)[0]

    def bwd(R):
        _, vw, cache = L.channel_attention_forward(inputs["v"], p_only(inputs), plain)
        dvw = L.channel_mean_backward(R, L.channel_mean_forward(vw)[1])
        dv, g = L.channel_attention_backward(dvw, cache)
        return {"v": dv, **g}

    def pattern():
        extra = L.channel_attention_forward(inputs["v"], p_only(inputs), plain)[2][2]
        if extra is None:
            return b""
        ca, cm, arg = extra
        return ca[1].tobytes() + cm[1].tobytes() + arg.tobytes()

    return _projected(fwd, inputs, bwd, rng, tol, pattern=pattern)


PRIMITIVES: Dict[str, Callable] = {
    "conv2d": check_conv2d,
    "linear": check_linear,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "softmax": check_softmax,
    "mean": check_mean,
    "layer_norm": check_layer_norm,
    "adaptive_avg_pool": check_adaptive_pool,
    "bce_loss": check_bce,
    "bce_with_logits": check_bce_logits,
    "encoder_layer": check_encoder_layer,
    "encoder_layer_symmetric_qk": lambda rng, tol=PRIMITIVE_TOL: check_encoder_layer(rng, tol, symmetric_qk=True),
    "channel_attention": check_channel_attention,
    "channel_attention_plain": lambda rng, tol=PRIMITIVE_TOL: check_channel_attention(rng, tol, plain=True),
}


def check_model(config: ModelConfig = TINY_CONFIG, seed: int = 0, tol: float = MODEL_TOL, max_coords=None) -> GradCheckReport:
    """Finite-difference check of the full model's BCE gradient in float64."""
    rng = np.random.default_rng(seed)
    model = CueingModel.init(config, seed=seed, dtype=np.float64)
    x = rng.random((1, 3, config.height, config.width))
    y = rng.random((1, config.tokens))
    _, grads = model.loss_and_grads(x, y)
    state = {}

    def f():
        z, cache = model.forward(x)
        state["pattern"] = activation_digest(cache)
        return F.bce_with_logits(z, y)

    inputs = {p.name: p.value for p in model.params}
    return grad_check(f, inputs, grads, tol, max_coords=max_coords, rng=rng, pattern=lambda: state["pattern"])


def run_suite(seeds: int = 20, model_seeds: int = 1, log=None, start: int = 0) -> List[Tuple[str, GradCheckReport]]:
    """Check every primitive over ``seeds`` seeds and the tiny model over
    ``model_seeds`` seeds, counting up from ``start``."""
    results = []
    for name, check in PRIMITIVES.items():
        for seed in range(start, start + seeds):
            results.append((f"{name}[seed={seed}]", check(np.random.default_rng(seed))))
    for seed in range(start, start + model_seeds):
        t0 = time.perf_counter()
        rep = check_model(seed=seed)
        results.append((f"model[T=16,64x64,seed={seed}]", rep))
        if log:
            log(f"full model check took {time.perf_counter() - t0:.1f}s")
    return results
