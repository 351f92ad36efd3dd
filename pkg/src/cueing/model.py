"""Token-based gaze model: configuration, forward/backward, complexity, checkpoints.

Pipeline for an image batch (B, 3, H, W):

1. coordinate grid (2, H, W) -> 1x1 conv -> (1, H, W), added to every channel
2. tokenize into T patches and unfold to a (B*T, 3, H', W') stack
3. ``conv_layers`` conv+ReLU layers, channel attention, channel mean
4. adaptive average pool to ``pool_h x pool_w`` and fold to (B, T, d)
5. ``layers`` pre-norm transformer encoder layers over the T tokens
6. mean over d, linear T -> T, sigmoid
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import tokenizer as tk
from .nn import functional as F
from .nn import layers as L
from .nn.params import ParamRegistry


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    tokens: int = 256
    width: int = 1280
    height: int = 720
    channels: int = 16
    conv_layers: int = 2
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    pool_h: int = 8
    pool_w: int = 8
    layers: int = 1
    heads: int = 1
    ffn_mult: int = 2
    symmetric_qk: bool = False
    plain_channel_attention: bool = False
    ca_reduction: int = 4
    ln_eps: float = 1e-5
    seed: int = 0

    @property
    def d(self) -> int:
        return self.pool_h * self.pool_w

    @property
    def side(self) -> int:
        return tk.side(self.tokens)

    @property
    def token_hw(self) -> Tuple[int, int]:
        s = self.side
        return self.height // s, self.width // s

    def conv_shapes(self):
        """[(c_in, c_out, h_out, w_out), ...] for each token conv layer."""
        h, w = self.token_hw
        out = []
        cin = 3
        for _ in range(self.conv_layers):
            h = F.conv_out_size(h, self.kernel, self.stride, self.padding)
            w = F.conv_out_size(w, self.kernel, self.stride, self.padding)
            out.append((cin, self.channels, h, w))
            cin = self.channels
        return out

    def validate(self) -> "ModelConfig":
        try:
            tk.side(self.tokens)
        except tk.DimensionError as exc:
            raise ConfigError(f"tokens: {exc}") from None
        if self.tokens & (self.tokens - 1):
            raise ConfigError(f"tokens: T={self.tokens} is not a power of 2")
        s = self.side
        if self.height % s or self.width % s:
            raise ConfigError(
                f"height/width: {self.height}x{self.width} not divisible by sqrt(T)={s}"
            )
        for name in ("channels", "conv_layers", "kernel", "stride", "pool_h", "pool_w", "layers", "heads", "ffn_mult", "ca_reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ConfigError(f"padding: must be >= 0, got {self.padding}")
        if self.d % self.heads:
            raise ConfigError(f"heads: d={self.d} is not divisible by heads={self.heads}")
        for i, (_, _, h, w) in enumerate(self.conv_shapes()):
            if h < 1 or w < 1:
                raise ConfigError(f"conv{i + 1}: token of {self.token_hw} shrinks to {h}x{w}")
        return self

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, object]) -> "ModelConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(values) - set(fields)
        if unknown:
            raise ConfigError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        kwargs = {}
        for k, v in values.items():
            kwargs[k] = _coerce(fields[k].type, v, k)
        return cls(**kwargs)


def _coerce(type_name, value, key):
    if not isinstance(value, str):
        return value
    t = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", "")
    try:
        if t == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {t}") from None
    return value


# -- parameters ------------------------------------------------------------------


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    shapes: Dict[str, tuple] = {"pos_conv.weight": (1, 2, 1, 1), "pos_conv.bias": (1,)}
    for i, (cin, cout, _, _) in enumerate(cfg.conv_shapes(), start=1):
        shapes[f"conv{i}.weight"] = (cout, cin, cfg.kernel, cfg.kernel)
        shapes[f"conv{i}.bias"] = (cout,)
    for k, v in L.channel_attention_param_shapes(cfg.channels, cfg.ca_reduction, cfg.plain_channel_attention).items():
        shapes[f"channel_attention.{k}"] = v
    for layer in range(cfg.layers):
        for k, v in L.encoder_param_shapes(cfg.d, cfg.ffn_mult * cfg.d, cfg.symmetric_qk).items():
            shapes[f"encoder.{layer}.{k}"] = v
    shapes["head.weight"] = (cfg.tokens, cfg.tokens)
    shapes["head.bias"] = (cfg.tokens,)
    return shapes


def param_group(name: str) -> str:
    """One of ``attention``, ``head`` or ``rest``."""
    if name.startswith("encoder."):
        return "attention"
    if name.startswith("head."):
        return "head"
    return "rest"


FREEZE_MASKS = ("none", "attention", "all_except_linear")


def frozen_groups(mask: str) -> Tuple[str, ...]:
    if mask == "none":
        return ()
    if mask == "attention":
        return ("attention",)
    if mask == "all_except_linear":
        return ("attention", "rest")
    raise ConfigError(f"freeze_mask: expected one of {FREEZE_MASKS}, got {mask!r}")


def analytic_param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count, independent of the registry."""
    C, k, d, T = cfg.channels, cfg.kernel, cfg.d, cfg.tokens
    total = 2 + 1
    cin = 3
    for _ in range(cfg.conv_layers):
        total += C * cin * k * k + C
        cin = C
    if cfg.plain_channel_attention:
        total += C
    else:
        hidden = max(C // cfg.ca_reduction, 1)
        total += 2 * C * hidden + hidden + C
    n_proj = 3 if cfg.symmetric_qk else 4
    ffn = cfg.ffn_mult * d
    per_layer = 4 * d + n_proj * (d * d + d) + (ffn * d + ffn) + (d * ffn + d)
    total += cfg.layers * per_layer
    total += T * T + T
    return total


# -- the model --------------------------------------------------------------------


class CueingModel:
    def __init__(self, config: ModelConfig, registry: ParamRegistry):
        self.config = config
        self.params = registry
        self._coords = None

    @classmethod
    def init(cls, config: ModelConfig, seed: Optional[int] = None, dtype=np.float32) -> "CueingModel":
        config = config.validate()
        if seed is not None and seed != config.seed:
            config = dataclasses.replace(config, seed=seed)
        rng = np.random.default_rng(config.seed)
        reg = ParamRegistry()
        for name, shape in param_shapes(config).items():
            if name.endswith(".gain"):
                value = np.ones(shape)
            elif name.endswith(".bias") or len(shape) == 1:
                value = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            reg.add(name, value.astype(dtype))
        return cls(config, reg)

    @property
    def dtype(self):
        return self.params["head.weight"].value.dtype

    def astype(self, dtype) -> "CueingModel":
        self.params.astype(dtype)
        self._coords = None
        return self

    def freeze(self, mask: str) -> None:
        frozen = frozen_groups(mask)
        self.params.set_trainable(lambda n: param_group(n) not in frozen)

    def count_params(self, trainable_only: bool = True) -> int:
        return self.params.count(trainable_only)

    def _coord_grid(self):
        cfg = self.config
        if self._coords is None or self._coords.dtype != self.dtype:
            self._coords = tk.coord_grid(cfg.height, cfg.width, cfg.tokens)[None].astype(self.dtype)
        return self._coords

    # forward / backward

    def forward(self, images: np.ndarray, taps: Optional[dict] = None):
        """Logits (B, T) and a backward cache for images (B, 3, H, W) or (3, H, W).

        If ``taps`` is a dict, intermediate stage outputs are stored in it.
        """
        cfg = self.config
        p = self.params
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (3, cfg.height, cfg.width):
            raise tk.DimensionError(
                f"input stage: expected images of shape (3, {cfg.height}, {cfg.width}), got {x.shape[1:]}"
            )
        B = x.shape[0]
        pos, c_pos = F.conv2d_forward(self._coord_grid(), p["pos_conv.weight"].value, p["pos_conv.bias"].value)
        X = x + pos
        tokens = tk.tokenize(X, cfg.tokens)
        h = tk.unfold(tokens)
        conv_caches = []
        for i in range(1, cfg.conv_layers + 1):
            h, cc = F.conv2d_forward(h, p[f"conv{i}.weight"].value, p[f"conv{i}.bias"].value, cfg.stride, cfg.padding)
            h, cr = F.relu_forward(h)
            conv_caches.append((cc, cr))
        w, vw, c_ca = L.channel_attention_forward(h, p.values("channel_attention."), cfg.plain_channel_attention)
        m, c_cm = L.channel_mean_forward(vw)
        pooled, c_pool = F.adaptive_avg_pool_forward(m, cfg.pool_h, cfg.pool_w)
        seq = tk.fold(pooled.reshape(B * cfg.tokens, cfg.d), cfg.tokens)
        enc_caches = []
        for layer in range(cfg.layers):
            seq, ce = L.encoder_layer_forward(
                seq, p.values(f"encoder.{layer}."), cfg.heads, cfg.symmetric_qk, cfg.ln_eps
            )
            enc_caches.append(ce)
        s, c_mean = F.mean_forward(seq, axes=-1)
        z, c_head = F.linear_forward(s, p["head.weight"].value, p["head.bias"].value)
        if taps is not None:
            taps.update(
                positional=pos[0, 0], encoded=X, tokens=tokens, stack=tk.unfold(tokens),
                features=h, channel_weights=w, token_maps=m, pooled=pooled,
                sequence=seq, token_means=s, logits=z,
            )
        cache = (B, c_pos, conv_caches, c_ca, c_cm, c_pool, enc_caches, c_mean, c_head)
        return z, cache

    def backward(self, dz: np.ndarray, cache) -> Dict[str, np.ndarray]:
        """Gradients of every parameter given dL/dlogits (B, T)."""
        cfg = self.config
        B, c_pos, conv_caches, c_ca, c_cm, c_pool, enc_caches, c_mean, c_head = cache
        g: Dict[str, np.ndarray] = {}
        ds, g["head.weight"], g["head.bias"] = F.linear_backward(dz, c_head)
        dseq = F.mean_backward(ds, c_mean)
        for layer in reversed(range(cfg.layers)):
            dseq, ge = L.encoder_layer_backward(dseq, enc_caches[layer])
            g.update({f"encoder.{layer}.{k}": v for k, v in ge.items()})
        dpooled = dseq.reshape(B * cfg.tokens, cfg.pool_h, cfg.pool_w)
        dm = F.adaptive_avg_pool_backward(dpooled, c_pool)
        dvw = L.channel_mean_backward(dm, c_cm)
        dh, gca = L.channel_attention_backward(dvw, c_ca)
        g.update({f"channel_attention.{k}": v for k, v in gca.items()})
        for i in reversed(range(1, cfg.conv_layers + 1)):
            cc, cr = conv_caches[i - 1]
            dh = F.relu_backward(dh, cr)
            dh, g[f"conv{i}.weight"], g[f"conv{i}.bias"] = F.conv2d_backward(dh, cc)
        dtokens = tk.fold(dh, cfg.tokens)
        dX = tk.untokenize(dtokens)
        dpos = dX.sum(axis=(0, 1))[None, None]
        _, g["pos_conv.weight"], g["pos_conv.bias"] = F.conv2d_backward(dpos, c_pos)
        return g

    def activation_pattern(self, images: np.ndarray) -> bytes:
        """Digest of every ReLU mask and max-pool argmax for ``images``."""
        _, cache = self.forward(images)
        return activation_digest(cache)

    def predict(self, images: np.ndarray) -> np.ndarray:
        """Point vectors in (0, 1): (B, T), or (T,) for a single image."""
        single = np.ndim(images) == 3
        z, _ = self.forward(images)
        y = F.sigmoid(z)
        return y[0] if single else y

    def loss_and_grads(self, images: np.ndarray, targets: np.ndarray):
        """Mean BCE against point-vector targets (B, T) and its gradients."""
        z, cache = self.forward(images)
        targets = np.asarray(targets, dtype=z.dtype).reshape(z.shape)
        loss = F.bce_with_logits(z, targets)
        grads = self.backward(F.bce_with_logits_backward(z, targets), cache)
        return loss, grads

    def loss(self, images: np.ndarray, targets: np.ndarray) -> float:
        z, _ = self.forward(images)
        return F.bce_with_logits(z, np.asarray(targets, dtype=z.dtype).reshape(z.shape))


def activation_digest(cache) -> bytes:
    """Hash of the non-smooth decisions (ReLU masks, argmax) in a forward cache."""
    _, _, conv_caches, c_ca, _, _, enc_caches, _, _ = cache
    parts = [cr for _, cr in conv_caches]
    if c_ca[2] is not None:
        ca, cm, arg = c_ca[2]
        parts += [ca[1], cm[1], arg]
    parts += [ce[4] for ce in enc_caches]
    h = hashlib.sha256()
    for a in parts:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.digest()


def init(config: ModelConfig, seed: Optional[int] = None, dtype=np.float32) -> CueingModel:
    return CueingModel.init(config, seed, dtype)


def count_params(model: CueingModel, trainable_only: bool = True) -> int:
    return model.count_params(trainable_only)


# -- complexity ---------------------------------------------------------------------


def conv_macs(c_in: int, c_out: int, k: int, h: int, w: int, stride: int = 1, padding: int = 0) -> int:
    ho = F.conv_out_size(h, k, stride, padding)
    wo = F.conv_out_size(w, k, stride, padding)
    return c_out * ho * wo * c_in * k * k


@dataclass
class FlopReport:
    """Multiply-accumulate counts for one image; one MAC counts as one op.

    Elementwise additions, activations and comparisons are not counted;
    reductions (means, pooling) count one op per accumulated element.
    """

    stages: Dict[str, int]
    per_token_conv: int

    @property
    def total(self) -> int:
        return sum(self.stages.values())

    @property
    def gmac(self) -> float:
        return self.total / 1e9


def count_flops(model_or_config, input_dims: Optional[Tuple[int, int]] = None) -> FlopReport:
    cfg = model_or_config.config if isinstance(model_or_config, CueingModel) else model_or_config
    if input_dims is not None and tuple(input_dims) != (cfg.width, cfg.height):
        raise ConfigError(f"input dims {input_dims} do not match config {cfg.width}x{cfg.height}")
    T, d, C = cfg.tokens, cfg.d, cfg.channels
    th, tw = cfg.token_hw
    stages: Dict[str, int] = {}
    stages["positional_encoding"] = conv_macs(2, 1, 1, cfg.height, cfg.width)
    stages["tokenize"] = 0
    per_token = 0
    h, w, cin = th, tw, 3
    for _ in range(cfg.conv_layers):
        per_token += conv_macs(cin, C, cfg.kernel, h, w, cfg.stride, cfg.padding)
        h = F.conv_out_size(h, cfg.kernel, cfg.stride, cfg.padding)
        w = F.conv_out_size(w, cfg.kernel, cfg.stride, cfg.padding)
        cin = C
    stages["token_conv"] = T * per_token
    fmap = C * h * w
    if cfg.plain_channel_attention:
        ca = fmap
    else:
        hidden = max(C // cfg.ca_reduction, 1)
        ca = fmap + 2 * (2 * C * hidden) + fmap  # avg accumulate, two MLP passes, gating
    stages["channel_attention"] = T * ca
    stages["channel_mean"] = T * fmap
    ph = F.adaptive_pool_matrix(h, cfg.pool_h)
    pw = F.adaptive_pool_matrix(w, cfg.pool_w)
    stages["token_pool"] = T * int(np.count_nonzero(ph)) * int(np.count_nonzero(pw))
    n_proj = 3 if cfg.symmetric_qk else 4
    ffn = cfg.ffn_mult * d
    per_layer = n_proj * T * d * d + 2 * T * T * d + 2 * T * d * ffn
    stages["encoder"] = cfg.layers * per_layer
    stages["spatial_mean"] = T * d
    stages["head"] = T * T
    return FlopReport(stages, per_token)


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"CUEINGCK"
FORMAT_VERSION = 1


def _config_block(cfg: ModelConfig) -> bytes:
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_config_block(text: str) -> ModelConfig:
    values = {}
    for line in text.splitlines():
        if line:
            k, _, v = line.partition("=")
            values[k] = v
    return ModelConfig.from_dict(values)


def checkpoint_bytes(model: CueingModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    block = _config_block(model.config)
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    params = list(model.params)
    buf.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<B", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: CueingModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model))
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> CueingModel:
    """Read a checkpoint; with ``expected`` the stored config must match it."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a cueing checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (block_len,) = r.unpack("<I")
    cfg = _parse_config_block(r.take(block_len).decode("utf-8"))
    if expected is not None and expected != cfg:
        diff = [
            f"{k} (checkpoint {v!r}, expected {getattr(expected, k)!r})"
            for k, v in cfg.to_dict().items()
            if getattr(expected, k) != v
        ]
        raise ConfigError(f"{path}: config mismatch in " + ", ".join(diff))
    shapes = param_shapes(cfg)
    (n,) = r.unpack("<I")
    reg = ParamRegistry()
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        if name not in shapes:
            raise CheckpointError(f"{path}: unexpected parameter {name!r} for the stored config")
        if tuple(shapes[name]) != tuple(shape):
            raise CheckpointError(f"{path}: parameter {name} has shape {shape}, config implies {shapes[name]}")
        reg.add(name, values.astype(np.float32))
    missing = set(shapes) - set(reg.names())
    if missing:
        raise CheckpointError(f"{path}: missing parameter(s) {', '.join(sorted(missing))}")
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    return CueingModel(cfg, reg)
