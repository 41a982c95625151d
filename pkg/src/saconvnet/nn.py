"""Layers and the assembled self-attention-augmented ConvNet.

Every spatial layer takes channels-last input, either a single sample
``[H, W, D]`` or a batch ``[B, H, W, D]``, and returns the same rank.

Pipeline of :func:`forward`::

    [AAConv -> ReLU -> maxpool -> dropout] x blocks
        -> flatten -> highway (optional) -> dense -> softmax
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionError
from .tensor import GradTape, Tensor, as_tensor, concat, matmul, mul, record_op, relu, reshape, sigmoid, softmax, tanh

ARCHITECTURES = ("convnet", "saconvnet", "saconvnet-hw")


@dataclass(frozen=True)
class ModelConfig:
    input_h: int = 15
    input_w: int = 35
    input_d: int = 2
    blocks: int = 2
    total_filters_per_block: int = 16
    attn_channels: int = 4
    num_heads: int = 2
    d_k: int = 4
    kernel_size: int = 3
    pool_size: int = 2
    dropout_rate: float = 0.25
    num_classes: int = 2
    use_highway: bool = True

    def __post_init__(self):
        for name in ("input_h", "input_w", "input_d", "blocks", "total_filters_per_block", "d_k", "kernel_size", "pool_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be positive, got {self.num_heads}")
        if not 0 <= self.attn_channels < self.total_filters_per_block:
            raise ConfigError(
                f"attn_channels={self.attn_channels} must lie in [0, {self.total_filters_per_block})"
            )
        if self.attn_channels % self.num_heads:
            raise ConfigError(f"attn_channels={self.attn_channels} not divisible by num_heads={self.num_heads}")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        h, w = self.input_h, self.input_w
        for _ in range(self.blocks):
            h, w = h // self.pool_size, w // self.pool_size
            if h < 1 or w < 1:
                raise ConfigError("pooling reduces the grid to nothing; use fewer blocks or a smaller pool")

    @property
    def d_v(self) -> int:
        return self.attn_channels // self.num_heads

    @property
    def conv_channels(self) -> int:
        return self.total_filters_per_block - self.attn_channels

    @property
    def pooled_shape(self) -> tuple[int, int, int]:
        h, w = self.input_h, self.input_w
        for _ in range(self.blocks):
            h, w = h // self.pool_size, w // self.pool_size
        return h, w, self.total_filters_per_block

    @property
    def highway_units(self) -> int:
        """Flattened feature count entering the highway/dense head."""
        return int(np.prod(self.pooled_shape))

    @classmethod
    def for_arch(cls, arch: str, **overrides) -> "ModelConfig":
        """Preset for one of :data:`ARCHITECTURES`.

        ``convnet`` is the same network with no attention channels and no
        highway layer. The fields that define an architecture win over
        ``overrides``, so one override set can serve all three.
        """
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {arch!r}; expected one of {', '.join(ARCHITECTURES)}")
        base = dict(overrides)
        base["use_highway"] = arch == "saconvnet-hw"
        if arch == "convnet":
            base["attn_channels"] = 0
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Name -> shape for every learnable tensor, in canonical order."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    k, d_in = cfg.kernel_size, cfg.input_d
    for i in range(cfg.blocks):
        p = f"block{i}"
        shapes[f"{p}.conv.kernel"] = (k, k, d_in, cfg.conv_channels)
        shapes[f"{p}.conv.bias"] = (cfg.conv_channels,)
        if cfg.attn_channels:
            for h in range(cfg.num_heads):
                shapes[f"{p}.attn.head{h}.w_q"] = (d_in, cfg.d_k)
                shapes[f"{p}.attn.head{h}.w_k"] = (d_in, cfg.d_k)
                shapes[f"{p}.attn.head{h}.w_v"] = (d_in, cfg.d_v)
            shapes[f"{p}.attn.w_mh"] = (cfg.attn_channels, cfg.attn_channels)
        d_in = cfg.total_filters_per_block
    f = cfg.highway_units
    if cfg.use_highway:
        shapes["highway.w_h"] = (f, f)
        shapes["highway.b_h"] = (f,)
        shapes["highway.w_t"] = (f, f)
        shapes["highway.b_t"] = (f,)
    shapes["dense.w"] = (f, cfg.num_classes)
    shapes["dense.b"] = (cfg.num_classes,)
    return shapes


class ModelParams(OrderedDict):
    """Ordered name -> float64 array mapping whose shapes match a config."""

    def __init__(self, cfg: ModelConfig, arrays: Mapping[str, np.ndarray]):
        super().__init__()
        expected = parameter_shapes(cfg)
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ConfigError(f"parameter names do not match config (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, shape in expected.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"parameter {name} has shape {arr.shape}, config requires {shape}")
            self[name] = arr
        self.config = cfg

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if name.endswith("conv.kernel"):
        area = shape[0] * shape[1]
        return area * shape[2], area * shape[3]
    return shape[0], shape[1]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, limit sqrt(6 / (fan_in + fan_out)); biases zero.

    The output dense weights start at zero so training begins from the
    uniform prediction. He-scaled weights and a random output layer made
    the first lr=1e-2 Adam steps swing the logits by tens of units, which
    silenced every ReLU in block 1 on some seeds. The highway gate bias
    starts at -1 so the layer initially favours carrying its input through.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(cfg).items():
        if len(shape) == 1:
            arrays[name] = np.full(shape, -1.0) if name == "highway.b_t" else np.zeros(shape)
        elif name == "dense.w":
            arrays[name] = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(name, shape)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(cfg, arrays)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _batched(x: Tensor, rank: int) -> tuple[Tensor, bool]:
    if x.ndim == rank:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != rank + 1:
        raise DimensionError(f"expected a rank-{rank} sample or rank-{rank + 1} batch, got shape {x.shape}")
    return x, False


def _unbatched(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x, kernel, bias) -> Tensor:
    """Stride-1 convolution with zero same-padding (cross-correlation form)."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be [K,K,D_in,D_out] with odd K, got {kernel.shape}")
    if bias.shape != (kernel.shape[3],):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match kernel {kernel.shape}")
    xb, squeeze = _batched(x, 3)
    if xb.shape[-1] != kernel.shape[2]:
        raise DimensionError(f"conv2d: kernel depth {kernel.shape[2]} does not match input depth {xb.shape[-1]}")
    xd = np.ascontiguousarray(xb.data)
    kd = np.ascontiguousarray(kernel.data)
    y = kernels.conv2d_forward(xd, kd, bias.data)

    def backward(g):
        gx, gk, gb = kernels.conv2d_backward(xd, kd, np.ascontiguousarray(g))
        return gx, gk, gb

    return _unbatched(record_op(y, (xb, kernel, bias), backward), squeeze)


def maxpool(x, p: int) -> Tensor:
    """Non-overlapping p x p max-pool; rows/cols past the last full window are dropped."""
    x = as_tensor(x)
    xb, squeeze = _batched(x, 3)
    h, w = xb.shape[1], xb.shape[2]
    if p < 1 or p > h or p > w:
        raise DimensionError(f"maxpool: window {p} does not fit spatial shape {(h, w)}")
    xd = np.ascontiguousarray(xb.data)
    y, idx = kernels.maxpool_forward(xd, p)
    shape = xd.shape
    out = record_op(y, (xb,), lambda g: (kernels.maxpool_backward(np.ascontiguousarray(g), idx, shape, p),))
    return _unbatched(out, squeeze)


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity at inference or when rate is 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    return mul(x, Tensor(keep / (1.0 - rate), _copy=False))


def dense(x, w, b) -> Tensor:
    return matmul(x, w) + b


def highway(x, w_h, b_h, w_t, b_t) -> Tensor:
    """Gated highway layer ``T * H(x) + (1 - T) * x``.

    ``H = tanh(x W_h + b_h)`` is the transform and ``T = sigmoid(x W_t + b_t)``
    the gate; both weight matrices must be square.
    """
    x, w_h, b_h, w_t, b_t = (as_tensor(v) for v in (x, w_h, b_h, w_t, b_t))
    f = x.shape[-1]
    for name, w in (("w_h", w_h), ("w_t", w_t)):
        if w.shape != (f, f):
            raise ConfigError(f"highway: {name} must be square {(f, f)}, got {w.shape}")
    for name, b in (("b_h", b_h), ("b_t", b_t)):
        if b.shape != (f,):
            raise ConfigError(f"highway: {name} must have shape {(f,)}, got {b.shape}")
    transform = tanh(matmul(x, w_h) + b_h)
    gate = sigmoid(matmul(x, w_t) + b_t)
    return gate * transform + (1.0 - gate) * x


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """``softmax(q k^T) v`` over ``[B, T, .]`` operands as one tape node.

    ``q`` must already carry the 1/sqrt(d_k) factor. Returns the output and
    the (untracked) attention weights ``[B, T, T]``.
    """
    qd, kd, vd = (np.ascontiguousarray(t.data) for t in (q, k, v))
    out, weights = kernels.attention_forward(qd, kd, vd)

    def backward(g):
        return kernels.attention_backward(qd, kd, vd, weights, out, np.ascontiguousarray(g))

    return record_op(out, (q, k, v), backward), Tensor(weights, _copy=False)


def attention_head(x_tokens, w_q, w_k, w_v, *, return_weights: bool = False, fused: bool = True):
    """One scaled dot-product self-attention head over ``[T, D]`` (or ``[B, T, D]``) tokens.

    ``fused=False`` builds the head from the generic matmul/softmax ops; the
    default routes the T x T part through a single kernel.
    """
    x, w_q, w_k, w_v = (as_tensor(v) for v in (x_tokens, w_q, w_k, w_v))
    d = x.shape[-1]
    if x.ndim not in (2, 3) or x.shape[-2] < 1:
        raise DimensionError(f"attention_head: tokens must be [T,D] or [B,T,D] with T>=1, got {x.shape}")
    if w_q.shape[0] != d or w_k.shape[0] != d or w_v.shape[0] != d:
        raise DimensionError(
            f"attention_head: projections {w_q.shape}, {w_k.shape}, {w_v.shape} do not take depth {d}"
        )
    if w_q.shape != w_k.shape:
        raise DimensionError(f"attention_head: query {w_q.shape} and key {w_k.shape} projections differ")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    q = matmul(x, w_q) * (1.0 / math.sqrt(w_q.shape[1]))
    k = matmul(x, w_k)
    v = matmul(x, w_v)
    if fused:
        out, weights = scaled_dot_attention(q, k, v)
    else:
        weights = softmax(matmul(q, k.transpose((0, 2, 1))), axis=-1)
        out = matmul(weights, v)
    if squeeze:
        out, weights = reshape(out, out.shape[1:]), reshape(weights, weights.shape[1:])
    return (out, weights) if return_weights else out


def multi_head_attention(x, heads: Sequence[tuple], w_mh, *, fused: bool = True) -> Tensor:
    """Self-attention over the H*W spatial positions of ``x``.

    ``heads`` holds one ``(w_q, w_k, w_v)`` triple per head. Head outputs
    are concatenated on the feature axis, projected by ``w_mh`` and folded
    back to ``[H, W, attn_channels]``.
    """
    x = as_tensor(x)
    w_mh = as_tensor(w_mh)
    xb, squeeze = _batched(x, 3)
    b, h, w, d = xb.shape
    tokens = reshape(xb, (b, h * w, d))
    outs = [attention_head(tokens, *head, fused=fused) for head in heads]
    if not outs:
        raise ConfigError("multi_head_attention needs at least one head")
    joined = concat(outs, axis=-1)
    if w_mh.shape[0] != joined.shape[-1]:
        raise DimensionError(f"multi_head_attention: w_mh {w_mh.shape} does not take {joined.shape[-1]} features")
    proj = matmul(joined, w_mh)
    return _unbatched(reshape(proj, (b, h, w, w_mh.shape[1])), squeeze)


def aaconv(x, kernel, bias, heads: Sequence[tuple] = (), w_mh=None) -> Tensor:
    """Attention-augmented convolution: conv channels followed by attention channels."""
    conv = conv2d(x, kernel, bias)
    if w_mh is None:
        return conv
    return concat([conv, multi_head_attention(x, heads, w_mh)], axis=-1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class SAConvNet:
    config: ModelConfig
    params: ModelParams

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "SAConvNet":
        return cls(config, init_params(config, seed))

    def weights(self, tape: GradTape | None = None) -> dict[str, Tensor]:
        """Parameters as tensors; watched on ``tape`` when one is given."""
        if tape is None:
            return {k: Tensor(v.view(), _copy=False) for k, v in self.params.items()}
        return {k: tape.watch(v, name=k) for k, v in self.params.items()}

    def forward(self, x, training: bool = False, rng=None, weights=None, logits: bool = False) -> Tensor:
        return forward(self, x, training=training, rng=rng, weights=weights, logits=logits)


def block_forward(cfg: ModelConfig, wts: Mapping[str, Tensor], i: int, x: Tensor, training: bool, rng) -> Tensor:
    p = f"block{i}"
    heads, w_mh = (), None
    if cfg.attn_channels:
        heads = [
            (wts[f"{p}.attn.head{h}.w_q"], wts[f"{p}.attn.head{h}.w_k"], wts[f"{p}.attn.head{h}.w_v"])
            for h in range(cfg.num_heads)
        ]
        w_mh = wts[f"{p}.attn.w_mh"]
    y = relu(aaconv(x, wts[f"{p}.conv.kernel"], wts[f"{p}.conv.bias"], heads, w_mh))
    y = maxpool(y, cfg.pool_size)
    return dropout(y, cfg.dropout_rate, training, rng)


def head_forward(cfg: ModelConfig, wts: Mapping[str, Tensor], features: Tensor, logits: bool = False) -> Tensor:
    flat = reshape(features, (features.shape[0], -1))
    if cfg.use_highway:
        flat = highway(flat, wts["highway.w_h"], wts["highway.b_h"], wts["highway.w_t"], wts["highway.b_t"])
    out = dense(flat, wts["dense.w"], wts["dense.b"])
    return out if logits else softmax(out, axis=-1)


def forward(model: SAConvNet, x, training: bool = False, rng=None, weights=None, logits: bool = False) -> Tensor:
    """Class probabilities ``[num_classes]`` for one sample or ``[B, num_classes]`` for a batch.

    ``logits=True`` stops before the final softmax.
    """
    cfg = model.config
    wts = weights if weights is not None else model.weights()
    x = as_tensor(x)
    expected = (cfg.input_h, cfg.input_w, cfg.input_d)
    xb, squeeze = _batched(x, 3)
    if xb.shape[1:] != expected:
        raise DimensionError(f"forward: input shape {x.shape} does not match config {expected}")
    y = xb
    for i in range(cfg.blocks):
        y = block_forward(cfg, wts, i, y, training, rng)
    return _unbatched(head_forward(cfg, wts, y, logits), squeeze)
