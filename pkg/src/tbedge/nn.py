"""MobileNetV3 building blocks and the model builder.

Every layer function here has the signature ``f(ctx, prefix, x, ...) ->
(y, back)``: ``y`` is the forward value and ``back(g)`` maps the upstream
gradient to the input gradient while accumulating parameter gradients into
``ctx.grads``.  Composite blocks chain the ``back`` closures of their parts,
which gives reverse-mode differentiation over the whole network.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .tensor import (
    ConvParams,
    ShapeError,
    acc_dtype,
    add,
    as_tensor,
    conv2d,
    conv2d_backward,
    dense,
    dense_backward,
    global_avg_pool,
    global_avg_pool_backward,
    mul,
    mul_backward,
)

CLASS_NAMES = ("Normal", "Tuberculosis")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

Rounder = Callable[[np.ndarray], np.ndarray]
Back = Callable[[np.ndarray], np.ndarray]


class SpecError(ValueError):
    """Raised when a model specification is internally inconsistent."""

    def __init__(self, message: str, block_index: Optional[int] = None):
        super().__init__(message)
        self.block_index = block_index


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def sigmoid(x):
    """Logistic function, saturating without overflow for large ``|x|``."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return expit(x)


def swish(x):
    """``x * sigmoid(x)``."""
    x = np.asarray(x)
    return x * sigmoid(x)


def hard_swish(x):
    """Piecewise-linear swish approximation, ``x * relu6(x + 3) / 6``."""
    x = np.asarray(x)
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def relu(x):
    x = np.asarray(x)
    return np.maximum(x, 0)


def _relu_grad(x, g):
    return g * (x > 0)


def _swish_grad(x, g):
    s = sigmoid(x)
    return g * (s + x * s * (1.0 - s))


def _hard_swish_grad(x, g):
    d = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
    return g * d.astype(x.dtype, copy=False)


def _sigmoid_grad(x, g):
    s = sigmoid(x)
    return g * s * (1.0 - s)


ACTIVATIONS: Dict[str, Tuple[Callable, Callable]] = {
    "relu": (relu, _relu_grad),
    "swish": (swish, _swish_grad),
    "hard_swish": (hard_swish, _hard_swish_grad),
    "sigmoid": (sigmoid, _sigmoid_grad),
}


def softmax(logits) -> np.ndarray:
    """Row-wise softmax of an ``(N, C)`` array, with max subtraction."""
    z = np.asarray(logits)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# forward context
# --------------------------------------------------------------------------

class Context:
    """Carries parameters, running statistics and gradient sinks through a pass.

    ``rounder``, when given, is applied to the output of every primitive op;
    the mixed-precision path uses it to store activations in half.
    """

    def __init__(self, params: Dict[str, np.ndarray], buffers: Dict[str, np.ndarray],
                 train: bool = False, rounder: Optional[Rounder] = None):
        self.params = params
        self.buffers = buffers
        self.train = train
        self.rounder = rounder
        self.grads: Dict[str, np.ndarray] = {}
        self.op_index = 0

    def q(self, y: np.ndarray) -> np.ndarray:
        self.op_index += 1
        if self.rounder is None:
            return y
        y = self.rounder(y)
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite activation at layer {self.op_index}")
        return y

    def accumulate(self, name: str, g: np.ndarray):
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = g


# --------------------------------------------------------------------------
# primitive layers
# --------------------------------------------------------------------------

def conv_layer(ctx: Context, prefix: str, x, params: ConvParams, bias: bool = False,
               input_grad: bool = True):
    w = ctx.params[prefix + ".weight"]
    b = ctx.params[prefix + ".bias"] if bias else None
    y = ctx.q(conv2d(x, w, b, params))

    def back(g):
        gx, gw, gb = conv2d_backward(g, x, w, params, with_bias=bias, input_grad=input_grad)
        ctx.accumulate(prefix + ".weight", gw)
        if bias:
            ctx.accumulate(prefix + ".bias", gb)
        return gx

    return y, back


def dense_layer(ctx: Context, prefix: str, x):
    w = ctx.params[prefix + ".weight"]
    b = ctx.params[prefix + ".bias"]
    y = ctx.q(dense(x, w, b))

    def back(g):
        gx, gw, gb = dense_backward(g, x, w)
        ctx.accumulate(prefix + ".weight", gw)
        ctx.accumulate(prefix + ".bias", gb)
        return gx

    return y, back


def activation_layer(ctx: Context, x, kind: str):
    if kind in ("swish", "sigmoid"):
        s = expit(x)
        y = ctx.q(x * s if kind == "swish" else s)
        if kind == "swish":
            return y, (lambda g: g * (s + x * s * (1.0 - s)))
        return y, (lambda g: g * s * (1.0 - s))
    f, df = ACTIVATIONS[kind]
    y = ctx.q(f(x))
    return y, (lambda g: df(x, g))


def batch_norm(x, scale, shift, running_mean, running_var, train: bool = False,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel batch normalisation of an NCHW tensor.

    Returns ``(y, new_running_mean, new_running_var, cache)``.  Train mode
    normalises by the batch statistics and folds them into the running
    statistics as an exponential moving average (unbiased variance); infer
    mode uses the running statistics only.  Statistics stay in at least
    single precision.
    """
    c = x.shape[1]
    for name, v in (("scale", scale), ("shift", shift),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if np.shape(v) != (c,):
            raise ShapeError(f"batch_norm {name} has shape {np.shape(v)}, expected ({c},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    dt = acc_dtype(x, scale)
    xw = x.astype(dt, copy=False)
    gamma = np.asarray(scale, dtype=dt)[None, :, None, None]
    beta = np.asarray(shift, dtype=dt)[None, :, None, None]
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = xw.mean(axis=(0, 2, 3))
        centered = xw - mean[None, :, None, None]
        var = np.einsum("nchw,nchw->c", centered, centered) / m
        inv_std = 1.0 / np.sqrt(var + eps)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        new_mean = ((1 - momentum) * running_mean + momentum * mean).astype(running_mean.dtype)
        new_var = ((1 - momentum) * running_var + momentum * unbiased).astype(running_var.dtype)
    else:
        mean = np.asarray(running_mean, dtype=dt)
        inv_std = 1.0 / np.sqrt(np.asarray(running_var, dtype=dt) + eps)
        centered = xw - mean[None, :, None, None]
        new_mean, new_var = running_mean, running_var
    xhat = centered
    xhat *= inv_std[None, :, None, None]
    y = xhat * gamma
    y += beta
    return y, new_mean, new_var, (xhat, inv_std, gamma, train)


def batch_norm_backward(g, cache):
    """Gradients of :func:`batch_norm`: ``(d_input, d_scale, d_shift)``."""
    xhat, inv_std, gamma, train = cache
    g = g.astype(xhat.dtype, copy=False)
    dscale = np.einsum("nchw,nchw->c", g, xhat)
    dshift = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma
    if train:
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        mean_dxhat = (dshift * gamma[0, :, 0, 0] / m)[None, :, None, None]
        mean_dxhat_xhat = (dscale * gamma[0, :, 0, 0] / m)[None, :, None, None]
        dx = xhat * mean_dxhat_xhat
        np.subtract(dxhat, dx, out=dx)
        dx -= mean_dxhat
        dx *= inv_std[None, :, None, None]
    else:
        dx = dxhat * inv_std[None, :, None, None]
    return dx, dscale, dshift


def bn_layer(ctx: Context, prefix: str, x):
    rm_name, rv_name = prefix + ".running_mean", prefix + ".running_var"
    y, nm, nv, cache = batch_norm(
        x, ctx.params[prefix + ".weight"], ctx.params[prefix + ".bias"],
        ctx.buffers[rm_name], ctx.buffers[rv_name], train=ctx.train,
    )
    if ctx.train:
        ctx.buffers[rm_name] = nm
        ctx.buffers[rv_name] = nv
    y = ctx.q(y)

    def back(g):
        gx, gs, gb = batch_norm_backward(g, cache)
        ctx.accumulate(prefix + ".weight", gs)
        ctx.accumulate(prefix + ".bias", gb)
        return gx

    return y, back


def _chain(*backs: Back) -> Back:
    def back(g):
        for b in reversed(backs):
            g = b(g)
        return g
    return back


def conv_bn_act(ctx: Context, prefix: str, x, params: ConvParams, act: Optional[str],
                input_grad: bool = True):
    y, b1 = conv_layer(ctx, prefix + ".conv", x, params, input_grad=input_grad)
    y, b2 = bn_layer(ctx, prefix + ".bn", y)
    if act is None:
        return y, _chain(b1, b2)
    y, b3 = activation_layer(ctx, y, act)
    return y, _chain(b1, b2, b3)


# --------------------------------------------------------------------------
# squeeze-and-excitation
# --------------------------------------------------------------------------

def se_reduced_width(channels: int, reduction: int = 4, divisor: int = 1) -> int:
    """Hidden width of an SE block: ``channels / reduction`` rounded to ``divisor``."""
    if divisor <= 1:
        return max(1, int(round(channels / reduction)))
    return make_divisible(channels / reduction, divisor)


def make_divisible(v: float, divisor: int = 8) -> int:
    """Round ``v`` to a multiple of ``divisor`` without dropping more than 10%."""
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


@dataclass
class SEBlock:
    """Weights of a squeeze-and-excitation block.

    ``w1`` is ``(C, C_reduced)`` and ``w2`` is ``(C_reduced, C)``; both layers
    act on the pooled channel vector as ``z @ w``.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @property
    def reduced(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def zeros(cls, channels: int, reduction: int = 4, dtype=np.float32) -> "SEBlock":
        r = se_reduced_width(channels, reduction)
        return cls(np.zeros((channels, r), dtype), np.zeros(r, dtype),
                   np.zeros((r, channels), dtype), np.zeros(channels, dtype))


def se_layer(ctx: Context, prefix: str, x):
    n, c = x.shape[:2]
    if ctx.params[prefix + ".fc1.weight"].shape[0] != c:
        raise ShapeError(
            f"SE block expects {ctx.params[prefix + '.fc1.weight'].shape[0]} channels, got {c}"
        )
    z = ctx.q(global_avg_pool(x))
    h, b_fc1 = dense_layer(ctx, prefix + ".fc1", z)
    h, b_relu = activation_layer(ctx, h, "relu")
    h, b_fc2 = dense_layer(ctx, prefix + ".fc2", h)
    s, b_sig = activation_layer(ctx, h, "sigmoid")
    s4 = s.reshape(n, c, 1, 1)
    y = ctx.q(mul(x, s4))

    def back(g):
        gx, gs = mul_backward(g, x, s4)
        gs = _chain(b_fc1, b_relu, b_fc2, b_sig)(gs.reshape(n, c))
        gz = gs.reshape(n, c, 1, 1)
        return gx + global_avg_pool_backward(gz, x.shape)

    return y, back


def se_forward(x, block: SEBlock) -> np.ndarray:
    """Rescale each channel of ``x`` by its learned attention weight in (0, 1)."""
    x = as_tensor(x, "se input")
    if x.shape[1] != block.channels:
        raise ShapeError(f"SE block expects {block.channels} channels, got input {x.shape}")
    params = {"se.fc1.weight": block.w1, "se.fc1.bias": block.b1,
              "se.fc2.weight": block.w2, "se.fc2.bias": block.b2}
    y, _ = se_layer(Context(params, {}), "se", x)
    return y


# --------------------------------------------------------------------------
# bottleneck
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BottleneckSpec:
    """Expand 1x1 -> depthwise kxk -> optional SE -> project 1x1."""

    in_channels: int
    out_channels: int
    expansion: int
    kernel: int = 3
    stride: int = 1
    use_se: bool = False
    activation: str = "relu"

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels

    @property
    def has_expand(self) -> bool:
        return self.expansion != self.in_channels

    def validate(self, index: Optional[int] = None):
        where = f"block {index}: " if index is not None else ""
        if min(self.in_channels, self.out_channels, self.expansion) < 1:
            raise SpecError(f"{where}channel counts must be positive", index)
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SpecError(f"{where}kernel must be odd and positive, got {self.kernel}", index)
        if self.stride not in (1, 2):
            raise SpecError(f"{where}stride must be 1 or 2, got {self.stride}", index)
        if self.activation not in ("relu", "swish", "hard_swish"):
            raise SpecError(f"{where}unknown activation {self.activation!r}", index)


def bottleneck_layer(ctx: Context, prefix: str, x, spec: BottleneckSpec):
    backs: List[Back] = []
    h = x
    if spec.has_expand:
        h, b = conv_bn_act(ctx, prefix + ".expand", h, ConvParams(), spec.activation)
        backs.append(b)
    k = spec.kernel
    dw = ConvParams(stride=spec.stride, padding=k // 2, groups=spec.expansion)
    h, b = conv_bn_act(ctx, prefix + ".dw", h, dw, spec.activation)
    backs.append(b)
    if spec.use_se:
        h, b = se_layer(ctx, prefix + ".se", h)
        backs.append(b)
    h, b = conv_bn_act(ctx, prefix + ".project", h, ConvParams(), None)
    backs.append(b)
    branch = _chain(*backs)
    if not spec.residual:
        return h, branch
    y = ctx.q(add(x, h))
    return y, (lambda g: g + branch(g))


def bottleneck_forward(x, spec: BottleneckSpec, params: Dict[str, np.ndarray],
                       buffers: Optional[Dict[str, np.ndarray]] = None,
                       train: bool = False) -> np.ndarray:
    """Run one bottleneck block.

    ``params`` and ``buffers`` use block-relative names such as
    ``"expand.conv.weight"`` or ``"dw.bn.running_var"``; missing batch-norm
    statistics default to neutral (mean 0, variance 1).
    """
    x = as_tensor(x, "bottleneck input")
    spec.validate()
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"bottleneck expects {spec.in_channels} channels, got input {x.shape}")
    p = {"b." + k: v for k, v in params.items()}
    bufs = {"b." + k: v for k, v in (buffers or {}).items()}
    for name, shape in _bottleneck_shapes(spec, "b", se_divisor=1, reduction=4)[1].items():
        if name not in bufs:
            bufs[name] = np.zeros(shape, np.float32) if name.endswith("mean") else np.ones(shape, np.float32)
    y, _ = bottleneck_layer(Context(p, bufs, train=train), "b", x, spec)
    return y


# --------------------------------------------------------------------------
# model specification
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """Declarative MobileNetV3-style classifier.

    ``hard_swish=True`` swaps every ``"swish"`` activation for hard-swish.
    ``in_channels=3`` replicates 1-channel grayscale inputs across three
    channels at the model entry.
    """

    name: str
    blocks: Tuple[BottleneckSpec, ...]
    in_channels: int = 1
    stem_channels: int = 16
    head_channels: int = 96
    hidden_channels: int = 128
    num_classes: int = 2
    se_reduction: int = 4
    se_divisor: int = 1
    hard_swish: bool = False
    stem_activation: str = "swish"

    def act(self, kind: str) -> str:
        return "hard_swish" if (self.hard_swish and kind == "swish") else kind

    def validate(self):
        if self.in_channels not in (1, 3):
            raise SpecError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if min(self.stem_channels, self.head_channels, self.hidden_channels) < 1:
            raise SpecError("stem, head and hidden widths must be positive")
        if self.num_classes < 2:
            raise SpecError(f"num_classes must be at least 2, got {self.num_classes}")
        if not self.blocks:
            raise SpecError("model needs at least one bottleneck block")
        prev = self.stem_channels
        for i, b in enumerate(self.blocks):
            b.validate(i)
            if b.in_channels != prev:
                raise SpecError(
                    f"block {i}: in_channels {b.in_channels} does not chain from previous width {prev}", i
                )
            prev = b.out_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["blocks"] = tuple(BottleneckSpec(**b) for b in d["blocks"])
        return cls(**d)


def tiny_spec(**overrides) -> ModelSpec:
    """Three-block desk-scale preset (29,134 parameters)."""
    blocks = (
        BottleneckSpec(8, 16, 8, kernel=3, stride=2, use_se=True, activation="relu"),
        BottleneckSpec(16, 24, 48, kernel=3, stride=2, use_se=False, activation="relu"),
        BottleneckSpec(24, 40, 72, kernel=5, stride=2, use_se=True, activation="swish"),
    )
    spec = ModelSpec(name="tiny", blocks=blocks, stem_channels=8, head_channels=96,
                     hidden_channels=128)
    return replace(spec, **overrides) if overrides else spec


# (kernel, expansion, out, SE, activation, stride) of MobileNetV3-Large
_LARGE_TABLE = (
    (3, 16, 16, False, "relu", 1),
    (3, 64, 24, False, "relu", 2),
    (3, 72, 24, False, "relu", 1),
    (5, 72, 40, True, "relu", 2),
    (5, 120, 40, True, "relu", 1),
    (5, 120, 40, True, "relu", 1),
    (3, 240, 80, False, "swish", 2),
    (3, 200, 80, False, "swish", 1),
    (3, 184, 80, False, "swish", 1),
    (3, 184, 80, False, "swish", 1),
    (3, 480, 112, True, "swish", 1),
    (3, 672, 112, True, "swish", 1),
    (5, 672, 160, True, "swish", 2),
    (5, 960, 160, True, "swish", 1),
    (5, 960, 160, True, "swish", 1),
)


def large_spec(**overrides) -> ModelSpec:
    """MobileNetV3-Large stage table with a 2-class head."""
    blocks = []
    prev = 16
    for k, e, o, se, act, s in _LARGE_TABLE:
        blocks.append(BottleneckSpec(prev, o, e, kernel=k, stride=s, use_se=se, activation=act))
        prev = o
    spec = ModelSpec(name="large", blocks=tuple(blocks), stem_channels=16, head_channels=960,
                     hidden_channels=1280, se_divisor=8)
    return replace(spec, **overrides) if overrides else spec


PRESETS = {"tiny": tiny_spec, "large": large_spec}


def preset(name: str, **overrides) -> ModelSpec:
    try:
        return PRESETS[name](**overrides)
    except KeyError:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


# --------------------------------------------------------------------------
# parameter layout
# --------------------------------------------------------------------------

def _conv_bn_shapes(prefix, out_c, in_c_per_group, k, ps, bs):
    ps[prefix + ".conv.weight"] = ((out_c, in_c_per_group, k, k), in_c_per_group * k * k)
    ps[prefix + ".bn.weight"] = ((out_c,), None)
    ps[prefix + ".bn.bias"] = ((out_c,), None)
    bs[prefix + ".bn.running_mean"] = (out_c,)
    bs[prefix + ".bn.running_var"] = (out_c,)


def _bottleneck_shapes(b: BottleneckSpec, prefix: str, se_divisor: int, reduction: int):
    ps: Dict[str, tuple] = {}
    bs: Dict[str, tuple] = {}
    if b.has_expand:
        _conv_bn_shapes(prefix + ".expand", b.expansion, b.in_channels, 1, ps, bs)
    _conv_bn_shapes(prefix + ".dw", b.expansion, 1, b.kernel, ps, bs)
    if b.use_se:
        r = se_reduced_width(b.expansion, reduction, se_divisor)
        ps[prefix + ".se.fc1.weight"] = ((b.expansion, r), b.expansion)
        ps[prefix + ".se.fc1.bias"] = ((r,), 0)
        ps[prefix + ".se.fc2.weight"] = ((r, b.expansion), r)
        ps[prefix + ".se.fc2.bias"] = ((b.expansion,), 0)
    _conv_bn_shapes(prefix + ".project", b.out_channels, b.expansion, 1, ps, bs)
    return ps, bs


def parameter_layout(spec: ModelSpec):
    """Ordered ``{name: (shape, fan_in)}`` for parameters and ``{name: shape}`` for buffers.

    ``fan_in`` is ``None`` for norm scales/shifts, ``0`` for biases.
    """
    ps: Dict[str, tuple] = {}
    bs: Dict[str, tuple] = {}
    _conv_bn_shapes("stem", spec.stem_channels, spec.in_channels, 3, ps, bs)
    for i, b in enumerate(spec.blocks):
        p, q = _bottleneck_shapes(b, f"blocks.{i}", spec.se_divisor, spec.se_reduction)
        ps.update(p)
        bs.update(q)
    last = spec.blocks[-1].out_channels
    _conv_bn_shapes("head", spec.head_channels, last, 1, ps, bs)
    ps["hidden.weight"] = ((spec.head_channels, spec.hidden_channels), spec.head_channels)
    ps["hidden.bias"] = ((spec.hidden_channels,), 0)
    ps["classifier.weight"] = ((spec.hidden_channels, spec.num_classes), spec.hidden_channels)
    ps["classifier.bias"] = ((spec.num_classes,), 0)
    return ps, bs


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass
class Model:
    """An instantiated :class:`ModelSpec` with named parameters and buffers."""

    spec: ModelSpec
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def is_half(self) -> bool:
        return any(p.dtype == np.float16 for p in self.params.values())

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()},
                     {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "Model":
        """Copy with every parameter and buffer cast to ``dtype``."""
        return Model(self.spec, {k: v.astype(dtype) for k, v in self.params.items()},
                     {k: v.astype(dtype) for k, v in self.buffers.items()})

    def _prepare_input(self, x) -> np.ndarray:
        x = as_tensor(x, "model input")
        c = self.spec.in_channels
        if x.shape[1] == 1 and c == 3:
            x = np.repeat(x, 3, axis=1)
        if x.shape[1] != c:
            raise ShapeError(f"model expects {c} input channels, got input {x.shape}")
        return x

    def forward_vjp(self, x, train: bool = False, rounder: Optional[Rounder] = None):
        """Forward pass returning ``(logits, back)``.

        ``back(d_logits)`` returns ``{param_name: gradient}``.  In train mode
        batch-norm running statistics are updated.
        """
        x = self._prepare_input(x)
        spec = self.spec
        ctx = Context(self.params, self.buffers, train=train, rounder=rounder)
        if rounder is not None:
            x = rounder(x)
        backs: List[Back] = []
        h, b = conv_bn_act(ctx, "stem", x, ConvParams(stride=2, padding=1),
                           spec.act(spec.stem_activation), input_grad=False)
        backs.append(b)
        for i, blk in enumerate(spec.blocks):
            blk = replace(blk, activation=spec.act(blk.activation))
            h, b = bottleneck_layer(ctx, f"blocks.{i}", h, blk)
            backs.append(b)
        h, b = conv_bn_act(ctx, "head", h, ConvParams(), spec.act("swish"))
        backs.append(b)
        pooled = ctx.q(global_avg_pool(h))
        pool_shape = h.shape
        backs.append(lambda g: global_avg_pool_backward(g.reshape(pool_shape[0], -1, 1, 1), pool_shape))
        h, b = dense_layer(ctx, "hidden", pooled)
        backs.append(b)
        h, b = activation_layer(ctx, h, spec.act("swish"))
        backs.append(b)
        logits, b = dense_layer(ctx, "classifier", h)
        backs.append(b)
        chain = _chain(*backs)

        def back(g_logits):
            ctx.grads = {}
            chain(np.asarray(g_logits))
            return {k: ctx.grads[k].astype(self.params[k].dtype, copy=False) for k in self.params}

        return logits, back

    def forward(self, x, train: bool = False, rounder: Optional[Rounder] = None) -> np.ndarray:
        logits, _ = self.forward_vjp(x, train=train, rounder=rounder)
        return logits

    def predict_proba(self, x, batch_size: int = 32, rounder: Optional[Rounder] = None) -> np.ndarray:
        x = np.asarray(x)
        out = [softmax(self.forward(x[i:i + batch_size], rounder=rounder))
               for i in range(0, len(x), batch_size)]
        return np.concatenate(out, axis=0)


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate ``spec`` with seed-deterministic initial parameters.

    Convolution and dense weights are drawn from a He-uniform distribution,
    ``U(-sqrt(6 / fan_in), sqrt(6 / fan_in))``; biases start at 0, norm
    scales at 1 and shifts at 0; running statistics start at mean 0,
    variance 1.
    """
    spec.validate()
    layout, buffer_layout = parameter_layout(spec)
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for name, (shape, fan_in) in layout.items():
        if fan_in is None:
            value = np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
        elif fan_in == 0:
            value = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = value.astype(dtype)
    buffers = {
        name: (np.zeros(shape) if name.endswith("mean") else np.ones(shape)).astype(np.float32)
        for name, shape in buffer_layout.items()
    }
    return Model(spec, params, buffers)
