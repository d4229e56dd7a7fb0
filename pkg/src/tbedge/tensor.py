"""Rank-4 NCHW numeric kernels.

Tensors are plain :class:`numpy.ndarray` objects of rank 4 laid out as
``(batch, channels, height, width)`` in C order.  The array dtype is the
precision tag: ``float32`` is single, ``float16`` is half.  ``float64`` is
accepted as a "double-width" mode used for gradient checking.

Every kernel accumulates in at least single precision: half inputs are
widened to ``float32`` before any arithmetic, and outputs carry the
accumulation dtype.  Every forward kernel has a ``*_backward`` companion
returning gradients with respect to its inputs.

Vectors and matrices that flow through the engine use the same rank-4
convention: a per-channel vector is ``(1, C, 1, 1)`` or ``(N, C, 1, 1)``.
The one exception is :func:`dense`, which flattens its input to ``(N, F)``
and returns ``(N, G)`` logits/features.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ConvParams",
    "as_tensor",
    "acc_dtype",
    "pad",
    "pad_backward",
    "conv2d",
    "conv2d_backward",
    "dense",
    "dense_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "add",
    "mul",
    "mul_backward",
]

PadSpec = Union[int, Sequence[int]]


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def acc_dtype(*arrays: np.ndarray) -> np.dtype:
    """Accumulation dtype for a set of operands: float64 if any, else float32."""
    for a in arrays:
        if a is not None and np.asarray(a).dtype == np.float64:
            return np.dtype(np.float64)
    return np.dtype(np.float32)


def _widen(a: np.ndarray, dtype: np.dtype) -> np.ndarray:
    return a if a.dtype == dtype else a.astype(dtype)


def as_tensor(x, name: str = "tensor", check_finite: bool = True) -> np.ndarray:
    """Validate and return ``x`` as a rank-4 floating array."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: shape {x.shape}")
    if x.dtype not in (np.float16, np.float32, np.float64):
        x = x.astype(np.float32)
    if check_finite and not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def _pair(v, name: str) -> Tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


@dataclass(frozen=True)
class ConvParams:
    """Stride, padding, grouping and pad mode of a 2-D convolution.

    ``groups == in_channels`` expresses a depthwise convolution.
    """

    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    groups: int = 1
    pad_mode: str = "zero"

    def __post_init__(self):
        object.__setattr__(self, "stride", _pair(self.stride, "stride"))
        object.__setattr__(self, "padding", _pair(self.padding, "padding"))
        if min(self.stride) < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.groups < 1:
            raise ValueError(f"groups must be positive, got {self.groups}")
        if self.pad_mode not in ("zero", "reflect"):
            raise ValueError(f"pad_mode must be 'zero' or 'reflect', got {self.pad_mode!r}")

    def output_hw(self, h: int, w: int, kh: int, kw: int) -> Tuple[int, int]:
        ph, pw = self.padding
        sh, sw = self.stride
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


# --------------------------------------------------------------------------
# padding
# --------------------------------------------------------------------------

def _pad_amounts(amounts: PadSpec) -> Tuple[int, int, int, int]:
    """Normalise to (top, bottom, left, right)."""
    if isinstance(amounts, (int, np.integer)):
        a = int(amounts)
        return a, a, a, a
    amounts = tuple(int(a) for a in amounts)
    if len(amounts) == 2:
        return amounts[0], amounts[0], amounts[1], amounts[1]
    if len(amounts) == 4:
        return amounts  # type: ignore[return-value]
    raise ValueError(f"pad amounts must be an int, a pair or a 4-tuple, got {amounts}")


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    # reflect-101: edge element is not repeated
    return np.pad(np.arange(n), (before, after), mode="reflect")


def pad(x: np.ndarray, amounts: PadSpec, mode: str = "zero") -> np.ndarray:
    """Pad the two spatial axes.

    ``amounts`` is an int (all sides), a ``(ph, pw)`` pair (symmetric) or
    ``(top, bottom, left, right)``.  ``mode="reflect"`` mirrors without
    repeating the edge element and requires every amount to be smaller than
    the corresponding spatial size.
    """
    top, bottom, left, right = _pad_amounts(amounts)
    if min(top, bottom, left, right) < 0:
        raise ValueError("pad amounts must be non-negative")
    if top == bottom == left == right == 0:
        return x
    h, w = x.shape[-2:]
    if mode == "zero":
        return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    if mode == "reflect":
        if max(top, bottom) >= h or max(left, right) >= w:
            raise ValueError(
                f"reflect padding ({top}, {bottom}, {left}, {right}) must be smaller "
                f"than the spatial size {h}x{w}"
            )
        rows = _reflect_index(h, top, bottom)
        cols = _reflect_index(w, left, right)
        return x[..., rows[:, None], cols[None, :]]
    raise ValueError(f"unknown pad mode {mode!r}")


def pad_backward(grad: np.ndarray, in_shape: Tuple[int, ...], amounts: PadSpec,
                 mode: str = "zero") -> np.ndarray:
    """Gradient of :func:`pad` with respect to its input."""
    top, bottom, left, right = _pad_amounts(amounts)
    h, w = in_shape[-2:]
    if mode == "zero":
        return grad[..., top:top + h, left:left + w]
    rows = _reflect_index(h, top, bottom)
    cols = _reflect_index(w, left, right)
    out = np.zeros(tuple(in_shape[:-2]) + (h, w), dtype=grad.dtype)
    # accumulate mirrored contributions row-wise then column-wise
    tmp = np.zeros(tuple(in_shape[:-2]) + (h, grad.shape[-1]), dtype=grad.dtype)
    np.add.at(tmp, (..., rows, slice(None)), grad)
    np.add.at(out, (..., slice(None), cols), tmp)
    return out


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _check_conv(x: np.ndarray, kernel: np.ndarray, bias, params: ConvParams):
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects rank-4 input and kernel, got input {x.shape} and kernel {kernel.shape}"
        )
    n, c, h, w = x.shape
    oc, icg, kh, kw = kernel.shape
    g = params.groups
    if c % g or oc % g or icg != c // g:
        raise ShapeError(
            f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}, groups={g}"
        )
    if bias is not None and np.shape(bias) != (oc,):
        raise ShapeError(f"conv2d bias shape {np.shape(bias)} does not match kernel {kernel.shape}")
    oh, ow = params.output_hw(h, w, kh, kw)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {x.shape}, kernel {kernel.shape}, "
            f"stride {params.stride}, padding {params.padding}"
        )
    return oh, ow


def _pad_for_conv(x: np.ndarray, params: ConvParams) -> np.ndarray:
    ph, pw = params.padding
    return pad(x, (ph, pw), params.pad_mode)


def _windows(xp: np.ndarray, kh: int, kw: int, stride, oh: int, ow: int) -> np.ndarray:
    sh, sw = stride
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]


def _slice(i: int, j: int, stride, oh: int, ow: int):
    sh, sw = stride
    return (slice(None), slice(None),
            slice(i, i + sh * (oh - 1) + 1, sh), slice(j, j + sw * (ow - 1) + 1, sw))


def _is_depthwise(x: np.ndarray, kernel: np.ndarray, groups: int) -> bool:
    return groups > 1 and groups == x.shape[1] == kernel.shape[0] and kernel.shape[1] == 1


def _is_pointwise(kernel: np.ndarray, params: ConvParams) -> bool:
    return (kernel.shape[2:] == (1, 1) and params.stride == (1, 1)
            and params.padding == (0, 0) and params.groups == 1)


def _conv_dense(xp: np.ndarray, k: np.ndarray, stride, oh: int, ow: int) -> np.ndarray:
    kh, kw = k.shape[2:]
    win = _windows(xp, kh, kw, stride, oh, ow)  # (N, C, oh, ow, kh, kw)
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # (N, oh, ow, O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _phases(xp: np.ndarray, stride):
    """Split a padded input into stride phases so each kernel tap reads a unit-stride slice."""
    sh, sw = stride
    if (sh, sw) == (1, 1):
        return {(0, 0): xp}
    return {(a, b): np.ascontiguousarray(xp[:, :, a::sh, b::sw])
            for a in range(sh) for b in range(sw)}


def _tap(phases, i: int, j: int, stride, oh: int, ow: int):
    sh, sw = stride
    ph = phases[(i % sh, j % sw)]
    r, c = i // sh, j // sw
    return ph[:, :, r:r + oh, c:c + ow]


def _conv_depthwise(xp: np.ndarray, k: np.ndarray, stride, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    kh, kw = k.shape[2:]
    phases = _phases(xp, stride)
    out = np.zeros((n, c, oh, ow), dtype=xp.dtype)
    tmp = np.empty_like(out)
    for i in range(kh):
        for j in range(kw):
            np.multiply(_tap(phases, i, j, stride, oh, ow), k[:, 0, i, j][None, :, None, None], out=tmp)
            out += tmp
    return out


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None,
           params: ConvParams = ConvParams()) -> np.ndarray:
    """2-D cross-correlation with stride, padding and channel groups.

    ``kernel`` has shape ``(out_channels, in_channels // groups, kh, kw)``.
    """
    oh, ow = _check_conv(x, kernel, bias, params)
    dt = acc_dtype(x, kernel, bias)
    x = _widen(x, dt)
    k = _widen(kernel, dt)
    if _is_pointwise(k, params):
        n, c, h, w = x.shape
        out = np.matmul(k[:, :, 0, 0], x.reshape(n, c, h * w)).reshape(n, -1, h, w)
    else:
        xp = _pad_for_conv(x, params)
        if _is_depthwise(x, k, params.groups):
            out = _conv_depthwise(xp, k, params.stride, oh, ow)
        elif params.groups == 1:
            out = _conv_dense(xp, k, params.stride, oh, ow)
        else:
            g = params.groups
            cg, og = x.shape[1] // g, k.shape[0] // g
            out = np.concatenate(
                [_conv_dense(xp[:, gi * cg:(gi + 1) * cg], k[gi * og:(gi + 1) * og],
                             params.stride, oh, ow) for gi in range(g)],
                axis=1,
            )
    if bias is not None:
        out = out + _widen(np.asarray(bias), dt)[None, :, None, None]
    return out


def conv2d_backward(grad: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                    params: ConvParams = ConvParams(), with_bias: bool = True,
                    input_grad: bool = True):
    """Gradients of :func:`conv2d`: ``(d_input, d_kernel, d_bias or None)``.

    ``input_grad=False`` skips the input gradient (returned as ``None``).
    """
    oh, ow = grad.shape[2:]
    dt = acc_dtype(grad, x, kernel)
    grad = _widen(grad, dt)
    x = _widen(x, dt)
    k = _widen(kernel, dt)
    gb = grad.sum(axis=(0, 2, 3)) if with_bias else None
    n, c, h, w = x.shape
    if _is_pointwise(k, params):
        oc = k.shape[0]
        g2 = grad.reshape(n, oc, h * w)
        x2 = x.reshape(n, c, h * w)
        gk = np.tensordot(g2, x2, axes=([0, 2], [0, 2]))[:, :, None, None]
        gx = np.matmul(k[:, :, 0, 0].T, g2).reshape(n, c, h, w) if input_grad else None
        return gx, gk, gb

    xp = _pad_for_conv(x, params)
    kh, kw = k.shape[2:]
    gxp = np.zeros_like(xp) if input_grad else None
    stride = params.stride
    if _is_depthwise(x, k, params.groups):
        gk = np.empty_like(k)
        phases = _phases(xp, stride)
        gphases = {key: np.zeros_like(v) for key, v in phases.items()} if input_grad else None
        tmp = np.empty_like(grad)
        for i in range(kh):
            for j in range(kw):
                np.multiply(grad, _tap(phases, i, j, stride, oh, ow), out=tmp)
                gk[:, 0, i, j] = tmp.sum(axis=(0, 2, 3))
                if input_grad:
                    np.multiply(grad, k[:, 0, i, j][None, :, None, None], out=tmp)
                    _tap(gphases, i, j, stride, oh, ow)[...] += tmp
        if input_grad:
            sh, sw = stride
            for (a, b), gph in gphases.items():
                hh = len(range(a, gxp.shape[2], sh))
                ww = len(range(b, gxp.shape[3], sw))
                gxp[:, :, a::sh, b::sw] = gph[:, :, :hh, :ww]
    else:
        g = params.groups
        cg, og = c // g, k.shape[0] // g
        gk = np.empty_like(k)
        for gi in range(g):
            cs, os_ = slice(gi * cg, (gi + 1) * cg), slice(gi * og, (gi + 1) * og)
            gg = grad[:, os_]
            win = _windows(xp[:, cs], kh, kw, stride, oh, ow)
            gk[os_] = np.tensordot(gg, win, axes=([0, 2, 3], [0, 2, 3]))
            if not input_grad:
                continue
            cols = np.tensordot(gg, k[os_], axes=([1], [0]))  # (N, oh, ow, cg, kh, kw)
            cols = cols.transpose(0, 3, 1, 2, 4, 5)
            sub = gxp[:, cs]
            for i in range(kh):
                for j in range(kw):
                    sub[_slice(i, j, stride, oh, ow)] += cols[..., i, j]
    if not input_grad:
        return None, gk, gb
    ph, pw = params.padding
    gx = pad_backward(gxp, x.shape, (ph, pw), params.pad_mode) if (ph or pw) else gxp
    return gx, gk, gb


# --------------------------------------------------------------------------
# dense / pooling / elementwise
# --------------------------------------------------------------------------

def dense(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Affine map ``x @ weight + bias`` over ``x`` flattened to ``(N, F)``."""
    x2 = np.reshape(x, (np.shape(x)[0], -1))
    if weight.ndim != 2 or x2.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense dimension mismatch: input {np.shape(x)} (F={x2.shape[1]}) vs weight {weight.shape}"
        )
    if bias is not None and np.shape(bias) != (weight.shape[1],):
        raise ShapeError(f"dense bias shape {np.shape(bias)} does not match weight {weight.shape}")
    dt = acc_dtype(x2, weight, bias)
    out = _widen(x2, dt) @ _widen(weight, dt)
    if bias is not None:
        out = out + _widen(np.asarray(bias), dt)
    return out


def dense_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray, with_bias: bool = True):
    """Gradients of :func:`dense`: ``(d_input shaped like x, d_weight, d_bias or None)``."""
    x2 = np.reshape(x, (np.shape(x)[0], -1))
    dt = acc_dtype(grad, x2, weight)
    grad = _widen(grad, dt)
    gw = _widen(x2, dt).T @ grad
    gx = (grad @ _widen(weight, dt).T).reshape(np.shape(x))
    gb = grad.sum(axis=0) if with_bias else None
    return gx, gw, gb


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean of each channel plane, returned as ``(N, C, 1, 1)``."""
    dt = acc_dtype(x)
    return _widen(x, dt).mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad: np.ndarray, in_shape: Tuple[int, ...]) -> np.ndarray:
    h, w = in_shape[2:]
    return np.broadcast_to(grad / (h * w), in_shape).copy()


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    if a.shape == b.shape:
        return
    if (b.ndim == 4 and a.ndim == 4 and b.shape[2:] == (1, 1)
            and b.shape[1] == a.shape[1] and b.shape[0] in (1, a.shape[0])):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise sum; ``b`` may be ``(N|1, C, 1, 1)`` broadcast over H x W."""
    _check_broadcast(a, b, "add")
    dt = acc_dtype(a, b)
    return _widen(a, dt) + _widen(b, dt)


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise product; ``b`` may be ``(N|1, C, 1, 1)`` broadcast over H x W."""
    _check_broadcast(a, b, "mul")
    dt = acc_dtype(a, b)
    return _widen(a, dt) * _widen(b, dt)


def mul_backward(grad: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of :func:`mul` with respect to ``a`` and ``b`` (reduced to b's shape)."""
    ga = grad * b
    gb = grad * a
    if gb.shape != b.shape:
        axes = tuple(i for i, (s, t) in enumerate(zip(gb.shape, b.shape)) if t == 1 and s != 1)
        gb = gb.sum(axis=axes, keepdims=True)
    return ga, gb
