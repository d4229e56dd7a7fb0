"""Software binary16 emulation and mixed-precision inference.

Conversions operate on IEEE-754 bit patterns: :func:`to_half` maps single
precision values to 16-bit patterns with round-to-nearest-even, and
:func:`from_half` widens them back exactly.  Mixed inference keeps weights
and activations in half while every convolution, dense layer and norm
accumulates in single.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .nn import Model

HALF_MAX = 65504.0


def to_half(x) -> np.ndarray:
    """Round single-precision values to binary16 bit patterns (``uint16``).

    Round-to-nearest-even throughout, including into the subnormal range;
    finite values beyond the half range become signed infinity and NaNs stay
    quiet NaNs.
    """
    arr = np.asarray(x, dtype=np.float32)
    bits = np.ascontiguousarray(arr).reshape(-1).view(np.uint32)
    sign = (bits >> 16) & np.uint32(0x8000)
    f = bits & np.uint32(0x7FFFFFFF)

    # normal range: rebias the exponent and round away the low 13 mantissa
    # bits; adding 0xfff plus the kept lsb is RNE on the truncated pattern
    lsb = (f >> 13) & np.uint32(1)
    out = f + np.uint32(0xC8000FFF)  # (15 - 127) << 23, wrapped, plus 0xfff
    out += lsb
    out >>= 13

    # below the smallest normal half: align the mantissa by adding 0.5 so the
    # single-precision adder performs the RNE shift into units of 2**-24
    small = f < np.uint32(113 << 23)
    if small.any():
        fs = f[small].view(np.float32) + np.float32(0.5)
        out[small] = fs.view(np.uint32) - np.uint32(126 << 23)

    big = f >= np.uint32(143 << 23)  # |x| >= 65536 or inf/nan
    if big.any():
        out[big] = np.where(f[big] > np.uint32(0x7F800000), np.uint32(0x7E00), np.uint32(0x7C00))
    out |= sign
    return out.astype(np.uint16).reshape(arr.shape)


def from_half(h) -> np.ndarray:
    """Widen binary16 bit patterns to single precision (exact)."""
    h16 = np.asarray(h, dtype=np.uint16)
    h = h16.reshape(-1).astype(np.uint32)
    o = (h & np.uint32(0x7FFF)) << 13
    exp = o & np.uint32(0x0F800000)
    o += np.uint32(112 << 23)  # rebias exponent (127 - 15)
    special = exp == np.uint32(0x0F800000)
    if special.any():
        o[special] += np.uint32(112 << 23)  # inf / nan keep an all-ones exponent
    sub = exp == 0
    if sub.any():
        # renormalise: bump the exponent then subtract the implicit bit's value
        v = (o[sub] + np.uint32(1 << 23)).view(np.float32) - np.float32(2.0 ** -14)
        o[sub] = v.view(np.uint32)
    o |= (h & np.uint32(0x8000)) << 16
    return o.view(np.float32).reshape(h16.shape)


def round_half(x) -> np.ndarray:
    """``from_half(to_half(x))``: the nearest half value, held in single precision."""
    return from_half(to_half(x))


def as_half_array(x) -> np.ndarray:
    """Half storage (``numpy.float16``) of ``x`` produced by :func:`to_half`."""
    return to_half(x).view(np.float16)


class HalfOverflowError(OverflowError):
    def __init__(self, tensor: str, value: float):
        super().__init__(f"parameter {tensor!r} overflows the half range (|value| = {value:g})")
        self.tensor = tensor


def quantize_model(model: Model) -> Model:
    """Copy of ``model`` with every parameter stored as half.

    Running statistics of the norms stay in single precision.  Raises
    :class:`HalfOverflowError` naming the first tensor with a value outside
    the finite half range.
    """
    params = {}
    for name, w in model.params.items():
        h = to_half(w)
        if np.any((h & 0x7C00) == 0x7C00):
            raise HalfOverflowError(name, float(np.max(np.abs(w.astype(np.float64)))))
        params[name] = h.view(np.float16).copy()
    buffers = {k: v.astype(np.float32) for k, v in model.buffers.items()}
    return Model(model.spec, params, buffers)


def infer_mixed(model: Model, x, batch_size: int = 32) -> np.ndarray:
    """Logits from a half-storage model with half activations.

    Activations are rounded to half after every primitive op; raises
    ``FloatingPointError`` naming the op index if one turns non-finite.
    """
    if not model.is_half:
        raise ValueError("infer_mixed needs a half-storage model; call quantize_model first")
    x = np.asarray(x)
    outs = [model.forward(x[i:i + batch_size], rounder=round_half)
            for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


@dataclass(frozen=True)
class DivergenceReport:
    max_abs_diff: float
    mean_abs_diff: float
    agreement: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DivergenceReport":
        return cls(float(d["max_abs_diff"]), float(d["mean_abs_diff"]),
                   float(d["agreement"]), int(d["n"]))

    @classmethod
    def from_json(cls, s: str) -> "DivergenceReport":
        return cls.from_dict(json.loads(s))


def random_inputs(n: int, seed: int = 0, size: int = 224, channels: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.random((n, channels, size, size), dtype=np.float32)


def divergence(model: Model, n: int, seed: int = 0, quantized: Optional[Model] = None,
               size: int = 224, batch_size: int = 32) -> DivergenceReport:
    """Compare single-precision logits of ``model`` with half-precision ones.

    ``quantized`` defaults to ``quantize_model(model)``.  Passing a
    single-precision model as ``quantized`` compares two single runs.
    Inputs are uniform in [0, 1), drawn from ``seed``.
    """
    if n < 1:
        raise ValueError("divergence needs at least one input")
    ref_model = model.astype(np.float32) if model.is_half else model
    other = quantize_model(model) if quantized is None else quantized
    max_diff = 0.0
    abs_sum = 0.0
    agree = 0
    count = 0
    rng = np.random.default_rng(seed)
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        x = rng.random((m, 1, size, size), dtype=np.float32)
        a = ref_model.forward(x)
        b = infer_mixed(other, x) if other.is_half else other.forward(x)
        d = np.abs(a.astype(np.float64) - b.astype(np.float64))
        max_diff = max(max_diff, float(d.max()))
        abs_sum += float(d.sum())
        count += d.size
        agree += int(np.sum(a.argmax(axis=1) == b.argmax(axis=1)))
    return DivergenceReport(max_diff, abs_sum / count, agree / n, n)
