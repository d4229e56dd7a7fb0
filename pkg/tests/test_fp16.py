import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import naive_conv2d
from tbedge.fp16 import (HALF_MAX, DivergenceReport, HalfOverflowError, divergence, from_half,
                         infer_mixed, quantize_model, round_half, to_half)
from tbedge.modelio import encode
from tbedge.nn import Context, build_model, conv_layer, dense_layer, tiny_spec
from tbedge.tensor import ConvParams, global_avg_pool


def np_half_bits(x):
    with np.errstate(over="ignore"):
        return np.asarray(x, np.float32).astype(np.float16).view(np.uint16)


class TestConversion:
    def test_examples(self):
        assert from_half(to_half(np.float32(1.0))) == 1.0
        assert float(from_half(to_half(np.float32(0.1)))) == 0.0999755859375
        assert int(to_half(np.float32(0.1))) == 0x2E66
        assert float(from_half(to_half(np.float32(2049.0)))) == 2048.0
        assert float(from_half(to_half(np.float32(2051.0)))) == 2052.0

    def test_overflow_and_specials(self):
        x = np.array([65504, 65519.996, 65520, -1e6, np.inf, -np.inf, np.nan], np.float32)
        h = to_half(x)
        assert list(h[:6]) == [0x7BFF, 0x7BFF, 0x7C00, 0xFC00, 0x7C00, 0xFC00]
        assert np.isnan(from_half(h[6]))
        assert HALF_MAX == 65504.0

    def test_subnormals(self):
        tiny = np.float32(2.0 ** -24)
        assert int(to_half(tiny)) == 1
        assert int(to_half(tiny / 2)) == 0           # tie to even (0)
        assert int(to_half(tiny * 1.5)) == 2         # tie to even (2)
        assert int(to_half(np.float32(-0.0))) == 0x8000

    def test_every_half_round_trips(self):
        h = np.arange(65536, dtype=np.uint32).astype(np.uint16)
        f = from_half(h)
        np.testing.assert_array_equal(f.view(np.uint32), h.view(np.float16).astype(np.float32).view(np.uint32))
        finite = np.isfinite(f)
        np.testing.assert_array_equal(to_half(f[finite]), h[finite])

    def test_matches_numpy_on_random_bit_patterns(self):
        rng = np.random.default_rng(0)
        bits = rng.integers(0, 2**32, size=500_000, dtype=np.uint64).astype(np.uint32)
        x = bits.view(np.float32)
        ok = ~np.isnan(x)
        np.testing.assert_array_equal(to_half(x[ok]), np_half_bits(x[ok]))

    def test_matches_numpy_near_rounding_boundaries(self):
        # every float32 within +-4 ulp of each half midpoint
        h = np.arange(0, 0x7BFF, dtype=np.uint32).astype(np.uint16)
        lo = h.view(np.float16).astype(np.float64)
        hi = (h + 1).astype(np.uint16).view(np.float16).astype(np.float64)
        mid = ((lo + hi) / 2).astype(np.float32).view(np.int32)
        x = (mid[:, None] + np.arange(-4, 5, dtype=np.int32)[None]).ravel().view(np.float32)
        x = np.concatenate([x, -x])
        np.testing.assert_array_equal(to_half(x), np_half_bits(x))

    @given(st.floats(-7e4, 7e4, width=32), st.floats(-7e4, 7e4, width=32))
    def test_monotone(self, a, b):
        a, b = min(a, b), max(a, b)
        assert from_half(to_half(np.float32(a))) <= from_half(to_half(np.float32(b)))

    @given(st.floats(2.0 ** -14, 65504, width=32), st.booleans())
    def test_relative_error_bound(self, x, neg):
        x = -x if neg else x
        r = float(round_half(np.float32(x)))
        assert abs(r - x) <= 2.0 ** -11 * abs(x)


def _random_stats(model, seed):
    rng = np.random.default_rng(seed)
    for k, v in model.buffers.items():
        v[...] = rng.uniform(0.5, 1.5, v.shape) if k.endswith("var") else 0.1 * rng.standard_normal(v.shape)
    return model


class TestQuantize:
    def test_storage_and_idempotence(self):
        m = build_model(tiny_spec(), seed=0)
        q = quantize_model(m)
        assert q.is_half and all(p.dtype == np.float16 for p in q.params.values())
        assert all(b.dtype == np.float32 for b in q.buffers.values())
        qq = quantize_model(q)
        assert all(np.array_equal(q.params[k].view(np.uint16), qq.params[k].view(np.uint16)) for k in q.params)
        assert sum(p.nbytes for p in q.params.values()) * 2 == sum(p.nbytes for p in m.params.values())
        assert len(encode(q)) < 0.6 * len(encode(m))

    def test_overflow_names_tensor(self):
        m = build_model(tiny_spec(), seed=0)
        m.params["hidden.bias"][3] = 1e6
        with pytest.raises(HalfOverflowError, match="hidden.bias"):
            quantize_model(m)

    def test_power_of_two_params_give_identical_logits(self):
        m = build_model(tiny_spec(), seed=0)
        for v in m.params.values():
            nz = v != 0
            v[nz] = np.sign(v[nz]) * 2.0 ** np.round(np.log2(np.abs(v[nz])))
        x = np.random.default_rng(0).random((2, 1, 32, 32), dtype=np.float32)
        q = quantize_model(m)
        single = m.astype(np.float32)
        assert all(np.array_equal(q.params[k].astype(np.float32), single.params[k]) for k in m.params)
        np.testing.assert_array_equal(q.astype(np.float32).forward(x), single.forward(x))


def _oracle_zero_input_logits(model, size):
    """Layer-by-layer forward of the tiny preset on a zero image, rounding via numpy float16."""
    r = lambda a: np.asarray(a, np.float64).astype(np.float16).astype(np.float64)  # noqa: E731
    P = {k: v.astype(np.float64) for k, v in model.params.items()}
    B = {k: v.astype(np.float64) for k, v in model.buffers.items()}
    sig = lambda a: 1 / (1 + np.exp(-a))  # noqa: E731
    acts = {"relu": lambda a: np.maximum(a, 0), "swish": lambda a: a * sig(a)}

    def bn(x, pre):
        g, b = P[pre + ".weight"], P[pre + ".bias"]
        m, v = B[pre + ".running_mean"], B[pre + ".running_var"]
        return (x - m[None, :, None, None]) / np.sqrt(v + 1e-5)[None, :, None, None] * g[None, :, None, None] \
            + b[None, :, None, None]

    def cba(x, pre, stride, pad, groups, act):
        x = r(naive_conv2d(x, P[pre + ".conv.weight"], None, (stride, stride), (pad,) * 4, groups))
        x = r(bn(x, pre + ".bn"))
        return r(acts[act](x)) if act else x

    h = cba(np.zeros((1, 1, size, size)), "stem", 2, 1, 1, "swish")
    for i, blk in enumerate(model.spec.blocks):
        x0 = h
        pre = f"blocks.{i}"
        if blk.has_expand:
            h = cba(h, pre + ".expand", 1, 0, 1, blk.activation)
        h = cba(h, pre + ".dw", blk.stride, blk.kernel // 2, blk.expansion, blk.activation)
        if blk.use_se:
            z = r(h.mean(axis=(2, 3)))
            s = r(np.maximum(r(z @ P[pre + ".se.fc1.weight"] + P[pre + ".se.fc1.bias"]), 0))
            s = r(sig(r(s @ P[pre + ".se.fc2.weight"] + P[pre + ".se.fc2.bias"])))
            h = r(h * s[:, :, None, None])
        h = cba(h, pre + ".project", 1, 0, 1, None)
        if blk.residual:
            h = r(h + x0)
    h = cba(h, "head", 1, 0, 1, "swish")
    z = r(h.mean(axis=(2, 3)))
    z = r(acts["swish"](r(z @ P["hidden.weight"] + P["hidden.bias"])))
    return r(z @ P["classifier.weight"] + P["classifier.bias"])


class TestMixedInference:
    def test_requires_half_model(self):
        with pytest.raises(ValueError, match="quantize_model"):
            infer_mixed(build_model(tiny_spec()), np.zeros((1, 1, 32, 32), np.float32))

    def test_zero_input_matches_hand_trace(self):
        q = quantize_model(_random_stats(build_model(tiny_spec(), seed=3), 3))
        got = infer_mixed(q, np.zeros((1, 1, 32, 32), np.float32))
        ref = _oracle_zero_input_logits(q, 32)
        np.testing.assert_allclose(got, ref, rtol=4e-3, atol=1e-3)

    def test_outputs_are_half_representable_and_deterministic(self):
        q = quantize_model(build_model(tiny_spec(), seed=1))
        x = np.random.default_rng(0).random((3, 1, 48, 48), dtype=np.float32)
        a, b = infer_mixed(q, x), infer_mixed(q, x)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a, a.astype(np.float16).astype(a.dtype))

    def test_linear_toy_scales_exactly(self):
        rng = np.random.default_rng(0)
        params = {"c.weight": rng.standard_normal((4, 1, 3, 3)).astype(np.float16),
                  "d.weight": rng.standard_normal((4, 2)).astype(np.float16),
                  "d.bias": np.zeros(2, np.float16)}

        def toy(x):
            ctx = Context(params, {}, rounder=round_half)
            h, _ = conv_layer(ctx, "c", round_half(x), ConvParams(padding=1))
            h = ctx.q(global_avg_pool(h))
            y, _ = dense_layer(ctx, "d", h)
            return y

        x = rng.random((2, 1, 8, 8), dtype=np.float32)
        np.testing.assert_array_equal(toy(2 * x), 2 * toy(x))

    def test_non_finite_activation_reports_layer(self):
        m = build_model(tiny_spec(), seed=0)
        m.params["stem.bn.bias"][:] = 60000.0
        m.params["blocks.0.dw.conv.weight"][:] = 10.0
        with pytest.raises(FloatingPointError, match="layer [0-9]+"):
            infer_mixed(quantize_model(m), np.ones((1, 1, 32, 32), np.float32))


class TestDivergence:
    def test_self_comparison(self):
        m = build_model(tiny_spec(), seed=0)
        rep = divergence(m, 4, seed=0, quantized=m, size=32)
        assert rep.max_abs_diff == 0.0 and rep.mean_abs_diff == 0.0 and rep.agreement == 1.0

    def test_quantized_report_deterministic_and_round_trips(self):
        m = build_model(tiny_spec(), seed=0)
        a = divergence(m, 6, seed=1, size=32, batch_size=4)
        b = divergence(m, 6, seed=1, size=32, batch_size=4)
        assert a == b and a.n == 6 and 0 <= a.agreement <= 1 and a.max_abs_diff > 0
        assert DivergenceReport.from_json(a.to_json()) == a

    def test_zero_inputs_rejected(self):
        with pytest.raises(ValueError):
            divergence(build_model(tiny_spec()), 0)
