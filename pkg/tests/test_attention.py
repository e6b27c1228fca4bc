"""Attention mechanisms against scalar-loop oracles, reduction identities,
and the exponential-decay ordering property."""

import numpy as np
import pytest

from monoconvkt import attention as A
from monoconvkt import tensor as T
from monoconvkt.attention import AttentionParams
from monoconvkt.tensor import Tensor

from oracles import (check_gradients, distance_oracle, gamma_oracle,
                     lconv_oracle, sdc_oracle)


def rand_qkv(rng, L, D):
    return (Tensor(rng.normal(size=(L, D))), Tensor(rng.normal(size=(L, D))),
            Tensor(rng.normal(size=(L, D))))


def make_params(rng, h, heads, ksz=3):
    D = h // heads
    return AttentionParams(
        w_q=Tensor(rng.normal(size=(h, h)) / np.sqrt(h), requires_grad=True, name="w_q"),
        w_k=Tensor(rng.normal(size=(h, h)) / np.sqrt(h), requires_grad=True, name="w_k"),
        w_v=Tensor(rng.normal(size=(h, h)) / np.sqrt(h), requires_grad=True, name="w_v"),
        w_o=Tensor(rng.normal(size=(h, h)) / np.sqrt(h), requires_grad=True, name="w_o"),
        delta_raw=Tensor(rng.normal(size=(heads,)), requires_grad=True, name="delta_raw"),
        sdc_w=Tensor(rng.normal(size=(heads, D, ksz)) / np.sqrt(D), requires_grad=True, name="sdc_w"),
        sdc_b=Tensor(np.zeros((heads, 1, ksz)), requires_grad=True, name="sdc_b"),
        heads=heads,
        kernel_size=ksz,
    )


class TestGamma:
    def test_equal_scores_uniform(self):
        q = Tensor(np.ones((4, 3)))
        k = Tensor(np.ones((4, 3)))
        out = A.gamma(q, k)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-12)

    def test_length_one(self):
        q = Tensor(np.random.default_rng(0).normal(size=(1, 4)))
        out = A.gamma(q, q)
        np.testing.assert_allclose(out.data, [[1.0]], atol=1e-15)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        L, D = int(rng.integers(2, 9)), int(rng.integers(2, 6))
        q, k, _ = rand_qkv(rng, L, D)
        mask = rng.random(L) < 0.7
        mask[0] = True
        got = A.gamma(q, k, mask=mask).data
        want = gamma_oracle(q.data, k.data, mask=mask)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_causal_matches_oracle(self):
        rng = np.random.default_rng(42)
        q, k, _ = rand_qkv(rng, 6, 4)
        got = A.gamma(q, k, causal=True).data
        want = gamma_oracle(q.data, k.data, causal=True)
        np.testing.assert_allclose(got, want, atol=1e-10)
        assert np.all(np.triu(got, k=1) == 0.0)


class TestDistance:
    def test_diagonal_zero(self):
        rng = np.random.default_rng(1)
        gam = A.gamma(*rand_qkv(rng, 5, 3)[:2])
        d = A.distance_from_gamma(gam).data
        np.testing.assert_array_equal(np.diagonal(d), 0.0)

    def test_uniform_gamma_hand_value(self):
        # uniform rows at L=4: d[3,1] = 2 * (0.25 + 0.25) = 1.0
        gam = Tensor(np.full((4, 4), 0.25))
        d = A.distance_from_gamma(gam).data
        np.testing.assert_allclose(d[3, 1], 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        L = int(rng.integers(2, 10))
        rows = rng.random((L, L))
        rows /= rows.sum(axis=1, keepdims=True)
        got = A.distance_from_gamma(Tensor(rows)).data
        np.testing.assert_allclose(got, distance_oracle(rows), atol=1e-10)

    def test_batched_matches_oracle_per_slice(self):
        rng = np.random.default_rng(3)
        rows = rng.random((2, 3, 5, 5))
        rows /= rows.sum(axis=-1, keepdims=True)
        got = A.distance_from_gamma(Tensor(rows)).data
        for i in range(2):
            for j in range(3):
                np.testing.assert_allclose(got[i, j], distance_oracle(rows[i, j]),
                                           atol=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        rows = rng.random((6, 6))
        rows /= rows.sum(axis=1, keepdims=True)
        assert np.all(A.distance_from_gamma(Tensor(rows)).data >= 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        gam = Tensor(rng.random((4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4)))
        check_gradients(lambda: T.tsum(T.mul(A.distance_from_gamma(gam), w)), [gam])


class TestMonotonicAttention:
    def test_vanishing_delta_reduces_to_vanilla(self):
        rng = np.random.default_rng(5)
        q, k, v = rand_qkv(rng, 7, 4)
        mono = A.monotonic_attention(q, k, v, 1e-12)
        plain = A.vanilla_attention(q, k, v)
        np.testing.assert_allclose(mono.data, plain.data, atol=1e-6)

    def test_length_one_returns_value(self):
        rng = np.random.default_rng(6)
        q, k, v = rand_qkv(rng, 1, 3)
        out = A.monotonic_attention(q, k, v, 0.7)
        np.testing.assert_allclose(out.data, v.data, atol=1e-12)

    def test_weight_nonincreasing_in_distance(self):
        # constant positive raw scores isolate the decay ordering
        L = 8
        u = np.full((L, 3), 0.9)
        q = Tensor(u)
        k = Tensor(u)
        v = Tensor(np.random.default_rng(7).normal(size=(L, 3)))
        for delta in (0.1, 1.0, 10.0):
            cap = {}
            A.monotonic_attention(q, k, v, delta, capture=cap)
            w = cap["weights"].data
            d = cap["distance"]
            for t in range(L):
                order = np.argsort(d[t], kind="stable")
                wsorted = w[t][order]
                assert np.all(np.diff(wsorted) <= 1e-12), (delta, t)

    def test_literal_variant_differs(self):
        rng = np.random.default_rng(8)
        q, k, v = rand_qkv(rng, 6, 4)
        default = A.monotonic_attention(q, k, v, 1.0)
        literal = A.monotonic_attention(q, k, v, 1.0, literal=True)
        assert not np.allclose(default.data, literal.data)

    def test_padding_receives_zero_weight(self):
        rng = np.random.default_rng(9)
        q, k, v = rand_qkv(rng, 6, 4)
        mask = np.array([True, True, True, True, False, False])
        cap = {}
        A.monotonic_attention(q, k, v, 0.5, mask=mask, capture=cap)
        w = cap["weights"].data
        assert np.all(w[:, ~mask] == 0.0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


class TestLightweightConv:
    def test_one_hot_center_kernel_is_identity(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(5, 3)))
        kern = np.zeros((5, 3))
        kern[:, 1] = 1.0
        out = A.lightweight_conv(x, Tensor(kern))
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_uniform_k3_hand_case(self):
        x = Tensor(np.array([[1.0], [2.0], [3.0]]))
        kern = Tensor(np.full((3, 3), 1 / 3))
        out = A.lightweight_conv(x, kern)
        np.testing.assert_allclose(out.data.ravel(), [1.0, 2.0, 5 / 3], atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(T.ShapeError):
            A.lightweight_conv(Tensor(np.zeros((4, 2))), Tensor(np.zeros((4, 4))))

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        L, D, ksz = int(rng.integers(1, 9)), int(rng.integers(1, 5)), rng.choice([1, 3, 5])
        x = rng.normal(size=(L, D))
        kern = rng.random((L, ksz))
        kern /= kern.sum(axis=1, keepdims=True)
        got = A.lightweight_conv(Tensor(x), Tensor(kern)).data
        np.testing.assert_allclose(got, lconv_oracle(x, kern), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        kern = Tensor(rng.random((5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3)))
        check_gradients(lambda: T.tsum(T.mul(A.lightweight_conv(x, kern), w)),
                        [x, kern])


class TestSpanDynamicConv:
    def test_zero_generator_gives_moving_average(self):
        rng = np.random.default_rng(11)
        L, D, ksz = 6, 4, 3
        q, k, v = rand_qkv(rng, L, D)
        w = Tensor(np.zeros((D, ksz)))
        b = Tensor(np.zeros((1, ksz)))
        out = A.span_dynamic_conv(q, k, v, w, b)
        want = lconv_oracle(v.data, np.full((L, ksz), 1 / ksz))
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    @pytest.mark.parametrize("L", [1, 2, 5, 9])
    def test_shape_contract(self, L):
        rng = np.random.default_rng(12)
        q, k, v = rand_qkv(rng, L, 4)
        out = A.span_dynamic_conv(q, k, v, Tensor(rng.normal(size=(4, 3))),
                                  Tensor(np.zeros((1, 3))))
        assert out.shape == (L, 4)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_composed_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        L, D, ksz = int(rng.integers(2, 9)), int(rng.integers(2, 5)), rng.choice([3, 5])
        q, k, v = rand_qkv(rng, L, D)
        w = rng.normal(size=(D, ksz))
        b = rng.normal(size=ksz)
        got = A.span_dynamic_conv(q, k, v, Tensor(w), Tensor(b.reshape(1, ksz))).data
        np.testing.assert_allclose(got, sdc_oracle(q.data, k.data, v.data, w, b),
                                   atol=1e-10)

    def test_kernel_rows_sum_to_one(self):
        rng = np.random.default_rng(13)
        q, k, v = rand_qkv(rng, 5, 4)
        cap = {}
        A.span_dynamic_conv(q, k, v, Tensor(rng.normal(size=(4, 3))),
                            Tensor(np.zeros((1, 3))), capture=cap)
        np.testing.assert_allclose(cap["kernels"].data.sum(-1), 1.0, atol=1e-6)


class TestMonoConvAttention:
    def setup_method(self):
        self.rng = np.random.default_rng(14)

    def _head_split(self, x, heads):
        return A._split_heads(x, heads)

    def test_output_width_is_hidden(self):
        h, heads, L = 8, 4, 6
        params = make_params(self.rng, h, heads)
        z = Tensor(self.rng.normal(size=(1, L, h)))
        out = A.attend("monoconv", z, params)
        assert out.shape == (1, L, h)

    def test_zeroed_value_projection_yields_zero_conv_half(self):
        # silencing the value columns feeding the conv heads leaves the
        # pre-projection concat as [decay-branch ; 0]
        h, heads, L = 8, 4, 5
        params = make_params(self.rng, h, heads)
        params.w_v.data[:, h // 2:] = 0.0
        z = Tensor(self.rng.normal(size=(1, L, h)))
        cap = {}
        A.attend("monoconv", z, params, capture=cap)
        assert np.all(cap["sdc_out"].data == 0.0)
        assert not np.all(cap["ma_out"].data == 0.0)

    def test_odd_head_count_rejected(self):
        params = make_params(self.rng, 9, 3)
        z = Tensor(self.rng.normal(size=(1, 4, 9)))
        with pytest.raises(T.ShapeError):
            A.attend("monoconv", z, params)

    def test_whole_mechanism_gradient(self):
        # full-path mode: the gamma stop is lifted so finite differences see
        # the same function the tape differentiates
        h, heads, L = 8, 4, 6
        params = make_params(self.rng, h, heads)
        z = Tensor(self.rng.normal(size=(1, L, h)), requires_grad=True)
        w = Tensor(self.rng.normal(size=(1, L, h)))

        def build():
            return T.tsum(T.mul(A.attend("monoconv", z, params, stop_gamma=False), w))

        check_gradients(build, [z, params.w_q, params.w_k, params.w_v, params.w_o,
                                params.delta_raw, params.sdc_w, params.sdc_b],
                        tol=1e-3)

    def test_default_stop_gamma_exact_for_untangled_params(self):
        # with the measurement-style gamma stop, gradients of parameters
        # outside the query/key path are still exact
        h, heads, L = 8, 4, 6
        params = make_params(self.rng, h, heads)
        z = Tensor(self.rng.normal(size=(1, L, h)))
        w = Tensor(self.rng.normal(size=(1, L, h)))

        def build():
            return T.tsum(T.mul(A.attend("monoconv", z, params), w))

        check_gradients(build, [params.w_v, params.w_o, params.delta_raw,
                                params.sdc_w, params.sdc_b], tol=1e-3)

    def test_distance_grad_path_also_checks(self):
        # gradient flows through gamma when the stop is disabled
        h, heads, L = 8, 4, 5
        params = make_params(self.rng, h, heads)
        z = Tensor(self.rng.normal(size=(1, L, h)), requires_grad=True)
        w = Tensor(self.rng.normal(size=(1, L, h)))

        def build():
            return T.tsum(T.mul(A.attend("monoconv", z, params, stop_gamma=False), w))

        check_gradients(build, [z, params.w_q, params.w_k], tol=1e-3)


class TestAttendDispatch:
    def setup_method(self):
        self.rng = np.random.default_rng(15)

    def test_vanilla_length_one_returns_value_row(self):
        h, heads = 8, 4
        params = make_params(self.rng, h, heads)
        z = Tensor(self.rng.normal(size=(1, 1, h)))
        out = A.attend("vanilla", z, params)
        want = (z.data @ params.w_v.data) @ params.w_o.data
        np.testing.assert_allclose(out.data, want, atol=1e-10)

    def test_mono_with_tiny_delta_equals_vanilla(self):
        h, heads = 8, 4
        params = make_params(self.rng, h, heads)
        params.delta_raw.data[:] = -40.0  # softplus(-40) ~ 4e-18
        z = Tensor(self.rng.normal(size=(2, 6, h)))
        mono = A.attend("mono", z, params)
        params2 = make_params(np.random.default_rng(15), h, heads)
        plain = A.attend("vanilla", z, params2)
        np.testing.assert_allclose(mono.data, plain.data, atol=1e-6)

    @pytest.mark.parametrize("variant", A.VARIANTS)
    def test_all_variants_shapes(self, variant):
        h, heads, B, L = 8, 4, 3, 7
        params = make_params(self.rng, h, heads)
        z = Tensor(self.rng.normal(size=(B, L, h)))
        mask = np.ones((B, L), dtype=bool)
        mask[:, -2:] = False
        out = A.attend(variant, z, params, pad_mask=mask)
        assert out.shape == (B, L, h)

    def test_unknown_variant(self):
        params = make_params(self.rng, 8, 4)
        with pytest.raises(ValueError):
            A.attend("fancy", Tensor(np.zeros((1, 2, 8))), params)

    @pytest.mark.parametrize("variant", ["vanilla", "mono"])
    def test_padding_gets_zero_weight(self, variant):
        h, heads, B, L = 8, 4, 2, 6
        params = make_params(self.rng, h, heads)
        z = Tensor(self.rng.normal(size=(B, L, h)))
        mask = np.ones((B, L), dtype=bool)
        mask[0, 3:] = False
        cap = {}
        A.attend(variant, z, params, pad_mask=mask, capture=cap)
        w = cap["ma_weights"]
        assert np.all(w[0, :, :, 3:] == 0.0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("variant", A.VARIANTS)
    @pytest.mark.parametrize("seed", range(3))
    def test_whole_variant_gradients(self, variant, seed):
        # decay variants run in full-gradient mode so the finite-difference
        # oracle matches the differentiated function
        rng = np.random.default_rng(seed)
        h, heads, L = 8, 4, 5
        params = make_params(rng, h, heads)
        z = Tensor(rng.normal(size=(1, L, h)), requires_grad=True)
        w = Tensor(rng.normal(size=(1, L, h)))
        mask = np.ones((1, L), dtype=bool)
        mask[0, -1] = False

        def build():
            return T.tsum(T.mul(
                A.attend(variant, z, params, pad_mask=mask, stop_gamma=False), w))

        tensors = [z, params.w_q, params.w_k, params.w_v, params.w_o]
        if variant in ("mono", "monoconv"):
            tensors.append(params.delta_raw)
        if variant in ("conv", "monoconv"):
            tensors += [params.sdc_w, params.sdc_b]
        check_gradients(build, tensors, tol=1e-3)


def test_gamma_empty_sequence_returns_empty():
    q = Tensor(np.zeros((0, 4)))
    out = A.gamma(q, q)
    assert out.shape == (0, 0)
    assert A.distance_from_gamma(out).shape == (0, 0)
