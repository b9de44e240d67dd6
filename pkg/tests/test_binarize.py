"""Sign binarization, bit packing and XNOR/popcount arithmetic."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bscnet.binarize import (
    approx_sign,
    binarize_activations,
    binarize_weights,
    pack_bits,
    scaled_sign_grad,
    sign,
    sign_surrogate_grad,
    unpack_bits,
    weight_ste_grad,
    xnor_matmul,
    xnor_popcount_dot,
    xnor_sparse_conv,
)
from bscnet.errors import DegenerateScale, LengthMismatch, NonFiniteActivation, NonFiniteWeight, ShapeMismatch
from bscnet.sparse import KernelOffsets, build_kernel_map

from conftest import random_sparse


def _pm1(bits):
    return 2.0 * np.asarray(bits, dtype=np.float64) - 1.0


class TestSign:
    def test_zero_maps_to_plus_one(self):
        np.testing.assert_array_equal(sign([-2.0, -0.0, 0.0, 3.0]), [-1, 1, 1, 1])

    def test_activation_bits(self):
        np.testing.assert_array_equal(binarize_activations([[-1e-9, 0.0, 5.0]]), [[0, 1, 1]])
        with pytest.raises(NonFiniteActivation):
            binarize_activations([np.nan])


class TestPacking:
    def test_bit_positions(self):
        bits = np.zeros(70, dtype=np.uint8)
        bits[[0, 3, 64, 69]] = 1
        words = pack_bits(bits)
        assert words.dtype == np.dtype("<u8")
        assert words[0] == (1 << 0) | (1 << 3)
        assert words[1] == (1 << 0) | (1 << 5)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=300))
    def test_round_trip(self, bits):
        words = pack_bits(bits)
        assert words.shape == (-(-len(bits) // 64),)
        np.testing.assert_array_equal(unpack_bits(words, len(bits)), bits)

    def test_padding_is_zero(self):
        words = pack_bits(np.ones(10, dtype=np.uint8))
        assert int(words[0]) == (1 << 10) - 1


class TestBinarizeWeights:
    def test_scale_and_signs(self):
        w = np.array([[[0.5, -1.5]], [[0.0, -2.0]]])
        bw = binarize_weights(w)
        assert bw.scale == pytest.approx(1.0)
        np.testing.assert_array_equal(bw.signs(), sign(w))
        np.testing.assert_allclose(bw.dequantize(), sign(w))

    def test_errors(self):
        with pytest.raises(DegenerateScale):
            binarize_weights(np.zeros((2, 2)))
        with pytest.raises(NonFiniteWeight):
            binarize_weights(np.array([1.0, np.inf]))


class TestXnorDot:
    """The packed dot must equal the integer dot of the ±1 vectors."""

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 700).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
        st.lists(st.integers(0, 1), min_size=n, max_size=n),
    )))
    def test_matches_integer_dot(self, pair):
        a, w = pair
        n = len(a)
        expected = int(_pm1(a) @ _pm1(w))
        assert xnor_popcount_dot(pack_bits(a), pack_bits(w), n) == expected

    def test_bounds(self, rng):
        n = 100
        a = rng.integers(0, 2, n)
        assert xnor_popcount_dot(pack_bits(a), pack_bits(a), n) == n
        assert xnor_popcount_dot(pack_bits(a), pack_bits(1 - a), n) == -n

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            xnor_popcount_dot(pack_bits([1] * 65), pack_bits([1]), 65)
        with pytest.raises(LengthMismatch):
            xnor_popcount_dot(pack_bits([1]), pack_bits([1]), 65)

    def test_matmul_matches_float(self, rng):
        n = 77
        a = rng.integers(0, 2, (6, n))
        w = rng.integers(0, 2, (4, n))
        np.testing.assert_array_equal(xnor_matmul(pack_bits(a), pack_bits(w), n), _pm1(a) @ _pm1(w).T)


class TestXnorSparseConv:
    def test_equals_float_conv_of_signs(self, rng):
        t = random_sparse(rng, grid=6, occupancy=0.3, channels=5)
        latent = rng.normal(size=(27, 5, 3))
        bw = binarize_weights(latent)
        kmap = build_kernel_map(t, t.coords, KernelOffsets.cube(3), 1)
        got = xnor_sparse_conv(t.features, bw, kmap)
        xs = sign(t.features)
        expected = np.zeros((t.num_sites, 3))
        for k, (i, o) in enumerate(kmap.pairs):
            np.add.at(expected, o, xs[i] @ bw.dequantize()[k])
        np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self, rng):
        t = random_sparse(rng, channels=2)
        kmap = build_kernel_map(t, t.coords, KernelOffsets.cube(3), 1)
        with pytest.raises(ShapeMismatch):
            xnor_sparse_conv(t.features, binarize_weights(np.ones((27, 3, 1))), kmap)


class TestSurrogates:
    def test_approx_sign_knots(self):
        np.testing.assert_allclose(approx_sign([-2, -1, -0.5, 0, 0.5, 1, 2]), [-1, -1, -0.75, 0, 0.75, 1, 1])

    def test_surrogate_is_derivative_of_approx_sign(self):
        x = np.array([-0.9, -0.6, -0.3, 0.2, 0.5, 0.95, 1.5, -1.5])
        h = 1e-6
        fd = (approx_sign(x + h) - approx_sign(x - h)) / (2 * h)
        np.testing.assert_allclose(sign_surrogate_grad(x), fd, atol=1e-6)

    def test_weight_ste_clips(self):
        np.testing.assert_array_equal(weight_ste_grad([1, 1, 1], [0.5, -1.0, 1.5]), [1, 1, 0])

    def test_scaled_sign_grad_scale_part_is_exact(self, rng):
        """Only the scale term is smooth; compare it against finite differences."""
        w = rng.normal(size=12) * 0.5
        up = rng.normal(size=12)
        s = sign(w)
        h = 1e-6
        fd = np.empty(12)
        for i in range(12):
            d = np.zeros(12)
            d[i] = h
            fd[i] = (np.mean(np.abs(w + d)) - np.mean(np.abs(w - d))) / (2 * h) * np.sum(up * s)
        ste = np.mean(np.abs(w)) * weight_ste_grad(up, w)
        np.testing.assert_allclose(scaled_sign_grad(up, w) - ste, fd, rtol=1e-6)
