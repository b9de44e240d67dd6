"""Sign binarization, bit packing and XNOR/popcount arithmetic.

Conventions: ``sign(0) = +1``; bit 1 encodes +1.  Bits are packed into
little-endian ``uint64`` words along the last axis, element ``i`` at bit
``i % 64`` of word ``i // 64``, with zero-filled padding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScale, LengthMismatch, NonFiniteActivation, NonFiniteWeight, ShapeMismatch


def sign(x):
    """Elementwise sign with ``sign(0) = +1``."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def pack_bits(bits) -> np.ndarray:
    """Pack a 0/1 array along its last axis into ``uint64`` words."""
    bits = np.asarray(bits, dtype=np.uint8)
    n = bits.shape[-1]
    words = max(1, -(-n // 64))
    padded = np.zeros(bits.shape[:-1] + (words * 64,), dtype=np.uint8)
    padded[..., :n] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8")


def unpack_bits(words, n: int) -> np.ndarray:
    words = np.ascontiguousarray(np.asarray(words, dtype="<u8"))
    raw = words.view(np.uint8)
    return np.unpackbits(raw, axis=-1, bitorder="little")[..., :n]


@dataclass(frozen=True)
class BinaryWeights:
    """Packed weight signs plus the layer-wise scale.

    ``packed_bits`` flattens ``shape = (offsets, in_channels, out_channels)``
    in C order (offset-major, then in-channel, then out-channel).
    """

    packed_bits: np.ndarray
    scale: float
    shape: tuple

    def signs(self) -> np.ndarray:
        n = int(np.prod(self.shape))
        return unpack_bits(self.packed_bits, n).astype(np.float64).reshape(self.shape) * 2.0 - 1.0

    def dequantize(self) -> np.ndarray:
        return self.scale * self.signs()


def binarize_weights(latent) -> BinaryWeights:
    w = np.asarray(latent, dtype=np.float64)
    if not np.isfinite(w).all():
        raise NonFiniteWeight("latent weights contain NaN or inf")
    scale = float(np.mean(np.abs(w)))
    if scale == 0.0:
        raise DegenerateScale("all latent weights are zero")
    bits = (w >= 0).reshape(-1)
    return BinaryWeights(pack_bits(bits), scale, tuple(w.shape))


def binarize_activations(features) -> np.ndarray:
    """0/1 bit matrix, 1 where the feature is non-negative.  No scaling."""
    f = np.asarray(features, dtype=np.float64)
    if not np.isfinite(f).all():
        raise NonFiniteActivation("activations contain NaN or inf")
    return (f >= 0).astype(np.uint8)


def xnor_popcount_dot(a_bits, w_bits, n: int) -> int:
    """Integer dot product of two packed ±1 vectors of length ``n``."""
    a = np.asarray(a_bits, dtype=np.uint64).reshape(-1)
    w = np.asarray(w_bits, dtype=np.uint64).reshape(-1)
    if len(a) != len(w) or n > 64 * len(a) or n < 0:
        raise LengthMismatch(f"packed lengths {len(a)}/{len(w)} words cannot hold n={n}")
    pad = 64 * len(a) - n
    matches = int(np.bitwise_count(~(a ^ w)).sum()) - pad
    return 2 * matches - n


def xnor_matmul(a_words, w_words, n: int) -> np.ndarray:
    """``(N, W) x (M, W) -> (N, M)`` integer ±1 dot products."""
    a = np.asarray(a_words, dtype=np.uint64)
    w = np.asarray(w_words, dtype=np.uint64)
    if a.shape[-1] != w.shape[-1] or n > 64 * a.shape[-1]:
        raise LengthMismatch("packed word counts differ")
    pad = 64 * a.shape[-1] - n
    pc = np.bitwise_count(~(a[:, None, :] ^ w[None, :, :])).sum(axis=-1, dtype=np.int64) - pad
    return 2 * pc - n


def approx_sign(x):
    """Piecewise-quadratic approximation of sign used for its derivative."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < -1, -1.0, np.where(x < 0, 2 * x + x * x, np.where(x < 1, 2 * x - x * x, 1.0)))


def sign_surrogate_grad(x):
    """Derivative of :func:`approx_sign`: ``2 - 2|x|`` inside (-1, 1), else 0."""
    x = np.asarray(x, dtype=np.float64)
    g = np.where((x >= -1) & (x < 0), 2 + 2 * x, np.where((x >= 0) & (x < 1), 2 - 2 * x, 0.0))
    return g if g.ndim else float(g)


def weight_ste_grad(upstream, latent):
    """Clipped straight-through gradient: pass ``upstream`` where ``|latent| <= 1``."""
    up = np.asarray(upstream, dtype=np.float64)
    lat = np.asarray(latent, dtype=np.float64)
    g = np.where(np.abs(lat) <= 1.0, up, 0.0)
    return g if g.ndim else float(g)


def scaled_sign_grad(upstream, latent) -> np.ndarray:
    """Gradient of ``mean(|W|) * sign(W)`` w.r.t. ``W`` for a whole tensor.

    The sign term uses the clipped STE; the scale term is exact
    (``d mean|W| / dW = sign(W) / N``).
    """
    up = np.asarray(upstream, dtype=np.float64)
    w = np.asarray(latent, dtype=np.float64)
    s = sign(w)
    scale = np.mean(np.abs(w))
    return scale * weight_ste_grad(up, w) + s * (np.sum(up * s) / w.size)


def xnor_sparse_conv(features, weights: BinaryWeights, kmap) -> np.ndarray:
    """Binary sparse convolution evaluated with XNOR/popcount.

    Activations are binarized with :func:`binarize_activations`; the result is
    ``scale * sum_k popcount-dot`` and equals the float convolution with
    weights ``scale * sign(W)`` and inputs ``sign(x)``.
    """
    k, cin, cout = weights.shape
    if len(kmap.pairs) != k or np.shape(features)[1] != cin:
        raise ShapeMismatch("weights do not match kernel map / input channels")
    a_words = pack_bits(binarize_activations(features))
    w_bits = unpack_bits(weights.packed_bits, k * cin * cout).reshape(k, cin, cout)
    w_words = pack_bits(np.ascontiguousarray(w_bits.transpose(0, 2, 1)))  # (k, cout, words)
    acc = np.zeros((kmap.num_out, cout), dtype=np.int64)
    for j, (rows_in, rows_out) in enumerate(kmap.pairs):
        if len(rows_in):
            acc[rows_out] += xnor_matmul(a_words[rows_in], w_words[j], cin)
    return weights.scale * acc.astype(np.float64)
