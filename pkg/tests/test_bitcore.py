"""Tests for the packed binary kernels.

Every packed routine is checked against an independent scalar or dense
float oracle that never touches the bit-twiddling code paths.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitbranch.bitcore import (
    ENC_ZERO_ONE,
    PAD_NEG_ONE,
    PAD_POS_ONE,
    PAD_ZERO,
    BitcoreError,
    BitTensor,
    ConvGeometry,
    binary_conv2d,
    fixed_point_dot,
    pack_bools,
    pack_signs,
    speedup_ratio,
    xnor_popcount_dot,
    zero_one_dot,
)


# ---------------------------------------------------------------- oracles


def sign_oracle(x):
    """Elementwise sign with sign(0) = +1, plain numpy comparison."""
    return np.where(np.asarray(x) >= 0, 1, -1).astype(np.int8)


def dense_conv_oracle(x, w, stride, padding, dilation, pad_fill):
    """Dense float cross-correlation of small integer tensors.

    Straight loop implementation, no packing, no popcounts.  pad_fill is
    the constant inserted outside the image (0 means padded taps vanish).
    """
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    xp = np.full((n, c, h + 2 * ph, wd + 2 * pw), float(pad_fill))
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ky in range(kh):
                        for kx in range(kw):
                            iy = oy * sh + ky * dh
                            ix = ox * sw + kx * dw
                            acc += np.dot(xp[b, :, iy, ix], w[o, :, ky, kx])
                    out[b, o, oy, ox] = acc
    return out


def scalar_pm1_dot(a, b):
    return int(np.dot(np.asarray(a, dtype=np.int64), np.asarray(b, dtype=np.int64)))


def fixed_point_decode(bases):
    """Decode a list of +-1 basis vectors into the fixed-point values."""
    total = np.zeros(len(bases[0]), dtype=np.int64)
    for i, b in enumerate(bases):
        total += (1 << i) * np.asarray(b, dtype=np.int64)
    return total


# ------------------------------------------------------------ pack/unpack


class TestPacking:
    def test_roundtrip_small(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 70, 3, 3))
        bt = pack_signs(x, axis=1)
        np.testing.assert_array_equal(bt.unpack(), sign_oracle(x))

    def test_sign_zero_is_positive(self):
        x = np.zeros((1, 5, 1, 1))
        bt = pack_signs(x, axis=1)
        assert np.all(bt.unpack() == 1)

    def test_padding_bits_are_zero(self):
        x = np.ones((1, 65, 1, 1))
        bt = pack_signs(x, axis=1)
        assert bt.words_per_lane == 2
        assert bt.valid_bits == 1
        # word 1 holds a single valid bit; the other 63 must be clear
        assert np.all(bt.words[..., 1] == np.uint64(1))

    def test_exact_multiple_of_64(self):
        x = np.ones((1, 128, 1, 1))
        bt = pack_signs(x, axis=1)
        assert bt.words_per_lane == 2
        assert bt.valid_bits == 64

    def test_rejects_nan(self):
        with pytest.raises(BitcoreError):
            pack_signs(np.array([1.0, np.nan]), axis=0)

    def test_rejects_empty(self):
        with pytest.raises(BitcoreError):
            pack_signs(np.empty((0, 4)), axis=1)

    @given(
        c=st.integers(min_value=1, max_value=200),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_roundtrip_property(self, c, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, c, 2))
        bt = pack_signs(x, axis=1)
        np.testing.assert_array_equal(bt.unpack(), sign_oracle(x))

    def test_zero_one_roundtrip(self):
        rng = np.random.default_rng(3)
        bits = rng.integers(0, 2, size=(2, 77, 4)).astype(bool)
        bt = pack_bools(bits, axis=1, encoding=ENC_ZERO_ONE)
        np.testing.assert_array_equal(bt.unpack(), bits.astype(np.int8))


# ------------------------------------------------------------- lane dots


class TestXnorDot:
    def test_worked_example(self):
        # 6-bit lanes: a = [+,+,-,-,+,-], b = [+,-,-,+,+,+]
        a = np.array([1, 1, -1, -1, 1, -1])
        b = np.array([1, -1, -1, 1, 1, 1])
        pa = pack_signs(a.astype(float), axis=0)
        pb = pack_signs(b.astype(float), axis=0)
        assert xnor_popcount_dot(pa, pb, 6) == scalar_pm1_dot(a, b)

    def test_length_mismatch_rejected(self):
        pa = pack_signs(np.ones(6), axis=0)
        pb = pack_signs(np.ones(70), axis=0)
        with pytest.raises(BitcoreError):
            xnor_popcount_dot(pa, pb, 6)

    @given(
        m=st.integers(min_value=1, max_value=300),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=80, deadline=None)
    def test_matches_scalar_oracle(self, m, seed):
        rng = np.random.default_rng(seed)
        a = rng.choice([-1, 1], size=m)
        b = rng.choice([-1, 1], size=m)
        pa = pack_signs(a.astype(float), axis=0)
        pb = pack_signs(b.astype(float), axis=0)
        assert xnor_popcount_dot(pa, pb, m) == scalar_pm1_dot(a, b)

    @given(
        m=st.integers(min_value=1, max_value=190),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_padding_bit_flips_never_change_dot(self, m, seed):
        rng = np.random.default_rng(seed)
        a = rng.choice([-1, 1], size=m)
        b = rng.choice([-1, 1], size=m)
        pa = pack_signs(a.astype(float), axis=0)
        pb = pack_signs(b.astype(float), axis=0)
        base = xnor_popcount_dot(pa, pb, m)
        n_bits = pa.words_per_lane * 64
        if n_bits == m:
            return
        for bit in range(m, n_bits):
            corrupted = pa.words.copy()
            corrupted[..., bit // 64] ^= np.uint64(1) << np.uint64(bit % 64)
            pc = BitTensor(pa.shape, pa.packing_axis, corrupted, pa.valid_bits)
            assert xnor_popcount_dot(pc, pb, m) == base

    @given(
        m=st.integers(min_value=1, max_value=200),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    @settings(max_examples=60, deadline=None)
    def test_zero_one_dot_oracle(self, m, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 2, size=m)
        w = rng.choice([-1, 1], size=m)
        pa = pack_bools(a.astype(bool), axis=0, encoding=ENC_ZERO_ONE)
        pw = pack_signs(w.astype(float), axis=0)
        assert zero_one_dot(pa, pw, m) == scalar_pm1_dot(a, w)


# ------------------------------------------------------------ convolution


def random_conv_case(rng):
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 140))
    co = int(rng.integers(1, 9))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    dh, dw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    sh, sw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    ph, pw = int(rng.integers(0, 3)), int(rng.integers(0, 3))
    h_min = dh * (kh - 1) + 1 - 2 * ph
    w_min = dw * (kw - 1) + 1 - 2 * pw
    h = int(rng.integers(max(1, h_min), max(1, h_min) + 6))
    w = int(rng.integers(max(1, w_min), max(1, w_min) + 6))
    x = rng.choice([-1.0, 1.0], size=(n, c, h, w))
    wt = rng.choice([-1.0, 1.0], size=(co, c, kh, kw))
    return x, wt, (sh, sw), (ph, pw), (dh, dw)


class TestBinaryConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = rng.choice([-1.0, 1.0], size=(1, 1, 4, 4))
        w = np.ones((1, 1, 1, 1))
        out = binary_conv2d(pack_signs(x), pack_signs(w), ConvGeometry())
        np.testing.assert_array_equal(out[0, 0], x[0, 0].astype(np.int32))

    @pytest.mark.parametrize("pad_value,fill", [(PAD_NEG_ONE, -1), (PAD_POS_ONE, 1)])
    def test_constant_padding_matches_oracle(self, pad_value, fill):
        rng = np.random.default_rng(7)
        for _ in range(30):
            x, w, stride, padding, dilation = random_conv_case(rng)
            geom = ConvGeometry(stride, padding, dilation, pad_value)
            got = binary_conv2d(pack_signs(x), pack_signs(w), geom)
            want = dense_conv_oracle(x, w, stride, padding, dilation, fill)
            np.testing.assert_array_equal(got, want.astype(np.int32))

    def test_zero_skip_padding_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            x, w, stride, padding, dilation = random_conv_case(rng)
            geom = ConvGeometry(stride, padding, dilation, PAD_ZERO)
            got = binary_conv2d(pack_signs(x), pack_signs(w), geom)
            want = dense_conv_oracle(x, w, stride, padding, dilation, 0)
            np.testing.assert_array_equal(got, want.astype(np.int32))

    def test_zero_one_activations_match_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            x, w, stride, padding, dilation = random_conv_case(rng)
            a = (x > 0).astype(float)
            geom = ConvGeometry(stride, padding, dilation, PAD_ZERO)
            pa = pack_bools(a.astype(bool), axis=1, encoding=ENC_ZERO_ONE)
            got = binary_conv2d(pa, pack_signs(w), geom)
            want = dense_conv_oracle(a, w, stride, padding, dilation, 0)
            np.testing.assert_array_equal(got, want.astype(np.int32))

    def test_channel_mismatch_rejected(self):
        x = pack_signs(np.ones((1, 8, 3, 3)))
        w = pack_signs(np.ones((2, 9, 3, 3)))
        with pytest.raises(BitcoreError):
            binary_conv2d(x, w, ConvGeometry())

    def test_degenerate_output_rejected(self):
        x = pack_signs(np.ones((1, 4, 2, 2)))
        w = pack_signs(np.ones((1, 4, 3, 3)))
        with pytest.raises(BitcoreError):
            binary_conv2d(x, w, ConvGeometry())

    def test_bad_pad_value_rejected(self):
        with pytest.raises(BitcoreError):
            ConvGeometry(pad_value="reflect")


# ------------------------------------------------------------ speedup model


class TestSpeedup:
    def test_reference_case(self):
        # 256-channel 3x3 on 28x28, K = 5 branches
        sigma = speedup_ratio(256, 3, 3, 28, 28, 28, 28, 5)
        assert sigma == pytest.approx(12.45, abs=0.01)

    def test_single_branch_case(self):
        sigma = speedup_ratio(256, 3, 3, 28, 28, 28, 28, 1)
        assert sigma == pytest.approx(62.27, abs=0.01)

    def test_exact_rational_value(self):
        # closed form evaluated independently
        core = 256 * 3 * 3 * 28 * 28
        want = 64 * core / (5 * (core + 64 * 28 * 28))
        assert speedup_ratio(256, 3, 3, 28, 28, 28, 28, 5) == pytest.approx(want, rel=1e-12)

    @given(k=st.integers(min_value=1, max_value=32))
    @settings(max_examples=32, deadline=None)
    def test_decreasing_in_k(self, k):
        a = speedup_ratio(64, 3, 3, 14, 14, 14, 14, k)
        b = speedup_ratio(64, 3, 3, 14, 14, 14, 14, k + 1)
        assert a > b

    def test_bounded_by_64_over_k(self):
        for k in (1, 2, 4, 8):
            assert speedup_ratio(128, 3, 3, 28, 28, 28, 28, k) < 64.0 / k

    def test_rejects_bad_args(self):
        with pytest.raises(BitcoreError):
            speedup_ratio(256, 3, 3, 28, 28, 28, 28, 0)
        with pytest.raises(BitcoreError):
            speedup_ratio(-1, 3, 3, 28, 28, 28, 28, 1)


# ---------------------------------------------------------- fixed point


class TestFixedPoint:
    def test_worked_example(self):
        # two 2-bit operands, all bases +1 on 4 bits: values are 3 each,
        # dot = 4 positions * 9 = 36 via the double sum
        ones = pack_signs(np.ones(4), axis=0)
        assert fixed_point_dot([ones, ones], [ones, ones], 4) == 36

    def test_exhaustive_small(self):
        # every +-1 basis combination for m <= 4, P in {1, 2}
        for m in (1, 2, 3, 4):
            combos = [
                np.array([((i >> b) & 1) * 2 - 1 for b in range(m)])
                for i in range(2**m)
            ]
            packed = [pack_signs(c.astype(float), axis=0) for c in combos]
            for p in (1, 2):
                for wi in range(2 ** (m * p)):
                    widx = [(wi >> (m * q)) % (2**m) for q in range(p)]
                    wv = fixed_point_decode([combos[i] for i in widx])
                    pw = [packed[i] for i in widx]
                    for ai in range(2 ** (m * p)):
                        aidx = [(ai >> (m * q)) % (2**m) for q in range(p)]
                        av = fixed_point_decode([combos[i] for i in aidx])
                        pa = [packed[i] for i in aidx]
                        want = int(np.dot(wv, av))
                        assert fixed_point_dot(pw, pa, m) == want

    def test_rejects_empty(self):
        ones = pack_signs(np.ones(4), axis=0)
        with pytest.raises(BitcoreError):
            fixed_point_dot([], [ones], 4)

    def test_rejects_rank_mismatch(self):
        ones = pack_signs(np.ones(4), axis=0)
        with pytest.raises(BitcoreError):
            fixed_point_dot([ones, ones], [ones], 4)
