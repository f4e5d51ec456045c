"""Tests for the quantizers and their backward rules."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitbranch.binarizers import (
    BnParams,
    QuantizerKind,
    WeightScale,
    act_sign_poly_bwd,
    act_sign_poly_factor,
    act_sign_poly_fwd,
    act_zero_one_bwd,
    act_zero_one_fwd,
    act_zero_one_pack,
    affine_int8_dequant,
    affine_int8_fwd,
    fold_scales,
    weight_binarize_bwd,
    weight_binarize_fwd,
)
from bitbranch.bitcore import BitcoreError, ConvGeometry, binary_conv2d, pack_signs


def poly_relaxation(x):
    """The clipped piecewise polynomial whose derivative is the backward.

    F(x) = -1 for x < -1; 2x + x^2 on [-1, 0); 2x - x^2 on [0, 1); 1 beyond.
    Used only as a finite-difference oracle.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x < 0, 2 * x + x * x, 2 * x - x * x)
    return np.where(x < -1, -1.0, np.where(x >= 1, 1.0, out))


class TestWeightBinarize:
    def test_worked_example(self):
        bits, scale = weight_binarize_fwd(np.array([[0.5, -1.5]]))
        np.testing.assert_array_equal(bits.unpack(), [[1, -1]])
        assert scale.alpha[0] == pytest.approx(1.0)

    def test_constant_filter(self):
        w = np.full((1, 4, 3, 3), 0.7)
        bits, scale = weight_binarize_fwd(w)
        assert np.all(bits.unpack() == 1)
        assert scale.alpha[0] == pytest.approx(0.7)

    def test_alpha_matches_scalar_oracle(self):
        rng = np.random.default_rng(5)
        w = rng.standard_normal((4, 3, 3, 3))
        _, scale = weight_binarize_fwd(w)
        for o in range(4):
            acc = 0.0
            for v in w[o].ravel():
                acc += abs(v)
            assert scale.alpha[o] == pytest.approx(acc / w[o].size)

    def test_unpack_is_sign(self):
        rng = np.random.default_rng(9)
        w = rng.standard_normal((3, 70, 1, 1))
        bits, _ = weight_binarize_fwd(w)
        np.testing.assert_array_equal(
            bits.unpack(), np.where(w >= 0, 1, -1).astype(np.int8)
        )

    def test_rejects_nonfinite(self):
        with pytest.raises(BitcoreError):
            weight_binarize_fwd(np.array([[np.inf, 1.0]]))

    def test_bwd_pass_through(self):
        g = np.array([[1.0, -2.0]])
        w = np.array([[0.3, -0.9]])
        np.testing.assert_array_equal(weight_binarize_bwd(g, w), g)

    def test_bwd_clips_outside_range(self):
        g = np.array([[1.0, 1.0]])
        w = np.array([[10.0, 0.5]])
        np.testing.assert_array_equal(weight_binarize_bwd(g, w), [[0.0, 1.0]])

    def test_bwd_clip_off(self):
        g = np.array([[1.0, 1.0]])
        w = np.array([[10.0, 0.5]])
        np.testing.assert_array_equal(weight_binarize_bwd(g, w, clip_range=None), g)

    def test_bwd_zero_grad(self):
        g = np.zeros((2, 3))
        assert np.all(weight_binarize_bwd(g, np.ones((2, 3))) == 0)

    def test_bwd_shape_mismatch(self):
        with pytest.raises(BitcoreError):
            weight_binarize_bwd(np.ones((2, 2)), np.ones((2, 3)))


class TestActSignPoly:
    def test_forward_is_sign(self):
        np.testing.assert_array_equal(
            act_sign_poly_fwd(np.array([-2.0, -0.0, 0.0, 3.0])), [-1, 1, 1, 1]
        )

    @pytest.mark.parametrize(
        "x,factor", [(-0.5, 1.0), (0.25, 1.5), (1.5, 0.0), (-1.5, 0.0), (-1.0, 0.0), (0.0, 2.0)]
    )
    def test_pointwise_factors(self, x, factor):
        assert act_sign_poly_factor(np.array([x]))[0] == pytest.approx(factor)

    def test_zero_outside_unit_interval(self):
        x = np.array([-5.0, -1.0001, 1.0, 7.0])
        assert np.all(act_sign_poly_factor(x) == 0)

    def test_matches_fd_of_polynomial(self):
        # central differences of the relaxation F at 1e-4 step, away from
        # the breakpoints -1, 0, 1
        rng = np.random.default_rng(21)
        x = rng.uniform(-2.0, 2.0, size=4000)
        keep = np.min(np.abs(x[:, None] - np.array([-1.0, 0.0, 1.0])), axis=1) > 1e-3
        x = x[keep]
        h = 1e-4
        fd = (poly_relaxation(x + h) - poly_relaxation(x - h)) / (2 * h)
        np.testing.assert_allclose(act_sign_poly_factor(x), fd, atol=1e-6)

    def test_bwd_multiplies(self):
        g = np.array([2.0, 2.0])
        x = np.array([-0.5, 0.25])
        np.testing.assert_allclose(act_sign_poly_bwd(g, x), [2.0, 3.0])


class TestActZeroOne:
    def test_threshold(self):
        np.testing.assert_array_equal(
            act_zero_one_fwd(np.array([0.7, 0.2, 0.5])), [1.0, 0.0, 1.0]
        )

    def test_clipped_ste(self):
        g = np.ones(4)
        x = np.array([-0.5, 0.0, 0.9, 1.2])
        np.testing.assert_array_equal(act_zero_one_bwd(g, x), [0.0, 1.0, 1.0, 0.0])

    def test_packed_dot_matches_scalar_oracle(self):
        rng = np.random.default_rng(31)
        x = rng.uniform(0, 1, size=(1, 70, 3, 3))
        w = rng.standard_normal((2, 70, 3, 3))
        a = act_zero_one_fwd(x)
        got = binary_conv2d(
            act_zero_one_pack(x), weight_binarize_fwd(w)[0], ConvGeometry()
        )
        want = np.einsum("nchw,ochw->no", a, np.where(w >= 0, 1.0, -1.0))
        np.testing.assert_array_equal(got[:, :, 0, 0], want.astype(np.int32))


class TestAffineInt8:
    def test_worked_example(self):
        q, scale, zp = affine_int8_fwd(np.array([-1.0, 0.0, 1.0]))
        np.testing.assert_array_equal(q, [-127, 0, 127])
        assert scale == pytest.approx(1 / 127)
        assert zp == 0

    def test_all_zero_convention(self):
        q, scale, _ = affine_int8_fwd(np.zeros(5))
        assert np.all(q == 0)
        assert scale == 1.0

    @given(seed=st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_dequant_error_bound(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(64) * rng.uniform(0.01, 10)
        q, scale, zp = affine_int8_fwd(x)
        err = np.abs(affine_int8_dequant(q, scale, zp) - x)
        assert np.max(err) <= scale / 2 + 1e-12

    def test_rejects_nonfinite(self):
        with pytest.raises(BitcoreError):
            affine_int8_fwd(np.array([np.nan]))


class TestFoldScales:
    def _random_bn(self, rng, c):
        return BnParams(
            gamma=rng.uniform(0.5, 2.0, c),
            beta=rng.standard_normal(c),
            mean=rng.standard_normal(c),
            var=rng.uniform(0.2, 3.0, c),
        )

    def test_identity_alpha(self):
        rng = np.random.default_rng(3)
        bn = self._random_bn(rng, 4)
        folded = fold_scales(WeightScale(np.ones(4)), bn)
        np.testing.assert_allclose(folded.gamma, bn.gamma)
        np.testing.assert_allclose(folded.mean, bn.mean)

    @pytest.mark.parametrize("alpha_val", [2.0, 0.5])
    def test_folded_equals_explicit(self, alpha_val):
        rng = np.random.default_rng(17)
        c = 6
        bn = self._random_bn(rng, c)
        alpha = WeightScale(np.full(c, alpha_val) * rng.uniform(0.5, 1.5, c))
        y = rng.standard_normal((2, c, 5, 5))
        explicit = bn.apply(y * alpha.alpha.reshape(1, -1, 1, 1))
        folded = fold_scales(alpha, bn).apply(y)
        np.testing.assert_allclose(folded, explicit, rtol=1e-6)

    def test_layer_level_fold(self):
        # packed binary conv + alpha + BN == packed conv + folded BN
        rng = np.random.default_rng(23)
        x = rng.choice([-1.0, 1.0], size=(2, 16, 6, 6))
        w = rng.standard_normal((4, 16, 3, 3))
        bits, alpha = weight_binarize_fwd(w)
        bn = self._random_bn(rng, 4)
        raw = binary_conv2d(pack_signs(x), bits, ConvGeometry(padding=(1, 1))).astype(float)
        explicit = bn.apply(raw * alpha.alpha.reshape(1, -1, 1, 1))
        folded = fold_scales(alpha, bn).apply(raw)
        np.testing.assert_allclose(folded, explicit, rtol=1e-6, atol=1e-9)

    def test_missing_bn_rejected(self):
        with pytest.raises(BitcoreError):
            fold_scales(WeightScale(np.ones(3)), None)

    def test_zero_alpha_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(BitcoreError):
            fold_scales(WeightScale(np.zeros(3)), self._random_bn(rng, 3))


class TestKinds:
    def test_known_kinds(self):
        for k in ("weight_sign_ste", "act_sign_poly", "act_zero_one", "affine_int8"):
            QuantizerKind(k)

    def test_unknown_kind_rejected(self):
        with pytest.raises(BitcoreError):
            QuantizerKind("ternary")

    def test_bad_clip_range_rejected(self):
        with pytest.raises(BitcoreError):
            QuantizerKind("weight_sign_ste", clip_range=(1.0, -1.0))
