"""Quantizers with their custom backward rules.

Four kinds live here:

* weight sign binarization with a straight-through estimator (optionally
  clipped outside a configurable latent range),
* +-1 activation binarization whose backward is the derivative of a
  piecewise polynomial relaxation of sign,
* a {0,1} activation binarizer (threshold 0.5, clipped STE on [0, 1]),
* a symmetric per-tensor int8 affine quantizer for the few layers kept at
  8-bit precision.

The per-filter weight scale alpha = mean|w| is exposed separately and can
be folded into a following batch normalization so inference never performs
the multiplication explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bitbranch.bitcore import BitcoreError, BitTensor, pack_bools, pack_signs

STE_CLIP_DEFAULT = (-1.0, 1.0)


@dataclass
class QuantizerKind:
    """Identifies a quantizer and its STE pass-through interval."""

    kind: str
    clip_range: tuple[float, float] | None = STE_CLIP_DEFAULT

    def __post_init__(self):
        valid = {"weight_sign_ste", "act_sign_poly", "act_zero_one", "affine_int8"}
        if self.kind not in valid:
            raise BitcoreError(f"unknown quantizer kind {self.kind!r}")
        if self.clip_range is not None:
            lo, hi = self.clip_range
            if not lo < hi:
                raise BitcoreError("clip_range must be an increasing interval")


@dataclass
class WeightScale:
    """Per-output-filter positive scale: alpha_o = mean |w_o|."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if np.any(self.alpha < 0) or not np.all(np.isfinite(self.alpha)):
            raise BitcoreError("alpha must be finite and non-negative")


def sign_pm1(x: np.ndarray) -> np.ndarray:
    """sign with the sign(0) = +1 convention, as a float array."""
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def weight_binarize_fwd(w: np.ndarray) -> tuple[BitTensor, WeightScale]:
    """Binarize a weight tensor: bits = sign(w), alpha_o = mean |w_o|.

    Filters index axis 0; packing runs along axis 1 (input channels).
    """
    w = np.asarray(w)
    if w.ndim < 2:
        raise BitcoreError("weight tensors must have an output and an input axis")
    if not np.all(np.isfinite(w)):
        raise BitcoreError("cannot binarize non-finite weights")
    bits = pack_signs(w, axis=1)
    alpha = np.abs(w).reshape(w.shape[0], -1).mean(axis=1)
    return bits, WeightScale(alpha)


def weight_binarize_bwd(
    grad_out: np.ndarray,
    w: np.ndarray,
    clip_range: tuple[float, float] | None = STE_CLIP_DEFAULT,
) -> np.ndarray:
    """STE for the weight sign: gradient passes through unchanged.

    With a clip_range, coordinates whose latent weight lies outside the
    interval receive zero gradient; clip_range=None is plain pass-through.
    """
    grad_out = np.asarray(grad_out)
    w = np.asarray(w)
    if grad_out.shape != w.shape:
        raise BitcoreError("gradient and weight shapes differ")
    if clip_range is None:
        return grad_out.copy()
    lo, hi = clip_range
    return np.where((w >= lo) & (w <= hi), grad_out, 0.0)


def act_sign_poly_fwd(x: np.ndarray) -> np.ndarray:
    """Forward of the +-1 activation binarizer: sign(x), sign(0) = +1."""
    return sign_pm1(x)


def act_sign_poly_factor(x: np.ndarray) -> np.ndarray:
    """Backward multiplier: 2+2x on [-1, 0), 2-2x on [0, 1), 0 otherwise.

    This is the derivative of the piecewise polynomial relaxation
    F(x) = -1 | 2x + x^2 | 2x - x^2 | 1 over the four intervals.
    """
    x = np.asarray(x, dtype=np.float64)
    factor = np.zeros_like(x)
    neg = (x >= -1.0) & (x < 0.0)
    pos = (x >= 0.0) & (x < 1.0)
    factor[neg] = 2.0 + 2.0 * x[neg]
    factor[pos] = 2.0 - 2.0 * x[pos]
    return factor


def act_sign_poly_bwd(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    grad_out = np.asarray(grad_out)
    if grad_out.shape != np.asarray(x).shape:
        raise BitcoreError("gradient and input shapes differ")
    return grad_out * act_sign_poly_factor(x)


ZERO_ONE_THRESHOLD = 0.5


def act_zero_one_fwd(x: np.ndarray) -> np.ndarray:
    """{0,1} activation: 1 where x >= 0.5, else 0.

    Pairs with the packed {0,1} x {+-1} dot (2*popcount(a AND w) minus
    popcount(a)) so spatial zero padding costs nothing.  Backward is the
    clipped STE of act_zero_one_bwd.
    """
    x = np.asarray(x)
    return (x >= ZERO_ONE_THRESHOLD).astype(np.float64)


def act_zero_one_bwd(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Clipped STE: gradient passes through only where 0 <= x <= 1."""
    grad_out = np.asarray(grad_out)
    x = np.asarray(x)
    if grad_out.shape != x.shape:
        raise BitcoreError("gradient and input shapes differ")
    return np.where((x >= 0.0) & (x <= 1.0), grad_out, 0.0)


def act_zero_one_pack(x: np.ndarray, axis: int = 1) -> BitTensor:
    """Pack thresholded activations directly into the {0,1} encoding."""
    x = np.asarray(x)
    return pack_bools(x >= ZERO_ONE_THRESHOLD, axis=axis, encoding="zero_one")


def affine_int8_fwd(x: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Symmetric per-tensor int8 quantization.

    scale = max|x| / 127, zero point 0; values are rounded to nearest and
    clamped to [-127, 127].  An all-zero tensor quantizes with scale 1 so
    dequantization stays well defined.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise BitcoreError("cannot quantize non-finite values")
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.rint(x / scale), -127, 127).astype(np.int8)
    return q, scale, 0


def affine_int8_dequant(q: np.ndarray, scale: float, zero_point: int = 0) -> np.ndarray:
    return (np.asarray(q, dtype=np.float64) - zero_point) * scale


@dataclass
class BnParams:
    """Inference-time batch normalization parameters, one value per channel."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if not (self.gamma.shape == self.beta.shape == self.mean.shape == self.var.shape):
            raise BitcoreError("batch-norm parameter shapes differ")

    def apply(self, y: np.ndarray) -> np.ndarray:
        """Normalize (N, C, ...) input with per-channel statistics."""
        shape = (1, -1) + (1,) * (np.asarray(y).ndim - 2)
        inv = 1.0 / np.sqrt(self.var + self.eps)
        return ((y - self.mean.reshape(shape)) * (self.gamma * inv).reshape(shape)
                + self.beta.reshape(shape))


def fold_scales(alpha: WeightScale, bn: BnParams | None) -> BnParams:
    """Absorb the per-filter alpha into a following batch normalization.

    BN(alpha * y) = gamma * (alpha*y - mean) / sqrt(var+eps) + beta
                  = (gamma*alpha) * (y - mean/alpha) / sqrt(var+eps) + beta,
    so the folded parameters are gamma' = gamma*alpha, mean' = mean/alpha.
    Without a following BN the scale cannot be folded away.
    """
    if bn is None:
        raise BitcoreError("no following batch norm: keep alpha explicit")
    a = alpha.alpha
    if a.shape != bn.gamma.shape:
        raise BitcoreError("alpha and batch-norm channel counts differ")
    if np.any(a <= 0):
        raise BitcoreError("cannot fold a zero scale into batch norm")
    return BnParams(bn.gamma * a, bn.beta.copy(), bn.mean / a, bn.var.copy(), bn.eps)
