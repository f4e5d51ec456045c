"""Bit-packed binary tensors and exact XNOR-popcount linear algebra.

Binary values live in 64-bit word lanes: bit 1 encodes +1, bit 0 encodes -1
(or, for the {0,1} activation encoding, the bit is the value itself).  All
dot products are exact integer arithmetic; a binary convolution here equals
a floating-point convolution of the sign-decoded operands, element for
element.

Packing always runs along the input-channel axis.  Channel counts that are
not multiples of 64 leave padding bits in the final word of each lane; those
bits are kept at zero and masked out of every popcount, so they can never
leak into a dot product.

The convolution route is im2col into packed lanes followed by an
XNOR-popcount GEMM (compiled with numba, single-threaded, integer-only, so
results are bitwise reproducible).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

WORD_BITS = 64

# Spatial padding semantics for packed convolution.
PAD_NEG_ONE = -1   # pad with constant -1 (bit 0, counted as a valid -1)
PAD_POS_ONE = +1   # pad with constant +1 (bit 1, counted as a valid +1)
PAD_ZERO = "zero"  # zero-skip: padded positions contribute nothing

ENC_PM1 = "pm1"            # bit 1 -> +1, bit 0 -> -1
ENC_ZERO_ONE = "zero_one"  # bit is the value: {0, 1}


class BitcoreError(ValueError):
    """Raised for invalid packed-tensor operands or geometry."""


@dataclass
class BitTensor:
    """Bit-packed tensor with one logical axis folded into 64-bit words.

    ``words`` has the logical shape with ``packing_axis`` removed and a
    trailing word axis appended, so each lane is contiguous.  ``valid_bits``
    counts the meaningful bits of the final word in every lane; the rest are
    zero padding.
    """

    shape: tuple[int, ...]
    packing_axis: int
    words: np.ndarray
    valid_bits: int
    encoding: str = ENC_PM1

    @property
    def lane_bits(self) -> int:
        """Number of semantically meaningful bits per lane."""
        return self.shape[self.packing_axis]

    @property
    def words_per_lane(self) -> int:
        return self.words.shape[-1]

    def lane_mask(self) -> np.ndarray:
        """uint64 mask per word with ones at valid bit positions."""
        return _lane_mask(self.words_per_lane, self.valid_bits)

    def unpack(self) -> np.ndarray:
        """Inverse of packing: int8 array of the original logical shape.

        Values are {-1, +1} for the pm1 encoding and {0, 1} for zero_one.
        """
        lanes = self.words.reshape(-1, self.words_per_lane)
        bits = np.unpackbits(
            lanes.view(np.uint8), axis=-1, bitorder="little"
        )[:, : self.lane_bits]
        if self.encoding == ENC_PM1:
            vals = np.where(bits > 0, 1, -1).astype(np.int8)
        else:
            vals = bits.astype(np.int8)
        lane_shape = self.words.shape[:-1] + (self.lane_bits,)
        vals = vals.reshape(lane_shape)
        return np.moveaxis(vals, -1, self.packing_axis)


def _lane_mask(n_words: int, valid_bits: int) -> np.ndarray:
    mask = np.full(n_words, ~np.uint64(0), dtype=np.uint64)
    if valid_bits < WORD_BITS:
        mask[-1] = (np.uint64(1) << np.uint64(valid_bits)) - np.uint64(1)
    return mask


def pack_bools(bits: np.ndarray, axis: int, encoding: str = ENC_PM1) -> BitTensor:
    """Pack a boolean array along ``axis`` into 64-bit word lanes."""
    if bits.size == 0:
        raise BitcoreError("cannot pack an empty tensor")
    axis = axis % bits.ndim
    moved = np.moveaxis(np.asarray(bits, dtype=bool), axis, -1)
    n = moved.shape[-1]
    n_words = (n + WORD_BITS - 1) // WORD_BITS
    padded = np.zeros(moved.shape[:-1] + (n_words * WORD_BITS,), dtype=np.uint8)
    padded[..., :n] = moved
    packed = np.packbits(padded, axis=-1, bitorder="little")
    words = np.ascontiguousarray(packed).view(np.uint64)
    words = words.reshape(moved.shape[:-1] + (n_words,))
    valid = n - (n_words - 1) * WORD_BITS
    return BitTensor(tuple(bits.shape), axis, words, valid, encoding)


def pack_signs(x: np.ndarray, axis: int = 1) -> BitTensor:
    """Pack the elementwise sign of a real tensor, with sign(0) = +1.

    Bit i is 1 exactly when x_i >= 0.  Rejects non-finite and empty input.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise BitcoreError("cannot pack an empty tensor")
    if not np.all(np.isfinite(x)):
        raise BitcoreError("cannot pack non-finite values")
    return pack_bools(x >= 0, axis, ENC_PM1)


@njit(cache=True, inline="always")
def _popcount(v):
    v = v - ((v >> 1) & np.uint64(0x5555555555555555))
    v = (v & np.uint64(0x3333333333333333)) + ((v >> 2) & np.uint64(0x3333333333333333))
    v = (v + (v >> 4)) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (v * np.uint64(0x0101010101010101)) >> 56


def xnor_popcount_dot(a, b, m: int) -> int:
    """Exact +-1 inner product of two packed lanes of ``m`` valid bits.

    Returns 2 * popcount(xnor(a, b) masked to m bits) - m, which equals the
    integer dot product of the +-1 decodings.  Padding bits are masked out,
    so garbage beyond the valid range cannot affect the result.
    """
    a_words = a.words.reshape(-1) if isinstance(a, BitTensor) else np.asarray(a, dtype=np.uint64)
    b_words = b.words.reshape(-1) if isinstance(b, BitTensor) else np.asarray(b, dtype=np.uint64)
    if a_words.shape != b_words.shape:
        raise BitcoreError("lane word counts differ")
    n_words = a_words.size
    if m > n_words * WORD_BITS or m < 0:
        raise BitcoreError(f"valid length {m} does not fit {n_words} words")
    if isinstance(a, BitTensor) and a.lane_bits != m:
        raise BitcoreError("lane valid length mismatch")
    if isinstance(b, BitTensor) and b.lane_bits != m:
        raise BitcoreError("lane valid length mismatch")
    mask = _lane_mask(n_words, m - (n_words - 1) * WORD_BITS)
    agree = int(np.bitwise_count(~(a_words ^ b_words) & mask).sum())
    return 2 * agree - m


def zero_one_dot(a, w, m: int) -> int:
    """Inner product of a {0,1}-encoded lane with a +-1-encoded lane.

    Uses the identity sum(a_i * w_i) = 2*popcount(a & w) - popcount(a) for
    a_i in {0,1} and w_i in {-1,+1} (bit 1 <-> +1): only positions where the
    activation bit is set contribute, +1 on weight-bit agreement and -1
    otherwise.
    """
    a_words = a.words.reshape(-1) if isinstance(a, BitTensor) else np.asarray(a, dtype=np.uint64)
    w_words = w.words.reshape(-1) if isinstance(w, BitTensor) else np.asarray(w, dtype=np.uint64)
    if a_words.shape != w_words.shape:
        raise BitcoreError("lane word counts differ")
    mask = _lane_mask(a_words.size, m - (a_words.size - 1) * WORD_BITS)
    ones = int(np.bitwise_count(a_words & mask).sum())
    both = int(np.bitwise_count(a_words & w_words & mask).sum())
    return 2 * both - ones


@dataclass
class ConvGeometry:
    """Stride / padding / dilation plus the packed padding semantics."""

    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)
    pad_value: object = PAD_NEG_ONE

    def __post_init__(self):
        self.stride = _as_pair(self.stride, "stride")
        self.padding = _as_pair(self.padding, "padding")
        self.dilation = _as_pair(self.dilation, "dilation")
        if min(self.stride) < 1 or min(self.dilation) < 1 or min(self.padding) < 0:
            raise BitcoreError("stride/dilation must be >= 1 and padding >= 0")
        if self.pad_value not in (PAD_NEG_ONE, PAD_POS_ONE, PAD_ZERO):
            raise BitcoreError(f"unknown pad_value {self.pad_value!r}")

    def out_extent(self, size: int, kernel: int, axis: int) -> int:
        eff = self.dilation[axis] * (kernel - 1) + 1
        out = (size + 2 * self.padding[axis] - eff) // self.stride[axis] + 1
        if out < 1:
            raise BitcoreError(
                f"geometry yields non-positive output extent for input {size}, kernel {kernel}"
            )
        return out


def _as_pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise BitcoreError(f"{name} must be an int or a pair")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


@njit(cache=True)
def _im2col_packed(words, ho, wo, kh, kw, sh, sw, ph, pw, dh, dw,
                   fill_word, chmask_last, out, vmask, want_vmask):
    """Gather packed channel lanes into patch rows.

    words: (N, H, W, WPC) uint64.  out: (N*ho*wo, kh*kw*WPC).  Out-of-bounds
    taps are filled with ``fill_word`` per word (last word of a tap uses
    ``chmask_last`` when filling with +1 so padding bits stay zero).  When
    ``want_vmask`` the per-row validity mask is emitted for zero-skip
    padding.
    """
    n, h, w, wpc = words.shape
    row = 0
    for b in range(n):
        for oy in range(ho):
            iy0 = oy * sh - ph
            for ox in range(wo):
                ix0 = ox * sw - pw
                col = 0
                for ky in range(kh):
                    iy = iy0 + ky * dh
                    for kx in range(kw):
                        ix = ix0 + kx * dw
                        inside = 0 <= iy < h and 0 <= ix < w
                        for c in range(wpc):
                            if inside:
                                out[row, col] = words[b, iy, ix, c]
                                if want_vmask:
                                    vmask[row, col] = np.uint64(0xFFFFFFFFFFFFFFFF) if c < wpc - 1 else chmask_last
                            else:
                                if c == wpc - 1:
                                    out[row, col] = fill_word & chmask_last
                                else:
                                    out[row, col] = fill_word
                                if want_vmask:
                                    vmask[row, col] = np.uint64(0)
                            col += 1
                row += 1


@njit(cache=True)
def _gemm_pm1(patches, wlanes, lanemask, m, out):
    """out[p, co] = m - 2 * popcount((patch ^ w) & mask): exact +-1 dot."""
    rows, nw = patches.shape
    co_n = wlanes.shape[0]
    for p in range(rows):
        for co in range(co_n):
            mism = 0
            for k in range(nw):
                mism += _popcount((patches[p, k] ^ wlanes[co, k]) & lanemask[k])
            out[p, co] = np.int32(m - 2 * mism)


@njit(cache=True)
def _gemm_pm1_masked(patches, vmask, wlanes, out):
    """Zero-skip variant: per-row validity masks, variable valid count."""
    rows, nw = patches.shape
    co_n = wlanes.shape[0]
    for p in range(rows):
        mrow = 0
        for k in range(nw):
            mrow += _popcount(vmask[p, k])
        for co in range(co_n):
            mism = 0
            for k in range(nw):
                mism += _popcount((patches[p, k] ^ wlanes[co, k]) & vmask[p, k])
            out[p, co] = np.int32(mrow - 2 * mism)


@njit(cache=True)
def _gemm_zero_one(patches, wlanes, lanemask, out):
    """{0,1} x {+-1} dot: 2 * popcount(a & w) - popcount(a), masked."""
    rows, nw = patches.shape
    co_n = wlanes.shape[0]
    for p in range(rows):
        ones = 0
        for k in range(nw):
            ones += _popcount(patches[p, k] & lanemask[k])
        for co in range(co_n):
            both = 0
            for k in range(nw):
                both += _popcount(patches[p, k] & wlanes[co, k] & lanemask[k])
            out[p, co] = np.int32(2 * both - ones)


def conv_lane_layout(weight: BitTensor) -> np.ndarray:
    """Flatten packed weights (CO, KH, KW, WPC words) into GEMM lanes."""
    co = weight.shape[0]
    return np.ascontiguousarray(weight.words.reshape(co, -1))


def binary_conv2d(inp: BitTensor, weight: BitTensor, geom: ConvGeometry) -> np.ndarray:
    """Exact binary convolution via packed im2col + XNOR-popcount GEMM.

    ``inp`` is (N, C, H, W) packed along channels; ``weight`` is
    (CO, CI, KH, KW) packed along input channels.  Returns an int32 tensor
    (N, CO, HO, WO) equal to the float convolution of the sign-decoded
    operands.  For zero_one-encoded activations the {0,1} x {-1,+1} decode
    is used and spatial padding always contributes zero.
    """
    if len(inp.shape) != 4 or len(weight.shape) != 4:
        raise BitcoreError("binary_conv2d expects 4-D activation and weight tensors")
    n, c, h, w = inp.shape
    co, ci, kh, kw = weight.shape
    if c != ci:
        raise BitcoreError(f"channel mismatch: input {c} vs weight {ci}")
    if inp.packing_axis != 1 or weight.packing_axis != 1:
        raise BitcoreError("convolution operands must be packed along input channels")
    if inp.words_per_lane != weight.words_per_lane:
        raise BitcoreError("operand word counts differ")
    ho = geom.out_extent(h, kh, 0)
    wo = geom.out_extent(w, kw, 1)

    wpc = inp.words_per_lane
    chmask_last = _lane_mask(wpc, inp.valid_bits)[-1]
    if inp.encoding == ENC_ZERO_ONE or geom.pad_value == PAD_ZERO:
        fill = np.uint64(0)
    elif geom.pad_value == PAD_POS_ONE:
        fill = ~np.uint64(0)
    else:
        fill = np.uint64(0)

    rows = n * ho * wo
    nw = kh * kw * wpc
    patches = np.empty((rows, nw), dtype=np.uint64)
    zero_skip = geom.pad_value == PAD_ZERO and inp.encoding != ENC_ZERO_ONE
    vmask = np.empty((rows, nw) if zero_skip else (1, 1), dtype=np.uint64)
    _im2col_packed(
        inp.words, ho, wo, kh, kw,
        geom.stride[0], geom.stride[1], geom.padding[0], geom.padding[1],
        geom.dilation[0], geom.dilation[1],
        fill, chmask_last, patches, vmask, zero_skip,
    )

    wlanes = conv_lane_layout(weight)
    out = np.empty((rows, co), dtype=np.int32)
    if inp.encoding == ENC_ZERO_ONE:
        lanemask = np.tile(_lane_mask(wpc, inp.valid_bits), kh * kw)
        _gemm_zero_one(patches, wlanes, lanemask, out)
    elif zero_skip:
        _gemm_pm1_masked(patches, vmask, wlanes, out)
    else:
        lanemask = np.tile(_lane_mask(wpc, inp.valid_bits), kh * kw)
        m = c * kh * kw
        _gemm_pm1(patches, wlanes, lanemask, m, out)
    return out.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)


def speedup_ratio(c_in, w, h, w_in, h_in, w_out, h_out, k) -> float:
    """Analytic 64-wide bit-parallel speedup for one convolutional layer.

    sigma = 64 * c_in*w*h*w_in*h_in / (K * (c_in*w*h*w_in*h_in + 64*w_out*h_out)).
    An upper-bound model: memory traffic is not accounted for.
    """
    if k <= 0:
        raise BitcoreError("branch count K must be positive")
    for v in (c_in, w, h, w_in, h_in, w_out, h_out):
        if v <= 0:
            raise BitcoreError("all geometry arguments must be positive")
    core = c_in * w * h * w_in * h_in
    return (64.0 * core) / (k * (core + 64.0 * w_out * h_out))


def fixed_point_dot(w_bases, a_bases, m: int) -> int:
    """Inner product of P-bit fixed-point operands from their binary bases.

    Both operands are encoded as sum_i 2^i * b_i with b_i in {-1,+1}^m; the
    product expands into a double sum of scaled binary dot products:
    sum_{i,j} 2^(i+j) * dot(b_i^w, b_j^a).  Cost is O(m * P^2).
    """
    if len(w_bases) == 0 or len(a_bases) == 0:
        raise BitcoreError("fixed_point_dot needs at least one basis per operand")
    if len(w_bases) != len(a_bases):
        raise BitcoreError("operand basis counts differ")
    total = 0
    for i, bw in enumerate(w_bases):
        for j, ba in enumerate(a_bases):
            total += (1 << (i + j)) * xnor_popcount_dot(bw, ba, m)
    return total
