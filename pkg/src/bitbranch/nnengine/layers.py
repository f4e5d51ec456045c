"""Layers with explicit forward caches and reverse-mode backward passes.

Every layer implements ``forward(x, train, cache)`` and
``backward(grad_out, cache)``.  The cache dict written during forward is
the tape entry for that layer; composites store their children's caches
inside their own.  Parameter gradients accumulate into ``Parameter.grad``
during backward, and the input gradient is returned so callers can chain.

Convolutions follow the im2col route: patches are gathered into a matrix
and the contraction is a single BLAS matmul.  A quantized convolution can
additionally run its forward through the packed XNOR-popcount kernels
(``use_packed``); the packed result equals the float contraction of the
sign tensors exactly, so training math is unchanged while call counters
record which route produced each output.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bitbranch import binarizers
from bitbranch.bitcore import (
    ENC_ZERO_ONE,
    PAD_NEG_ONE,
    PAD_POS_ONE,
    PAD_ZERO,
    BitcoreError,
    ConvGeometry,
    binary_conv2d,
    pack_bools,
    pack_signs,
)
from bitbranch.nnengine.tensor import EngineError, Parameter


class Layer:
    """Base: stateless forward/backward over an explicit cache."""

    def own_params(self) -> list[Parameter]:
        return []

    def children(self) -> list["Layer"]:
        return []

    def params(self) -> list[Parameter]:
        out = list(self.own_params())
        for ch in self.children():
            out.extend(ch.params())
        return out

    def named_params(self, prefix: str = ""):
        for p in self.own_params():
            yield (prefix + p.name, p)
        for i, ch in enumerate(self.children()):
            yield from ch.named_params(f"{prefix}{i}.")

    def forward(self, x, train: bool, cache: dict):
        raise NotImplementedError

    def backward(self, grad_out, cache: dict):
        raise NotImplementedError


class Identity(Layer):
    def forward(self, x, train, cache):
        return x

    def backward(self, grad_out, cache):
        return grad_out


class ActSign(Layer):
    """+-1 activation binarizer with the piecewise-polynomial backward."""

    def forward(self, x, train, cache):
        cache["x"] = x
        return binarizers.act_sign_poly_fwd(x)

    def backward(self, grad_out, cache):
        return binarizers.act_sign_poly_bwd(grad_out, cache["x"])


class ActZeroOne(Layer):
    """{0,1} activation binarizer with clipped STE backward."""

    def forward(self, x, train, cache):
        cache["x"] = x
        return binarizers.act_zero_one_fwd(x)

    def backward(self, grad_out, cache):
        return binarizers.act_zero_one_bwd(grad_out, cache["x"])


def _pad_fill(pad_value) -> float:
    if pad_value == PAD_NEG_ONE:
        return -1.0
    if pad_value == PAD_POS_ONE:
        return 1.0
    return 0.0


def im2col(x: np.ndarray, kh: int, kw: int, geom: ConvGeometry) -> tuple[np.ndarray, tuple]:
    """Gather conv patches of (N, C, H, W) into a (N*HO*WO, C*KH*KW) matrix."""
    n, c, h, w = x.shape
    ph, pw = geom.padding
    sh, sw = geom.stride
    dh, dw = geom.dilation
    ho = geom.out_extent(h, kh, 0)
    wo = geom.out_extent(w, kw, 1)
    xp = np.pad(
        x, ((0, 0), (0, 0), (ph, ph), (pw, pw)),
        constant_values=_pad_fill(geom.pad_value),
    )
    ekh = dh * (kh - 1) + 1
    ekw = dw * (kw - 1) + 1
    win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw, ::dh, ::dw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), (n, ho, wo, xp.shape)


def col2im_grad(grad_cols: np.ndarray, meta: tuple, x_shape: tuple,
                kh: int, kw: int, geom: ConvGeometry) -> np.ndarray:
    """Scatter-add patch gradients back to the input layout."""
    n, ho, wo, xp_shape = meta
    c = x_shape[1]
    sh, sw = geom.stride
    dh, dw = geom.dilation
    ph, pw = geom.padding
    gwin = grad_cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros(xp_shape, dtype=grad_cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            gxp[:, :, ky * dh: ky * dh + ho * sh: sh,
                kx * dw: kx * dw + wo * sw: sw] += gwin[:, :, :, :, ky, kx]
    return gxp[:, :, ph: ph + x_shape[2], pw: pw + x_shape[3]]


class QuantConv2d(Layer):
    """Convolution with a pluggable weight quantizer and no bias.

    weight_quant is "sign" (binarize with STE backward) or None (real
    weights).  The activation quantizer is a separate preceding layer; this
    layer only honours its padding semantics through ``geom.pad_value``.

    With ``use_packed`` enabled and sign weights, the forward output is
    produced by the bit-packed kernels; the im2col route still runs when a
    backward pass will need the patch matrix.  ``calls_real`` and
    ``calls_packed`` count which route produced each forward output.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int | tuple[int, int],
                 geom: ConvGeometry | None = None, weight_quant: str | None = None,
                 rng: np.random.Generator | None = None, input_enc: str = "pm1"):
        self.kh, self.kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.c_in, self.c_out = c_in, c_out
        self.geom = geom or ConvGeometry()
        if weight_quant not in (None, "sign", "int8"):
            raise EngineError(f"unknown weight quantizer {weight_quant!r}")
        self.weight_quant = weight_quant
        self.input_enc = input_enc
        self.use_packed = False
        self.calls_real = 0
        self.calls_packed = 0
        self.last_out_hw: tuple | None = None
        rng = rng or np.random.default_rng(0)
        fan_in = c_in * self.kh * self.kw
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(c_out, c_in, self.kh, self.kw)),
            name="weight", decay=True,
        )

    def own_params(self):
        return [self.weight]

    def _effective_weight(self) -> np.ndarray:
        if self.weight_quant == "sign":
            return binarizers.sign_pm1(self.weight.data)
        if self.weight_quant == "int8":
            q, scale, zp = binarizers.affine_int8_fwd(self.weight.data)
            return binarizers.affine_int8_dequant(q, scale, zp)
        return self.weight.data

    def forward(self, x, train, cache):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise EngineError(
                f"conv expected (N, {self.c_in}, H, W), got {x.shape}"
            )
        w_eff = self._effective_weight()
        wmat = w_eff.reshape(self.c_out, -1)
        need_cols = train or not self.use_packed
        cols = meta = None
        if need_cols:
            cols, meta = im2col(x, self.kh, self.kw, self.geom)
        if self.use_packed:
            if self.weight_quant != "sign":
                raise EngineError("packed forward requires sign weight quantization")
            out = self._packed_forward(x)
            self.calls_packed += 1
        else:
            n, ho, wo, _ = meta
            out = (cols @ wmat.T).reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
            self.calls_real += 1
        self.last_out_hw = out.shape[2:]
        if train:
            cache["cols"] = cols
            cache["meta"] = meta
            cache["x_shape"] = x.shape
        return out

    def _packed_forward(self, x) -> np.ndarray:
        if self.input_enc == ENC_ZERO_ONE:
            if not np.all((x == 0.0) | (x == 1.0)):
                raise BitcoreError("packed conv requires exactly {0,1} activations")
            px = pack_bools(x.astype(bool), axis=1, encoding=ENC_ZERO_ONE)
        else:
            if not np.all(np.abs(x) == 1.0):
                raise BitcoreError("packed conv requires exactly +-1 activations")
            px = pack_signs(x, axis=1)
        pw = pack_signs(self._effective_weight(), axis=1)
        return binary_conv2d(px, pw, self.geom).astype(np.float64)

    def backward(self, grad_out, cache):
        if "cols" not in cache:
            raise EngineError("conv backward called without a forward tape")
        cols, meta, x_shape = cache["cols"], cache["meta"], cache["x_shape"]
        n, ho, wo, _ = meta
        gmat = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.c_out)
        grad_w_eff = (gmat.T @ cols).reshape(self.weight.data.shape)
        if self.weight_quant == "sign":
            grad_w = binarizers.weight_binarize_bwd(grad_w_eff, self.weight.data)
        else:
            grad_w = grad_w_eff
        self.weight.add_grad(grad_w)
        wmat = self._effective_weight().reshape(self.c_out, -1)
        grad_cols = gmat @ wmat
        return col2im_grad(grad_cols, meta, x_shape, self.kh, self.kw, self.geom)


class BatchNorm2d(Layer):
    """Per-channel batch normalization for (N, C, H, W).

    Training mode normalizes with biased batch statistics and updates the
    running estimates with momentum 0.1; inference mode is a pure affine
    function of the running statistics.  Running variance stores the biased
    batch variance.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), name="gamma")
        self.beta = Parameter(np.zeros(channels), name="beta")
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)

    def own_params(self):
        return [self.gamma, self.beta]

    def forward(self, x, train, cache):
        if x.shape[1] != self.channels:
            raise EngineError(f"batch norm expected {self.channels} channels, got {x.shape[1]}")
        axes = (0, 2, 3)
        shape = (1, -1, 1, 1)
        if train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mu, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
        cache["xhat"] = xhat
        cache["inv"] = inv
        cache["train"] = train
        return self.gamma.data.reshape(shape) * xhat + self.beta.data.reshape(shape)

    def backward(self, grad_out, cache):
        xhat, inv = cache["xhat"], cache["inv"]
        shape = (1, -1, 1, 1)
        axes = (0, 2, 3)
        self.gamma.add_grad((grad_out * xhat).sum(axis=axes))
        self.beta.add_grad(grad_out.sum(axis=axes))
        g = grad_out * self.gamma.data.reshape(shape)
        if not cache["train"]:
            return g * inv.reshape(shape)
        mean_g = g.mean(axis=axes).reshape(shape)
        mean_gx = (g * xhat).mean(axis=axes).reshape(shape)
        return inv.reshape(shape) * (g - mean_g - xhat * mean_gx)


class PReLU(Layer):
    """Per-channel parametric ReLU, slope initialized to 0.25."""

    def __init__(self, channels: int, init: float = 0.25):
        self.channels = channels
        self.slope = Parameter(np.full(channels, init), name="slope")

    def own_params(self):
        return [self.slope]

    def _shape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x, train, cache):
        if x.shape[1] != self.channels:
            raise EngineError(f"prelu expected {self.channels} channels, got {x.shape[1]}")
        cache["x"] = x
        a = self.slope.data.reshape(self._shape(x))
        return np.where(x > 0, x, a * x)

    def backward(self, grad_out, cache):
        x = cache["x"]
        neg = x <= 0
        axes = tuple(i for i in range(x.ndim) if i != 1)
        self.slope.add_grad((grad_out * x * neg).sum(axis=axes))
        a = self.slope.data.reshape(self._shape(x))
        return np.where(neg, a * grad_out, grad_out)


class GlobalAvgPool(Layer):
    """(N, C, H, W) -> (N, C) spatial mean."""

    def forward(self, x, train, cache):
        cache["hw"] = x.shape[2:]
        return x.mean(axis=(2, 3))

    def backward(self, grad_out, cache):
        h, w = cache["hw"]
        return np.broadcast_to(
            grad_out[:, :, None, None] / (h * w), grad_out.shape + (h, w)
        ).copy()


class AvgPool2d(Layer):
    """Non-overlapping window average pooling."""

    def __init__(self, window: int):
        self.window = window

    def forward(self, x, train, cache):
        n, c, h, w = x.shape
        k = self.window
        if h % k or w % k:
            raise EngineError(f"avg pool window {k} does not tile input {h}x{w}")
        cache["shape"] = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, grad_out, cache):
        n, c, h, w = cache["shape"]
        k = self.window
        g = grad_out[:, :, :, None, :, None] / (k * k)
        return np.broadcast_to(g, (n, c, h // k, k, w // k, k)).reshape(n, c, h, w).copy()


class Linear(Layer):
    """Fully-connected layer, optional bias, optional int8 fake-quant weights."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True,
                 rng: np.random.Generator | None = None,
                 weight_quant: str | None = None):
        rng = rng or np.random.default_rng(0)
        if weight_quant not in (None, "int8"):
            raise EngineError(f"unknown weight quantizer {weight_quant!r}")
        self.weight_quant = weight_quant
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(d_out, d_in)), name="weight", decay=True
        )
        self.bias = Parameter(np.zeros(d_out), name="bias") if bias else None

    def own_params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def _effective_weight(self) -> np.ndarray:
        if self.weight_quant == "int8":
            q, scale, zp = binarizers.affine_int8_fwd(self.weight.data)
            return binarizers.affine_int8_dequant(q, scale, zp)
        return self.weight.data

    def forward(self, x, train, cache):
        if x.ndim != 2 or x.shape[1] != self.weight.data.shape[1]:
            raise EngineError(
                f"linear expected (N, {self.weight.data.shape[1]}), got {x.shape}"
            )
        cache["x"] = x
        y = x @ self._effective_weight().T
        if self.bias is not None:
            y = y + self.bias.data
        return y

    def backward(self, grad_out, cache):
        x = cache["x"]
        self.weight.add_grad(grad_out.T @ x)
        if self.bias is not None:
            self.bias.add_grad(grad_out.sum(axis=0))
        return grad_out @ self._effective_weight()


class Sequential(Layer):
    """Chain of layers; its cache is the list of per-layer caches."""

    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, train, cache):
        tapes = []
        for i, layer in enumerate(self.layers):
            sub: dict = {}
            try:
                x = layer.forward(x, train, sub)
            except EngineError as e:
                raise EngineError(f"layer {i} ({type(layer).__name__}): {e}") from e
            tapes.append(sub)
        cache["tapes"] = tapes
        return x

    def backward(self, grad_out, cache):
        if "tapes" not in cache:
            raise EngineError("backward called without a forward tape")
        for layer, sub in zip(reversed(self.layers), reversed(cache["tapes"])):
            grad_out = layer.backward(grad_out, sub)
        return grad_out


class Model:
    """A root layer plus the forward/backward tape plumbing."""

    def __init__(self, root: Layer):
        self.root = root

    def params(self):
        return self.root.params()

    def named_params(self):
        return list(self.root.named_params())

    def forward(self, x, train: bool = True):
        cache: dict = {}
        out = self.root.forward(np.asarray(x, dtype=np.float64), train, cache)
        return out, cache

    def backward(self, tape: dict, grad_out):
        if not tape:
            raise EngineError("backward called without a forward tape")
        return self.root.backward(grad_out, tape)

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_params()}
        for name, bn in self._bn_layers():
            state[name + "running_mean"] = bn.running_mean.copy()
            state[name + "running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.named_params())
        expected = set(named)
        bn_keys = set()
        for name, bn in self._bn_layers():
            bn_keys.add(name + "running_mean")
            bn_keys.add(name + "running_var")
        missing = (expected | bn_keys) - set(state)
        extra = set(state) - (expected | bn_keys)
        if missing or extra:
            raise EngineError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in named.items():
            if state[name].shape != p.data.shape:
                raise EngineError(f"shape mismatch for {name}")
            p.data = np.asarray(state[name], dtype=np.float64).copy()
        for name, bn in self._bn_layers():
            bn.running_mean = np.asarray(state[name + "running_mean"], dtype=np.float64).copy()
            bn.running_var = np.asarray(state[name + "running_var"], dtype=np.float64).copy()

    def _bn_layers(self):
        out = []

        def walk(layer, prefix):
            if isinstance(layer, BatchNorm2d):
                out.append((prefix, layer))
            for i, ch in enumerate(layer.children()):
                walk(ch, f"{prefix}{i}.")

        walk(self.root, "")
        return out

    def conv_layers(self) -> list[QuantConv2d]:
        out = []

        def walk(layer):
            if isinstance(layer, QuantConv2d):
                out.append(layer)
            for ch in layer.children():
                walk(ch)

        walk(self.root)
        return out

    def set_packed(self, flag: bool) -> None:
        for conv in self.conv_layers():
            if conv.weight_quant == "sign":
                conv.use_packed = flag


# --------------------------------------------------------------- losses


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch; returns (loss, dlogits)."""
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise EngineError(f"bad loss shapes: {logits.shape} vs {labels.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def pixel_softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-pixel softmax cross-entropy for (N, C, H, W) vs (N, H, W) labels."""
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise EngineError(f"bad loss shapes: {logits.shape} vs {labels.shape}")
    n, c, h, w = logits.shape
    flat = logits.transpose(0, 2, 3, 1).reshape(-1, c)
    loss, grad = softmax_cross_entropy(flat, labels.reshape(-1).astype(np.int64))
    return loss, grad.reshape(n, h, w, c).transpose(0, 3, 1, 2)
