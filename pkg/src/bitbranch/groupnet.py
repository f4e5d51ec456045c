"""Structure approximation: binary branch decomposition with gates.

A real-valued network is approximated by K parallel binary "bases".
Layer-wise decomposition (LBD) replaces each convolution by the average of
K binary convolutions; group-wise decomposition (GBD) replaces a whole
group of blocks by K end-to-end binary block stacks whose outputs are
averaged.  Two gating mechanisms refine GBD:

* soft gates: every inter-block connection inside a group mixes a branch's
  own output with the fused output of all branches,
  x_i = C_i * G_i + (1 - C_i) * sum_j G_j, with C_i = sigmoid(theta_i).
  At C = 1 branches stay independent end-to-end (whole-group behavior);
  at C = 0 every branch sees the same fused tensor (blockwise behavior
  when the second path is the averaged variant).
* hard gates: a Top-N selector picks n_select of the K bases per sample
  from a linear readout of the group input, so only the selected stacks
  contribute; the backward pass relaxes the selector with the softmax
  Jacobian so every selection column keeps learning.

Blocks follow Sign -> Conv -> PReLU -> BN with a skip connection bypassing
every binary convolution.  Model variants: A uses parameter-free skips
everywhere, B upgrades shape-changing skips to 8-bit 1x1 convolutions, and
C adds hard gating on top of B.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from bitbranch.bitcore import (
    PAD_NEG_ONE,
    PAD_POS_ONE,
    PAD_ZERO,
    ConvGeometry,
    binary_conv2d,
    pack_signs,
)
from bitbranch.binarizers import sign_pm1
from bitbranch.nnengine.layers import (
    ActSign,
    ActZeroOne,
    AvgPool2d,
    BatchNorm2d,
    GlobalAvgPool,
    Identity,
    Layer,
    Linear,
    Model,
    PReLU,
    QuantConv2d,
    Sequential,
)
from bitbranch.nnengine.rng import make_rng
from bitbranch.nnengine.tensor import EngineError, Parameter

SECOND_PATH_SUM = "sum"
SECOND_PATH_AVG = "avg"


@dataclass
class GroupSpec:
    """Declarative description of a decomposed network.

    ``partition`` lists the block-index boundaries 0 = T_0 < ... < T_P = N;
    group p spans blocks [T_{p-1}, T_p).  ``precision_exceptions`` names
    the layers kept at 8 bits (first, last, and optionally the 1x1
    downsample skips).
    """

    num_blocks: int
    partition: list[int]
    bases_per_group: int
    decomposition: str = "GBD"
    gating: str = "none"
    n_select: int | None = None
    precision_exceptions: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.decomposition not in ("LBD", "GBD"):
            raise EngineError(f"unknown decomposition {self.decomposition!r}")
        if self.gating not in ("none", "soft", "hard"):
            raise EngineError(f"unknown gating {self.gating!r}")
        if self.bases_per_group < 1:
            raise EngineError("bases_per_group must be >= 1")
        p = self.partition
        if not p or p[0] != 0 or p[-1] != self.num_blocks:
            raise EngineError("partition must start at 0 and end at num_blocks")
        if any(a >= b for a, b in zip(p, p[1:])):
            raise EngineError("partition boundaries must strictly increase")
        if self.gating == "hard":
            if self.n_select is None or not 1 <= self.n_select <= self.bases_per_group:
                raise EngineError("hard gating requires 1 <= n_select <= bases_per_group")

    @property
    def num_groups(self) -> int:
        return len(self.partition) - 1

    def group_sizes(self) -> list[int]:
        return [b - a for a, b in zip(self.partition, self.partition[1:])]


# ------------------------------------------------------------------ skips


class PoolPadSkip(Layer):
    """Parameter-free shape-matching skip: stride-s average pool then
    zero padding of the new channels."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        if c_out < c_in:
            raise EngineError("pool-pad skip cannot shrink channels")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.pool = AvgPool2d(stride) if stride > 1 else Identity()

    def children(self):
        return [self.pool]

    def forward(self, x, train, cache):
        sub: dict = {}
        y = self.pool.forward(x, train, sub)
        cache["sub"] = sub
        if self.c_out > self.c_in:
            pad = self.c_out - self.c_in
            y = np.concatenate([y, np.zeros_like(y[:, :pad])], axis=1)
        return y

    def backward(self, grad_out, cache):
        g = grad_out[:, : self.c_in]
        return self.pool.backward(g, cache["sub"])


# ------------------------------------------------------------------ block


class BinaryBlock(Layer):
    """Sign -> Conv -> PReLU -> BN with a skip bypassing the convolution.

    ``act`` selects the activation encoding: "sign" (+-1, padding -1) or
    "zero_one" ({0,1}, natural zero padding).  The skip is identity when
    shapes allow, otherwise a pool-pad or an 8-bit 1x1 convolution.
    """

    PAD_MODES = {"neg_one": PAD_NEG_ONE, "pos_one": PAD_POS_ONE, "zero": PAD_ZERO}

    def __init__(self, c_in: int, c_out: int, stride: int = 1, dilation: int = 1,
                 weight_quant: str | None = "sign", act: str = "sign",
                 skip: str = "identity", rng: np.random.Generator | None = None,
                 kernel: int = 3, pad_mode: str | None = None):
        pad = dilation * (kernel - 1) // 2
        if act == "zero_one":
            self.act: Layer = ActZeroOne()
            pad_value = PAD_ZERO
            input_enc = "zero_one"
        elif act == "sign":
            self.act = ActSign()
            pad_value = PAD_NEG_ONE
            input_enc = "pm1"
            if pad_mode is not None:
                if pad_mode not in self.PAD_MODES:
                    raise EngineError(f"unknown pad mode {pad_mode!r}")
                pad_value = self.PAD_MODES[pad_mode]
        elif act == "real":
            # full-precision ablation twin: no activation quantizer
            self.act = Identity()
            pad_value = PAD_ZERO
            input_enc = "pm1"
        else:
            raise EngineError(f"unknown activation mode {act!r}")
        geom = ConvGeometry((stride, stride), (pad, pad), (dilation, dilation), pad_value)
        self.conv = QuantConv2d(c_in, c_out, kernel, geom, weight_quant,
                                rng=rng, input_enc=input_enc)
        self.prelu = PReLU(c_out)
        self.bn = BatchNorm2d(c_out)
        if skip == "none":
            self.skip: Layer | None = None
        elif skip == "identity":
            if stride == 1 and c_in == c_out:
                self.skip = Identity()
            else:
                self.skip = PoolPadSkip(c_in, c_out, stride)
        elif skip == "int8":
            if stride == 1 and c_in == c_out:
                self.skip = Identity()
            else:
                self.skip = QuantConv2d(
                    c_in, c_out, 1, ConvGeometry((stride, stride), (0, 0), (1, 1), PAD_ZERO),
                    weight_quant="int8", rng=rng,
                )
        else:
            raise EngineError(f"unknown skip mode {skip!r}")

    def children(self):
        base = [self.act, self.conv, self.prelu, self.bn]
        return base + ([self.skip] if self.skip is not None else [])

    def forward(self, x, train, cache):
        subs = [{} for _ in range(5)]
        y = self.act.forward(x, train, subs[0])
        y = self.conv.forward(y, train, subs[1])
        y = self.prelu.forward(y, train, subs[2])
        y = self.bn.forward(y, train, subs[3])
        if self.skip is not None:
            y = y + self.skip.forward(x, train, subs[4])
        cache["subs"] = subs
        return y

    def backward(self, grad_out, cache):
        subs = cache["subs"]
        g = self.bn.backward(grad_out, subs[3])
        g = self.prelu.backward(g, subs[2])
        g = self.conv.backward(g, subs[1])
        g = self.act.backward(g, subs[0])
        if self.skip is not None:
            g = g + self.skip.backward(grad_out, subs[4])
        return g


# ------------------------------------------------------------------ gates


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def softmax(s: np.ndarray, axis: int = -1) -> np.ndarray:
    z = s - s.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_jacobian(s: np.ndarray) -> np.ndarray:
    """J[i, j] = d softmax(s)_i / d s_j = p_i (delta_ij - p_j)."""
    p = softmax(np.asarray(s, dtype=np.float64))
    return np.diag(p) - np.outer(p, p)


def top_n_mask(scores: np.ndarray, n_select: int) -> np.ndarray:
    """Per-row {0,1} indicator of the Top-N scores, ties to lowest index.

    A stable sort of -scores keeps equal scores in index order, so the
    lowest-indexed of a tie wins the last slot deterministically.
    """
    if scores.ndim != 2:
        raise EngineError("scores must be (batch, K)")
    k = scores.shape[1]
    if not 1 <= n_select <= k:
        raise EngineError(f"n_select {n_select} outside 1..{k}")
    order = np.argsort(-scores, axis=1, kind="stable")
    mask = np.zeros_like(scores)
    rows = np.arange(scores.shape[0])[:, None]
    mask[rows, order[:, :n_select]] = 1.0
    return mask


class SoftGateSet:
    """theta vectors (one scalar per branch) for the inter-block
    connections of a group."""

    def __init__(self, num_connections: int, k: int):
        self.thetas = [
            Parameter(np.zeros(k), name=f"theta{n}") for n in range(num_connections)
        ]


class GatedGroup(Layer):
    """K parallel block stacks over one group, with optional gating.

    gating "none": branches run independently; output = (1/K) sum.
    gating "soft": inter-block connections mix each branch with the fused
    sum (or average) of all branches.
    gating "hard": a Top-N selector drops all but n_select branches per
    sample; output = (1/n_select) * masked sum.
    """

    def __init__(self, bases: list[list[Layer]], gating: str = "none",
                 n_select: int | None = None, c_in: int | None = None,
                 second_path: str = SECOND_PATH_SUM,
                 rng: np.random.Generator | None = None):
        if not bases or not bases[0]:
            raise EngineError("a group needs at least one base with one block")
        depth = len(bases[0])
        if any(len(b) != depth for b in bases):
            raise EngineError("all bases must replicate the same block topology")
        self.bases = bases
        self.k = len(bases)
        self.depth = depth
        self.gating = gating
        if second_path not in (SECOND_PATH_SUM, SECOND_PATH_AVG):
            raise EngineError(f"unknown second-path mode {second_path!r}")
        self.second_path = second_path
        self.soft: SoftGateSet | None = None
        self.nu: Parameter | None = None
        self.n_select = None
        if gating == "soft":
            self.soft = SoftGateSet(depth - 1, self.k)
        elif gating == "hard":
            if n_select is None or not 1 <= n_select <= self.k:
                raise EngineError("hard gating requires 1 <= n_select <= K")
            if c_in is None:
                raise EngineError("hard gating requires the group input channel count")
            self.n_select = n_select
            rng = rng or np.random.default_rng(0)
            self.nu = Parameter(0.01 * rng.standard_normal((c_in, self.k)), name="nu")
        elif gating != "none":
            raise EngineError(f"unknown gating {gating!r}")

    def own_params(self):
        out = []
        if self.soft is not None:
            out.extend(self.soft.thetas)
        if self.nu is not None:
            out.append(self.nu)
        return out

    def children(self):
        return [blk for base in self.bases for blk in base]

    # ---- forward

    def forward(self, x, train, cache):
        tapes = [[None] * self.depth for _ in range(self.k)]
        cache["tapes"] = tapes
        if self.gating == "hard":
            return self._forward_hard(x, train, cache)
        cur = [x] * self.k
        mix_cache = []
        for n in range(self.depth):
            outs = []
            for i in range(self.k):
                sub: dict = {}
                outs.append(self.bases[i][n].forward(cur[i], train, sub))
                tapes[i][n] = sub
            if self.gating == "soft" and n < self.depth - 1:
                cur, mc = self._soft_mix(outs, n)
                mix_cache.append(mc)
            else:
                cur = outs
        cache["mix"] = mix_cache
        return sum(cur) / self.k

    def _soft_mix(self, outs, n):
        theta = self.soft.thetas[n].data
        c = sigmoid(theta)
        s = sum(outs)
        if self.second_path == SECOND_PATH_AVG:
            s = s / self.k
        mixed = [c[i] * outs[i] + (1.0 - c[i]) * s for i in range(self.k)]
        return mixed, {"outs": outs, "c": c, "s": s, "n": n}

    def _forward_hard(self, x, train, cache):
        if x.shape[1] != self.nu.data.shape[0]:
            raise EngineError(
                f"gate expected {self.nu.data.shape[0]} channels, got {x.shape[1]}"
            )
        psi = x.mean(axis=(2, 3))
        scores = psi @ self.nu.data
        mask = top_n_mask(scores, self.n_select)
        outs = []
        for i in range(self.k):
            cur = x
            for n in range(self.depth):
                sub: dict = {}
                cur = self.bases[i][n].forward(cur, train, sub)
                cache["tapes"][i][n] = sub
            outs.append(cur)
        stacked = np.stack(outs)
        y = np.einsum("kn...,nk->n...", stacked, mask) / self.n_select
        cache["hard"] = {
            "psi": psi, "scores": scores, "mask": mask,
            "outs": stacked, "x_shape": x.shape,
        }
        return y

    # ---- backward

    def backward(self, grad_out, cache):
        if "tapes" not in cache:
            raise EngineError("group backward called without a forward tape")
        if self.gating == "hard":
            return self._backward_hard(grad_out, cache)
        tapes = cache["tapes"]
        grads = [grad_out / self.k for _ in range(self.k)]
        mix_cache = list(cache["mix"])
        for n in reversed(range(self.depth)):
            if self.gating == "soft" and n < self.depth - 1:
                grads = self._soft_mix_backward(grads, mix_cache.pop())
            new_grads = []
            for i in range(self.k):
                new_grads.append(self.bases[i][n].backward(grads[i], tapes[i][n]))
            grads = new_grads
        return sum(grads)

    def _soft_mix_backward(self, gnext, mc):
        outs, c, s, n = mc["outs"], mc["c"], mc["s"], mc["n"]
        scale = (1.0 / self.k) if self.second_path == SECOND_PATH_AVG else 1.0
        # d theta_i: gate derivative through C_i, second path through S
        dtheta = np.zeros(self.k)
        for i in range(self.k):
            dtheta[i] = float(np.sum(gnext[i] * (outs[i] - s))) * c[i] * (1.0 - c[i])
        self.soft.thetas[n].add_grad(dtheta)
        # d outs_k: own path plus presence in every branch's fused sum
        gsum = sum((1.0 - c[i]) * gnext[i] for i in range(self.k)) * scale
        return [c[i] * gnext[i] + gsum for i in range(self.k)]

    def _backward_hard(self, grad_out, cache):
        hc = cache["hard"]
        psi, scores, mask, outs = hc["psi"], hc["scores"], hc["mask"], hc["outs"]
        n_batch = grad_out.shape[0]
        red_axes = tuple(range(1, grad_out.ndim))
        # branch-output gradients: only selected branches carry signal
        dg = np.zeros_like(scores)
        dx = np.zeros(hc["x_shape"])
        for i in range(self.k):
            sel = mask[:, i].reshape((-1,) + (1,) * (grad_out.ndim - 1))
            g_i = grad_out * sel / self.n_select
            dg[:, i] = (grad_out * outs[i]).sum(axis=red_axes) * mask[:, i] / self.n_select
            cur = g_i
            for n in reversed(range(self.depth)):
                cur = self.bases[i][n].backward(cur, cache["tapes"][i][n])
            dx += cur
        # selector gradient: softmax Jacobian replaces the Top-N indicator
        p = softmax(scores, axis=1)
        ds = p * (dg - (dg * p).sum(axis=1, keepdims=True))
        self.nu.add_grad(psi.T @ ds)
        dpsi = ds @ self.nu.data.T
        h, w = hc["x_shape"][2:]
        dx += dpsi[:, :, None, None] / (h * w)
        return dx


# ------------------------------------------- functional decomposition ops


def lbd_forward(x: np.ndarray, branches: list[QuantConv2d]) -> np.ndarray:
    """Layer-wise decomposition: (1/K) sum of K binary convolutions.

    Each branch output is the exact packed convolution of sign(x) with
    sign(w_i).  K = 1 is direct binarization of the single convolution.
    """
    if not branches:
        raise EngineError("layer-wise decomposition needs at least one branch")
    px = pack_signs(np.asarray(x, dtype=np.float64), axis=1)
    acc = None
    for conv in branches:
        pw = pack_signs(sign_pm1(conv.weight.data), axis=1)
        out = binary_conv2d(px, pw, conv.geom).astype(np.float64)
        acc = out if acc is None else acc + out
    return acc / len(branches)


def gbd_forward(x: np.ndarray, bases: list[list[Layer]]) -> np.ndarray:
    """Group-wise decomposition: run each base end-to-end, average.

    Each base is a full copy of the group's block topology; a single-block
    group reduces to the layer-wise form.
    """
    if not bases or not bases[0]:
        raise EngineError("group-wise decomposition needs at least one base")
    acc = None
    for base in bases:
        cur = np.asarray(x, dtype=np.float64)
        for block in base:
            cur = block.forward(cur, False, {})
        acc = cur if acc is None else acc + cur
    return acc / len(bases)


def soft_gate_forward(prev_outputs: list[np.ndarray], theta: np.ndarray,
                      second_path: str = SECOND_PATH_SUM) -> list[np.ndarray]:
    """x_i = C_i * G_i + (1 - C_i) * sum_j G_j with C_i = sigmoid(theta_i).

    The second path is the literal sum by default; "avg" divides it by K.
    """
    k = len(prev_outputs)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (k,):
        raise EngineError(f"theta must have shape ({k},)")
    shape0 = prev_outputs[0].shape
    if any(o.shape != shape0 for o in prev_outputs):
        raise EngineError("branch outputs must share one shape")
    c = sigmoid(theta)
    s = sum(prev_outputs)
    if second_path == SECOND_PATH_AVG:
        s = s / k
    elif second_path != SECOND_PATH_SUM:
        raise EngineError(f"unknown second-path mode {second_path!r}")
    return [c[i] * prev_outputs[i] + (1.0 - c[i]) * s for i in range(k)]


def hard_gate_forward(x: np.ndarray, nu: np.ndarray, n_select: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Branch selection masks from the preceding group's output.

    Returns (mask, scores): per-sample {0,1}^K indicators with exactly
    n_select ones (ties to the lowest index) and the raw scores
    psi(x) @ nu, psi being per-sample channel-wise spatial averaging.
    """
    nu = np.asarray(nu, dtype=np.float64)
    if x.ndim != 4 or nu.ndim != 2 or x.shape[1] != nu.shape[0]:
        raise EngineError("x must be (N, C, H, W) with nu (C, K)")
    if not 1 <= n_select <= nu.shape[1]:
        raise EngineError(f"n_select {n_select} outside 1..{nu.shape[1]}")
    psi = x.mean(axis=(2, 3))
    scores = psi @ nu
    return top_n_mask(scores, n_select), scores


def hard_gate_backward(grad_gate: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Route selector gradients through the softmax Jacobian.

    grad_gate holds dl/dg per sample; the return value is dl/ds where the
    Top-N indicator has been replaced by softmax(s).  Every column receives
    gradient, selected or not.
    """
    if grad_gate.shape != scores.shape:
        raise EngineError("gradient and score shapes differ")
    p = softmax(np.asarray(scores, dtype=np.float64), axis=1)
    return p * (grad_gate - (grad_gate * p).sum(axis=1, keepdims=True))


# ----------------------------------------------------------- model builder


@dataclass
class BackboneSpec:
    """Stage layout of the reference residual backbone."""

    in_channels: int = 3
    num_classes: int = 10
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 3
    stem_width: int | None = None
    image_size: int = 32

    def __post_init__(self):
        if self.blocks_per_stage < 1 or not self.stage_widths:
            raise EngineError("backbone needs at least one stage with one block")

    @property
    def stem_out(self) -> int:
        return self.stem_width or self.stage_widths[0]

    @property
    def num_blocks(self) -> int:
        return len(self.stage_widths) * self.blocks_per_stage


class GroupNetModel(Model):
    """A built variant with its structural metadata attached."""

    def __init__(self, root: Layer, spec: GroupSpec, backbone: BackboneSpec,
                 variant: str, k: int, groups: list[GatedGroup],
                 stem_conv: QuantConv2d, head: Linear):
        super().__init__(root)
        self.spec = spec
        self.backbone = backbone
        self.variant = variant
        self.k = k
        self.groups = groups
        self.stem_conv = stem_conv
        self.head = head


def _block_plan(backbone: BackboneSpec) -> list[tuple[int, int, int]]:
    """(c_in, c_out, stride) per block in execution order."""
    plan = []
    c_prev = backbone.stem_out
    for s, width in enumerate(backbone.stage_widths):
        for b in range(backbone.blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            plan.append((c_prev, width, stride))
            c_prev = width
    return plan


def build_variant(name: str, backbone: BackboneSpec | None = None, k: int = 4,
                  n_select: int = 4, k_train: int = 8, seed: int = 0,
                  second_path: str = SECOND_PATH_SUM,
                  partition: str = "stages", pad_mode: str | None = None,
                  gate_mode: str | None = None, weight_mode: str = "sign",
                  act_mode: str = "sign") -> tuple[GroupSpec, GroupNetModel]:
    """Build GroupNet-A, -B, or -C over the residual backbone.

    A: soft gates, parameter-free skips everywhere.
    B: A plus 8-bit 1x1 convolutions on the shape-changing skips.
    C: B with hard gating; trains k_train bases and selects n_select.
    Groups follow the backbone stages ("stages") or are per-block
    singletons ("blocks", the layer-wise arrangement).  ``gate_mode``
    overrides the variant default ("none" disables soft gates; "hard"
    is only valid for C, which cannot be overridden away from it).
    ``weight_mode`` "real" keeps branch weights full precision (the
    first training stage); ``act_mode`` "real" additionally drops the
    activation quantizer, giving the float ablation twin.
    """
    if name not in ("A", "B", "C"):
        raise EngineError(f"unknown variant {name!r}")
    if weight_mode not in ("sign", "real"):
        raise EngineError(f"unknown weight mode {weight_mode!r}")
    if act_mode not in ("sign", "zero_one", "real"):
        raise EngineError(f"unknown activation mode {act_mode!r}")
    backbone = backbone or BackboneSpec()
    if partition not in ("stages", "blocks"):
        raise EngineError(f"unknown partition {partition!r}")
    if name == "C":
        k = k_train
    gating = "hard" if name == "C" else "soft"
    if gate_mode:
        if name == "C" and gate_mode != "hard":
            raise EngineError("variant C requires hard gating")
        if name != "C" and gate_mode == "hard":
            raise EngineError("hard gating requires variant C")
        if gate_mode not in ("none", "soft", "hard"):
            raise EngineError(f"unknown gate mode {gate_mode!r}")
        gating = gate_mode
    skip = "identity" if name == "A" else "int8"
    rng = make_rng(seed, "build", name)

    plan = _block_plan(backbone)
    n_blocks = len(plan)
    if partition == "stages":
        bounds = list(range(0, n_blocks + 1, backbone.blocks_per_stage))
    else:
        bounds = list(range(n_blocks + 1))
    decomposition = "GBD" if partition == "stages" else "LBD"

    exceptions = {"stem.conv", "head.fc"}

    stem_conv = QuantConv2d(
        backbone.in_channels, backbone.stem_out, 3,
        ConvGeometry((1, 1), (1, 1), (1, 1), PAD_ZERO),
        weight_quant="int8", rng=rng,
    )
    stem = Sequential(stem_conv, BatchNorm2d(backbone.stem_out), PReLU(backbone.stem_out))

    groups: list[GatedGroup] = []
    for gi, (lo, hi) in enumerate(zip(bounds, bounds[1:])):
        bases = []
        for _ in range(k):
            base = [
                BinaryBlock(c_in, c_out, stride,
                            weight_quant="sign" if weight_mode == "sign" else None,
                            act=act_mode, skip=skip, rng=rng, pad_mode=pad_mode)
                for (c_in, c_out, stride) in plan[lo:hi]
            ]
            bases.append(base)
        groups.append(GatedGroup(
            bases, gating=gating,
            n_select=n_select if gating == "hard" else None,
            c_in=plan[lo][0] if gating == "hard" else None,
            second_path=second_path, rng=rng,
        ))
        if name in ("B", "C"):
            for bi, (c_in, c_out, stride) in enumerate(plan[lo:hi]):
                if stride != 1 or c_in != c_out:
                    exceptions.add(f"group{gi}.block{lo + bi}.skip")

    head = Linear(backbone.stage_widths[-1], backbone.num_classes,
                  rng=rng, weight_quant="int8")
    root = Sequential(stem, *groups, GlobalAvgPool(), head)
    spec = GroupSpec(
        num_blocks=n_blocks, partition=bounds, bases_per_group=k,
        decomposition=decomposition, gating=gating,
        n_select=n_select if gating == "hard" else None,
        precision_exceptions=exceptions,
    )
    return spec, GroupNetModel(root, spec, backbone, name, k, groups, stem_conv, head)


# ------------------------------------------------------------- complexity


def _conv_macs(conv: QuantConv2d) -> int:
    if conv.last_out_hw is None:
        raise EngineError("run a probe forward before counting complexity")
    ho, wo = conv.last_out_hw
    return conv.c_out * conv.c_in * conv.kh * conv.kw * ho * wo


def _conv_out_elems(conv: QuantConv2d) -> int:
    ho, wo = conv.last_out_hw
    return conv.c_out * ho * wo


def fixed_point_conv_binary_ops(base_macs: int, p_bits: int) -> int:
    """Binary-operation count of a P-bit fixed-point convolution.

    The fixed-point product decomposes into P x P binary dot products, so
    the count is P^2 * MACs of the underlying binary convolution.
    """
    if p_bits < 1:
        raise EngineError("bit width must be >= 1")
    return p_bits * p_bits * base_macs


def complexity_report(model: GroupNetModel, batch_image_hw: tuple[int, int] | None = None
                      ) -> dict[str, float]:
    """Count binary ops, fusion adds, and parameter bits for a built model.

    binary_ops: XNOR-popcount MACs of the branch convolutions; hard-gated
    groups count only the n_select bases that run per sample.
    fixed_point_adds: real-valued additions from skip connections, soft
    second-path fusion, and final branch aggregation (BN and PReLU are
    excluded, as is customary for conv-dominated counts).
    param_bits: storage for convolution and fully-connected weights only
    (1 bit per binary weight across all K stored bases, 8 per int8
    exception weight, 32 per remaining float weight).
    memory_saving: float weight bits of the identical K=1 real topology
    divided by param_bits.
    """
    hw = batch_image_hw or (model.backbone.image_size, model.backbone.image_size)
    probe = np.zeros((1, model.backbone.in_channels) + tuple(hw))
    model.forward(probe, train=False)

    binary_ops = 0
    adds = 0
    param_bits = 0
    float_bits = 0

    # stem (8-bit exception)
    param_bits += 8 * model.stem_conv.weight.data.size
    float_bits += 32 * model.stem_conv.weight.data.size

    for group in model.groups:
        k_eff = group.n_select if group.gating == "hard" else group.k
        base = group.bases[0]
        base_macs = sum(_conv_macs(b.conv) for b in base)
        binary_ops += k_eff * base_macs
        for blk in base:
            elems = _conv_out_elems(blk.conv)
            if blk.skip is not None:
                adds += k_eff * elems
            if isinstance(blk.skip, QuantConv2d):
                # every stored base carries its own 8-bit skip
                param_bits += 8 * group.k * blk.skip.weight.data.size
                float_bits += 32 * blk.skip.weight.data.size
            # binary weights are stored for all K bases, selected or not
            param_bits += group.k * blk.conv.weight.data.size
            float_bits += 32 * blk.conv.weight.data.size
        if group.gating == "soft" and group.depth > 1:
            for blk in base[:-1]:
                elems = _conv_out_elems(blk.conv)
                adds += (2 * group.k - 1) * elems
        adds += (k_eff - 1) * _conv_out_elems(base[-1].conv)

    param_bits += 8 * model.head.weight.data.size
    float_bits += 32 * model.head.weight.data.size

    return {
        "binary_ops": int(binary_ops),
        "fixed_point_adds": int(adds),
        "param_bits": int(param_bits),
        "memory_saving": float_bits / param_bits,
    }
