"""Desk-scale timing and memory harness for the packed convolutions.

Eleven fixed single-layer cases sweep spatial extent at 64 channels
(cases 1-5) and channel count at 56x56 (cases 6-11), all 3x3 / stride 1 /
pad 1 / batch 1.  Every timed kernel is checked for exactness against the
trusted dense route on its own case shape before any clock starts, so a
fast-but-wrong kernel can never produce a report.

Timing uses a monotonic clock, discards a warmup run (which also absorbs
JIT compilation), and reports mean and standard deviation over the
repeats.  Activation packing is inside the timed region because inference
must pay for it; weight packing is outside because deployed weights ship
pre-packed.  Reports carry the analytic speedup model sigma next to the
measurement and flag measurements below 0.1 * sigma as suspect: the model
ignores memory traffic, so it is an upper bound, but a shortfall that
large points at a harness problem rather than bandwidth.
"""

from __future__ import annotations

import os
import platform
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from bitbranch.bitcore import (
    ConvGeometry,
    binary_conv2d,
    pack_bools,
    pack_signs,
    speedup_ratio,
)
from bitbranch.groupnet import GroupNetModel, QuantConv2d
from bitbranch.nnengine import make_rng


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class BenchCase:
    case_id: int
    channels: int
    spatial: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    batch: int = 1

    def validate(self) -> None:
        for name in ("case_id", "channels", "spatial", "kernel", "stride", "batch"):
            if getattr(self, name) < 1:
                raise BenchError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise BenchError(f"padding must be >= 0, got {self.padding}")

    @property
    def out_spatial(self) -> int:
        return (self.spatial + 2 * self.padding - self.kernel) // self.stride + 1


def bench_cases() -> list[BenchCase]:
    cases = [BenchCase(i + 1, 64, s) for i, s in enumerate((28, 56, 112, 224, 448))]
    cases += [BenchCase(i + 6, c, 56) for i, c in enumerate((16, 32, 64, 128, 256, 512))]
    return cases


def case_by_id(case_id: int) -> BenchCase:
    for case in bench_cases():
        if case.case_id == case_id:
            return case
    raise BenchError(f"no benchmark case {case_id}; valid ids are 1..11")


# ------------------------------------------------------- float reference


@njit(cache=True)
def _float_conv3x3(xp, w, out):
    # xp: (C, H + 2p, W + 2p) pre-padded, w: (CO, C, KH, KW), out: (CO, HO, WO)
    co_n, c_n, kh, kw = w.shape
    ho, wo = out.shape[1], out.shape[2]
    for co in range(co_n):
        for oy in range(ho):
            orow = out[co, oy]
            for ox in range(wo):
                orow[ox] = 0.0
        for c in range(c_n):
            for ky in range(kh):
                for kx in range(kw):
                    wv = w[co, c, ky, kx]
                    for oy in range(ho):
                        xrow = xp[c, oy + ky]
                        orow = out[co, oy]
                        for ox in range(wo):
                            orow[ox] += wv * xrow[ox + kx]


def float_conv_reference(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Scalar float32 direct convolution, stride 1 (the timing baseline)."""
    n, c, h, wd = x.shape
    co = w.shape[0]
    ho = h + 2 * padding - w.shape[2] + 1
    wo = wd + 2 * padding - w.shape[3] + 1
    out = np.empty((n, co, ho, wo), dtype=np.float32)
    w32 = np.ascontiguousarray(w, dtype=np.float32)
    for i in range(n):
        xp = np.pad(x[i].astype(np.float32), ((0, 0), (padding, padding), (padding, padding)))
        _float_conv3x3(np.ascontiguousarray(xp), w32, out[i])
    return out


# ------------------------------------------------------------- kernels


def _dense_reference(x, w, geom, fill=0.0):
    # trusted oracle route: float64 im2col + BLAS matmul
    n, c, h, wd = x.shape
    p = geom.padding[0]
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill)
    kh, kw = w.shape[2], w.shape[3]
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    sh, sw = geom.stride
    win = win[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * win.shape[2] * win.shape[3], -1)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(n, win.shape[2], win.shape[3], w.shape[0]).transpose(0, 3, 1, 2)


class _KernelRun:
    """One prepared (inputs built, weights packed, verified) timed kernel."""

    def __init__(self, case: BenchCase, kind: str, rng: np.random.Generator):
        case.validate()
        self.case = case
        self.kind = kind
        c, s = case.channels, case.spatial
        self.geom = ConvGeometry((case.stride, case.stride),
                                 (case.padding, case.padding))
        self.x = np.where(rng.random((case.batch, c, s, s)) < 0.5, -1.0, 1.0)
        if kind == "float":
            self.w = np.where(rng.random((c, c, case.kernel, case.kernel)) < 0.5,
                              -1.0, 1.0)
            self._verify_float()
        elif kind == "binary":
            self.w = np.where(rng.random((c, c, case.kernel, case.kernel)) < 0.5,
                              -1.0, 1.0)
            self.pw = pack_signs(self.w, axis=1)
            self._verify_binary()
        elif kind.startswith("group:"):
            self.k = self._parse_param(kind, "group")
            self.ws = [np.where(rng.random((c, c, case.kernel, case.kernel)) < 0.5,
                                -1.0, 1.0) for _ in range(self.k)]
            self.pws = [pack_signs(w, axis=1) for w in self.ws]
            self._verify_group()
        elif kind.startswith("fixed:"):
            self.p = self._parse_param(kind, "fixed")
            shape = (c, c, case.kernel, case.kernel)
            self.wbits = [rng.random(shape) < 0.5 for _ in range(self.p)]
            self.xbits = [rng.random((case.batch, c, s, s)) < 0.5
                          for _ in range(self.p)]
            self.pwbits = [pack_bools(b, axis=1) for b in self.wbits]
            self._verify_fixed()
        else:
            raise BenchError(f"unknown kernel kind {kind!r}")

    @staticmethod
    def _parse_param(kind: str, prefix: str) -> int:
        raw = kind.split(":", 1)[1]
        try:
            value = int(raw)
        except ValueError as exc:
            raise BenchError(f"bad {prefix} parameter {raw!r}") from exc
        if value < 1:
            raise BenchError(f"{prefix} parameter must be >= 1, got {value}")
        return value

    # ---- exactness gates (run once, before any timing)

    def _verify_binary(self):
        got = binary_conv2d(pack_signs(self.x, axis=1), self.pw, self.geom)
        want = _dense_reference(self.x, self.w, self.geom, fill=-1.0)
        if not np.array_equal(got.astype(np.float64), want):
            raise BenchError(f"case {self.case.case_id}: binary kernel is not exact")

    def _verify_float(self):
        got = float_conv_reference(self.x, self.w, self.case.padding)
        want = _dense_reference(self.x, self.w, self.geom)
        if not np.allclose(got, want, rtol=1e-4, atol=1e-3):
            raise BenchError(f"case {self.case.case_id}: float kernel diverges")

    def _verify_group(self):
        got = self.run()
        want = sum(_dense_reference(self.x, w, self.geom, fill=-1.0)
                   for w in self.ws) / self.k
        if not np.allclose(got, want, rtol=0, atol=1e-9):
            raise BenchError(f"case {self.case.case_id}: group kernel is not exact")

    def _verify_fixed(self):
        got = self.run()
        want = np.zeros_like(got)
        for i, wb in enumerate(self.wbits):
            wv = np.where(wb, 1.0, -1.0)
            for j, xb in enumerate(self.xbits):
                xv = np.where(xb, 1.0, -1.0)
                want += float(2 ** (i + j)) * _dense_reference(
                    xv, wv, self.geom, fill=-1.0)
        if not np.array_equal(got, want):
            raise BenchError(f"case {self.case.case_id}: fixed-point kernel is not exact")

    # ---- the timed body

    def run(self):
        if self.kind == "float":
            return float_conv_reference(self.x, self.w, self.case.padding)
        if self.kind == "binary":
            px = pack_signs(self.x, axis=1)
            return binary_conv2d(px, self.pw, self.geom)
        if self.kind.startswith("group:"):
            px = pack_signs(self.x, axis=1)
            acc = binary_conv2d(px, self.pws[0], self.geom).astype(np.float64)
            for pw in self.pws[1:]:
                acc += binary_conv2d(px, pw, self.geom)
            return acc / self.k
        # fixed:P: P packed activation planes, P^2 scaled binary convs
        pxs = [pack_bools(b, axis=1) for b in self.xbits]
        acc = None
        for i, pw in enumerate(self.pwbits):
            for j, px in enumerate(pxs):
                term = binary_conv2d(px, pw, self.geom).astype(np.float64)
                term *= float(2 ** (i + j))
                acc = term if acc is None else acc + term
        return acc


def machine_fingerprint() -> str:
    model = ""
    try:
        with open("/proc/cpuinfo") as f:
            for line in f:
                if line.lower().startswith("model name"):
                    model = line.split(":", 1)[1].strip()
                    break
    except OSError:
        model = platform.processor() or platform.machine()
    return f"{model or 'unknown-cpu'}/{os.cpu_count()}t"


def _analytic_sigma(case: BenchCase, kind: str) -> float:
    if kind == "float":
        return 1.0
    if kind == "binary":
        k = 1
    elif kind.startswith("group:"):
        k = int(kind.split(":", 1)[1])
    else:  # fixed:P costs P^2 binary passes
        p = int(kind.split(":", 1)[1])
        k = p * p
    o = case.out_spatial
    return speedup_ratio(case.channels, case.kernel, case.kernel,
                         case.spatial, case.spatial, o, o, k)


@dataclass
class BenchResult:
    case_id: int
    kernel: str
    mean_us: float
    std_us: float
    analytic_sigma: float
    machine: str
    suspect: bool = False


def run_case(case: BenchCase, kernel: str, repeats: int = 5,
             seed: int = 0) -> BenchResult:
    """Verify then time one kernel on one case."""
    if repeats < 1:
        raise BenchError(f"repeats must be >= 1, got {repeats}")
    rng = make_rng(seed, "bench", f"case{case.case_id}", kernel)
    prepared = _KernelRun(case, kernel, rng)
    prepared.run()  # warmup: touches every code path, absorbs JIT
    times = np.empty(repeats)
    for r in range(repeats):
        t0 = time.perf_counter()
        prepared.run()
        times[r] = time.perf_counter() - t0
    return BenchResult(
        case_id=case.case_id,
        kernel=kernel,
        mean_us=float(times.mean() * 1e6),
        std_us=float(times.std() * 1e6),
        analytic_sigma=_analytic_sigma(case, kernel),
        machine=machine_fingerprint(),
    )


def flag_suspect(binary: BenchResult, float_ref: BenchResult) -> BenchResult:
    """Mark a binary measurement whose speedup falls below 0.1 * sigma."""
    measured = float_ref.mean_us / max(binary.mean_us, 1e-9)
    binary.suspect = measured < 0.1 * binary.analytic_sigma
    return binary


CSV_HEADER = "case_id,kernel,mean_us,std_us,analytic_sigma,machine"


def results_to_csv(results: list[BenchResult]) -> str:
    lines = [CSV_HEADER]
    for r in results:
        machine = r.machine.replace(",", ";")
        lines.append(
            f"{r.case_id},{r.kernel},{r.mean_us:.3f},{r.std_us:.3f},"
            f"{r.analytic_sigma:.4f},{machine}"
        )
    return "\n".join(lines) + "\n"


# ------------------------------------------------- addition-vs-conv split


def binary_vs_addition_split(case: BenchCase, k: int = 4, repeats: int = 5,
                             seed: int = 0) -> dict[str, float]:
    """Time the binary convolution against the branch-fusion additions.

    The fusion step (k - 1 elementwise adds plus the final scale at the
    convolution's output shape) must come out cheaper than one binary
    convolution; the returned dict carries both timings in microseconds.
    """
    if k < 2:
        raise BenchError("the fusion split needs k >= 2 branches")
    conv = run_case(case, "binary", repeats=repeats, seed=seed)
    rng = make_rng(seed, "bench-fusion", f"case{case.case_id}")
    o = case.out_spatial
    branches = [rng.standard_normal((case.batch, case.channels, o, o))
                for _ in range(k)]
    out = np.empty_like(branches[0])

    def fuse():
        np.copyto(out, branches[0])
        for b in branches[1:]:
            np.add(out, b, out=out)
        np.divide(out, k, out=out)

    fuse()
    times = np.empty(repeats)
    for r in range(repeats):
        t0 = time.perf_counter()
        fuse()
        times[r] = time.perf_counter() - t0
    return {
        "case_id": case.case_id,
        "binary_conv_us": conv.mean_us,
        "fusion_add_us": float(times.mean() * 1e6),
        "fusion_cheaper": bool(times.mean() * 1e6 < conv.mean_us),
    }


# ------------------------------------------------------------ memory model


def memory_model(model: GroupNetModel,
                 batch_image_hw: tuple[int, int] | None = None) -> dict[str, int]:
    """Deployed-size model: weight bytes and peak reusable activation bytes.

    Weight bytes count packed binary conv weights (1 bit each across all K
    stored bases, padded to whole 64-bit lanes) plus the 8-bit exception
    layers.  Activation bytes are the single largest reusable buffer: the
    packed im2col workspace of the widest binary convolution, plus one
    float accumulator for branch fusion whenever any group runs two or
    more branches.  The branch accumulator is the same buffer for every
    K >= 2, so activation memory does not grow with K.  The float baseline
    is the identical K=1 topology holding 32-bit conv and fc weights.
    """
    hw = batch_image_hw or (model.backbone.image_size, model.backbone.image_size)
    probe = np.zeros((1, model.backbone.in_channels) + tuple(hw))
    model.forward(probe, train=False)

    def packed_bytes(conv: QuantConv2d) -> int:
        words_per_lane = (conv.c_in + 63) // 64
        return conv.c_out * conv.kh * conv.kw * words_per_lane * 8

    weight_bytes = model.stem_conv.weight.data.size  # int8 exception
    float_baseline = 4 * model.stem_conv.weight.data.size
    act_im2col = 0
    fusion_elems = 0
    for group in model.groups:
        k_eff = group.n_select if group.gating == "hard" else group.k
        for blk in group.bases[0]:
            conv = blk.conv
            ho, wo = conv.last_out_hw
            rows = ho * wo
            patch_words = conv.kh * conv.kw * ((conv.c_in + 63) // 64)
            act_im2col = max(act_im2col, rows * patch_words * 8)
            weight_bytes += group.k * packed_bytes(conv)
            float_baseline += 4 * conv.weight.data.size
            if isinstance(blk.skip, QuantConv2d):
                weight_bytes += group.k * blk.skip.weight.data.size
                float_baseline += 4 * blk.skip.weight.data.size
            if k_eff >= 2:
                fusion_elems = max(fusion_elems, conv.c_out * ho * wo)
    weight_bytes += model.head.weight.data.size  # int8 exception
    float_baseline += 4 * model.head.weight.data.size
    return {
        "inference_weight_bytes": int(weight_bytes),
        "inference_activation_bytes": int(act_im2col + 4 * fusion_elems),
        "float_baseline_bytes": int(float_baseline),
    }
