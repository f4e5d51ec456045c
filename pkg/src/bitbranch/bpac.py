"""Per-branch dilation rates over binary branch groups, plus the dense-
prediction demo that exercises them.

Giving each of a group's K branches its own dilation rate turns the
branch ensemble into a multi-scale context aggregator at zero extra cost:
dilation changes which pixels a 3x3 kernel reads, not how many, so the
binary-operation count is identical to any uniform-rate configuration of
the same topology.  Branches running at rates above 4 switch to {0,1}
activations so the wide padding ring contributes nothing to the
popcounts; at {0,1} encoding a zero pad bit is arithmetically invisible,
which keeps border pixels comparable across rates.

The demo task is scale segmentation: images contain shapes whose pixel
class is their size category, with colors and shape types uncorrelated
with the label, so only receptive-field context can solve it.  A toy
fully-convolutional net at output stride 4 trains on it end to end.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np

from bitbranch.bitcore import ConvGeometry, PAD_ZERO, binary_conv2d, pack_signs
from bitbranch.binarizers import sign_pm1
from bitbranch.groupnet import BinaryBlock, GatedGroup
from bitbranch.nnengine import (
    BatchNorm2d,
    EngineError,
    Model,
    PReLU,
    QuantConv2d,
    Sequential,
    make_rng,
)

ZERO_ONE_RATE_THRESHOLD = 4   # rate > 4 switches the branch to {0,1} acts


class BpacError(ValueError):
    pass


def branch_act_mode(rate: int) -> str:
    return "zero_one" if rate > ZERO_ONE_RATE_THRESHOLD else "sign"


def default_rate_sets(k: int, num_groups: int) -> tuple[tuple[int, ...], ...]:
    """Multi-rate sets for the last two groups, rate 1 elsewhere.

    Penultimate group: rates 2..K+1.  Last group: rates 6..K+5.
    """
    if k < 1 or num_groups < 1:
        raise BpacError("need k >= 1 and num_groups >= 1")
    sets: list[tuple[int, ...]] = [(1,) * k for _ in range(num_groups)]
    if num_groups >= 2:
        sets[-2] = tuple(range(2, k + 2))
    sets[-1] = tuple(range(6, k + 6))
    return tuple(sets)


def uniform_rate_sets(k: int, num_groups: int, rate: int = 1
                      ) -> tuple[tuple[int, ...], ...]:
    """The equal-cost baseline: every branch of every group at one rate."""
    if rate < 1:
        raise BpacError(f"rate must be >= 1, got {rate}")
    return tuple((rate,) * k for _ in range(num_groups))


@dataclass
class BpacSpec:
    """Branch counts and per-group dilation rate sets."""

    k: int
    num_groups: int
    rate_sets: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        if self.k < 1:
            raise BpacError(f"k must be >= 1, got {self.k}")
        if self.num_groups < 1:
            raise BpacError(f"num_groups must be >= 1, got {self.num_groups}")
        if self.rate_sets is None:
            self.rate_sets = default_rate_sets(self.k, self.num_groups)
        self.rate_sets = tuple(tuple(s) for s in self.rate_sets)
        if len(self.rate_sets) != self.num_groups:
            raise BpacError(
                f"need one rate set per group: {len(self.rate_sets)} sets "
                f"for {self.num_groups} groups"
            )
        for gi, rates in enumerate(self.rate_sets):
            if len(rates) != self.k:
                raise BpacError(
                    f"group {gi}: rate set {rates} must list {self.k} rates"
                )
            if any(r < 1 for r in rates):
                raise BpacError(f"group {gi}: rates must be >= 1, got {rates}")


# ------------------------------------------------------- functional form


def bpac_forward(x: np.ndarray, branches: list[QuantConv2d],
                 rate_set: tuple[int, ...]) -> np.ndarray:
    """(1/K) sum of K exact packed convolutions, branch i at rate_set[i].

    Each branch must have been built with its own dilation and the
    matching padding; outputs that fail to share one shape are an error,
    never silently cropped.
    """
    if not branches:
        raise BpacError("need at least one branch")
    if len(branches) != len(rate_set):
        raise BpacError(
            f"{len(branches)} branches but {len(rate_set)} rates"
        )
    x = np.asarray(x, dtype=np.float64)
    px = pack_signs(x, axis=1)
    acc = None
    shape0 = None
    for i, (conv, rate) in enumerate(zip(branches, rate_set)):
        if conv.geom.dilation != (rate, rate):
            raise BpacError(
                f"branch {i} has dilation {conv.geom.dilation}, rate set says {rate}"
            )
        if conv.input_enc != "pm1":
            raise BpacError(
                "the functional form runs on sign activations; {0,1} "
                "branches live inside network blocks"
            )
        pw = pack_signs(sign_pm1(conv.weight.data), axis=1)
        out = binary_conv2d(px, pw, conv.geom).astype(np.float64)
        if shape0 is None:
            shape0 = out.shape
        elif out.shape != shape0:
            raise BpacError(
                f"branch {i} produced {out.shape}, first branch {shape0}; "
                "padding must compensate dilation"
            )
        acc = out if acc is None else acc + out
    return acc / len(branches)


def make_rate_branch(c_in: int, c_out: int, rate: int, kernel: int = 3,
                     rng: np.random.Generator | None = None) -> QuantConv2d:
    """A sign-quantized conv whose padding keeps output size rate-invariant."""
    if rate < 1:
        raise BpacError(f"rate must be >= 1, got {rate}")
    pad = rate * (kernel - 1) // 2
    geom = ConvGeometry((1, 1), (pad, pad), (rate, rate))
    return QuantConv2d(c_in, c_out, kernel, geom, weight_quant="sign", rng=rng)


# --------------------------------------------------------------- network


class BpacModel(Model):
    """Output-stride-4 fully-convolutional net with multi-rate groups."""

    def __init__(self, root, spec: BpacSpec, groups, stem_conv, head_conv,
                 in_channels: int, num_classes: int):
        super().__init__(root)
        self.spec = spec
        self.groups = groups
        self.stem_conv = stem_conv
        self.head_conv = head_conv
        self.in_channels = in_channels
        self.num_classes = num_classes


def build_bpac_model(spec: BpacSpec, widths: tuple[int, ...] = (16, 24, 32),
                     blocks_per_group: int = 2, in_channels: int = 3,
                     num_classes: int = 4, seed: int = 0) -> BpacModel:
    """Stem (stride 2) -> groups (first block of group 0 at stride 2)
    -> 1x1 head, all at output stride 4.

    Group g runs ``spec.k`` parallel bases; base i of group g uses
    dilation ``spec.rate_sets[g][i]`` in every one of its blocks.  Rates
    above 4 run that base on {0,1} activations.
    """
    if len(widths) != spec.num_groups:
        raise BpacError(f"need one width per group, got {widths} for "
                        f"{spec.num_groups} groups")
    if blocks_per_group < 1:
        raise BpacError("blocks_per_group must be >= 1")
    rng = make_rng(seed, "bpac-build")
    stem_w = widths[0]
    stem_conv = QuantConv2d(
        in_channels, stem_w, 3,
        ConvGeometry((2, 2), (1, 1), (1, 1), PAD_ZERO),
        weight_quant="int8", rng=rng,
    )
    stem = Sequential(stem_conv, BatchNorm2d(stem_w), PReLU(stem_w))
    groups = []
    c_prev = stem_w
    for gi, width in enumerate(widths):
        rates = spec.rate_sets[gi]
        bases = []
        for bi in range(spec.k):
            rate = rates[bi]
            blocks = []
            c_in = c_prev
            for n in range(blocks_per_group):
                stride = 2 if (gi == 0 and n == 0) else 1
                blocks.append(BinaryBlock(
                    c_in, width, stride=stride, dilation=rate,
                    weight_quant="sign", act=branch_act_mode(rate),
                    skip="identity", rng=rng,
                ))
                c_in = width
            bases.append(blocks)
        groups.append(GatedGroup(bases, gating="none"))
        c_prev = width
    head_conv = QuantConv2d(
        c_prev, num_classes, 1, ConvGeometry((1, 1), (0, 0), (1, 1), PAD_ZERO),
        weight_quant="int8", rng=rng,
    )
    root = Sequential(stem, *groups, head_conv)
    return BpacModel(root, spec, groups, stem_conv, head_conv,
                     in_channels, num_classes)


def bpac_binary_ops(model: BpacModel, image_hw: tuple[int, int]) -> int:
    """Branch-convolution XNOR MACs for one image (gating-free groups)."""
    probe = np.zeros((1, model.in_channels) + tuple(image_hw))
    model.forward(probe, train=False)
    total = 0
    for group in model.groups:
        for base in group.bases:
            for blk in base:
                conv = blk.conv
                ho, wo = conv.last_out_hw
                total += conv.c_out * conv.c_in * conv.kh * conv.kw * ho * wo
    return int(total)


# ---------------------------------------------------------------- dataset

SCALE_RADII = (0.05, 0.13, 0.30)  # fractions of image size, small to large


def generate_shape_dataset(num_images: int, image_size: int = 64,
                           num_classes: int = 4, seed: int = 0
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Seeded scale-segmentation data: pixel label = shape size category.

    Returns (images, labels): float64 (N,3,S,S) in roughly [-0.5, 0.5]
    and int64 (N,S,S) with 0 = background and c >= 1 the size class.
    Shape type (disc or square) and color are drawn independently of the
    label, so pixel appearance alone cannot solve the task.  A dataset
    whose labels collapse to a single class is rejected.
    """
    if num_images < 1:
        raise BpacError("num_images must be >= 1")
    if not 2 <= num_classes <= 1 + len(SCALE_RADII):
        raise BpacError(
            f"num_classes must lie in 2..{1 + len(SCALE_RADII)}, got {num_classes}"
        )
    if image_size < 16:
        raise BpacError("image_size must be >= 16")
    rng = make_rng(seed, "bpac-shapes")
    n_scales = num_classes - 1
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images = np.zeros((num_images, 3, image_size, image_size))
    labels = np.zeros((num_images, image_size, image_size), dtype=np.int64)
    for i in range(num_images):
        images[i] = rng.uniform(-0.1, 0.1, size=(3, 1, 1))
        n_shapes = int(rng.integers(2, 5))
        for _ in range(n_shapes):
            scale = int(rng.integers(0, n_scales))
            radius = SCALE_RADII[scale] * image_size
            cy = rng.uniform(radius, image_size - radius)
            cx = rng.uniform(radius, image_size - radius)
            if rng.random() < 0.5:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
            else:
                mask = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
            color = rng.uniform(0.1, 0.5, size=3)
            for ch in range(3):
                images[i, ch][mask] = color[ch]
            labels[i][mask] = scale + 1
        images[i] += 0.02 * rng.standard_normal((3, image_size, image_size))
    present = np.unique(labels)
    if present.size < 2:
        raise BpacError(
            "degenerate dataset: every pixel has one class; nothing to segment"
        )
    return images, labels


def labels_at_stride(labels: np.ndarray, stride: int = 4) -> np.ndarray:
    """Subsample dense labels onto the model's output grid."""
    return labels[:, ::stride, ::stride]


# ------------------------------------------------------------------ mIOU


def confusion_matrix(pred: np.ndarray, true: np.ndarray, num_classes: int
                     ) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    true = np.asarray(true).ravel()
    if pred.shape != true.shape:
        raise BpacError("prediction and label shapes differ")
    if pred.min(initial=0) < 0 or pred.max(initial=0) >= num_classes:
        raise BpacError("prediction outside class range")
    if true.min(initial=0) < 0 or true.max(initial=0) >= num_classes:
        raise BpacError("label outside class range")
    idx = true * num_classes + pred
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes)


def miou_from_confusion(conf: np.ndarray) -> float:
    """Mean intersection-over-union across classes with non-empty union."""
    conf = np.asarray(conf, dtype=np.float64)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    valid = union > 0
    if not valid.any():
        raise BpacError("empty confusion matrix")
    return float((inter[valid] / union[valid]).mean())


def evaluate_miou(model: BpacModel, images: np.ndarray, labels: np.ndarray,
                  batch_size: int = 16, stride: int = 4) -> float:
    targets = labels_at_stride(labels, stride)
    conf = np.zeros((model.num_classes, model.num_classes), dtype=np.int64)
    for lo in range(0, images.shape[0], batch_size):
        batch = images[lo:lo + batch_size]
        logits, _ = model.forward(batch, train=False)
        pred = logits.argmax(axis=1)
        conf += confusion_matrix(pred, targets[lo:lo + batch_size],
                                 model.num_classes)
    return miou_from_confusion(conf)


# ------------------------------------------------------------- generator


def _main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        description="generate the scale-segmentation dataset")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--num-images", type=int, default=64)
    ap.add_argument("--image-size", type=int, default=64)
    ap.add_argument("--num-classes", type=int, default=4)
    ap.add_argument("--out", required=True, help="output .npz path")
    args = ap.parse_args(argv)
    try:
        images, labels = generate_shape_dataset(
            args.num_images, args.image_size, args.num_classes, args.seed)
    except BpacError as exc:
        print(f"error: {exc}")
        return 3
    np.savez_compressed(args.out, images=images, labels=labels)
    counts = np.bincount(labels.ravel(), minlength=args.num_classes)
    frac = counts / counts.sum()
    print(f"wrote {args.out}: {images.shape[0]} images of "
          f"{args.image_size}x{args.image_size}, class pixel fractions "
          + ", ".join(f"{f:.3f}" for f in frac))
    return 0


if __name__ == "__main__":
    raise SystemExit(_main())
