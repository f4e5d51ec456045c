"""Inference-artifact export: fold normalization, keep weights packed.

Export turns a trained model into a flat entry dict for the checkpoint
writer: every binary convolution stores only its packed sign bits, every
batch norm collapses to a per-channel affine scale/shift computed from
the running statistics, and the 8-bit exception layers store int8 values
plus their quantization scale.  Loading an artifact back reconstitutes a
model whose eval forward matches the source model to float32 rounding,
and exporting that reconstituted model reproduces the artifact, so a
second export is a no-op.
"""

from __future__ import annotations

import numpy as np

from bitbranch.binarizers import affine_int8_fwd
from bitbranch.bitcore import BitTensor, pack_signs
from bitbranch.groupnet import BinaryBlock, GroupNetModel
from bitbranch.nnengine import BatchNorm2d, QuantConv2d

EXPORT_MARKER = "format.inference"
EXPORT_VERSION = 1


class ExportError(ValueError):
    pass


def _fold_bn(bn: BatchNorm2d) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / np.sqrt(bn.running_var + bn.eps)
    scale = bn.gamma.data * inv
    shift = bn.beta.data - bn.running_mean * scale
    return scale, shift


def _export_int8_weight(entries: dict, prefix: str, weight: np.ndarray) -> None:
    q, scale, _ = affine_int8_fwd(weight)
    entries[prefix + ".int8"] = q
    entries[prefix + ".scale"] = np.array([scale], dtype=np.float64)


def _export_block(entries: dict, prefix: str, block: BinaryBlock) -> None:
    entries[prefix + ".conv.weight.packed"] = pack_signs(
        block.conv.weight.data, axis=1)
    entries[prefix + ".prelu.slope"] = block.prelu.slope.data
    scale, shift = _fold_bn(block.bn)
    entries[prefix + ".bn.scale"] = scale
    entries[prefix + ".bn.shift"] = shift
    if isinstance(block.skip, QuantConv2d):
        _export_int8_weight(entries, prefix + ".skip.weight", block.skip.weight.data)


def export_model(model: GroupNetModel) -> dict:
    """Flatten a trained model to inference entries (packed + folded)."""
    entries: dict = {EXPORT_MARKER: np.array([EXPORT_VERSION], dtype=np.int8)}
    stem = model.root.layers[0]
    _export_int8_weight(entries, "stem.conv.weight", model.stem_conv.weight.data)
    scale, shift = _fold_bn(stem.layers[1])
    entries["stem.bn.scale"] = scale
    entries["stem.bn.shift"] = shift
    entries["stem.prelu.slope"] = stem.layers[2].slope.data
    for gi, group in enumerate(model.groups):
        for bi, base in enumerate(group.bases):
            for n, block in enumerate(base):
                _export_block(entries, f"group{gi}.base{bi}.block{n}", block)
        if group.soft is not None:
            for n, theta in enumerate(group.soft.thetas):
                entries[f"group{gi}.gate.theta{n}"] = theta.data
        if group.nu is not None:
            entries[f"group{gi}.nu"] = group.nu.data
    _export_int8_weight(entries, "head.fc.weight", model.head.weight.data)
    if model.head.bias is not None:
        entries["head.fc.bias"] = model.head.bias.data
    return entries


def is_exported(entries: dict) -> bool:
    return EXPORT_MARKER in entries


def _need(entries: dict, key: str):
    if key not in entries:
        raise ExportError(f"artifact is missing entry {key!r}")
    return entries[key]


def _as_f64(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def _load_int8_weight(entries: dict, prefix: str, shape: tuple) -> np.ndarray:
    q = _need(entries, prefix + ".int8")
    scale = float(_as_f64(_need(entries, prefix + ".scale"))[0])
    if tuple(q.shape) != tuple(shape):
        raise ExportError(f"{prefix}: shape {q.shape} does not match model {shape}")
    return q.astype(np.float64) * scale


def _load_folded_bn(bn: BatchNorm2d, scale, shift) -> None:
    # running stats chosen so eval normalization is exactly the identity
    bn.gamma.data = _as_f64(scale)
    bn.beta.data = _as_f64(shift)
    bn.running_mean = np.zeros_like(bn.running_mean)
    bn.running_var = np.full_like(bn.running_var, 1.0 - bn.eps)


def _load_block(entries: dict, prefix: str, block: BinaryBlock) -> None:
    packed = _need(entries, prefix + ".conv.weight.packed")
    if not isinstance(packed, BitTensor):
        raise ExportError(f"{prefix}: conv weights must be bit-packed")
    if tuple(packed.shape) != tuple(block.conv.weight.data.shape):
        raise ExportError(
            f"{prefix}: packed shape {packed.shape} does not match model "
            f"{block.conv.weight.data.shape}"
        )
    block.conv.weight.data = packed.unpack().astype(np.float64)
    block.prelu.slope.data = _as_f64(_need(entries, prefix + ".prelu.slope"))
    _load_folded_bn(block.bn, _need(entries, prefix + ".bn.scale"),
                    _need(entries, prefix + ".bn.shift"))
    if isinstance(block.skip, QuantConv2d):
        block.skip.weight.data = _load_int8_weight(
            entries, prefix + ".skip.weight", block.skip.weight.data.shape)


def load_exported_into(model: GroupNetModel, entries: dict) -> GroupNetModel:
    """Substitute artifact entries into a freshly built model.

    The model must come from the same configuration the artifact was
    exported under; every structural mismatch is a hard error.
    """
    if not is_exported(entries):
        raise ExportError("not an inference artifact (marker entry missing)")
    version = int(np.asarray(entries[EXPORT_MARKER])[0])
    if version > EXPORT_VERSION:
        raise ExportError(f"artifact version {version} is newer than supported")
    stem = model.root.layers[0]
    model.stem_conv.weight.data = _load_int8_weight(
        entries, "stem.conv.weight", model.stem_conv.weight.data.shape)
    _load_folded_bn(stem.layers[1], _need(entries, "stem.bn.scale"),
                    _need(entries, "stem.bn.shift"))
    stem.layers[2].slope.data = _as_f64(_need(entries, "stem.prelu.slope"))
    for gi, group in enumerate(model.groups):
        for bi, base in enumerate(group.bases):
            for n, block in enumerate(base):
                _load_block(entries, f"group{gi}.base{bi}.block{n}", block)
        if group.soft is not None:
            for n, theta in enumerate(group.soft.thetas):
                theta.data = _as_f64(_need(entries, f"group{gi}.gate.theta{n}"))
        if group.nu is not None:
            group.nu.data = _as_f64(_need(entries, f"group{gi}.nu"))
    model.head.weight.data = _load_int8_weight(
        entries, "head.fc.weight", model.head.weight.data.shape)
    if model.head.bias is not None:
        model.head.bias.data = _as_f64(_need(entries, "head.fc.bias"))
    return model


def packed_weight_bytes(entries: dict) -> dict[str, int]:
    """Byte accounting of an artifact's weight payloads by storage class."""
    packed = 0
    int8 = 0
    floats = 0
    for name, value in entries.items():
        if name == EXPORT_MARKER:
            continue
        if isinstance(value, BitTensor):
            packed += value.words.size * 8
        elif np.asarray(value).dtype == np.int8:
            int8 += np.asarray(value).size
        elif name.endswith((".weight", ".bias")):
            floats += np.asarray(value).size * 4
    return {"packed_bytes": packed, "int8_bytes": int8, "float_bytes": floats}


def check_equivalence(model: GroupNetModel, restored: GroupNetModel,
                      image_hw: tuple[int, int], in_channels: int,
                      num_inputs: int = 100, seed: int = 0,
                      tol: float = 1e-5) -> float:
    """Max |logit difference| between source and artifact models.

    Raises when any of the random probe inputs disagrees beyond ``tol``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_inputs):
        x = rng.standard_normal((1, in_channels) + tuple(image_hw))
        ya, _ = model.forward(x, train=False)
        yb, _ = restored.forward(x, train=False)
        worst = max(worst, float(np.max(np.abs(ya - yb))))
    if worst > tol:
        raise ExportError(
            f"artifact forward diverges from source: max diff {worst:.3e} > {tol}"
        )
    return worst
