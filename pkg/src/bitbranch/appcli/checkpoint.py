"""Binary checkpoint serialization.

Layout (all integers little-endian):

    magic "GNCK" | format version u32 | entry count u32 | entries...

Each entry:

    name length u32 | UTF-8 name | dtype code u32 | rank u32 | dims u32...
    | payload

dtype codes: 0 = float32, 1 = bit-packed, 2 = int8.  A bit-packed payload
stores the lane words as u64 little-endian followed by a trailing u32
giving the valid bit count of each lane's final word; dims are the logical
tensor shape and the packing axis is fixed at axis 1 by convention.

Loading reproduces every stored payload bit-exactly.  Unknown dtype codes
and versions newer than this writer are hard errors, never silent.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from bitbranch.bitcore import WORD_BITS, BitTensor

MAGIC = b"GNCK"
VERSION = 1

DTYPE_FLOAT32 = 0
DTYPE_PACKED = 1
DTYPE_INT8 = 2


class CheckpointError(ValueError):
    pass


def _write_u32(buf, v: int) -> None:
    buf.write(struct.pack("<I", v))


def _read_u32(buf, what: str) -> int:
    raw = buf.read(4)
    if len(raw) != 4:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return struct.unpack("<I", raw)[0]


def _write_entry(buf, name: str, value) -> None:
    encoded = name.encode("utf-8")
    _write_u32(buf, len(encoded))
    buf.write(encoded)
    if isinstance(value, BitTensor):
        if value.packing_axis != 1:
            raise CheckpointError(
                f"{name}: checkpoints store packed tensors along axis 1"
            )
        _write_u32(buf, DTYPE_PACKED)
        _write_u32(buf, len(value.shape))
        for d in value.shape:
            _write_u32(buf, d)
        words = np.ascontiguousarray(value.words, dtype="<u8")
        buf.write(words.tobytes())
        _write_u32(buf, value.valid_bits)
        return
    arr = np.asarray(value)
    if arr.dtype == np.int8:
        _write_u32(buf, DTYPE_INT8)
        _write_u32(buf, arr.ndim)
        for d in arr.shape:
            _write_u32(buf, d)
        buf.write(np.ascontiguousarray(arr).tobytes())
    else:
        arr = arr.astype("<f4")
        _write_u32(buf, DTYPE_FLOAT32)
        _write_u32(buf, arr.ndim)
        for d in arr.shape:
            _write_u32(buf, d)
        buf.write(np.ascontiguousarray(arr).tobytes())


def save_checkpoint(path: str, entries: dict) -> None:
    """Write name -> tensor entries; float arrays are stored as float32."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    _write_u32(buf, VERSION)
    _write_u32(buf, len(entries))
    for name, value in entries.items():
        _write_entry(buf, name, value)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(buf, n: int, what: str) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return raw


def load_checkpoint(path: str) -> dict:
    """Read entries back; packed entries load as BitTensor objects."""
    with open(path, "rb") as f:
        data = f.read()
    buf = io.BytesIO(data)
    if _read_exact(buf, 4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = _read_u32(buf, "version")
    if version > VERSION:
        raise CheckpointError(
            f"{path}: format version {version} is newer than supported {VERSION}"
        )
    count = _read_u32(buf, "entry count")
    entries: dict = {}
    for _ in range(count):
        name_len = _read_u32(buf, "name length")
        name = _read_exact(buf, name_len, "name").decode("utf-8")
        dtype = _read_u32(buf, f"{name} dtype")
        rank = _read_u32(buf, f"{name} rank")
        dims = tuple(_read_u32(buf, f"{name} dim") for _ in range(rank))
        n_elems = int(np.prod(dims)) if dims else 1
        if dtype == DTYPE_FLOAT32:
            raw = _read_exact(buf, 4 * n_elems, f"{name} payload")
            entries[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        elif dtype == DTYPE_INT8:
            raw = _read_exact(buf, n_elems, f"{name} payload")
            entries[name] = np.frombuffer(raw, dtype=np.int8).reshape(dims).copy()
        elif dtype == DTYPE_PACKED:
            if rank < 2:
                raise CheckpointError(f"{name}: packed entries need rank >= 2")
            lane_bits = dims[1]
            if lane_bits < 1:
                raise CheckpointError(f"{name}: packed axis must be non-empty")
            n_words = (lane_bits + WORD_BITS - 1) // WORD_BITS
            lanes = n_elems // lane_bits
            raw = _read_exact(buf, 8 * lanes * n_words, f"{name} payload")
            words = np.frombuffer(raw, dtype="<u8").copy()
            word_shape = dims[:1] + dims[2:] + (n_words,)
            valid = _read_u32(buf, f"{name} valid bits")
            if not 1 <= valid <= WORD_BITS:
                raise CheckpointError(f"{name}: invalid valid_bits {valid}")
            entries[name] = BitTensor(dims, 1, words.reshape(word_shape), valid)
        else:
            raise CheckpointError(f"{name}: unknown dtype code {dtype}")
    leftover = buf.read(1)
    if leftover:
        raise CheckpointError(f"{path}: trailing bytes after last entry")
    return entries
