"""CIFAR-10 binary-format loading, synthetic data, augmentation.

The on-disk format is the standard 3073-byte record: one label byte
followed by 3072 image bytes laid out row-major as the full red plane,
then green, then blue (32x32 each).  The loader validates record
alignment and label range loudly; images come back as float64 (N,3,32,32)
scaled to [0,1] with the per-channel mean subtracted.

The synthetic generator writes the same record format so every consumer
downstream of the loader is exercised identically with or without the
real dataset on disk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from bitbranch.nnengine import make_rng

RECORD_BYTES = 3073
IMAGE_SIZE = 32
PLANE = IMAGE_SIZE * IMAGE_SIZE


class DataError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray      # float64 (N, 3, 32, 32), mean-subtracted
    labels: np.ndarray      # int64 (N,)
    channel_means: np.ndarray  # float64 (3,), in [0,1] units

    def __len__(self) -> int:
        return self.images.shape[0]


def read_records(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Decode a record file to raw uint8 images (N,3,32,32) and labels."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    if len(raw) == 0:
        raise DataError(f"{path}: empty dataset file")
    if len(raw) % RECORD_BYTES != 0:
        complete = len(raw) // RECORD_BYTES
        raise DataError(
            f"{path}: truncated record at byte offset {complete * RECORD_BYTES} "
            f"(file holds {len(raw)} bytes, records are {RECORD_BYTES})"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataError(
            f"{path}: record {bad[0]} has label {labels[bad[0]]}, expected 0..9"
        )
    images = rec[:, 1:].reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE)
    return images.copy(), labels


def load_cifar10(path: str, channel_means: np.ndarray | None = None) -> ImageDataset:
    """Load one record file, scale to [0,1], subtract per-channel means.

    Pass the training set's ``channel_means`` when loading an eval split so
    both splits share one normalization.
    """
    images_u8, labels = read_records(path)
    images = images_u8.astype(np.float64) / 255.0
    if channel_means is None:
        channel_means = images.mean(axis=(0, 2, 3))
    else:
        channel_means = np.asarray(channel_means, dtype=np.float64)
        if channel_means.shape != (3,):
            raise DataError(f"channel_means must have shape (3,), got {channel_means.shape}")
    images -= channel_means[None, :, None, None]
    return ImageDataset(images, labels, channel_means)


def write_records(path: str, images_u8: np.ndarray, labels: np.ndarray) -> None:
    images_u8 = np.asarray(images_u8)
    labels = np.asarray(labels)
    if images_u8.dtype != np.uint8 or images_u8.ndim != 4 or images_u8.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise DataError(f"images must be uint8 (N,3,32,32), got {images_u8.dtype} {images_u8.shape}")
    if labels.shape != (images_u8.shape[0],):
        raise DataError("one label per image required")
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 9:
        raise DataError("labels must lie in 0..9")
    rec = np.empty((images_u8.shape[0], RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images_u8.reshape(images_u8.shape[0], -1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


# ------------------------------------------------------------ synthetic

_PALETTE = np.array([
    [220, 60, 60], [60, 200, 60], [70, 70, 220], [220, 200, 50],
    [200, 60, 200], [50, 200, 200], [230, 140, 40], [140, 90, 220],
    [90, 160, 90], [180, 180, 180],
], dtype=np.float64)


def synthetic_class_images(num_images: int, num_classes: int = 10, seed: int = 0,
                           noise: float = 0.10) -> tuple[np.ndarray, np.ndarray]:
    """Seeded class-structured images in the record layout's shape.

    Each class pairs an oriented grating (orientation and frequency keyed
    to the class) with a solid patch of the class color at a random
    position, over a noisy background.  Telling classes apart needs both
    the texture and the color cue, which separates model capacities
    without being unlearnable at desk scale.
    """
    if num_images < 1:
        raise DataError("num_images must be >= 1")
    if not 2 <= num_classes <= 10:
        raise DataError("num_classes must lie in 2..10")
    rng = make_rng(seed, "synthetic-records")
    labels = np.arange(num_images, dtype=np.int64) % num_classes
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    images = np.empty((num_images, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    for i in range(num_images):
        c = int(labels[i])
        theta = np.pi * (c % 5) / 5.0
        freq = 3.0 if c < 5 else 6.0
        phase = rng.uniform(0.0, 2.0 * np.pi)
        g = np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
                   / IMAGE_SIZE + phase)
        base = rng.uniform(0.35, 0.65)
        img = np.empty((3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
        color = _PALETTE[c] / 255.0
        for ch in range(3):
            amp = 0.18 + 0.10 * color[ch]
            img[ch] = base + amp * g
        py = int(rng.integers(0, IMAGE_SIZE - 8))
        px = int(rng.integers(0, IMAGE_SIZE - 8))
        img[:, py:py + 8, px:px + 8] = 0.55 * color[:, None, None] + 0.25
        img += noise * rng.standard_normal(img.shape)
        images[i] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
    return images, labels


def write_synthetic_records(path: str, num_images: int, num_classes: int = 10,
                            seed: int = 0, noise: float = 0.10) -> None:
    images, labels = synthetic_class_images(num_images, num_classes, seed, noise)
    write_records(path, images, labels)


# ---------------------------------------------------------- augmentation

AUGMENT_PAD = 4


def _main(argv=None) -> int:
    import argparse

    ap = argparse.ArgumentParser(
        description="write synthetic class-structured records in the "
                    "3073-byte binary layout")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--num-images", type=int, default=1024)
    ap.add_argument("--num-classes", type=int, default=10)
    ap.add_argument("--noise", type=float, default=0.10)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    try:
        write_synthetic_records(args.out, args.num_images, args.num_classes,
                                args.seed, args.noise)
    except DataError as exc:
        print(f"error: {exc}")
        return 3
    print(f"wrote {args.out}: {args.num_images} records, "
          f"{args.num_classes} classes, seed {args.seed}")
    return 0


def augment_flip_crop(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5) plus 4-pixel zero-pad and random crop.

    These are the only train-time transforms; eval data is never touched.
    """
    n, _, h, w = images.shape
    out = images.copy()
    flips = rng.random(n) < 0.5
    out[flips] = out[flips, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (AUGMENT_PAD, AUGMENT_PAD),
                          (AUGMENT_PAD, AUGMENT_PAD)))
    tops = rng.integers(0, 2 * AUGMENT_PAD + 1, size=n)
    lefts = rng.integers(0, 2 * AUGMENT_PAD + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
    return out


if __name__ == "__main__":
    raise SystemExit(_main())
