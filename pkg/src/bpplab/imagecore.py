"""Image values, pixel-domain conventions, and bit-exact file I/O.

Pixels are kept as real values in [0, 2^m - 1] so that quantization and
error-diffusion arithmetic stays exact; rounding to integers happens only
at file boundaries. The single rounding convention used everywhere is
round-half-away-from-zero (see :func:`round_half_away`).

Supported formats: MNIST-style IDX (magics 2051/2049, big-endian) and
binary PGM (P5) / PPM (P6) with maxval 255.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetConsistencyError, DimensionError, DomainError, FormatError

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049


def round_half_away(x):
    """Round to nearest integer, ties away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class Image:
    """H x W x C grid of real-valued intensities with source bit depth m."""

    pixels: np.ndarray  # (H, W, C) float64, values in [0, 2^m - 1]
    depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise DimensionError(f"pixels must be HxWxC, got shape {px.shape}")
        if px.shape[2] not in (1, 3):
            raise DimensionError(f"channels must be 1 or 3, got {px.shape[2]}")
        if not (1 <= self.depth <= 16):
            raise DomainError(f"bit depth must be in [1, 16], got {self.depth}")
        hi = float(2 ** self.depth - 1)
        if px.size and (px.min() < 0 or px.max() > hi):
            raise DomainError(
                f"pixel values must lie in [0, {hi}], got range "
                f"[{px.min()}, {px.max()}]"
            )
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def max_value(self):
        return float(2 ** self.depth - 1)


@dataclass(frozen=True)
class LabeledImage:
    image: Image
    label: int

    def __post_init__(self):
        if self.label < 0:
            raise DomainError(f"label must be non-negative, got {self.label}")


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(
            f"{path}: truncated at byte offset {f.tell() - len(buf)}: "
            f"wanted {n} bytes, got {len(buf)}"
        )
    return buf


def _read_idx_header(f, expected_magic, n_dims, path):
    magic = struct.unpack(">i", _read_exact(f, 4, path))[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic {magic}, expected {expected_magic}")
    return struct.unpack(f">{n_dims}i", _read_exact(f, 4 * n_dims, path))


def load_idx_images(path):
    """Read an IDX image file (magic 2051) into a (N, H, W) uint8 array."""
    with open(path, "rb") as f:
        n, h, w = _read_idx_header(f, IDX_IMAGES_MAGIC, 3, path)
        raw = _read_exact(f, n * h * w, path)
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)


def load_idx_labels(path):
    """Read an IDX label file (magic 2049) into a (N,) uint8 array."""
    with open(path, "rb") as f:
        (n,) = _read_idx_header(f, IDX_LABELS_MAGIC, 1, path)
        raw = _read_exact(f, n, path)
    return np.frombuffer(raw, dtype=np.uint8)


def load_idx_dataset(images_path, labels_path):
    """Load paired IDX image/label files as a list of LabeledImage (m=8)."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DatasetConsistencyError(
            f"{images_path} has {len(images)} images but "
            f"{labels_path} has {len(labels)} labels"
        )
    return [
        LabeledImage(Image(img.astype(np.float64)[:, :, None], depth=8), int(lab))
        for img, lab in zip(images, labels)
    ]


def write_idx_dataset(data, images_path, labels_path):
    """Serialize LabeledImages back to an IDX pair (values rounded to bytes)."""
    if not data:
        raise DomainError("cannot write an empty dataset")
    h, w = data[0].image.height, data[0].image.width
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGES_MAGIC, len(data), h, w))
        for item in data:
            if (item.image.height, item.image.width) != (h, w):
                raise DimensionError("all images in an IDX file must share a shape")
            px = round_half_away(item.image.pixels[:, :, 0])
            f.write(np.clip(px, 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABELS_MAGIC, len(data)))
        f.write(bytes(item.label for item in data))


def write_image(img: Image, path):
    """Write a binary PGM (1 channel) or PPM (3 channels), maxval 255.

    Requires m = 8; values are rounded half-away-from-zero to bytes.
    """
    if img.depth != 8:
        raise FormatError(f"PGM/PPM output requires 8-bit depth, got m={img.depth}")
    tag = "P5" if img.channels == 1 else "P6"
    data = np.clip(round_half_away(img.pixels), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"{tag}\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_image(path) -> Image:
    """Read a binary PGM/PPM written by :func:`write_image`."""
    with open(path, "rb") as f:
        tag = _read_exact(f, 2, path)
        if tag not in (b"P5", b"P6"):
            raise FormatError(f"{path}: unsupported format tag {tag!r}")
        channels = 1 if tag == b"P5" else 3
        # header tokens: width, height, maxval, separated by whitespace
        tokens = []
        while len(tokens) < 3:
            ch = _read_exact(f, 1, path)
            if ch.isspace():
                continue
            tok = b""
            while not ch.isspace():
                tok += ch
                ch = _read_exact(f, 1, path)
            tokens.append(tok)
        w, h, maxval = (int(t) for t in tokens)
        if maxval != 255:
            raise FormatError(f"{path}: unsupported maxval {maxval}")
        raw = _read_exact(f, h * w * channels, path)
    px = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, channels)
    return Image(px.astype(np.float64), depth=8)


def residual(a: Image, b: Image, magnification: float) -> Image:
    """Magnified absolute difference, clamped to the source pixel range."""
    if a.pixels.shape != b.pixels.shape or a.depth != b.depth:
        raise DimensionError(
            f"shape/depth mismatch: {a.pixels.shape}@{a.depth} vs "
            f"{b.pixels.shape}@{b.depth}"
        )
    if magnification <= 0:
        raise DomainError(f"magnification must be positive, got {magnification}")
    diff = np.clip(np.abs(a.pixels - b.pixels) * magnification, 0.0, a.max_value)
    return Image(diff, depth=a.depth)
