"""The Trojan transformation: bit-depth squeezing and error-diffusion dithering.

Squeezing maps each value onto the d-bit lattice
{k * (2^m - 1) / (2^d - 1) : k = 0..2^d - 1} by nearest-value rounding.
Dithering runs a raster scan (rows top to bottom, columns left to right)
and diffuses each pixel's residual quantization error onto its four
unprocessed neighbors with the classic Floyd-Steinberg weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import floor

import numpy as np

from .errors import ConfigurationError, DomainError
from .imagecore import Image, round_half_away

# Diffusion weights [a1, a2, a3, a4] for neighbors
# (x+1, y), (x+1, y+1), (x, y+1), (x-1, y+1) with x = column, y = row.
FLOYD_STEINBERG_WEIGHTS = (7 / 16, 1 / 16, 5 / 16, 3 / 16)


@dataclass(frozen=True)
class TriggerConfig:
    m: int = 8
    d: int = 5
    dither: bool = False
    weights: tuple = FLOYD_STEINBERG_WEIGHTS

    def __post_init__(self):
        if not (1 <= self.d <= self.m):
            raise ConfigurationError(f"need 1 <= d <= m, got d={self.d}, m={self.m}")
        if not (1 <= self.m <= 16):
            raise ConfigurationError(f"m must be in [1, 16], got {self.m}")
        w = tuple(float(x) for x in self.weights)
        if len(w) != 4 or any(x < 0 for x in w):
            raise ConfigurationError(f"weights must be four non-negatives, got {w}")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ConfigurationError(f"weights must sum to 1, got {sum(w)}")
        object.__setattr__(self, "weights", w)

    @property
    def step(self):
        """Lattice spacing (2^m - 1) / (2^d - 1)."""
        return (2 ** self.m - 1) / (2 ** self.d - 1)


def _squeeze(values, cfg: TriggerConfig):
    """Nearest d-bit lattice value; lattice index clamped to [0, 2^d - 1].

    The clamp only matters for out-of-range intermediates produced by
    error diffusion; in-range inputs are unaffected.
    """
    hi_m = 2 ** cfg.m - 1
    hi_d = 2 ** cfg.d - 1
    k = round_half_away(np.asarray(values, dtype=np.float64) / hi_m * hi_d)
    return np.clip(k, 0, hi_d) / hi_d * hi_m


def quantize_value(v: float, cfg: TriggerConfig) -> float:
    """Squeeze one value from the m-bit palette onto the d-bit lattice."""
    hi = 2 ** cfg.m - 1
    if not (0 <= v <= hi):
        raise DomainError(f"value {v} outside [0, {hi}]")
    return float(_squeeze(v, cfg))


def _check_depth(img: Image, cfg: TriggerConfig):
    if img.depth != cfg.m:
        raise ConfigurationError(
            f"image depth {img.depth} does not match trigger m={cfg.m}"
        )


def quantize_image(img: Image, cfg: TriggerConfig) -> Image:
    """Elementwise squeeze of a whole image."""
    _check_depth(img, cfg)
    return Image(_squeeze(img.pixels, cfg), depth=img.depth)


def dither_image(img: Image, cfg: TriggerConfig) -> Image:
    """Floyd-Steinberg error diffusion, per channel, raster order.

    Each output pixel is the squeezed value of (original + accumulated
    diffused error); the residual (pre-quantization value minus output)
    is spread forward with cfg.weights. Diffusion terms falling outside
    the image are dropped. Intermediate values are not clamped; the
    squeezer's index clamp bounds the output instead.
    """
    _check_depth(img, cfg)
    a1, a2, a3, a4 = cfg.weights
    h, w = img.height, img.width
    hi_m = float(2 ** cfg.m - 1)
    hi_d = 2 ** cfg.d - 1
    scale = hi_d / hi_m
    out = np.empty_like(img.pixels)
    # plain-float inner loop: per-pixel numpy calls are ~10x slower here
    for c in range(img.channels):
        buf = img.pixels[:, :, c].tolist()
        for y in range(h):
            row = buf[y]
            below = buf[y + 1] if y + 1 < h else None
            for x in range(w):
                old = row[x]
                t = old * scale
                k = floor(t + 0.5) if t >= 0 else -floor(0.5 - t)
                if k < 0:
                    k = 0
                elif k > hi_d:
                    k = hi_d
                # divide-then-multiply matches _squeeze bit for bit
                new = k / hi_d * hi_m
                row[x] = new
                err = old - new
                if x + 1 < w:
                    row[x + 1] += err * a1
                if below is not None:
                    if x + 1 < w:
                        below[x + 1] += err * a2
                    below[x] += err * a3
                    if x >= 1:
                        below[x - 1] += err * a4
        out[:, :, c] = buf
    return Image(out, depth=img.depth)


def bpp_transform(img: Image, cfg: TriggerConfig) -> Image:
    """The trigger function applied to poisoned samples."""
    return dither_image(img, cfg) if cfg.dither else quantize_image(img, cfg)
