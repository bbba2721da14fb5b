"""Deterministic random streams, low-discrepancy points, and image buffers.

Everything here is value-like and reproducible: a (seed, stream_id) pair
fully determines a random sequence, which lets the renderer store seeds
instead of path vertices and regenerate any path on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

__all__ = [
    "RandomStream",
    "rng_uniform",
    "ld_point",
    "map_to_disk_offset",
    "scalar_contribution",
    "luminance",
    "ImageBuffer",
    "rmse",
]

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)


@njit(cache=True)
def _mix64(z):
    # splitmix64 finalizer; wrapping uint64 arithmetic
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


@njit(cache=True)
def rng_u64(seed, stream_id, counter):
    """Counter-based generator: u64 hash of (seed, stream_id, counter)."""
    z = _U64(seed) + _GOLDEN * _U64(stream_id)
    z = _mix64(z)
    z = z + _GOLDEN * (_U64(counter) + _U64(1))
    return _mix64(z)


@njit(cache=True)
def rng_uniform(seed, stream_id, counter):
    """Uniform double in [0, 1) from the counter-based stream."""
    return float(rng_u64(seed, stream_id, counter) >> _U64(11)) * (1.0 / 9007199254740992.0)


@dataclass
class RandomStream:
    """Stateful view over the counter-based generator.

    Two streams with equal (seed, stream_id) produce identical sequences;
    distinct stream_ids are statistically independent. Copy freely across
    workers: the state is just three integers.
    """

    seed: int
    stream_id: int
    counter: int = 0

    def uniform(self) -> float:
        u = rng_uniform(self.seed, self.stream_id, self.counter)
        self.counter += 1
        return u

    def uniform2(self) -> tuple[float, float]:
        return self.uniform(), self.uniform()

    def randint(self, n: int) -> int:
        # top-53-bit scaling; the O(2^-53) modulo bias is irrelevant here
        return min(int(self.uniform() * n), n - 1)

    def copy(self) -> "RandomStream":
        return RandomStream(self.seed, self.stream_id, self.counter)


# first sixteen primes, consumed in pairs by ld_point
_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53)


@njit(cache=True)
def _radical_inverse(index, base):
    inv = 1.0 / base
    f = inv
    r = 0.0
    while index > 0:
        r += f * (index % base)
        index //= base
        f *= inv
    return r


def ld_point(index: int, dim_pair: int = 0) -> tuple[float, float]:
    """index-th point of the 2D Halton sequence on the dim_pair-th prime pair.

    dim_pair 0 uses bases (2, 3), dim_pair 1 uses (5, 7), and so on.
    """
    if index < 0:
        raise ValueError("index must be >= 0")
    b0 = _PRIMES[2 * dim_pair]
    b1 = _PRIMES[2 * dim_pair + 1]
    return _radical_inverse(index, b0), _radical_inverse(index, b1)


def map_to_disk_offset(u: float, v: float, radius: int) -> tuple[int, int]:
    """Map a unit-square point to an integer pixel offset inside a disk.

    Uses the density-concentrating polar map r = u^2 * radius, theta = 2*pi*v,
    so offsets cluster near the origin. The result never exceeds `radius` in
    Euclidean norm: nearest-integer rounding is used unless it would round
    outward past the disk, in which case we truncate toward zero.
    """
    r = u * u * radius
    theta = 2.0 * np.pi * v
    x = r * np.cos(theta)
    y = r * np.sin(theta)
    dx = int(np.rint(x))
    dy = int(np.rint(y))
    if dx * dx + dy * dy > radius * radius:
        dx = int(np.trunc(x))
        dy = int(np.trunc(y))
    return dx, dy


# Rec. 709 luminance weights
_LUM_R = 0.2126
_LUM_G = 0.7152
_LUM_B = 0.0722


@njit(cache=True)
def luminance(r, g, b):
    return _LUM_R * r + _LUM_G * g + _LUM_B * b


def scalar_contribution(c) -> float:
    """Scalar contribution of an RGB radiance triple (Rec. 709 luminance).

    Linear and nonnegative for nonnegative input; zero iff the contribution
    is visually null.
    """
    c = np.asarray(c, dtype=np.float64)
    assert not np.any(np.isnan(c)), "NaN radiance passed to scalar_contribution"
    return float(luminance(c[0], c[1], c[2]))


@dataclass
class ImageBuffer:
    """Row-major RGB raster with an optional per-pixel accumulation weight.

    Pixels are float32 (the interchange precision of the PFM format);
    accumulation inside the integrators happens in float64 and is converted
    on construction.
    """

    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) float32
    weight: np.ndarray | None = field(default=None)

    @classmethod
    def zeros(cls, width: int, height: int) -> "ImageBuffer":
        return cls(width, height, np.zeros((height, width, 3), dtype=np.float32))

    @classmethod
    def from_array(cls, arr: np.ndarray, weight: np.ndarray | None = None) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {arr.shape}")
        h, w, _ = arr.shape
        return cls(w, h, arr.astype(np.float32), weight)

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(
                f"pixel array shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x3"
            )

    def copy(self) -> "ImageBuffer":
        w = None if self.weight is None else self.weight.copy()
        return ImageBuffer(self.width, self.height, self.pixels.copy(), w)

    def mean(self) -> float:
        return float(self.pixels.mean())

    def luminance_image(self) -> np.ndarray:
        p = self.pixels.astype(np.float64)
        return _LUM_R * p[..., 0] + _LUM_G * p[..., 1] + _LUM_B * p[..., 2]


def rmse(a: ImageBuffer, b: ImageBuffer) -> float:
    """Root mean squared difference over all pixels and channels."""
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError(
            f"dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    d = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
    return float(np.sqrt(np.mean(d * d)))
