"""Guided image-plane proposals: denoised per-partition images, the visibility
surrogate, symmetric sparse offset sets, candidate weights, and the guided
acceptance ratio.

The proposal works on integer pixel shifts applied to the continuous image
position. Reversibility comes from two guarantees: the offset set contains
the negation of each of its members (with equal multiplicity), and every
in-bounds candidate weight is floored at a small fraction of the set's
maximum, so a reverse move never has zero density.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import ImageBuffer, RandomStream, ld_point, map_to_disk_offset
from .path import GBuffer

__all__ = [
    "GuidanceImage",
    "OffsetSet",
    "CandidateSet",
    "atrous_denoise",
    "build_guidance",
    "visibility",
    "build_offsets",
    "full_offsets",
    "candidate_weights",
    "sample_candidate",
    "guided_acceptance",
]


@dataclass
class GuidanceImage:
    """Denoised per-partition contribution image, max-normalized to 1.

    d_lum is the luminance plane actually consulted by the visibility
    surrogate; epsilon is both the V' threshold and its floor value.
    """

    partition_id: int
    D: ImageBuffer
    epsilon: float
    d_lum: np.ndarray  # (H, W) float64, max 1

    def visibility(self, ix: int, iy: int) -> float:
        return 1.0 if self.d_lum[iy, ix] > self.epsilon else self.epsilon


@dataclass
class OffsetSet:
    """Symmetric integer pixel shifts; offsets[middle] == (0, 0) and for every
    member its negation appears with equal multiplicity. neg_index maps each
    entry to the slot holding its negation."""

    offsets: np.ndarray    # (n, 2) int64
    radius: int
    neg_index: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return self.offsets.shape[0]


@dataclass
class CandidateSet:
    center: tuple[int, int]
    pixels: np.ndarray     # (n, 2) int64 candidate pixel coords
    weights: np.ndarray    # (n,) float64, 0 for out-of-bounds entries
    total: float
    offsets: OffsetSet


# ---------------------------------------------------------------------------
# denoising
# ---------------------------------------------------------------------------

_ATROUS_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _shifted(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """arr translated by (dy, dx) with zero fill (works for 2D and 3D)."""
    out = np.zeros_like(arr)
    h, w = arr.shape[:2]
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    if ys1 <= ys0 or xs1 <= xs0:  # shift larger than the image
        return out
    out[ys0:ys1, xs0:xs1] = arr[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
    return out


def atrous_denoise(img: np.ndarray, gbuffer: GBuffer, iterations: int = 5,
                   sigma_n: float = 0.1, sigma_a: float = 0.2,
                   sigma_d: float = 0.5) -> np.ndarray:
    """Edge-avoiding a-trous wavelet filter over a splatted image.

    5x5 B3-spline taps with stride doubling per iteration; edge-stopping
    weights come from the GBuffer: cosine distance between normals, L2 albedo
    distance, and relative depth difference. Pixels without GBuffer coverage
    contribute nothing and come out zero. With uniform guides the filter
    reduces to a normalized convolution: constants are preserved and isolated
    energy spreads mass-conservatively (away from image borders).
    """
    out = np.asarray(img, dtype=np.float64).copy()
    valid = gbuffer.valid.astype(np.float64)
    nrm = gbuffer.nrm
    alb = gbuffer.alb
    dep = gbuffer.zdepth
    for it in range(iterations):
        stride = 1 << it
        acc = np.zeros_like(out)
        norm = np.zeros(out.shape[:2])
        for ty in range(-2, 3):
            for tx in range(-2, 3):
                k = _ATROUS_TAPS[ty + 2] * _ATROUS_TAPS[tx + 2]
                dy, dx = ty * stride, tx * stride
                n_s = _shifted(nrm, dy, dx)
                a_s = _shifted(alb, dy, dx)
                d_s = _shifted(dep, dy, dx)
                v_s = _shifted(valid, dy, dx)
                img_s = _shifted(out, dy, dx)
                ncos = np.clip((nrm * n_s).sum(axis=2), -1.0, 1.0)
                w_n = np.exp(-(1.0 - ncos) / sigma_n)
                w_a = np.exp(-np.linalg.norm(alb - a_s, axis=2) / sigma_a)
                rel = np.abs(dep - d_s) / (sigma_d * np.maximum(np.maximum(dep, d_s), 1e-12))
                w_d = np.exp(-rel)
                wgt = k * w_n * w_a * w_d * v_s
                acc += img_s * wgt[..., None]
                norm += wgt
        mask = norm > 0
        out = np.where(mask[..., None], acc / np.maximum(norm, 1e-300)[..., None], 0.0)
    return out * valid[..., None]


def build_guidance(splat_image: np.ndarray, gbuffer: GBuffer,
                   partition_id: int = 0, epsilon: float = 1e-3) -> GuidanceImage:
    """Denoise a partition's splatted contribution image and normalize it to a
    maximum scalar value of 1 (an all-zero splat stays zero; the epsilon
    floor semantics of V' still apply)."""
    den = atrous_denoise(splat_image, gbuffer)
    den = np.maximum(den, 0.0)
    lum = 0.2126 * den[..., 0] + 0.7152 * den[..., 1] + 0.0722 * den[..., 2]
    peak = float(lum.max())
    if peak > 0:
        den = den / peak
        lum = lum / peak
    h, w = lum.shape
    return GuidanceImage(partition_id=partition_id,
                         D=ImageBuffer.from_array(den),
                         epsilon=epsilon, d_lum=lum)


def visibility(g: GuidanceImage, pixel: tuple[int, int]) -> float:
    """V' = 1 where the denoised image exceeds epsilon, else epsilon (the
    comparison is strict, so D == epsilon exactly maps to epsilon)."""
    return g.visibility(int(pixel[0]), int(pixel[1]))


# ---------------------------------------------------------------------------
# offset sets
# ---------------------------------------------------------------------------

def build_offsets(size: int, radius: int, sequence_seed: int = 1) -> OffsetSet:
    """Sparse symmetric offset set of odd cardinality `size`.

    The first (size-1)/2 shifts come from the low-discrepancy disk mapping
    (duplicates after rounding are kept), the middle element is (0, 0), and
    the remainder are the negations of the first half in matching order. One
    set is built per render and shared by every pixel, which is what makes
    the neighborhood relation symmetric.
    """
    if size < 3 or size % 2 == 0:
        raise ValueError("offset set size must be odd and >= 3")
    if radius < 1:
        raise ValueError("radius must be >= 1")
    half = (size - 1) // 2
    first = []
    for i in range(half):
        u, v = ld_point(sequence_seed + i)
        first.append(map_to_disk_offset(u, v, radius))
    offs = np.array(first + [(0, 0)] + [(-dx, -dy) for dx, dy in first],
                    dtype=np.int64)
    neg = np.empty(size, dtype=np.int64)
    for i in range(half):
        neg[i] = half + 1 + i
        neg[half + 1 + i] = i
    neg[half] = half
    return OffsetSet(offsets=offs, radius=radius, neg_index=neg)


def full_offsets(radius: int) -> OffsetSet:
    """Every integer shift within the radius (the dense reference kernel)."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    coords = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius:
                coords.append((dx, dy))
    offs = np.array(coords, dtype=np.int64)
    lookup = {(int(dx), int(dy)): i for i, (dx, dy) in enumerate(coords)}
    neg = np.array([lookup[(-int(dx), -int(dy))] for dx, dy in coords],
                   dtype=np.int64)
    return OffsetSet(offsets=offs, radius=radius, neg_index=neg)


# ---------------------------------------------------------------------------
# candidate evaluation
# ---------------------------------------------------------------------------

def candidate_weights(center: tuple[int, int], guidance: GuidanceImage,
                      gbuffer: GBuffer, offsets: OffsetSet,
                      target_pos, target_normal) -> CandidateSet:
    """Approximate prefix contributions for every offset around a center pixel.

    Each in-bounds candidate j gets Gcam_j * lum(albedo_j)/pi *
    cos_j cos' / dist^2 * V'_j against the reconnection vertex; in-bounds
    weights are floored at 1e-8 of the set maximum (the reversibility guard),
    out-of-bounds candidates get exactly 0. An all-zero set (total 0) means
    the caller must reject the mutation.
    """
    h, w = guidance.d_lum.shape
    cx, cy = int(center[0]), int(center[1])
    n = len(offsets)
    wbuf = np.zeros(n)
    t = np.asarray(target_pos, dtype=np.float64)
    tn = np.asarray(target_normal, dtype=np.float64)
    total = kernels._fill_weights(gbuffer.pos, gbuffer.nrm, gbuffer.alb,
                                  gbuffer.gcam, gbuffer.valid, guidance.d_lum,
                                  guidance.epsilon, offsets.offsets, wbuf,
                                  cx, cy, w, h,
                                  t[0], t[1], t[2], tn[0], tn[1], tn[2])
    pixels = offsets.offsets + np.array([cx, cy], dtype=np.int64)
    return CandidateSet(center=(cx, cy), pixels=pixels, weights=wbuf,
                        total=float(total), offsets=offsets)


def sample_candidate(cs: CandidateSet, stream: RandomStream):
    """Categorical draw proportional to the candidate weights; returns the
    chosen pixel and its forward density weight/total."""
    if cs.total <= 0.0:
        raise ValueError("cannot sample from an empty candidate set")
    u = stream.uniform() * cs.total
    cum = np.cumsum(cs.weights)
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, len(cs.weights) - 1)
    while cs.weights[idx] <= 0.0 and idx > 0:
        idx -= 1
    return (int(cs.pixels[idx, 0]), int(cs.pixels[idx, 1])), \
        float(cs.weights[idx] / cs.total), idx


def guided_acceptance(s_old: float, s_new: float,
                      w_old_at_new_nbhd: float, w_new_at_old_nbhd: float,
                      total_old_nbhd: float, total_new_nbhd: float) -> float:
    """Metropolis-Hastings acceptance for the guided pixel proposal.

    T(x -> x') = w(x') / total(neighborhood of x) and symmetrically for the
    reverse, so a = min(1, [s_new/s_old] * [w_old/total_new] / [w_new/total_old]).
    The offset symmetry guarantees the old pixel appears in the new
    neighborhood. s_old must be positive (the chain never rests on a
    zero-contribution state); s_new = 0 simply rejects.
    """
    if s_old <= 0.0:
        raise ValueError("current state must have positive contribution")
    if s_new <= 0.0 or w_old_at_new_nbhd <= 0.0 or total_old_nbhd <= 0.0 \
            or total_new_nbhd <= 0.0 or w_new_at_old_nbhd <= 0.0:
        return 0.0
    ratio = (s_new / s_old) * (w_old_at_new_nbhd / total_new_nbhd) \
        / (w_new_at_old_nbhd / total_old_nbhd)
    return min(1.0, ratio)
