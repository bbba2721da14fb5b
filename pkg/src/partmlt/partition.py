"""Partition selection, selection probabilities, and normalization constants.

The pre-pass census is split in half per buffer: the first half scores each
signature (gamma) and picks the K largest as singleton partitions, everything
else forms the complementary partition; the second half, disjoint from the
selection data, estimates each partition's normalization constant b and seeds
chain initialization. b is expressed per traced camera sample, the same
convention the unpartitioned estimator uses, so the partition b's sum exactly
to the unpartitioned one.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import RandomStream
from .path import PartitionBuffer, PrepassResult

__all__ = [
    "Partition",
    "PartitionSet",
    "gamma",
    "select_partitions",
    "estimate_b",
    "build_partitions",
    "resample_start",
]

COMPLEMENT_ID = -1


def gamma(buffer: PartitionBuffer) -> float:
    """Total scalar contribution of the first half of a buffer's records.

    A single-record buffer has an empty first half (floor(1/2) = 0), so its
    gamma is 0 and it cannot be selected.
    """
    return float(buffer.scalar[: len(buffer) // 2].sum())


def explorable(signature: str) -> bool:
    """Whether a dedicated chain can actually traverse this signature.

    Image-plane perturbations rebuild the camera prefix up to the first
    non-specular vertex and reconnect to the vertex after it. When that
    reconnection target is specular (e.g. EDSL), every non-null proposal
    violates the delta constraint, so a single-signature chain would be
    frozen at its start path. Such signatures stay in the complementary
    partition, whose chain hops between its member signatures through large
    steps instead.
    """
    i = 1
    while i < len(signature) and signature[i] == "S":
        i += 1
    if signature[i] == "L":  # all-specular prefix: the lens move retraces fully
        return True
    # the suffix beyond the reconnection vertex is refreshed only by
    # regeneration, whose walks essentially never complete specular suffixes
    return "S" not in signature[i + 1:]


@dataclass
class Partition:
    """One selected signature (or the complementary remainder set).

    P is the selection probability over the K+1 members; b the per-sample
    normalization estimate; the init reservoir holds second-half records
    (scalarC, stream, rec, px, py) for chain start resampling.
    """

    id: int
    signatures: tuple[str, ...]
    gamma: float
    P: float = 0.0
    b: float = 0.0
    is_complement: bool = False
    reservoir_scalar: np.ndarray = field(default_factory=lambda: np.zeros(0))
    reservoir_stream: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    reservoir_rec: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))

    @property
    def reservoir_size(self) -> int:
        return int(self.reservoir_scalar.shape[0])


@dataclass
class PartitionSet:
    partitions: list[Partition]
    K: int

    @property
    def complement(self) -> Partition | None:
        for p in self.partitions:
            if p.is_complement:
                return p
        return None

    @property
    def selected(self) -> list[Partition]:
        return [p for p in self.partitions if not p.is_complement]


def select_partitions(census: dict[str, PartitionBuffer], K: int,
                      width: int | None = None, height: int | None = None,
                      memory_cap_mb: float = 512.0) -> PartitionSet:
    """Pick the K largest-gamma signatures as singleton partitions.

    Ties break lexicographically on the signature string for reproducibility.
    Signatures with zero gamma are ineligible; if fewer than K remain, K
    shrinks with a warning. When the image size is known, K is additionally
    capped so the per-partition guidance images fit the memory budget.
    P(i) = gamma(i) / sum over all K+1 members, the complementary member
    contributing the sum of its constituents' gammas.

    Only explorable signatures (see `explorable`) are promoted to their own
    chains; the rest always land in the complement.

    K = 0 is the degenerate whole-space configuration: no selected
    partitions, everything in the complement (equivalent to plain MLT).
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    gammas = {sig: gamma(buf) for sig, buf in census.items()}
    eligible = sorted((s for s, g in gammas.items() if g > 0.0 and explorable(s)),
                      key=lambda s: (-gammas[s], s))
    k_eff = min(K, len(eligible))
    if k_eff < K:
        warnings.warn(f"only {k_eff} signatures have positive gamma; shrinking K "
                      f"from {K} to {k_eff}")
    if width is not None and height is not None and k_eff > 0:
        per_image = width * height * 3 * 4  # float32 guidance image
        cap = max(1, int(memory_cap_mb * 1e6 / per_image))
        if k_eff > cap:
            warnings.warn(f"guidance memory cap {memory_cap_mb} MB limits K "
                          f"to {cap} (requested {k_eff})")
            k_eff = cap
    chosen = eligible[:k_eff]
    chosen_set = set(chosen)
    rest = sorted(s for s in census if s not in chosen_set)

    parts = [Partition(id=i, signatures=(sig,), gamma=gammas[sig])
             for i, sig in enumerate(chosen)]
    comp_gamma = float(sum(gammas[s] for s in rest))
    parts.append(Partition(id=COMPLEMENT_ID, signatures=tuple(rest),
                           gamma=comp_gamma, is_complement=True))
    total = sum(p.gamma for p in parts)
    if total > 0:
        for p in parts:
            p.P = p.gamma / total
    return PartitionSet(partitions=parts, K=k_eff)


def estimate_b(partition: Partition, census: dict[str, PartitionBuffer],
               n_total: int) -> float:
    """b_i = (second-half scalar contribution of the partition's buffers)
    divided by n_total/2: an unbiased per-camera-sample estimate of the
    partition's scalar integral, from data disjoint from the selection half.
    """
    acc = 0.0
    for sig in partition.signatures:
        buf = census.get(sig)
        if buf is not None:
            acc += float(buf.scalar[buf.second_half()].sum())
    return acc / (n_total / 2.0)


def _fill_reservoir(partition: Partition, census: dict[str, PartitionBuffer]) -> None:
    scalars, streams, recs = [], [], []
    for sig in partition.signatures:
        buf = census.get(sig)
        if buf is None:
            continue
        half = buf.second_half()
        scalars.append(buf.scalar[half])
        streams.append(buf.stream[half])
        recs.append(buf.rec[half])
    if scalars:
        partition.reservoir_scalar = np.concatenate(scalars)
        partition.reservoir_stream = np.concatenate(streams)
        partition.reservoir_rec = np.concatenate(recs)


def build_partitions(prepass: PrepassResult, K: int,
                     memory_cap_mb: float = 512.0) -> PartitionSet:
    """Full selection pipeline: select, estimate b, drop dead partitions.

    Selected partitions whose second half carries no mass cannot be
    normalized or initialized; they are folded back into the complementary
    partition (with a warning) and P is recomputed.
    """
    h, w, _ = prepass.total_splat.shape
    pset = select_partitions(prepass.census, K, width=w, height=h,
                             memory_cap_mb=memory_cap_mb)
    n_total = prepass.n_samples
    dropped: list[str] = []
    kept: list[Partition] = []
    comp = pset.complement
    for p in pset.selected:
        p.b = estimate_b(p, prepass.census, n_total)
        if p.b <= 0.0:
            dropped.append(p.signatures[0])
        else:
            kept.append(p)
    if dropped:
        warnings.warn(f"partitions with empty second half folded into the "
                      f"complement: {dropped}")
        comp.signatures = tuple(sorted(set(comp.signatures) | set(dropped)))
        comp.gamma += sum(gamma(prepass.census[s]) for s in dropped)
    comp.b = estimate_b(comp, prepass.census, n_total)
    for i, p in enumerate(kept):
        p.id = i
    parts = kept + [comp]
    total = sum(p.gamma for p in parts)
    if total > 0:
        for p in parts:
            p.P = p.gamma / total
    for p in parts:
        _fill_reservoir(p, prepass.census)
    return PartitionSet(partitions=parts, K=len(kept))


def resample_start(partition: Partition, stream: RandomStream) -> tuple[int, int]:
    """Pick a reservoir record with probability proportional to its scalar
    contribution; returns its (stream_id, record_index) replay key."""
    s = partition.reservoir_scalar
    total = float(s.sum())
    if partition.reservoir_size == 0 or total <= 0.0:
        raise ValueError(f"partition {partition.id} has an empty init reservoir")
    u = stream.uniform() * total
    cum = np.cumsum(s)
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, len(s) - 1)
    return int(partition.reservoir_stream[idx]), int(partition.reservoir_rec[idx])
