import numpy as np
import pytest

from partmlt.core import RandomStream
from partmlt.partition import (Partition, build_partitions, estimate_b, gamma,
                               resample_start, select_partitions)
from partmlt.path import PartitionBuffer


def make_buffer(sig: str, scalars) -> PartitionBuffer:
    scalars = np.asarray(scalars, dtype=np.float64)
    n = len(scalars)
    # C chosen so its luminance reproduces the scalar exactly
    c = np.zeros((n, 3))
    c[:, 1] = scalars / 0.7152
    buf = PartitionBuffer(signature=sig, C=c, scalar=scalars,
                          px=np.zeros(n), py=np.zeros(n),
                          stream=np.arange(n, dtype=np.int64),
                          rec=np.zeros(n, dtype=np.int32))
    buf.gamma = gamma(buf)
    return buf


class TestGamma:
    def test_first_half_sum(self):
        assert gamma(make_buffer("EDL", [1, 2, 3, 4])) == 3.0

    def test_single_record_ineligible(self):
        buf = make_buffer("EDL", [5.0])
        assert gamma(buf) == 0.0

    def test_odd_count(self):
        assert gamma(make_buffer("EDL", [1, 2, 3])) == 1.0

    def test_caustic_signature_positive(self, prepass_caustic_64):
        caustic = [s for s in prepass_caustic_64.census if "SS" in s]
        assert caustic
        assert any(gamma(prepass_caustic_64.census[s]) > 0 for s in caustic)


class TestSelectPartitions:
    def _census(self):
        return {
            "EDL": make_buffer("EDL", [3, 3, 3, 3]),    # gamma 6
            "EDDL": make_buffer("EDDL", [1.5, 1.5, 2, 2]),  # gamma 3
            "EL": make_buffer("EL", [0.5, 0.5, 1, 1]),  # gamma 1
        }

    def test_direct_arithmetic(self):
        pset = select_partitions(self._census(), K=2)
        assert pset.K == 2
        sel = pset.selected
        assert [p.signatures for p in sel] == [("EDL",), ("EDDL",)]
        comp = pset.complement
        assert comp.signatures == ("EL",)
        assert [round(p.P, 10) for p in pset.partitions] == [0.6, 0.3, 0.1]

    def test_probability_simplex(self):
        pset = select_partitions(self._census(), K=2)
        assert abs(sum(p.P for p in pset.partitions) - 1.0) < 1e-12
        assert all(p.P >= 0 for p in pset.partitions)

    def test_k_larger_than_census(self):
        with pytest.warns(UserWarning, match="shrinking K"):
            pset = select_partitions(self._census(), K=10)
        assert pset.K == 3
        assert pset.complement.signatures == ()

    def test_zero_gamma_ineligible(self):
        census = self._census()
        census["ESL"] = make_buffer("ESL", [9.0])  # single record: gamma 0
        pset = select_partitions(census, K=3)
        assert ("ESL",) not in [p.signatures for p in pset.selected]
        assert "ESL" in pset.complement.signatures

    def test_deterministic_ties(self):
        census = {
            "EDL": make_buffer("EDL", [2, 2]),
            "EDDL": make_buffer("EDDL", [2, 2]),
            "EL": make_buffer("EL", [2, 2]),
        }
        a = select_partitions(census, K=2)
        b = select_partitions(dict(reversed(list(census.items()))), K=2)
        assert [p.signatures for p in a.partitions] == \
            [p.signatures for p in b.partitions]
        # lexicographic tie-break
        assert a.selected[0].signatures == ("EDDL",)

    def test_memory_cap(self):
        census = {f"E{'D' * k}L": make_buffer(f"E{'D' * k}L", [4 - 0.1 * k] * 4)
                  for k in range(1, 9)}
        with pytest.warns(UserWarning, match="memory cap"):
            pset = select_partitions(census, K=8, width=4096, height=4096,
                                     memory_cap_mb=1000)
        per_image = 4096 * 4096 * 3 * 4
        assert pset.K == int(1000e6 / per_image)

    def test_k_zero_degenerate(self):
        pset = select_partitions(self._census(), K=0)
        assert pset.K == 0
        assert pset.selected == []
        assert set(pset.complement.signatures) == {"EDL", "EDDL", "EL"}
        assert pset.complement.P == 1.0

    def test_caustic_complement_nonempty(self, prepass_caustic_64):
        pset = select_partitions(prepass_caustic_64.census, K=10)
        assert len(pset.complement.signatures) > 0
        assert abs(sum(p.P for p in pset.partitions) - 1.0) < 1e-12


class TestEstimateB:
    def test_direct_arithmetic(self):
        census = {"EDL": make_buffer("EDL", [1, 1, 2, 4])}
        part = Partition(id=0, signatures=("EDL",), gamma=2.0)
        # second half {2, 4}, N_total/2 = 4
        assert estimate_b(part, census, n_total=8) == pytest.approx(1.5)

    def test_empty_second_half_dropped(self, prepass_basic_32):
        # a selected partition whose buffer has no second-half mass is folded
        # into the complement by build_partitions
        census = {
            "EDL": make_buffer("EDL", [1, 1, 2, 4]),
            "EDDL": make_buffer("EDDL", [3, 0.0]),  # second half mass 0
        }
        from partmlt.path import PrepassResult, GBuffer

        pre = PrepassResult(census=census, gbuffer=GBuffer.empty(4, 4),
                            splats={}, total_splat=np.zeros((4, 4, 3)),
                            n_samples=8, paths_per_pixel=2, seed=0,
                            max_depth=12)
        with pytest.warns(UserWarning, match="folded"):
            pset = build_partitions(pre, K=2)
        assert [p.signatures for p in pset.selected] == [("EDL",)]
        assert "EDDL" in pset.complement.signatures

    def test_additivity_exact(self, prepass_caustic_64):
        pre = prepass_caustic_64
        pset = build_partitions(pre, K=6)
        b_sum = sum(p.b for p in pset.partitions)
        whole = Partition(id=0, signatures=tuple(pre.census), gamma=0.0)
        b_all = estimate_b(whole, pre.census, pre.n_samples)
        assert b_sum == pytest.approx(b_all, rel=1e-12)


class TestHalfSplitIndependence:
    def test_swapped_halves_still_work(self, prepass_caustic_64):
        """Swapping which half scores and which normalizes must neither crash
        nor break additivity."""
        pre = prepass_caustic_64
        swapped = {}
        for sig, buf in pre.census.items():
            n = len(buf)
            order = np.r_[np.arange(n // 2, n), np.arange(0, n // 2)]
            swapped[sig] = PartitionBuffer(
                signature=sig, C=buf.C[order], scalar=buf.scalar[order],
                px=buf.px[order], py=buf.py[order],
                stream=buf.stream[order], rec=buf.rec[order])
            swapped[sig].gamma = gamma(swapped[sig])
        pset = select_partitions(swapped, K=5)
        assert abs(sum(p.P for p in pset.partitions) - 1.0) < 1e-12
        whole = Partition(id=0, signatures=tuple(swapped), gamma=0.0)
        b_all = estimate_b(whole, swapped, pre.n_samples)
        b_sum = sum(estimate_b(p, swapped, pre.n_samples)
                    for p in pset.partitions)
        assert b_sum == pytest.approx(b_all, rel=1e-12)


class TestResampleStart:
    def test_single_record(self):
        part = Partition(id=0, signatures=("EDL",), gamma=1.0,
                         reservoir_scalar=np.array([2.0]),
                         reservoir_stream=np.array([42], dtype=np.int64),
                         reservoir_rec=np.array([1], dtype=np.int32))
        stream = RandomStream(1, 1)
        for _ in range(10):
            assert resample_start(part, stream) == (42, 1)

    def test_proportional_frequency(self):
        part = Partition(id=0, signatures=("EDL",), gamma=1.0,
                         reservoir_scalar=np.array([1.0, 3.0]),
                         reservoir_stream=np.array([10, 20], dtype=np.int64),
                         reservoir_rec=np.array([0, 0], dtype=np.int32))
        stream = RandomStream(7, 3)
        n = 100_000
        hits = sum(resample_start(part, stream)[0] == 20 for _ in range(n))
        p = hits / n
        sigma = np.sqrt(0.75 * 0.25 / n)
        assert abs(p - 0.75) < 3 * sigma

    def test_empty_reservoir(self):
        part = Partition(id=0, signatures=("EDL",), gamma=1.0)
        with pytest.raises(ValueError):
            resample_start(part, RandomStream(1, 1))
