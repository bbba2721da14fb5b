import math

import numpy as np
import pytest

from partmlt import kernels
from partmlt.core import ImageBuffer, rmse
from partmlt.engine import (RenderConfig, _mlt_env, _replay_to_arrays,
                            _state_from_arrays, allocate_budget, init_chain,
                            render_pt, run_mlt, run_partitioned)
from partmlt.imageio import write_pfm
from partmlt.partition import Partition, _fill_reservoir, build_partitions, estimate_b
from partmlt.path import run_prepass, sig_from_str
from partmlt.scene import Camera, Material, Quad, Scene, KIND_DIFFUSE, builtin_scene

from conftest import cached_reference


def _state_from_record(scene, prepass, buf, idx, config, stream_id=1 << 40):
    vp, vn, vmat, vprim, vcls, nv, px, py, sig = _replay_to_arrays(
        scene, prepass.seed, int(buf.stream[idx]), int(buf.rec[idx]),
        config.max_depth)
    return _state_from_arrays(scene.flat(), 0, config.seed, stream_id,
                              vp, vn, vmat, vprim, vcls, nv, px, py,
                              config.max_depth)


def _corner_state(scene, prepass, config, sig="EDL"):
    buf = prepass.census[sig]
    order = np.argsort(buf.px + buf.py)
    return _state_from_record(scene, prepass, buf, int(order[0]), config)


class TestLensMove:
    def test_off_image_proposals_rejected(self, cornell_basic_32,
                                          prepass_basic_32):
        config = RenderConfig(seed=5, algorithm="mlt")
        env = _mlt_env(cornell_basic_32, config)
        state = _corner_state(cornell_basic_32, prepass_basic_32, config)
        sc = cornell_basic_32.flat()
        dummy = np.zeros((1, 1, 3))
        off_image = 0
        for i in range(300):
            before = (state.st_f[kernels.ST_PX], state.st_f[kernels.ST_PY])
            a, accepted, npx, npy = kernels.lens_move(
                sc, state.vp, state.vn, state.vmat, state.vprim, state.vcls,
                state.st_i, state.st_f, state.pvp, state.pvn, state.pvmat,
                state.pvprim, state.pvcls, config.seed, state.stream_id,
                state.ctr, 0.0, dummy, config.lens_r_min, config.lens_r_max,
                config.max_depth)
            outside = not (0 <= npx < 32 and 0 <= npy < 32)
            if outside:
                off_image += 1
                assert a == 0.0 and accepted == 0
                assert (state.st_f[kernels.ST_PX],
                        state.st_f[kernels.ST_PY]) == before
        assert off_image > 10  # corner start: plenty of proposals leave

    def test_offset_sampler_symmetric(self):
        # the radial sampler maps (u1, u2) and (u1, u2+1/2) to exact negations
        r_min, r_max = 1.0, 32.0
        rng = np.random.default_rng(2)
        for u1, u2 in rng.random((200, 2)):
            r = r_min * math.exp(u1 * math.log(r_max / r_min))
            d1 = np.array([r * math.cos(2 * math.pi * u2),
                           r * math.sin(2 * math.pi * u2)])
            u2b = (u2 + 0.5) % 1.0
            d2 = np.array([r * math.cos(2 * math.pi * u2b),
                           r * math.sin(2 * math.pi * u2b)])
            assert np.allclose(d1, -d2, atol=1e-9)


class TestLargeStep:
    def test_impossible_partition_always_rejects(self, cornell_basic_32,
                                                 prepass_basic_32):
        config = RenderConfig(seed=5, algorithm="mlt")
        state = _corner_state(cornell_basic_32, prepass_basic_32, config)
        sc = cornell_basic_32.flat()
        # a signature that cannot occur in an all-diffuse box
        sel = np.array([sig_from_str("ESSL")], dtype=np.int64)
        dummy = np.zeros((1, 1, 3))
        for _ in range(500):
            a, accepted, _, _ = kernels.large_step_move(
                sc, sel, 0, np.ones((1, 1)), np.zeros(0),
                state.vp, state.vn, state.vmat, state.vprim,
                state.vcls, state.st_i, state.st_f, state.pvp, state.pvn,
                state.pvmat, state.pvprim, state.pvcls, config.seed,
                state.stream_id, state.ctr, 0.0, dummy, config.max_depth)
            assert a == 0.0 and accepted == 0

    def test_scale_invariant_decisions(self):
        """x10 emission leaves every acceptance decision identical."""
        def build(scale):
            scene = builtin_scene("cornell-basic", 24, 24)
            prims = []
            for p in scene.primitives:
                if p.emission is not None:
                    prims.append(Quad(p.p0, p.e1, p.e2, p.material,
                                      emission=np.asarray(p.emission) * scale))
                else:
                    prims.append(p)
            return Scene(scene.camera, scene.materials, prims)

        outs = []
        for scale in (1.0, 10.0):
            scene = build(scale)
            config = RenderConfig(seed=3, algorithm="mlt", prepass_ppp=4,
                                  burn_in=0, mutations_per_pixel=4)
            out = run_mlt(scene, config)
            outs.append(out)
        s1, s10 = outs[0].stats["chains"][0], outs[1].stats["chains"][0]
        assert s1 == s10  # identical proposal/acceptance counts, every type

    def test_matches_path_tracing_on_single_signature(self, cornell_basic_32):
        """Large steps restricted to EDL form an independence sampler whose
        reweighted histogram is plain path tracing of that family."""
        scene = cornell_basic_32
        config = RenderConfig(seed=11, algorithm="partitioned", prepass_ppp=16,
                              burn_in=64, mutations_per_pixel=48,
                              large_step_prob=1.0)  # large steps only
        prepass = run_prepass(scene, config.prepass_ppp, config.seed)
        buf = prepass.census["EDL"]
        part = Partition(id=0, signatures=("EDL",), gamma=buf.gamma)
        part.b = estimate_b(part, prepass.census, prepass.n_samples)
        _fill_reservoir(part, prepass.census)
        env = _mlt_env(scene, config)
        env = env.__class__(sc=env.sc, gb=env.gb, d_lum=env.d_lum,
                            epsilon=env.epsilon, use_guided=0,
                            offsets=env.offsets, neg_index=env.neg_index,
                            wbuf=env.wbuf,
                            sel_sigs=np.array([sig_from_str("EDL")],
                                              dtype=np.int64),
                            is_complement=0, config=config)
        state = init_chain(part, scene, config.burn_in, env, 0, prepass.seed)
        h = w = 32
        accum = np.zeros((h, w, 3))
        n_steps = config.mutations_per_pixel * h * w
        from partmlt.engine import _run_steps
        _run_steps(state, env, n_steps, part.b * w * h / n_steps, accum)

        ref = render_pt(scene, 2048, seed=77, sig_filter="EDL")
        mean_chain = accum.mean()
        mean_ref = float(ref.image.pixels.mean())
        # mean agreement within 3 sigma of the pt-side error plus b noise
        var_mean = float(np.sum(ref.stats["lum_mean_var"])) / (h * w) ** 2
        sigma = math.sqrt(var_mean) + 0.02 * mean_ref
        assert abs(mean_chain - mean_ref) < 3 * sigma


class TestRunMlt:
    def test_mean_matches_reference(self, cornell_basic_32):
        config = RenderConfig(seed=2, algorithm="mlt", prepass_ppp=32,
                              mutations_per_pixel=32, burn_in=256)
        out = run_mlt(cornell_basic_32, config)
        ref = cached_reference("cornell-basic", 32, 4096, 123)
        assert out.image.mean() == pytest.approx(ref.mean(), rel=0.02)

    def test_budget_improves_rmse(self, cornell_basic_32):
        ref = cached_reference("cornell-basic", 32, 4096, 123)
        errs = {1: [], 32: []}
        for seed in (1, 2, 3):
            for mpp in (1, 32):
                config = RenderConfig(seed=seed, algorithm="mlt",
                                      prepass_ppp=8, mutations_per_pixel=mpp,
                                      burn_in=128)
                out = run_mlt(cornell_basic_32, config)
                errs[mpp].append(rmse(out.image, ref))
        assert np.mean(errs[32]) < np.mean(errs[1])

    def test_zero_emission_black(self):
        mats = {"w": Material("w", KIND_DIFFUSE, (0.5, 0.5, 0.5))}
        prims = [Quad((-1, -1, 1), (0, 2, 0), (2, 0, 0), "w")]
        cam = Camera((0, 0, -1), (0, 0, 1), (0, 1, 0), 45, 8, 8)
        scene = Scene(cam, mats, prims)
        with pytest.warns(UserWarning, match="no light"):
            out = run_mlt(scene, RenderConfig(seed=1, algorithm="mlt",
                                              prepass_ppp=2,
                                              mutations_per_pixel=1))
        assert np.all(out.image.pixels == 0)


class TestRunPartitioned:
    def test_mean_consistent_with_mlt(self, cornell_caustic_64):
        config = RenderConfig(seed=6, prepass_ppp=8, mutations_per_pixel=16,
                              burn_in=128, K=6, y_size=33, radius=12)
        out_p = run_partitioned(cornell_caustic_64, config)
        out_m = run_mlt(cornell_caustic_64, config)
        # same pre-pass data => identical luminance mass (splatting identity)
        lum_p = out_p.image.luminance_image().sum()
        lum_m = out_m.image.luminance_image().sum()
        assert lum_p == pytest.approx(lum_m, rel=1e-5)

    def test_budget_conservation(self, cornell_caustic_64):
        config = RenderConfig(seed=6, prepass_ppp=8, mutations_per_pixel=16,
                              burn_in=32, K=6, y_size=33, radius=12)
        out = run_partitioned(cornell_caustic_64, config)
        budget = out.stats["budget"]
        k_plus_1 = out.stats["K"] + 1
        assert abs(budget["executed"] - budget["configured"]) <= k_plus_1
        for row in out.stats["chains"]:
            for kind in ("large", "guided", "lens"):
                prop, acc = row[kind]
                assert 0 <= acc <= prop

    def test_guided_acceptance_rate_healthy(self, cornell_basic_32):
        config = RenderConfig(seed=9, prepass_ppp=8, mutations_per_pixel=16,
                              burn_in=64, K=3, y_size=33, radius=8)
        out = run_partitioned(cornell_basic_32, config)
        guided = [c for c in out.stats["chains"] if c["guided"][0] > 100]
        assert guided
        rates = [c["guided"][1] / c["guided"][0] for c in guided]
        assert max(rates) > 0.3

    def test_k_zero_equals_mlt_statistics(self, cornell_basic_32):
        config = RenderConfig(seed=4, prepass_ppp=16, mutations_per_pixel=24,
                              burn_in=128, K=0, y_size=33, radius=12)
        out_p = run_partitioned(cornell_basic_32, config)
        out_m = run_mlt(cornell_basic_32, config)
        # identical pre-pass => identical total luminance mass, exactly
        assert out_p.image.luminance_image().sum() == pytest.approx(
            out_m.image.luminance_image().sum(), rel=1e-5)
        # and the images sample the same distribution: quadrant means agree
        for img_a, img_b in ((out_p.image.pixels, out_m.image.pixels),):
            for sy in (slice(0, 16), slice(16, 32)):
                for sx in (slice(0, 16), slice(16, 32)):
                    qa = float(img_a[sy, sx].mean())
                    qb = float(img_b[sy, sx].mean())
                    assert qa == pytest.approx(qb, rel=0.25)

    def test_determinism_bit_identical(self, cornell_caustic_64, tmp_path):
        config = RenderConfig(seed=8, prepass_ppp=4, mutations_per_pixel=8,
                              burn_in=32, K=4, y_size=17, radius=8)
        a = run_partitioned(cornell_caustic_64, config)
        b = run_partitioned(cornell_caustic_64, config)
        pa, pb = tmp_path / "a.pfm", tmp_path / "b.pfm"
        write_pfm(a.image, pa)
        write_pfm(b.image, pb)
        assert pa.read_bytes() == pb.read_bytes()


class TestAllocateBudget:
    def _pset(self, probs, comp_idx):
        parts = []
        for i, p in enumerate(probs):
            part = Partition(id=i if i != comp_idx else -1, signatures=("EDL",),
                             gamma=p, P=p, is_complement=(i == comp_idx),
                             reservoir_scalar=np.array([1.0]),
                             reservoir_stream=np.zeros(1, dtype=np.int64),
                             reservoir_rec=np.zeros(1, dtype=np.int32))
            parts.append(part)
        from partmlt.partition import PartitionSet
        return PartitionSet(partitions=parts, K=len(probs) - 1)

    def test_total_conserved(self):
        pset = self._pset([0.5, 0.3, 0.2], comp_idx=2)
        counts = allocate_budget(10_001, pset)
        assert sum(counts.values()) == 10_001

    def test_complement_floor(self):
        pset = self._pset([0.7, 0.2999, 0.0001], comp_idx=2)
        counts = allocate_budget(100_000, pset)
        assert counts[-1] >= 0.009 * 100_000

    def test_unstartable_partition_skipped(self):
        pset = self._pset([0.5, 0.5], comp_idx=1)
        pset.partitions[0].reservoir_scalar = np.zeros(0)
        counts = allocate_budget(1000, pset)
        assert 0 not in counts
        assert counts[-1] == 1000
