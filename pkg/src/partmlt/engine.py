"""Render orchestration: the path-traced reference, baseline MLT, and the
partitioned guided sampler.

Both MCMC renderers share the two-phase structure: a pre-pass supplies
normalization constants and start paths, then one chain per partition (a
single whole-space chain for MLT) runs mutations and splats
(b_i / N_i) * f/f* in expectation form. Chains are advanced sequentially and
their private accumulation buffers merged in partition order, so output is
bit-identical for a fixed seed regardless of threading in the sampling
kernels (those only ever write per-pixel slots).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import ImageBuffer, RandomStream, rng_u64
from .guidance import GuidanceImage, OffsetSet, build_guidance, build_offsets, full_offsets
from .partition import Partition, PartitionSet, build_partitions, estimate_b, resample_start
from .path import GBuffer, PrepassResult, run_prepass, sig_from_str
from .scene import Scene

__all__ = [
    "RenderConfig",
    "RenderOutput",
    "ChainState",
    "render_pt",
    "run_mlt",
    "run_partitioned",
    "init_chain",
]

# stream-id namespaces on top of the user seed; the pre-pass owns
# [0, ppp * npix), everything else lives far above it
_STREAM_CHAIN = 1 << 40
_STREAM_INIT = 1 << 41


@dataclass
class RenderConfig:
    algorithm: str = "partitioned"     # pt | mlt | partitioned
    mutations_per_pixel: int = 32
    K: int = 10
    y_size: int = 129                  # |Y'|, odd
    radius: int = 24
    epsilon: float = 1e-3
    seed: int = 1
    prepass_ppp: int = 8
    burn_in: int = 1024
    large_step_prob: float = 0.3
    kernel: str = "sparse"             # sparse | full
    max_depth: int = 12
    spp: int = 64                      # pt only
    offset_seed: int = 1
    lens_r_min: float = 0.25
    lens_r_max: float = 32.0
    memory_cap_mb: float = 512.0
    chain_length: int = 8192   # budget per chain; partitions run ceil(N/this) chains

    def __post_init__(self):
        if self.mutations_per_pixel < 1:
            raise ValueError("mutations_per_pixel must be >= 1")
        if self.algorithm not in ("pt", "mlt", "partitioned"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.kernel not in ("sparse", "full"):
            raise ValueError(f"unknown kernel {self.kernel!r}")


@dataclass
class RenderOutput:
    image: ImageBuffer
    stats: dict = field(default_factory=dict)


def _derive_seed(seed: int, tag: int) -> int:
    return int(rng_u64(seed, tag, 0))


# ---------------------------------------------------------------------------
# path-traced reference
# ---------------------------------------------------------------------------

def render_pt(scene: Scene, spp: int, seed: int, max_depth: int = 12,
              sig_filter: str | None = None) -> RenderOutput:
    """Plain path tracing (NEE + balance-heuristic MIS) at spp samples/pixel.

    Also returns per-pixel luminance means and the variance of those means,
    the inputs for the estimator-consistency checks. sig_filter restricts the
    accumulated paths to one interaction signature.
    """
    sc = scene.flat()
    h, w = sc.height, sc.width
    rgb = np.zeros((h, w, 3))
    lum = np.zeros((h, w))
    lum2 = np.zeros((h, w))
    code = sig_from_str(sig_filter) if sig_filter else 0
    kernels.pt_accum(sc, spp, _derive_seed(seed, 0xA11CE), max_depth, code,
                     rgb, lum, lum2)
    img = rgb / spp
    mean_lum = lum / spp
    var_sample = np.maximum(lum2 / spp - mean_lum ** 2, 0.0)
    if spp > 1:
        var_sample *= spp / (spp - 1.0)
    return RenderOutput(
        image=ImageBuffer.from_array(img),
        stats={
            "spp": spp,
            "lum_mean": mean_lum,
            "lum_mean_var": var_sample / spp,  # variance of the per-pixel mean
        },
    )


# ---------------------------------------------------------------------------
# chains
# ---------------------------------------------------------------------------

@dataclass
class ChainState:
    """One Markov chain bound to a partition, holding its current path."""

    partition_id: int
    seed: int
    stream_id: int
    vp: np.ndarray
    vn: np.ndarray
    vmat: np.ndarray
    vprim: np.ndarray
    vcls: np.ndarray
    st_i: np.ndarray   # int64[8]: nverts + mutation counters
    st_f: np.ndarray   # float64[8]: pixel, f, f*, F, walk density
    pvp: np.ndarray = None
    pvn: np.ndarray = None
    pvmat: np.ndarray = None
    pvprim: np.ndarray = None
    pvcls: np.ndarray = None
    ctr: np.ndarray = None

    def __post_init__(self):
        self.pvp = np.zeros_like(self.vp)
        self.pvn = np.zeros_like(self.vn)
        self.pvmat = np.zeros_like(self.vmat)
        self.pvprim = np.zeros_like(self.vprim)
        self.pvcls = np.zeros_like(self.vcls)
        self.ctr = np.zeros(1, dtype=np.int64)

    @property
    def fstar(self) -> float:
        return float(self.st_f[kernels.ST_FSTAR])

    @property
    def signature(self) -> str:
        from .path import sig_to_str
        return sig_to_str(int(kernels.sig_of_path(self.vcls, int(self.st_i[0]))))

    def mutation_stats(self) -> dict:
        return {
            "large": (int(self.st_i[1]), int(self.st_i[2])),
            "guided": (int(self.st_i[3]), int(self.st_i[4])),
            "lens": (int(self.st_i[5]), int(self.st_i[6])),
            "steps": int(self.st_i[7]),
        }


def _state_from_arrays(sc, partition_id, seed, stream_id,
                       vp, vn, vmat, vprim, vcls, nv, px, py, max_depth):
    f = kernels.path_f_eval(sc, vp, vn, vmat, vprim, nv, False)
    fstar = float(kernels.luminance(f[0], f[1], f[2]))
    jac = kernels.camera_jacobian(sc, vp[1, 0], vp[1, 1], vp[1, 2],
                                  vn[1, 0], vn[1, 1], vn[1, 2])
    if fstar <= 0.0 or jac <= 0.0:
        raise RuntimeError("replayed chain start has zero contribution; "
                           "replay determinism is broken")
    st_i = np.zeros(8, dtype=np.int64)
    st_i[0] = nv
    st_f = np.zeros(8)
    st_f[kernels.ST_PX] = px
    st_f[kernels.ST_PY] = py
    st_f[kernels.ST_F0:kernels.ST_F0 + 3] = f
    st_f[kernels.ST_FSTAR] = fstar
    st_f[kernels.ST_BIGF] = fstar * jac
    st_f[kernels.ST_PWALK] = kernels.bsdfwalk_pdf(sc, vp, vn, vmat, vprim,
                                                  nv, max_depth)
    return ChainState(partition_id=partition_id, seed=seed, stream_id=stream_id,
                      vp=vp, vn=vn, vmat=vmat, vprim=vprim, vcls=vcls,
                      st_i=st_i, st_f=st_f)


def _replay_to_arrays(scene, seed, stream_id, rec_idx, max_depth):
    sc = scene.flat()
    maxrec = 2 * max_depth + 2
    rsig = np.zeros(maxrec, dtype=np.int64)
    rC = np.zeros((maxrec, 3))
    rP = np.zeros(maxrec)
    rW = np.zeros(maxrec)
    vp = np.zeros((kernels.MAXV, 3))
    vn = np.zeros((kernels.MAXV, 3))
    vmat = np.zeros(kernels.MAXV, dtype=np.int32)
    vprim = np.zeros(kernels.MAXV, dtype=np.int32)
    vcls = np.zeros(kernels.MAXV, dtype=np.uint8)
    npix = scene.camera.width * scene.camera.height
    pix = stream_id % npix
    ix = pix % scene.camera.width
    iy = pix // scene.camera.width
    res = kernels.trace_one(sc, float(ix), float(iy), 1.0, 1.0, seed, stream_id,
                            max_depth, rsig, rC, rP, rW, rec_idx,
                            vp, vn, vmat, vprim, vcls)
    if rec_idx >= res[0]:
        raise RuntimeError(f"replay of stream {stream_id} record {rec_idx} "
                           f"found only {res[0]} records")
    return vp, vn, vmat, vprim, vcls, res[1], res[2], res[3], rsig[rec_idx]


_EMPTY_CDF = np.zeros(0, dtype=np.float64)
_ONES_PMF = np.ones((1, 1), dtype=np.float64)


@dataclass
class _ChainEnv:
    """Everything a chain's kernel invocation needs besides its own state."""

    sc: object
    gb: tuple
    d_lum: np.ndarray
    epsilon: float
    use_guided: int
    offsets: np.ndarray
    neg_index: np.ndarray
    wbuf: np.ndarray
    sel_sigs: np.ndarray
    is_complement: int
    config: RenderConfig
    pix_pmf: np.ndarray = None   # (H, W) regeneration pixel weights
    pix_cdf: np.ndarray = None   # flattened cdf; empty => uniform pixels

    def __post_init__(self):
        if self.pix_pmf is None:
            self.pix_pmf = _ONES_PMF
        if self.pix_cdf is None:
            self.pix_cdf = _EMPTY_CDF


_DUMMY_VISITS = np.zeros((1, 1), dtype=np.int64)


def _gb_tuple(gb: GBuffer):
    return (gb.pos, gb.nrm, gb.alb, gb.gcam, gb.valid)


def _run_steps(state: ChainState, env: _ChainEnv, n_steps: int,
               splat_scale: float, accum: np.ndarray,
               visit_stride: int = 0, visits: np.ndarray | None = None):
    cfg = env.config
    kernels.run_chain(env.sc, *env.gb, env.d_lum, env.epsilon,
                      env.use_guided, env.offsets, env.neg_index, env.wbuf,
                      env.pix_pmf, env.pix_cdf,
                      env.sel_sigs, env.is_complement,
                      state.vp, state.vn, state.vmat, state.vprim, state.vcls,
                      state.st_i, state.st_f,
                      state.pvp, state.pvn, state.pvmat, state.pvprim, state.pvcls,
                      n_steps, splat_scale, accum,
                      state.seed, state.stream_id, state.ctr,
                      cfg.large_step_prob, cfg.lens_r_min, cfg.lens_r_max,
                      cfg.max_depth,
                      visit_stride, visits if visits is not None else _DUMMY_VISITS)


def init_chain(partition: Partition, scene: Scene, burn_in: int,
               env: _ChainEnv, chain_idx: int, prepass_seed: int) -> ChainState:
    """Resample a start path from the partition's reservoir (probability
    proportional to scalar contribution), replay its seed, and run burn-in
    mutations. The resulting state's signature must lie in the partition;
    a mismatch means replay determinism is broken and aborts.
    """
    cfg = env.config
    stream = RandomStream(cfg.seed, _STREAM_INIT + chain_idx)
    sid, rid = resample_start(partition, stream)
    vp, vn, vmat, vprim, vcls, nv, px, py, sig_code = _replay_to_arrays(
        scene, prepass_seed, sid, rid, cfg.max_depth)
    in_part = kernels.sig_in_partition(np.int64(sig_code), env.sel_sigs,
                                       env.is_complement)
    if not in_part:
        raise RuntimeError(
            f"replayed start path signature is outside partition "
            f"{partition.id}; replay determinism is broken")
    state = _state_from_arrays(env.sc, partition.id, cfg.seed,
                               _STREAM_CHAIN + chain_idx,
                               vp, vn, vmat, vprim, vcls, nv, px, py,
                               cfg.max_depth)
    if burn_in > 0:
        dummy = np.zeros((1, 1, 3))
        _run_steps(state, env, burn_in, 0.0, dummy)
    return state


def _dummy_gb():
    return (np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), np.zeros((1, 1, 3)),
            np.zeros((1, 1)), np.zeros((1, 1), dtype=np.uint8))


def _mlt_env(scene: Scene, config: RenderConfig) -> _ChainEnv:
    return _ChainEnv(sc=scene.flat(), gb=_dummy_gb(),
                     d_lum=np.zeros((1, 1)), epsilon=config.epsilon,
                     use_guided=0,
                     offsets=np.zeros((1, 2), dtype=np.int64),
                     neg_index=np.zeros(1, dtype=np.int64),
                     wbuf=np.zeros(1),
                     sel_sigs=np.zeros(0, dtype=np.int64), is_complement=1,
                     config=config)


# ---------------------------------------------------------------------------
# baseline MLT
# ---------------------------------------------------------------------------

def run_mlt(scene: Scene, config: RenderConfig,
            prepass: PrepassResult | None = None) -> RenderOutput:
    """Single-chain-family MLT over the whole of path space.

    b comes from the pre-pass (all signatures, second half); the chain mixes
    isotropic lens perturbations with whole-space large steps.
    """
    if prepass is None:
        prepass = run_prepass(scene, config.prepass_ppp, config.seed,
                              config.max_depth)
    sc = scene.flat()
    h, w = sc.height, sc.width
    if not prepass.census:
        warnings.warn("pre-pass found no light-carrying paths; image is black")
        return RenderOutput(ImageBuffer.zeros(w, h),
                            stats={"b": 0.0, "chains": []})
    whole = Partition(id=0, signatures=tuple(sorted(prepass.census)),
                      gamma=0.0, is_complement=True)
    whole.b = estimate_b(whole, prepass.census, prepass.n_samples)
    from .partition import _fill_reservoir
    _fill_reservoir(whole, prepass.census)

    env = _mlt_env(scene, config)
    n_steps = config.mutations_per_pixel * w * h
    accum = np.zeros((h, w, 3))
    scale = whole.b * (w * h) / n_steps
    chain_stats = []
    executed = 0
    for j, chunk in enumerate(_split_budget(n_steps, config.chain_length)):
        burn = min(config.burn_in, max(16, chunk // 4))
        state = init_chain(whole, scene, burn, env, chain_idx=j,
                           prepass_seed=prepass.seed)
        _run_steps(state, env, chunk, scale, accum)
        chain_stats.append({"splat_steps": chunk, **state.mutation_stats()})
        executed += chunk
    stats = {"b": whole.b, "chains": chain_stats,
             "budget": {"configured": n_steps, "executed": executed}}
    return RenderOutput(ImageBuffer.from_array(accum), stats=stats)


# ---------------------------------------------------------------------------
# the partitioned guided sampler
# ---------------------------------------------------------------------------

def _split_budget(total: int, chain_length: int) -> list[int]:
    """Split a mutation budget into near-equal per-chain chunks."""
    n_chains = max(1, round(total / max(1, chain_length)))
    base = total // n_chains
    chunks = [base] * n_chains
    for i in range(total - base * n_chains):
        chunks[i] += 1
    return chunks


def allocate_budget(total: int, pset: PartitionSet,
                    complement_floor: float = 0.01) -> dict[int, int]:
    """Deterministic proportional split of the mutation budget by P(i).

    The complementary partition (when it can run a chain at all) gets at
    least `complement_floor` of the total; partitions that cannot start a
    chain get nothing. Largest-remainder rounding conserves the total.
    """
    runnable = [p for p in pset.partitions if p.reservoir_size > 0 and
                float(p.reservoir_scalar.sum()) > 0.0]
    if not runnable:
        return {}
    weights = {}
    for p in runnable:
        wgt = p.P
        if p.is_complement:
            wgt = max(wgt, complement_floor)
        weights[p.id] = wgt
    norm = sum(weights.values())
    shares = {pid: total * wgt / norm for pid, wgt in weights.items()}
    counts = {pid: int(np.floor(s)) for pid, s in shares.items()}
    leftover = total - sum(counts.values())
    order = sorted(shares, key=lambda pid: (-(shares[pid] - counts[pid]), pid))
    for pid in order[:leftover]:
        counts[pid] += 1
    return counts


def build_partition_guidance(prepass: PrepassResult, pset: PartitionSet,
                             epsilon: float) -> dict[int, GuidanceImage]:
    """Denoised guidance image per partition (complement: sum of the rest)."""
    h, w, _ = prepass.total_splat.shape
    out = {}
    for part in pset.partitions:
        splat = np.zeros((h, w, 3))
        for sig in part.signatures:
            img = prepass.splats.get(sig)
            if img is not None:
                splat += img
        out[part.id] = build_guidance(splat, prepass.gbuffer,
                                      partition_id=part.id, epsilon=epsilon)
    return out


def run_partitioned(scene: Scene, config: RenderConfig,
                    prepass: PrepassResult | None = None,
                    visit_stride: int = 0) -> RenderOutput:
    """The full pipeline: pre-pass, partition selection, per-partition
    normalization, guidance construction, chain initialization with burn-in,
    proportional budget allocation, and the per-partition chains whose
    b_i-scaled splats sum to the final image.
    """
    if prepass is None:
        prepass = run_prepass(scene, config.prepass_ppp, config.seed,
                              config.max_depth)
    sc = scene.flat()
    h, w = sc.height, sc.width
    if not prepass.census:
        warnings.warn("pre-pass found no light-carrying paths; image is black")
        return RenderOutput(ImageBuffer.zeros(w, h),
                            stats={"partitions": [], "chains": []})
    total_steps = config.mutations_per_pixel * w * h
    pset = build_partitions(prepass, config.K, config.memory_cap_mb)
    guidance = build_partition_guidance(prepass, pset, config.epsilon)
    if config.kernel == "sparse":
        offsets = build_offsets(config.y_size, config.radius, config.offset_seed)
    else:
        offsets = full_offsets(config.radius)

    budget = allocate_budget(total_steps, pset)
    sel_codes = {p.id: np.array([sig_from_str(p.signatures[0])], dtype=np.int64)
                 for p in pset.selected}
    all_selected = np.array(sorted(sig_from_str(p.signatures[0])
                                   for p in pset.selected), dtype=np.int64)

    accum = np.zeros((h, w, 3))
    visits = np.zeros((h, w), dtype=np.int64) if visit_stride > 0 else None
    chain_stats = []
    part_rows = []
    for chain_idx, part in enumerate(pset.partitions):
        n_i = budget.get(part.id, 0)
        row = {"id": part.id, "signatures": part.signatures, "gamma": part.gamma,
               "P": part.P, "b": part.b, "reservoir": part.reservoir_size,
               "steps": n_i}
        part_rows.append(row)
        if n_i <= 0:
            if part.P > 0 and part.reservoir_size == 0:
                warnings.warn(f"partition {part.id} has no start paths; skipped")
            continue
        if part.is_complement:
            sel_sigs, is_comp = all_selected, 1
        else:
            sel_sigs, is_comp = sel_codes[part.id], 0
        # regeneration pixels follow the partition's denoised image (with a
        # floor so every pixel keeps positive proposal density); a uniform
        # pixel choice would almost never land inside a small partition
        pmf = guidance[part.id].d_lum + 1e-3
        cdf = np.cumsum(pmf.ravel())
        cdf /= cdf[-1]
        cdf[-1] = 1.0
        env = _ChainEnv(sc=sc, gb=_gb_tuple(prepass.gbuffer),
                        d_lum=guidance[part.id].d_lum, epsilon=config.epsilon,
                        use_guided=1,
                        offsets=offsets.offsets, neg_index=offsets.neg_index,
                        wbuf=np.zeros(len(offsets)),
                        sel_sigs=sel_sigs, is_complement=is_comp,
                        config=config, pix_pmf=pmf, pix_cdf=cdf)
        part_acc = np.zeros((h, w, 3))
        scale = part.b * (w * h) / n_i
        # the complement mixes worst (many signatures, low regeneration
        # acceptance): spread its budget over more, shorter chains so no
        # single stuck chain can concentrate much of its mass
        chain_len = min(config.chain_length, 512) if part.is_complement \
            else config.chain_length
        for j, chunk in enumerate(_split_budget(n_i, chain_len)):
            burn = min(config.burn_in, max(16, chunk // 4))
            state = init_chain(part, scene, burn, env,
                               chain_idx * 4096 + j, prepass.seed)
            _run_steps(state, env, chunk, scale, part_acc,
                       visit_stride=visit_stride, visits=visits)
            chain_stats.append({"partition": part.id, "splat_steps": chunk,
                                **state.mutation_stats()})
        accum += part_acc

    executed = sum(cs["splat_steps"] for cs in chain_stats)
    stats = {
        "partitions": part_rows,
        "chains": chain_stats,
        "budget": {"configured": total_steps, "executed": executed},
        "b_total": sum(p.b for p in pset.partitions),
        "K": pset.K,
    }
    if visits is not None:
        stats["visits"] = visits
    return RenderOutput(ImageBuffer.from_array(accum), stats=stats)


def render(scene: Scene, config: RenderConfig) -> RenderOutput:
    if config.algorithm == "pt":
        return render_pt(scene, config.spp, config.seed, config.max_depth)
    if config.algorithm == "mlt":
        return run_mlt(scene, config)
    return run_partitioned(scene, config)
