"""Path representation, contribution evaluation, and the Monte Carlo pre-pass.

The pre-pass traces camera samples over the image, records every completed
path into a per-signature buffer as (C, scalar C, pixel, replay key), captures
a GBuffer from each pixel's first sample, and keeps a splatted contribution
image per signature. Buffers store replay keys instead of vertex lists; the
deterministic streams make any recorded path reproducible from its key.

`path_contribution` and the prefix/suffix split are deliberately implemented
in plain Python/numpy, independent of the compiled tracer, so the two routes
check each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import RandomStream, scalar_contribution
from .scene import (KIND_DIFFUSE, KIND_GLASS, KIND_MIRROR, Scene, VertexClass)

__all__ = [
    "PathVertex",
    "Path",
    "PartitionBuffer",
    "GBuffer",
    "PrepassResult",
    "sig_to_str",
    "sig_from_str",
    "trace_path",
    "replay_record",
    "path_contribution",
    "prefix_contribution",
    "suffix_contribution",
    "run_prepass",
]

_CLS_CHARS = "EDSL"


def sig_to_str(code: int) -> str:
    n = int(code) >> kernels.SIG_LEN_SHIFT
    return "".join(_CLS_CHARS[(int(code) >> (2 * k)) & 3] for k in range(n))


def sig_from_str(s: str) -> int:
    code = len(s) << kernels.SIG_LEN_SHIFT
    for k, ch in enumerate(s):
        code |= _CLS_CHARS.index(ch) << (2 * k)
    return code


@dataclass(frozen=True)
class PathVertex:
    position: np.ndarray
    normal: np.ndarray  # canonical geometric normal (camera vertex: forward axis)
    material: int       # flattened material index, -1 for the camera
    prim: int           # primitive index, -1 for the camera
    cls: VertexClass


@dataclass
class Path:
    """A complete camera-to-light path with its generation metadata.

    f is the (delta-factored) contribution, pdf the area-measure density of
    the strategy that generated it, weight its MIS weight; C = weight * f/pdf
    is what the pre-pass accumulates. seed = (stream_id, record_index)
    relative to the pre-pass base seed.
    """

    vertices: list[PathVertex]
    pixel: tuple[float, float]
    f: np.ndarray
    pdf: float
    weight: float
    signature: str
    seed: tuple[int, int]

    @property
    def C(self) -> np.ndarray:
        return self.weight * self.f / self.pdf

    @property
    def scalar_C(self) -> float:
        return scalar_contribution(self.C)


@dataclass
class PartitionBuffer:
    """All recorded paths of one interaction signature, in schedule order.

    Records run sample-major (pass, then pixel, then intra-trace order), so
    the first half is a spatially fair subset: gamma sums the first half and
    drives partition selection, the second half feeds normalization and chain
    initialization.
    """

    signature: str
    C: np.ndarray        # (n, 3)
    scalar: np.ndarray   # (n,)
    px: np.ndarray       # (n,) continuous pixel x
    py: np.ndarray       # (n,)
    stream: np.ndarray   # (n,) int64 replay stream ids
    rec: np.ndarray      # (n,) int32 intra-trace record index
    gamma: float = field(default=0.0)

    def __len__(self) -> int:
        return self.C.shape[0]

    def first_half(self) -> slice:
        return slice(0, len(self) // 2)

    def second_half(self) -> slice:
        return slice(len(self) // 2, len(self))


@dataclass
class GBuffer:
    """Per-pixel attributes of the first non-specular vertex.

    Normals are oriented toward the camera path; gcam is the camera-segment
    geometry term G(x0<->x1); sidx the vertex index of the first non-specular
    hit; zdepth its distance to the camera (used as the denoiser's depth
    edge); valid marks pixels the pre-pass actually touched.
    """

    pos: np.ndarray     # (H, W, 3)
    nrm: np.ndarray     # (H, W, 3)
    alb: np.ndarray     # (H, W, 3)
    gcam: np.ndarray    # (H, W)
    sidx: np.ndarray    # (H, W) int32
    zdepth: np.ndarray  # (H, W)
    valid: np.ndarray   # (H, W) uint8

    @classmethod
    def empty(cls, width: int, height: int) -> "GBuffer":
        return cls(
            pos=np.zeros((height, width, 3)),
            nrm=np.zeros((height, width, 3)),
            alb=np.zeros((height, width, 3)),
            gcam=np.zeros((height, width)),
            sidx=np.full((height, width), -1, dtype=np.int32),
            zdepth=np.zeros((height, width)),
            valid=np.zeros((height, width), dtype=np.uint8),
        )


@dataclass
class PrepassResult:
    census: dict[str, PartitionBuffer]
    gbuffer: GBuffer
    splats: dict[str, np.ndarray]   # per-signature (H, W, 3) contribution sums
    total_splat: np.ndarray
    n_samples: int                  # total camera samples traced
    paths_per_pixel: int
    seed: int
    max_depth: int

    def splat_image_mean(self) -> np.ndarray:
        """Mean per-pixel contribution, comparable to a path-traced render."""
        return self.total_splat / self.paths_per_pixel


# ---------------------------------------------------------------------------
# tracing wrappers
# ---------------------------------------------------------------------------

def _alloc_path_arrays():
    return (np.zeros((kernels.MAXV, 3)), np.zeros((kernels.MAXV, 3)),
            np.zeros(kernels.MAXV, dtype=np.int32),
            np.zeros(kernels.MAXV, dtype=np.int32),
            np.zeros(kernels.MAXV, dtype=np.uint8))


def _materialize(scene, vp, vn, vmat, vprim, vcls, nv, px, py,
                 f, pdf, w, stream_id, rec_idx) -> Path:
    verts = [PathVertex(vp[j].copy(), vn[j].copy(), int(vmat[j]), int(vprim[j]),
                        VertexClass(int(vcls[j]))) for j in range(nv)]
    sig = "".join(_CLS_CHARS[int(vcls[j])] for j in range(nv))
    return Path(vertices=verts, pixel=(float(px), float(py)),
                f=np.asarray(f, dtype=np.float64), pdf=float(pdf),
                weight=float(w), signature=sig,
                seed=(int(stream_id), int(rec_idx)))


def trace_path(scene: Scene, pixel: tuple[int, int], stream: RandomStream,
               max_depth: int = 12) -> list[Path]:
    """Trace one camera sample through the given pixel; return every completed
    path (the BSDF-walk hit plus one NEE connection per diffuse bounce).

    Tracing consumes only the stream's (seed, stream_id): re-tracing with the
    same pair reproduces identical paths.
    """
    sc = scene.flat()
    maxrec = 2 * max_depth + 2
    rsig = np.zeros(maxrec, dtype=np.int64)
    rC = np.zeros((maxrec, 3))
    rP = np.zeros(maxrec)
    rW = np.zeros(maxrec)
    vp, vn, vmat, vprim, vcls = _alloc_path_arrays()
    res = kernels.trace_one(sc, float(pixel[0]), float(pixel[1]), 1.0, 1.0,
                            stream.seed, stream.stream_id, max_depth,
                            rsig, rC, rP, rW, -1, vp, vn, vmat, vprim, vcls)
    nrec = res[0]
    paths = []
    for r in range(nrec):
        res_r = kernels.trace_one(sc, float(pixel[0]), float(pixel[1]), 1.0, 1.0,
                                  stream.seed, stream.stream_id, max_depth,
                                  rsig, rC, rP, rW, r, vp, vn, vmat, vprim, vcls)
        nv = res_r[1]
        f = kernels.path_f_eval(sc, vp, vn, vmat, vprim, nv, False)
        paths.append(_materialize(scene, vp, vn, vmat, vprim, vcls, nv,
                                  res_r[2], res_r[3], f, rP[r], rW[r],
                                  stream.stream_id, r))
    return paths


def replay_record(scene: Scene, seed: int, stream_id: int, rec_idx: int,
                  max_depth: int = 12) -> Path | None:
    """Reconstruct a recorded path from its replay key."""
    sc = scene.flat()
    maxrec = 2 * max_depth + 2
    rsig = np.zeros(maxrec, dtype=np.int64)
    rC = np.zeros((maxrec, 3))
    rP = np.zeros(maxrec)
    rW = np.zeros(maxrec)
    vp, vn, vmat, vprim, vcls = _alloc_path_arrays()
    npix = scene.camera.width * scene.camera.height
    pix = stream_id % npix
    ix = pix % scene.camera.width
    iy = pix // scene.camera.width
    res = kernels.trace_one(sc, float(ix), float(iy), 1.0, 1.0,
                            seed, stream_id, max_depth,
                            rsig, rC, rP, rW, rec_idx, vp, vn, vmat, vprim, vcls)
    if rec_idx >= res[0]:
        return None
    nv = res[1]
    f = kernels.path_f_eval(sc, vp, vn, vmat, vprim, nv, False)
    return _materialize(scene, vp, vn, vmat, vprim, vcls, nv, res[2], res[3],
                        f, rP[rec_idx], rW[rec_idx], stream_id, rec_idx)


# ---------------------------------------------------------------------------
# contribution evaluation (plain Python; the oracle side of the tracer)
# ---------------------------------------------------------------------------

def _unit(v):
    return v / np.linalg.norm(v)


def _bsdf_factor_py(scene: Scene, vertex: PathVertex, w_in, w_out) -> float:
    """Scalar BSDF factor at a vertex (albedo excluded); mirrors the
    delta-factored convention of the tracer."""
    sc = scene.flat()
    kind = int(sc.mat_kind[vertex.material])
    n = vertex.normal
    if kind == KIND_GLASS:
        ior = float(sc.mat_ior[vertex.material])
        cos_raw = -float(w_in @ n)
        if cos_raw >= 0:
            eta_rel, nn, cos_i = ior, n, cos_raw
        else:
            eta_rel, nn, cos_i = 1.0 / ior, -n, -cos_raw
        sin2_t = (1.0 - cos_i * cos_i) / (eta_rel * eta_rel)
        cos_o = float(w_out @ nn)
        if abs(cos_o) < 1e-12:
            return 0.0
        refl = w_in - 2.0 * float(w_in @ nn) * nn
        if sin2_t >= 1.0:
            r_coef, cos_t = 1.0, 0.0
        else:
            cos_t = math.sqrt(1.0 - sin2_t)
            rs = (cos_i - eta_rel * cos_t) / (cos_i + eta_rel * cos_t)
            rp = (eta_rel * cos_i - cos_t) / (eta_rel * cos_i + cos_t)
            r_coef = 0.5 * (rs * rs + rp * rp)
        if float(refl @ w_out) > 1.0 - 1e-9:
            return r_coef / abs(cos_o)
        if r_coef >= 1.0:
            return 0.0
        tdir = _unit(w_in / eta_rel + (cos_i / eta_rel - cos_t) * nn)
        if float(tdir @ w_out) > 1.0 - 1e-9:
            return (1.0 - r_coef) / abs(cos_o)
        return 0.0
    if float(n @ w_in) > 0:
        n = -n
    cos_i = -float(w_in @ n)
    cos_o = float(w_out @ n)
    if kind == KIND_DIFFUSE:
        if cos_i <= 1e-12 or cos_o <= 1e-12:
            return 0.0
        return 1.0 / math.pi
    if abs(cos_o) < 1e-12:
        return 0.0
    refl = w_in - 2.0 * float(w_in @ n) * n
    if float(refl @ w_out) > 1.0 - 1e-9:
        return 1.0 / abs(cos_o)
    return 0.0


def _seg(path: Path, k: int):
    """Unit direction and squared length of segment k -> k+1."""
    d = path.vertices[k + 1].position - path.vertices[k].position
    d2 = float(d @ d)
    return d / math.sqrt(d2), d2


def _geom(path: Path, k: int, scene: Scene, check_vis: bool) -> float:
    w, d2 = _seg(path, k)
    cos_a = abs(float(w @ path.vertices[k].normal))
    cos_b = abs(float(w @ path.vertices[k + 1].normal))
    if check_vis and not scene.visible(path.vertices[k].position,
                                       path.vertices[k + 1].position):
        return 0.0
    return cos_a * cos_b / d2


def _camera_g(path: Path, scene: Scene, check_vis: bool) -> float:
    w, d2 = _seg(path, 0)
    cos_c = float(w @ scene.camera.forward)
    cos_1 = abs(float(w @ path.vertices[1].normal))
    if cos_c <= 0:
        return 0.0
    if check_vis and not scene.visible(path.vertices[0].position,
                                       path.vertices[1].position):
        return 0.0
    return cos_c * cos_1 / d2


def _emission(path: Path, scene: Scene) -> np.ndarray:
    last = path.vertices[-1]
    if last.prim < 0:
        return np.zeros(3)
    w, _ = _seg(path, len(path.vertices) - 2)
    if -float(w @ last.normal) <= 0:  # lit from the back
        return np.zeros(3)
    return scene.flat().prim_emit[last.prim].copy()


def path_contribution(path: Path, scene: Scene, check_visibility: bool = True) -> np.ndarray:
    """Full contribution: G(x0<->x1) * prod[fr_k G_k] * Le, zero on occlusion."""
    sc = scene.flat()
    nv = len(path.vertices)
    f = np.full(3, _camera_g(path, scene, check_visibility))
    for k in range(1, nv - 1):
        w_in, _ = _seg(path, k - 1)
        w_out, _ = _seg(path, k)
        fac = _bsdf_factor_py(scene, path.vertices[k], w_in, w_out)
        if fac == 0.0:
            return np.zeros(3)
        g = _geom(path, k, scene, check_visibility)
        if g == 0.0:
            return np.zeros(3)
        f = f * sc.mat_albedo[path.vertices[k].material] * fac * g
    return f * _emission(path, scene)


def prefix_contribution(path: Path, s: int, scene: Scene) -> np.ndarray:
    """S = G(x0<->x1) * prod_{k=1}^{s-1}[fr_k G_k] * fr(x_{s-1}->x_s->x_{s+1}).

    Paired with suffix_contribution so S * alpha reproduces the full
    contribution exactly.
    """
    nv = len(path.vertices)
    if not 1 <= s <= nv - 2:
        raise ValueError(f"reconnection index {s} out of range for {nv} vertices")
    sc = scene.flat()
    f = np.full(3, _camera_g(path, scene, False))
    for k in range(1, s):
        w_in, _ = _seg(path, k - 1)
        w_out, _ = _seg(path, k)
        fac = _bsdf_factor_py(scene, path.vertices[k], w_in, w_out)
        f = f * sc.mat_albedo[path.vertices[k].material] * fac * _geom(path, k, scene, False)
    w_in, _ = _seg(path, s - 1)
    w_out, _ = _seg(path, s)
    fac = _bsdf_factor_py(scene, path.vertices[s], w_in, w_out)
    return f * sc.mat_albedo[path.vertices[s].material] * fac


def suffix_contribution(path: Path, s: int, scene: Scene) -> np.ndarray:
    """alpha = G(x_s<->x_{s+1}) * prod_{k=s+1}^{M-1}[fr_k G_k] * Le."""
    nv = len(path.vertices)
    if not 1 <= s <= nv - 2:
        raise ValueError(f"reconnection index {s} out of range for {nv} vertices")
    sc = scene.flat()
    f = np.full(3, _geom(path, s, scene, True))
    for k in range(s + 1, nv - 1):
        w_in, _ = _seg(path, k - 1)
        w_out, _ = _seg(path, k)
        fac = _bsdf_factor_py(scene, path.vertices[k], w_in, w_out)
        f = f * sc.mat_albedo[path.vertices[k].material] * fac * _geom(path, k, scene, True)
    return f * _emission(path, scene)


# ---------------------------------------------------------------------------
# the pre-pass
# ---------------------------------------------------------------------------

def run_prepass(scene: Scene, paths_per_pixel: int, seed: int,
                max_depth: int = 12) -> PrepassResult:
    """Trace paths_per_pixel full-image passes, bucketing completed paths by
    signature and splatting their contributions per signature.

    Record order within each buffer is sample-major (pass, pixel, intra-trace
    index): deterministic for a fixed seed, and the count-based half split
    lands on a spatially fair boundary.
    """
    if paths_per_pixel < 2:
        raise ValueError("paths_per_pixel must be >= 2 (the half split needs both halves)")
    sc = scene.flat()
    w, h = sc.width, sc.height
    npix = w * h
    maxrec = 2 * max_depth + 2

    rec_sig = np.zeros((npix, maxrec), dtype=np.int64)
    rec_C = np.zeros((npix, maxrec, 3))
    rec_p = np.zeros((npix, maxrec))
    rec_w = np.zeros((npix, maxrec))
    rec_n = np.zeros(npix, dtype=np.int32)
    rec_px = np.zeros(npix)
    rec_py = np.zeros(npix)

    gb = GBuffer.empty(w, h)

    sig_chunks: list[np.ndarray] = []
    C_chunks: list[np.ndarray] = []
    px_chunks: list[np.ndarray] = []
    py_chunks: list[np.ndarray] = []
    stream_chunks: list[np.ndarray] = []
    rec_chunks: list[np.ndarray] = []

    splats: dict[int, np.ndarray] = {}
    total_splat = np.zeros((h, w, 3))

    pix_ids = np.arange(npix, dtype=np.int64)
    for s in range(paths_per_pixel):
        kernels.prepass_pass(sc, s, seed, max_depth,
                             rec_sig, rec_C, rec_p, rec_w, rec_n, rec_px, rec_py,
                             1 if s == 0 else 0,
                             gb.pos, gb.nrm, gb.alb, gb.gcam, gb.sidx,
                             gb.zdepth, gb.valid)
        counts = rec_n.astype(np.int64)
        mask = np.arange(maxrec)[None, :] < counts[:, None]
        sig_chunks.append(rec_sig[mask])
        C_chunks.append(rec_C[mask])
        n_per = mask.sum(axis=1)
        px_chunks.append(np.repeat(rec_px, n_per))
        py_chunks.append(np.repeat(rec_py, n_per))
        stream_chunks.append(np.repeat(s * npix + pix_ids, n_per))
        rec_chunks.append(
            np.concatenate([np.arange(c, dtype=np.int32) for c in counts])
            if counts.sum() else np.zeros(0, dtype=np.int32))

        # per-signature splat accumulation for this pass
        sigs = sig_chunks[-1]
        Cs = C_chunks[-1]
        ixs = np.minimum(px_chunks[-1].astype(np.int64), w - 1)
        iys = np.minimum(py_chunks[-1].astype(np.int64), h - 1)
        np.add.at(total_splat, (iys, ixs), Cs)
        for code in np.unique(sigs):
            sel = sigs == code
            img = splats.get(int(code))
            if img is None:
                img = np.zeros((h, w, 3))
                splats[int(code)] = img
            np.add.at(img, (iys[sel], ixs[sel]), Cs[sel])

    all_sig = np.concatenate(sig_chunks) if sig_chunks else np.zeros(0, dtype=np.int64)
    all_C = np.concatenate(C_chunks) if C_chunks else np.zeros((0, 3))
    all_px = np.concatenate(px_chunks)
    all_py = np.concatenate(py_chunks)
    all_stream = np.concatenate(stream_chunks)
    all_rec = np.concatenate(rec_chunks)
    all_scalar = (0.2126 * all_C[:, 0] + 0.7152 * all_C[:, 1] + 0.0722 * all_C[:, 2])

    census: dict[str, PartitionBuffer] = {}
    order = np.argsort(all_sig, kind="stable")  # stable: schedule order kept per sig
    sorted_sig = all_sig[order]
    bounds = np.searchsorted(sorted_sig, np.unique(all_sig))
    uniq = np.unique(all_sig)
    bounds = np.append(bounds, len(sorted_sig))
    for i, code in enumerate(uniq):
        idx = order[bounds[i]:bounds[i + 1]]
        name = sig_to_str(int(code))
        buf = PartitionBuffer(
            signature=name,
            C=all_C[idx],
            scalar=all_scalar[idx],
            px=all_px[idx],
            py=all_py[idx],
            stream=all_stream[idx],
            rec=all_rec[idx].astype(np.int32),
        )
        buf.gamma = float(buf.scalar[buf.first_half()].sum())
        census[name] = buf

    named_splats = {sig_to_str(code): img for code, img in splats.items()}
    return PrepassResult(census=census, gbuffer=gb, splats=named_splats,
                         total_splat=total_splat,
                         n_samples=npix * paths_per_pixel,
                         paths_per_pixel=paths_per_pixel, seed=seed,
                         max_depth=max_depth)
