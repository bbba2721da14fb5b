"""Compiled hot loops: ray intersection, path tracing, and chain mutations.

All functions operate on the flattened scene arrays (`Scene.flat()`), draw
randomness from the counter-based generator in `core`, and are deterministic
for a fixed (seed, stream_id): replaying a stream reproduces the identical
path. Parallel kernels only write to per-pixel slots, so output is
bit-identical regardless of thread count.

Specular vertices use the delta-factored convention: BSDF values carry
albedo * branch-probability / |cos_out| and sampling densities carry the
discrete branch probability, so contribution/density ratios stay finite and
agree with the diffuse bookkeeping. Within a partition all states share the
same delta structure, so acceptance ratios of these factored contributions
are the correct Metropolis ratios.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .core import luminance, rng_uniform

MAXV = 16          # vertex slots per path (camera + surface chain)
NEE_STOP = 0.5     # stop-and-connect probability at diffuse walk vertices
RR_START = 5       # russian roulette begins at this many surface vertices
RAY_EPS = 1e-4

CLS_E = 0
CLS_D = 1
CLS_S = 2
CLS_L = 3

SIG_LEN_SHIFT = 40  # signature code layout: length << 40 | 2-bit class list

KIND_DIFFUSE = 0
KIND_MIRROR = 1
KIND_GLASS = 2

INF = np.inf


# ---------------------------------------------------------------------------
# intersection
# ---------------------------------------------------------------------------

@njit(cache=True)
def _isect_prim(prim_kind, prim_data, i, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Ray/primitive test; returns hit distance or -1."""
    k = prim_kind[i]
    if k == 0:  # sphere
        cx = prim_data[i, 0] - ox
        cy = prim_data[i, 1] - oy
        cz = prim_data[i, 2] - oz
        r = prim_data[i, 3]
        b = cx * dx + cy * dy + cz * dz
        disc = b * b - (cx * cx + cy * cy + cz * cz - r * r)
        if disc < 0.0:
            return -1.0
        sq = np.sqrt(disc)
        t = b - sq
        if t < tmin:
            t = b + sq
        if t < tmin or t > tmax:
            return -1.0
        return t
    # parallelogram (k == 1) or triangle (k == 2), Moller-Trumbore
    hx = dy * prim_data[i, 8] - dz * prim_data[i, 7]
    hy = dz * prim_data[i, 6] - dx * prim_data[i, 8]
    hz = dx * prim_data[i, 7] - dy * prim_data[i, 6]
    det = prim_data[i, 3] * hx + prim_data[i, 4] * hy + prim_data[i, 5] * hz
    if np.abs(det) < 1e-14:
        return -1.0
    inv = 1.0 / det
    sx = ox - prim_data[i, 0]
    sy = oy - prim_data[i, 1]
    sz = oz - prim_data[i, 2]
    u = (sx * hx + sy * hy + sz * hz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = sy * prim_data[i, 5] - sz * prim_data[i, 4]
    qy = sz * prim_data[i, 3] - sx * prim_data[i, 5]
    qz = sx * prim_data[i, 4] - sy * prim_data[i, 3]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0:
        return -1.0
    if k == 1:
        if v > 1.0:
            return -1.0
    else:
        if u + v > 1.0:
            return -1.0
    t = (prim_data[i, 6] * qx + prim_data[i, 7] * qy + prim_data[i, 8] * qz) * inv
    if t < tmin or t > tmax:
        return -1.0
    return t


@njit(cache=True)
def intersect_ray_brute(sc, ox, oy, oz, dx, dy, dz, tmin, tmax):
    best_t = tmax
    best = -1
    for i in range(sc.prim_kind.shape[0]):
        t = _isect_prim(sc.prim_kind, sc.prim_data, i, ox, oy, oz, dx, dy, dz,
                        tmin, best_t)
        if t > 0.0:
            best_t = t
            best = i
    return best_t, best


@njit(cache=True)
def _slab_hit(node_min, node_max, n, ox, oy, oz, ix, iy, iz, tmax):
    t0 = (node_min[n, 0] - ox) * ix
    t1 = (node_max[n, 0] - ox) * ix
    if t0 > t1:
        t0, t1 = t1, t0
    u0 = (node_min[n, 1] - oy) * iy
    u1 = (node_max[n, 1] - oy) * iy
    if u0 > u1:
        u0, u1 = u1, u0
    if u0 > t0:
        t0 = u0
    if u1 < t1:
        t1 = u1
    v0 = (node_min[n, 2] - oz) * iz
    v1 = (node_max[n, 2] - oz) * iz
    if v0 > v1:
        v0, v1 = v1, v0
    if v0 > t0:
        t0 = v0
    if v1 < t1:
        t1 = v1
    return t0 <= t1 and t1 >= 0.0 and t0 <= tmax


@njit(cache=True)
def intersect_ray(sc, ox, oy, oz, dx, dy, dz, tmin, tmax):
    """Nearest hit via BVH traversal; returns (t, prim_id), id -1 on miss."""
    if sc.prim_kind.shape[0] == 0:
        return tmax, -1
    ix = 1.0 / dx if dx != 0.0 else INF
    iy = 1.0 / dy if dy != 0.0 else INF
    iz = 1.0 / dz if dz != 0.0 else INF
    stack = np.empty(64, dtype=np.int32)
    stack[0] = 0
    sp = 1
    best_t = tmax
    best = -1
    while sp > 0:
        sp -= 1
        n = stack[sp]
        if not _slab_hit(sc.node_min, sc.node_max, n, ox, oy, oz, ix, iy, iz, best_t):
            continue
        cnt = sc.node_count[n]
        if cnt > 0:
            first = sc.node_left[n]
            for j in range(cnt):
                pid = sc.prim_order[first + j]
                t = _isect_prim(sc.prim_kind, sc.prim_data, pid,
                                ox, oy, oz, dx, dy, dz, tmin, best_t)
                if t > 0.0:
                    best_t = t
                    best = pid
        else:
            stack[sp] = sc.node_left[n]
            sp += 1
            stack[sp] = sc.node_right[n]
            sp += 1
    return best_t, best


@njit(cache=True)
def prim_normal_at(sc, pid, px, py, pz):
    """Canonical geometric unit normal at a surface point (never flipped)."""
    if sc.prim_kind[pid] == 0:
        r = sc.prim_data[pid, 3]
        return ((px - sc.prim_data[pid, 0]) / r,
                (py - sc.prim_data[pid, 1]) / r,
                (pz - sc.prim_data[pid, 2]) / r)
    return sc.prim_norm[pid, 0], sc.prim_norm[pid, 1], sc.prim_norm[pid, 2]


@njit(cache=True)
def visible(sc, ax, ay, az, bx, by, bz):
    dx = bx - ax
    dy = by - ay
    dz = bz - az
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    if dist < 2.0 * RAY_EPS:
        return True
    inv = 1.0 / dist
    t, pid = intersect_ray(sc, ax, ay, az, dx * inv, dy * inv, dz * inv,
                           RAY_EPS, dist - RAY_EPS)
    return pid < 0


# ---------------------------------------------------------------------------
# sampling helpers and BSDF factors
# ---------------------------------------------------------------------------

@njit(cache=True)
def _onb(nx, ny, nz):
    if np.abs(nx) > 0.9:
        tx, ty, tz = 0.0, 1.0, 0.0
    else:
        tx, ty, tz = 1.0, 0.0, 0.0
    bx = ny * tz - nz * ty
    by = nz * tx - nx * tz
    bz = nx * ty - ny * tx
    bl = 1.0 / np.sqrt(bx * bx + by * by + bz * bz)
    bx *= bl
    by *= bl
    bz *= bl
    cx = ny * bz - nz * by
    cy = nz * bx - nx * bz
    cz = nx * by - ny * bx
    return bx, by, bz, cx, cy, cz


@njit(cache=True)
def cosine_sample(nx, ny, nz, u1, u2):
    """Cosine-weighted direction about the normal; pdf is cos/pi."""
    bx, by, bz, cx, cy, cz = _onb(nx, ny, nz)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    x = r * np.cos(phi)
    y = r * np.sin(phi)
    z = np.sqrt(max(0.0, 1.0 - u1))
    return (x * bx + y * cx + z * nx,
            x * by + y * cy + z * ny,
            x * bz + y * cz + z * nz)


@njit(cache=True)
def fresnel_dielectric(cos_i, eta_rel):
    """Unpolarized Fresnel reflectance; eta_rel = n_transmitted / n_incident.

    Returns (R, cos_t); cos_t is 0 under total internal reflection (R = 1).
    """
    sin2_t = (1.0 - cos_i * cos_i) / (eta_rel * eta_rel)
    if sin2_t >= 1.0:
        return 1.0, 0.0
    cos_t = np.sqrt(1.0 - sin2_t)
    rs = (cos_i - eta_rel * cos_t) / (cos_i + eta_rel * cos_t)
    rp = (eta_rel * cos_i - cos_t) / (eta_rel * cos_i + cos_t)
    return 0.5 * (rs * rs + rp * rp), cos_t


@njit(cache=True)
def _reflect(dx, dy, dz, nx, ny, nz):
    d = 2.0 * (dx * nx + dy * ny + dz * nz)
    return dx - d * nx, dy - d * ny, dz - d * nz


@njit(cache=True)
def _glass_eval(sc, mat, gnx, gny, gnz, wix, wiy, wiz, wox, woy, woz):
    """(branch probability, factored BSDF value) for a glass vertex.

    wi points into the vertex, wo away from it; gn is the canonical normal.
    Returns (0, 0) when wo matches neither the reflected nor the refracted
    branch of wi.
    """
    cos_raw = -(wix * gnx + wiy * gny + wiz * gnz)
    if cos_raw >= 0.0:
        eta_rel = sc.mat_ior[mat]        # entering
        nx, ny, nz = gnx, gny, gnz
        cos_i = cos_raw
    else:
        eta_rel = 1.0 / sc.mat_ior[mat]  # exiting
        nx, ny, nz = -gnx, -gny, -gnz
        cos_i = -cos_raw
    R, cos_t = fresnel_dielectric(cos_i, eta_rel)
    cos_o = wox * nx + woy * ny + woz * nz
    if np.abs(cos_o) < 1e-12:
        return 0.0, 0.0
    rx, ry, rz = _reflect(wix, wiy, wiz, nx, ny, nz)
    if rx * wox + ry * woy + rz * woz > 1.0 - 1e-9:
        return R, R / np.abs(cos_o)
    if R >= 1.0:
        return 0.0, 0.0
    inv_eta = 1.0 / eta_rel
    tx = inv_eta * wix + (inv_eta * cos_i - cos_t) * nx
    ty = inv_eta * wiy + (inv_eta * cos_i - cos_t) * ny
    tz = inv_eta * wiz + (inv_eta * cos_i - cos_t) * nz
    tl = 1.0 / np.sqrt(tx * tx + ty * ty + tz * tz)
    if (tx * wox + ty * woy + tz * woz) * tl > 1.0 - 1e-9:
        return 1.0 - R, (1.0 - R) / np.abs(cos_o)
    return 0.0, 0.0


@njit(cache=True)
def bsdf_factor(sc, mat, gnx, gny, gnz, wix, wiy, wiz, wox, woy, woz):
    """Scalar BSDF factor (albedo excluded); 0 when the pairing is invalid."""
    kind = sc.mat_kind[mat]
    if kind == KIND_GLASS:
        _, val = _glass_eval(sc, mat, gnx, gny, gnz, wix, wiy, wiz, wox, woy, woz)
        return val
    # orient the normal against the incoming direction
    if gnx * wix + gny * wiy + gnz * wiz > 0.0:
        gnx = -gnx
        gny = -gny
        gnz = -gnz
    cos_i = -(wix * gnx + wiy * gny + wiz * gnz)
    cos_o = wox * gnx + woy * gny + woz * gnz
    if kind == KIND_DIFFUSE:
        if cos_i <= 1e-12 or cos_o <= 1e-12:
            return 0.0
        return 1.0 / np.pi
    # mirror
    if np.abs(cos_o) < 1e-12:
        return 0.0
    rx, ry, rz = _reflect(wix, wiy, wiz, gnx, gny, gnz)
    if rx * wox + ry * woy + rz * woz > 1.0 - 1e-9:
        return 1.0 / np.abs(cos_o)
    return 0.0


@njit(cache=True)
def sample_light_point(sc, u1, u2, u3):
    """Area-weighted uniform point on the emissive primitives.

    Returns (prim_id, px, py, pz, nx, ny, nz); the density is 1/total area.
    """
    nl = sc.light_prims.shape[0]
    lo = 0
    hi = nl - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if sc.light_cdf[mid] < u1:
            lo = mid + 1
        else:
            hi = mid
    pid = sc.light_prims[lo]
    if sc.prim_kind[pid] == 0:
        z = 1.0 - 2.0 * u2
        r = np.sqrt(max(0.0, 1.0 - z * z))
        phi = 2.0 * np.pi * u3
        nx = r * np.cos(phi)
        ny = r * np.sin(phi)
        nz = z
        rad = sc.prim_data[pid, 3]
        return (pid,
                sc.prim_data[pid, 0] + rad * nx,
                sc.prim_data[pid, 1] + rad * ny,
                sc.prim_data[pid, 2] + rad * nz,
                nx, ny, nz)
    u = u2
    v = u3
    if sc.prim_kind[pid] == 2 and u + v > 1.0:  # fold onto the triangle
        u = 1.0 - u
        v = 1.0 - v
    px = sc.prim_data[pid, 0] + u * sc.prim_data[pid, 3] + v * sc.prim_data[pid, 6]
    py = sc.prim_data[pid, 1] + u * sc.prim_data[pid, 4] + v * sc.prim_data[pid, 7]
    pz = sc.prim_data[pid, 2] + u * sc.prim_data[pid, 5] + v * sc.prim_data[pid, 8]
    return (pid, px, py, pz,
            sc.prim_norm[pid, 0], sc.prim_norm[pid, 1], sc.prim_norm[pid, 2])


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@njit(cache=True)
def camera_dir(sc, px, py):
    x = (px - sc.width / 2.0) / sc.f_img
    y = (sc.height / 2.0 - py) / sc.f_img
    dx = sc.cam_fwd[0] + x * sc.cam_right[0] + y * sc.cam_up[0]
    dy = sc.cam_fwd[1] + x * sc.cam_right[1] + y * sc.cam_up[1]
    dz = sc.cam_fwd[2] + x * sc.cam_right[2] + y * sc.cam_up[2]
    inv = 1.0 / np.sqrt(dx * dx + dy * dy + dz * dz)
    return dx * inv, dy * inv, dz * inv


@njit(cache=True)
def camera_project(sc, px, py, pz):
    """World point -> continuous pixel; (-1e30, -1e30) if behind the camera."""
    dx = px - sc.cam_pos[0]
    dy = py - sc.cam_pos[1]
    dz = pz - sc.cam_pos[2]
    t = dx * sc.cam_fwd[0] + dy * sc.cam_fwd[1] + dz * sc.cam_fwd[2]
    if t <= 0.0:
        return -1e30, -1e30
    u = (dx * sc.cam_right[0] + dy * sc.cam_right[1] + dz * sc.cam_right[2]) / t
    v = (dx * sc.cam_up[0] + dy * sc.cam_up[1] + dz * sc.cam_up[2]) / t
    return u * sc.f_img + sc.width / 2.0, sc.height / 2.0 - v * sc.f_img


@njit(cache=True)
def camera_jacobian(sc, x1x, x1y, x1z, n1x, n1y, n1z):
    """|dA(x1)/dpixel|: surface area at the first hit per unit pixel area.

    Image-plane perturbations propose in pixel units while the target density
    lives in the area measure; this Jacobian converts between them in the
    acceptance ratio.
    """
    dx = x1x - sc.cam_pos[0]
    dy = x1y - sc.cam_pos[1]
    dz = x1z - sc.cam_pos[2]
    d2 = dx * dx + dy * dy + dz * dz
    dist = np.sqrt(d2)
    cx = (dx * sc.cam_fwd[0] + dy * sc.cam_fwd[1] + dz * sc.cam_fwd[2]) / dist
    c1 = np.abs(dx * n1x + dy * n1y + dz * n1z) / dist
    if c1 < 1e-12 or cx < 1e-12:
        return 0.0
    return cx * cx * cx * d2 / (sc.f_img * sc.f_img * c1)


# ---------------------------------------------------------------------------
# full-path contribution and walk density
# ---------------------------------------------------------------------------

@njit(cache=True)
def path_f_eval(sc, vp, vn, vmat, vprim, nv, check_visibility):
    """Contribution f of a complete camera-to-light path (delta-factored).

    Vertex 0 is the camera (its "normal" slot holds the forward axis); the
    last vertex must lie on an emissive primitive and be lit from its front
    side. Returns (0,0,0) whenever any factor vanishes, including failed
    shadow rays when check_visibility is set.
    """
    # camera segment
    dx = vp[1, 0] - vp[0, 0]
    dy = vp[1, 1] - vp[0, 1]
    dz = vp[1, 2] - vp[0, 2]
    d2 = dx * dx + dy * dy + dz * dz
    if d2 <= 0.0:
        return 0.0, 0.0, 0.0
    dist = np.sqrt(d2)
    wx = dx / dist
    wy = dy / dist
    wz = dz / dist
    cos_c = wx * sc.cam_fwd[0] + wy * sc.cam_fwd[1] + wz * sc.cam_fwd[2]
    cos_1 = np.abs(wx * vn[1, 0] + wy * vn[1, 1] + wz * vn[1, 2])
    if cos_c <= 0.0:
        return 0.0, 0.0, 0.0
    if check_visibility and not visible(sc, vp[0, 0], vp[0, 1], vp[0, 2],
                                        vp[1, 0], vp[1, 1], vp[1, 2]):
        return 0.0, 0.0, 0.0
    fr = cos_c * cos_1 / d2
    fg = fr
    fb = fr
    pwx, pwy, pwz = wx, wy, wz  # incoming direction at the current vertex
    for k in range(1, nv - 1):
        dx = vp[k + 1, 0] - vp[k, 0]
        dy = vp[k + 1, 1] - vp[k, 1]
        dz = vp[k + 1, 2] - vp[k, 2]
        d2 = dx * dx + dy * dy + dz * dz
        if d2 <= 0.0:
            return 0.0, 0.0, 0.0
        dist = np.sqrt(d2)
        wx = dx / dist
        wy = dy / dist
        wz = dz / dist
        fac = bsdf_factor(sc, vmat[k], vn[k, 0], vn[k, 1], vn[k, 2],
                          pwx, pwy, pwz, wx, wy, wz)
        if fac == 0.0:
            return 0.0, 0.0, 0.0
        cos_a = np.abs(wx * vn[k, 0] + wy * vn[k, 1] + wz * vn[k, 2])
        cos_b = np.abs(wx * vn[k + 1, 0] + wy * vn[k + 1, 1] + wz * vn[k + 1, 2])
        if check_visibility and not visible(sc, vp[k, 0], vp[k, 1], vp[k, 2],
                                            vp[k + 1, 0], vp[k + 1, 1], vp[k + 1, 2]):
            return 0.0, 0.0, 0.0
        g = cos_a * cos_b / d2
        m = vmat[k]
        fr *= sc.mat_albedo[m, 0] * fac * g
        fg *= sc.mat_albedo[m, 1] * fac * g
        fb *= sc.mat_albedo[m, 2] * fac * g
        pwx, pwy, pwz = wx, wy, wz
    last = nv - 1
    pid = vprim[last]
    if pid < 0:
        return 0.0, 0.0, 0.0
    # one-sided emission: the arriving direction must see the front face
    front = -(pwx * vn[last, 0] + pwy * vn[last, 1] + pwz * vn[last, 2])
    if front <= 0.0:
        return 0.0, 0.0, 0.0
    return (fr * sc.prim_emit[pid, 0],
            fg * sc.prim_emit[pid, 1],
            fb * sc.prim_emit[pid, 2])


@njit(cache=True)
def bsdfwalk_pdf(sc, vp, vn, vmat, vprim, nv, max_depth):
    """Density of generating this exact path with the regeneration walk.

    The walk starts at a uniformly random image position (density 1/(W*H)
    per unit pixel area) and extends by BSDF sampling with russian roulette.
    At each diffuse vertex it stops-and-connects to a light sample with
    probability NEE_STOP; otherwise it continues and completes at its first
    front-side emissive hit. The final segment's density is therefore the
    mixture of the connection branch and the BSDF branch. Paths outside the
    walk's support get density 0.
    """
    if nv - 1 > max_depth or nv < 2:
        return 0.0
    px, py = camera_project(sc, vp[1, 0], vp[1, 1], vp[1, 2])
    if px < 0.0 or px >= sc.width or py < 0.0 or py >= sc.height:
        return 0.0
    dx = vp[1, 0] - vp[0, 0]
    dy = vp[1, 1] - vp[0, 1]
    dz = vp[1, 2] - vp[0, 2]
    d2 = dx * dx + dy * dy + dz * dz
    dist = np.sqrt(d2)
    wx = dx / dist
    wy = dy / dist
    wz = dz / dist
    cos_c = wx * sc.cam_fwd[0] + wy * sc.cam_fwd[1] + wz * sc.cam_fwd[2]
    cos_1 = np.abs(wx * vn[1, 0] + wy * vn[1, 1] + wz * vn[1, 2])
    if cos_c <= 0.0 or cos_1 <= 0.0:
        return 0.0
    p = (1.0 / (sc.width * sc.height)) \
        * (sc.f_img * sc.f_img / (cos_c * cos_c * cos_c)) * cos_1 / d2
    twr = 1.0
    twg = 1.0
    twb = 1.0
    pwx, pwy, pwz = wx, wy, wz
    last = nv - 1
    for k in range(1, last):
        pid = vprim[k]
        # the walk completes at front-side emissive hits, so interior ones
        # are outside its support
        front = -(pwx * vn[k, 0] + pwy * vn[k, 1] + pwz * vn[k, 2])
        if front > 0.0 and (sc.prim_emit[pid, 0] > 0.0 or sc.prim_emit[pid, 1] > 0.0
                            or sc.prim_emit[pid, 2] > 0.0):
            return 0.0
        tw_max = max(twr, max(twg, twb))
        q = 1.0 if k < RR_START else min(1.0, tw_max)
        if q <= 0.0:
            return 0.0
        dx = vp[k + 1, 0] - vp[k, 0]
        dy = vp[k + 1, 1] - vp[k, 1]
        dz = vp[k + 1, 2] - vp[k, 2]
        d2 = dx * dx + dy * dy + dz * dz
        dist = np.sqrt(d2)
        wx = dx / dist
        wy = dy / dist
        wz = dz / dist
        m = vmat[k]
        kind = sc.mat_kind[m]
        cos_b = np.abs(wx * vn[k + 1, 0] + wy * vn[k + 1, 1] + wz * vn[k + 1, 2])
        # BSDF-branch density of this segment
        if kind == KIND_DIFFUSE:
            gnx, gny, gnz = vn[k, 0], vn[k, 1], vn[k, 2]
            if gnx * pwx + gny * pwy + gnz * pwz > 0.0:
                gnx = -gnx
                gny = -gny
                gnz = -gnz
            cos_o = wx * gnx + wy * gny + wz * gnz
            pdf_w = cos_o / np.pi if cos_o > 1e-12 else 0.0
        elif kind == KIND_MIRROR:
            pdf_w = 1.0 if bsdf_factor(sc, m, vn[k, 0], vn[k, 1], vn[k, 2],
                                       pwx, pwy, pwz, wx, wy, wz) > 0.0 else 0.0
        else:
            prob, _ = _glass_eval(sc, m, vn[k, 0], vn[k, 1], vn[k, 2],
                                  pwx, pwy, pwz, wx, wy, wz)
            pdf_w = prob
        p_bsdf = q * pdf_w * cos_b / d2
        if k == last - 1:
            # final segment: mixture of stop-and-connect and BSDF branches
            p_conn = 0.0
            if kind == KIND_DIFFUSE and sc.light_area > 0.0:
                p_conn = NEE_STOP / sc.light_area
                p_bsdf *= 1.0 - NEE_STOP
            p_seg = p_bsdf + p_conn
            if p_seg <= 0.0:
                return 0.0
            p *= p_seg
        else:
            if pdf_w <= 0.0:
                return 0.0
            if kind == KIND_DIFFUSE:
                p_bsdf *= 1.0 - NEE_STOP  # the walk chose not to connect here
            p *= p_bsdf
        twr = twr / q * sc.mat_albedo[m, 0]
        twg = twg / q * sc.mat_albedo[m, 1]
        twb = twb / q * sc.mat_albedo[m, 2]
        pwx, pwy, pwz = wx, wy, wz
    pid = vprim[last]
    front = -(pwx * vn[last, 0] + pwy * vn[last, 1] + pwz * vn[last, 2])
    if front <= 0.0:
        return 0.0
    if sc.prim_emit[pid, 0] <= 0.0 and sc.prim_emit[pid, 1] <= 0.0 \
            and sc.prim_emit[pid, 2] <= 0.0:
        return 0.0
    return p


@njit(cache=True)
def sig_of_path(vcls, nv):
    code = np.int64(nv) << SIG_LEN_SHIFT
    for k in range(nv):
        code |= np.int64(vcls[k]) << np.int64(2 * k)
    return code


@njit(cache=True)
def first_nonspecular(vcls, nv):
    for k in range(1, nv):
        if vcls[k] != CLS_S:
            return k
    return nv - 1


# ---------------------------------------------------------------------------
# the tracer (pre-pass sampling, NEE + MIS, replay)
# ---------------------------------------------------------------------------

@njit(cache=True)
def trace_one(sc, px0, py0, sx, sy, seed, stream_id, max_depth,
              rec_sig, rec_C, rec_p, rec_w, want,
              out_vp, out_vn, out_vmat, out_vprim, out_vcls):
    """Trace one camera sample; record every completed path.

    The sample's image point is px0 + u*sx, py0 + v*sy with u, v drawn from
    the stream (so replay is seed-only). Each completed path appends
    (signature, C = mis_weight * f/p) to the record arrays; with want >= 0
    the want-th record's full vertex list is additionally written to the out
    arrays (the control flow and stream consumption are identical either
    way, which is what makes stored seeds replayable).

    Returns (nrec, path_nv, px, py, gb_valid, gb_x, gb_y, gb_z, gb_nx, gb_ny,
    gb_nz, gb_ar, gb_ag, gb_ab, gb_gcam, gb_sidx, gb_zdepth).
    """
    ctr = 0
    u = rng_uniform(seed, stream_id, ctr)
    ctr += 1
    v = rng_uniform(seed, stream_id, ctr)
    ctr += 1
    px = px0 + sx * u
    py = py0 + sy * v
    dx, dy, dz = camera_dir(sc, px, py)
    cos_c = dx * sc.cam_fwd[0] + dy * sc.cam_fwd[1] + dz * sc.cam_fwd[2]
    pixel_density = 1.0 / (sx * sy)

    gb_valid = 0
    gb_x = gb_y = gb_z = 0.0
    gb_nx = gb_ny = gb_nz = 0.0
    gb_ar = gb_ag = gb_ab = 0.0
    gb_gcam = 0.0
    gb_sidx = -1
    gb_zd = 0.0

    t, pid = intersect_ray(sc, sc.cam_pos[0], sc.cam_pos[1], sc.cam_pos[2],
                           dx, dy, dz, RAY_EPS, INF)
    if pid < 0:
        return (0, 0, px, py, gb_valid, gb_x, gb_y, gb_z, gb_nx, gb_ny, gb_nz,
                gb_ar, gb_ag, gb_ab, gb_gcam, gb_sidx, gb_zd)

    # vertex bookkeeping; vn holds canonical geometric normals
    cvp = np.empty((MAXV, 3), dtype=np.float64)
    cvn = np.empty((MAXV, 3), dtype=np.float64)
    cvmat = np.empty(MAXV, dtype=np.int32)
    cvprim = np.empty(MAXV, dtype=np.int32)
    cvcls = np.empty(MAXV, dtype=np.uint8)
    cvp[0, 0] = sc.cam_pos[0]
    cvp[0, 1] = sc.cam_pos[1]
    cvp[0, 2] = sc.cam_pos[2]
    cvn[0, 0] = sc.cam_fwd[0]
    cvn[0, 1] = sc.cam_fwd[1]
    cvn[0, 2] = sc.cam_fwd[2]
    cvmat[0] = -1
    cvprim[0] = -1
    cvcls[0] = CLS_E

    hx = sc.cam_pos[0] + t * dx
    hy = sc.cam_pos[1] + t * dy
    hz = sc.cam_pos[2] + t * dz
    nx, ny, nz = prim_normal_at(sc, pid, hx, hy, hz)
    cos_1 = np.abs(dx * nx + dy * ny + dz * nz)
    d2 = t * t
    g_cam = cos_c * cos_1 / d2
    fr = g_cam
    fg = g_cam
    fb = g_cam
    p = pixel_density * (sc.f_img * sc.f_img / (cos_c * cos_c * cos_c)) * cos_1 / d2
    twr = 1.0
    twg = 1.0
    twb = 1.0
    prev_pdfq = -1.0  # q * pdf_omega at the previous vertex if NEE could fire there
    sig_bits = np.int64(0)  # classes of settled vertices 0..k-1
    nrec = 0
    path_nv = 0

    k = 1
    wix, wiy, wiz = dx, dy, dz  # incoming direction at the current vertex
    seg_d2 = d2
    while True:
        cvp[k, 0] = hx
        cvp[k, 1] = hy
        cvp[k, 2] = hz
        cvn[k, 0] = nx
        cvn[k, 1] = ny
        cvn[k, 2] = nz
        m = sc.prim_mat[pid]
        cvmat[k] = m
        cvprim[k] = pid
        kind = sc.mat_kind[m]
        cls_here = CLS_D if kind == KIND_DIFFUSE else CLS_S
        cvcls[k] = cls_here

        # gbuffer: first non-specular vertex, normal flipped toward the path
        if gb_valid == 0 and kind == KIND_DIFFUSE:
            gb_valid = 1
            gb_x = hx
            gb_y = hy
            gb_z = hz
            flip = -1.0 if (nx * wix + ny * wiy + nz * wiz) > 0.0 else 1.0
            gb_nx = flip * nx
            gb_ny = flip * ny
            gb_nz = flip * nz
            gb_ar = sc.mat_albedo[m, 0]
            gb_ag = sc.mat_albedo[m, 1]
            gb_ab = sc.mat_albedo[m, 2]
            gb_gcam = g_cam
            gb_sidx = k
            ddx = hx - sc.cam_pos[0]
            ddy = hy - sc.cam_pos[1]
            ddz = hz - sc.cam_pos[2]
            gb_zd = np.sqrt(ddx * ddx + ddy * ddy + ddz * ddz)

        # complete path: front-side emissive hit
        front = -(wix * nx + wiy * ny + wiz * nz)
        if front > 0.0 and (sc.prim_emit[pid, 0] > 0.0 or sc.prim_emit[pid, 1] > 0.0
                            or sc.prim_emit[pid, 2] > 0.0):
            if prev_pdfq > 0.0 and sc.light_area > 0.0:
                cos_here = np.abs(wix * nx + wiy * ny + wiz * nz)
                p_bsdf = prev_pdfq * cos_here / seg_d2
                p_nee = 1.0 / sc.light_area
                wmis = p_bsdf / (p_bsdf + p_nee)
            else:
                wmis = 1.0
            sig = sig_bits | (np.int64(CLS_L) << np.int64(2 * k)) \
                | (np.int64(k + 1) << SIG_LEN_SHIFT)
            rec_sig[nrec] = sig
            rec_C[nrec, 0] = wmis * fr * sc.prim_emit[pid, 0] / p
            rec_C[nrec, 1] = wmis * fg * sc.prim_emit[pid, 1] / p
            rec_C[nrec, 2] = wmis * fb * sc.prim_emit[pid, 2] / p
            rec_p[nrec] = p
            rec_w[nrec] = wmis
            if want == nrec:
                path_nv = k + 1
                for j in range(path_nv):
                    out_vp[j, 0] = cvp[j, 0]
                    out_vp[j, 1] = cvp[j, 1]
                    out_vp[j, 2] = cvp[j, 2]
                    out_vn[j, 0] = cvn[j, 0]
                    out_vn[j, 1] = cvn[j, 1]
                    out_vn[j, 2] = cvn[j, 2]
                    out_vmat[j] = cvmat[j]
                    out_vprim[j] = cvprim[j]
                    out_vcls[j] = cvcls[j]
                out_vcls[k] = CLS_L
            nrec += 1

        # absorbed by a pure emitter / black surface
        if sc.mat_albedo[m, 0] <= 0.0 and sc.mat_albedo[m, 1] <= 0.0 \
                and sc.mat_albedo[m, 2] <= 0.0:
            break
        if k == max_depth:
            break

        # next-event estimation from diffuse vertices
        if kind == KIND_DIFFUSE and sc.light_area > 0.0:
            u1 = rng_uniform(seed, stream_id, ctr)
            ctr += 1
            u2 = rng_uniform(seed, stream_id, ctr)
            ctr += 1
            u3 = rng_uniform(seed, stream_id, ctr)
            ctr += 1
            lpid, lx, ly, lz, lnx, lny, lnz = sample_light_point(sc, u1, u2, u3)
            ex = lx - hx
            ey = ly - hy
            ez = lz - hz
            e2 = ex * ex + ey * ey + ez * ez
            if e2 > 0.0:
                edist = np.sqrt(e2)
                ex /= edist
                ey /= edist
                ez /= edist
                # shading normal oriented toward the incoming path
                onx, ony, onz = nx, ny, nz
                if onx * wix + ony * wiy + onz * wiz > 0.0:
                    onx = -onx
                    ony = -ony
                    onz = -onz
                cos_k = ex * onx + ey * ony + ez * onz
                cos_y = -(ex * lnx + ey * lny + ez * lnz)
                if cos_k > 1e-12 and cos_y > 1e-12 \
                        and visible(sc, hx, hy, hz, lx, ly, lz):
                    g = cos_k * cos_y / e2
                    tw_max = max(twr, max(twg, twb))
                    q_next = 1.0 if k < RR_START else min(1.0, tw_max)
                    p_bsdf = q_next * (cos_k / np.pi) * cos_y / e2
                    p_nee = 1.0 / sc.light_area
                    wmis = p_nee / (p_nee + p_bsdf)
                    scale = wmis * g / (np.pi * p * p_nee)
                    sig = sig_bits | (np.int64(CLS_D) << np.int64(2 * k)) \
                        | (np.int64(CLS_L) << np.int64(2 * (k + 1))) \
                        | (np.int64(k + 2) << SIG_LEN_SHIFT)
                    rec_sig[nrec] = sig
                    rec_C[nrec, 0] = fr * sc.mat_albedo[m, 0] * sc.prim_emit[lpid, 0] * scale
                    rec_C[nrec, 1] = fg * sc.mat_albedo[m, 1] * sc.prim_emit[lpid, 1] * scale
                    rec_C[nrec, 2] = fb * sc.mat_albedo[m, 2] * sc.prim_emit[lpid, 2] * scale
                    rec_p[nrec] = p * p_nee
                    rec_w[nrec] = wmis
                    if want == nrec:
                        path_nv = k + 2
                        for j in range(k + 1):
                            out_vp[j, 0] = cvp[j, 0]
                            out_vp[j, 1] = cvp[j, 1]
                            out_vp[j, 2] = cvp[j, 2]
                            out_vn[j, 0] = cvn[j, 0]
                            out_vn[j, 1] = cvn[j, 1]
                            out_vn[j, 2] = cvn[j, 2]
                            out_vmat[j] = cvmat[j]
                            out_vprim[j] = cvprim[j]
                            out_vcls[j] = cvcls[j]
                        out_vp[k + 1, 0] = lx
                        out_vp[k + 1, 1] = ly
                        out_vp[k + 1, 2] = lz
                        out_vn[k + 1, 0] = lnx
                        out_vn[k + 1, 1] = lny
                        out_vn[k + 1, 2] = lnz
                        out_vmat[k + 1] = sc.prim_mat[lpid]
                        out_vprim[k + 1] = lpid
                        out_vcls[k + 1] = CLS_L
                    nrec += 1

        # russian roulette, then extend by BSDF sampling
        tw_max = max(twr, max(twg, twb))
        q = 1.0 if k < RR_START else min(1.0, tw_max)
        if q < 1.0:
            u = rng_uniform(seed, stream_id, ctr)
            ctr += 1
            if u >= q:
                break
        p *= q
        twr /= q
        twg /= q
        twb /= q

        onx, ony, onz = nx, ny, nz
        if onx * wix + ony * wiy + onz * wiz > 0.0:
            onx = -onx
            ony = -ony
            onz = -onz
        if kind == KIND_DIFFUSE:
            u1 = rng_uniform(seed, stream_id, ctr)
            ctr += 1
            u2 = rng_uniform(seed, stream_id, ctr)
            ctr += 1
            wox, woy, woz = cosine_sample(onx, ony, onz, u1, u2)
            cos_o = wox * onx + woy * ony + woz * onz
            if cos_o <= 1e-12:
                break
            pdf_w = cos_o / np.pi
            frv = 1.0 / np.pi
            prev_pdfq = q * pdf_w
        elif kind == KIND_MIRROR:
            wox, woy, woz = _reflect(wix, wiy, wiz, onx, ony, onz)
            cos_o = wox * onx + woy * ony + woz * onz
            pdf_w = 1.0
            frv = 1.0 / np.abs(cos_o)
            prev_pdfq = -1.0
        else:  # glass
            cos_raw = -(wix * nx + wiy * ny + wiz * nz)
            if cos_raw >= 0.0:
                eta_rel = sc.mat_ior[m]
                gnx, gny, gnz = nx, ny, nz
                cos_i = cos_raw
            else:
                eta_rel = 1.0 / sc.mat_ior[m]
                gnx, gny, gnz = -nx, -ny, -nz
                cos_i = -cos_raw
            R, cos_t = fresnel_dielectric(cos_i, eta_rel)
            u = rng_uniform(seed, stream_id, ctr)
            ctr += 1
            if u < R:
                wox, woy, woz = _reflect(wix, wiy, wiz, gnx, gny, gnz)
                prob = R
            else:
                inv_eta = 1.0 / eta_rel
                wox = inv_eta * wix + (inv_eta * cos_i - cos_t) * gnx
                woy = inv_eta * wiy + (inv_eta * cos_i - cos_t) * gny
                woz = inv_eta * wiz + (inv_eta * cos_i - cos_t) * gnz
                wl = 1.0 / np.sqrt(wox * wox + woy * woy + woz * woz)
                wox *= wl
                woy *= wl
                woz *= wl
                prob = 1.0 - R
            cos_o = wox * gnx + woy * gny + woz * gnz
            pdf_w = prob
            frv = prob / np.abs(cos_o)
            prev_pdfq = -1.0

        fr *= sc.mat_albedo[m, 0] * frv
        fg *= sc.mat_albedo[m, 1] * frv
        fb *= sc.mat_albedo[m, 2] * frv
        twr *= sc.mat_albedo[m, 0]
        twg *= sc.mat_albedo[m, 1]
        twb *= sc.mat_albedo[m, 2]

        t, pid2 = intersect_ray(sc, hx, hy, hz, wox, woy, woz, RAY_EPS, INF)
        if pid2 < 0:
            break
        nhx = hx + t * wox
        nhy = hy + t * woy
        nhz = hz + t * woz
        n2x, n2y, n2z = prim_normal_at(sc, pid2, nhx, nhy, nhz)
        cos_a = np.abs(wox * onx + woy * ony + woz * onz)
        cos_b = np.abs(wox * n2x + woy * n2y + woz * n2z)
        seg_d2 = t * t
        g = cos_a * cos_b / seg_d2
        fr *= g
        fg *= g
        fb *= g
        p *= pdf_w * cos_b / seg_d2
        sig_bits |= np.int64(cls_here) << np.int64(2 * k)

        hx, hy, hz = nhx, nhy, nhz
        nx, ny, nz = n2x, n2y, n2z
        pid = pid2
        wix, wiy, wiz = wox, woy, woz
        k += 1

    return (nrec, path_nv, px, py, gb_valid, gb_x, gb_y, gb_z,
            gb_nx, gb_ny, gb_nz, gb_ar, gb_ag, gb_ab, gb_gcam, gb_sidx, gb_zd)


@njit(cache=True, parallel=True)
def prepass_pass(sc, sample_idx, seed, max_depth,
                 rec_sig, rec_C, rec_p, rec_w, rec_n, rec_px, rec_py, want_gb,
                 gb_pos, gb_nrm, gb_alb, gb_gcam, gb_sidx, gb_zd, gb_valid):
    """One full-image sampling pass; pixel `pix` uses stream sample*npix+pix."""
    w = sc.width
    npix = sc.width * sc.height
    for pix in prange(npix):
        iy = pix // w
        ix = pix - iy * w
        svp = np.empty((MAXV, 3), dtype=np.float64)
        svn = np.empty((MAXV, 3), dtype=np.float64)
        svm = np.empty(MAXV, dtype=np.int32)
        svq = np.empty(MAXV, dtype=np.int32)
        svc = np.empty(MAXV, dtype=np.uint8)
        res = trace_one(sc, float(ix), float(iy), 1.0, 1.0, seed,
                        sample_idx * npix + pix, max_depth,
                        rec_sig[pix], rec_C[pix], rec_p[pix], rec_w[pix], -1,
                        svp, svn, svm, svq, svc)
        rec_n[pix] = res[0]
        rec_px[pix] = res[2]
        rec_py[pix] = res[3]
        if want_gb == 1 and res[4] == 1 and gb_valid[iy, ix] == 0:
            gb_valid[iy, ix] = 1
            gb_pos[iy, ix, 0] = res[5]
            gb_pos[iy, ix, 1] = res[6]
            gb_pos[iy, ix, 2] = res[7]
            gb_nrm[iy, ix, 0] = res[8]
            gb_nrm[iy, ix, 1] = res[9]
            gb_nrm[iy, ix, 2] = res[10]
            gb_alb[iy, ix, 0] = res[11]
            gb_alb[iy, ix, 1] = res[12]
            gb_alb[iy, ix, 2] = res[13]
            gb_gcam[iy, ix] = res[14]
            gb_sidx[iy, ix] = res[15]
            gb_zd[iy, ix] = res[16]


@njit(cache=True, parallel=True)
def pt_accum(sc, spp, seed, max_depth, sig_filter,
             out_rgb, out_lum, out_lum2):
    """Plain path-traced accumulation: per-pixel sums of per-sample estimates.

    sig_filter restricts accumulation to one signature code (0 keeps all).
    out_lum/out_lum2 collect per-sample luminance and its square for pixel
    variance estimates.
    """
    w = sc.width
    npix = sc.width * sc.height
    nrec_max = 2 * max_depth + 2
    for pix in prange(npix):
        iy = pix // w
        ix = pix - iy * w
        rsig = np.empty(nrec_max, dtype=np.int64)
        rC = np.empty((nrec_max, 3), dtype=np.float64)
        rP = np.empty(nrec_max, dtype=np.float64)
        rW = np.empty(nrec_max, dtype=np.float64)
        svp = np.empty((MAXV, 3), dtype=np.float64)
        svn = np.empty((MAXV, 3), dtype=np.float64)
        svm = np.empty(MAXV, dtype=np.int32)
        svq = np.empty(MAXV, dtype=np.int32)
        svc = np.empty(MAXV, dtype=np.uint8)
        for s in range(spp):
            res = trace_one(sc, float(ix), float(iy), 1.0, 1.0, seed,
                            s * npix + pix, max_depth,
                            rsig, rC, rP, rW, -1, svp, svn, svm, svq, svc)
            cr = 0.0
            cg = 0.0
            cb = 0.0
            for r in range(res[0]):
                if sig_filter == 0 or rsig[r] == sig_filter:
                    cr += rC[r, 0]
                    cg += rC[r, 1]
                    cb += rC[r, 2]
            out_rgb[iy, ix, 0] += cr
            out_rgb[iy, ix, 1] += cg
            out_rgb[iy, ix, 2] += cb
            lum = luminance(cr, cg, cb)
            out_lum[iy, ix] += lum
            out_lum2[iy, ix] += lum * lum


# ---------------------------------------------------------------------------
# chain mutations
# ---------------------------------------------------------------------------

@njit(cache=True)
def walk_propose(sc, seed, stream_id, ctr, max_depth, pix_cdf,
                 vp, vn, vmat, vprim, vcls):
    """Independence proposal: BSDF walk from a random image position.

    The start pixel is uniform when pix_cdf is empty, otherwise drawn from
    the flattened per-pixel cdf (the guided regeneration used by partition
    chains, whose support would be vanishingly small under uniform pixels).
    At each diffuse vertex the walk stops-and-connects to a sampled light
    point with probability NEE_STOP (an occluded or invalid connection fails
    the proposal); otherwise it completes at the first front-side emissive
    hit (class L) and dies on escape, absorption, roulette, or the depth
    cap. Returns (ok, nv, fr, fg, fb, px, py); the proposal density is
    recomputed via bsdfwalk_pdf so ratios stay bit-consistent with perturbed
    states.
    """
    if pix_cdf.shape[0] == 0:
        u = rng_uniform(seed, stream_id, ctr[0])
        ctr[0] += 1
        v = rng_uniform(seed, stream_id, ctr[0])
        ctr[0] += 1
        px = u * sc.width
        py = v * sc.height
    else:
        u = rng_uniform(seed, stream_id, ctr[0])
        ctr[0] += 1
        lo = 0
        hi = pix_cdf.shape[0] - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if pix_cdf[mid] < u:
                lo = mid + 1
            else:
                hi = mid
        iy = lo // sc.width
        ix = lo - iy * sc.width
        u2 = rng_uniform(seed, stream_id, ctr[0])
        ctr[0] += 1
        u3 = rng_uniform(seed, stream_id, ctr[0])
        ctr[0] += 1
        px = ix + u2
        py = iy + u3
    dx, dy, dz = camera_dir(sc, px, py)
    t, pid = intersect_ray(sc, sc.cam_pos[0], sc.cam_pos[1], sc.cam_pos[2],
                           dx, dy, dz, RAY_EPS, INF)
    if pid < 0:
        return 0, 0, 0.0, 0.0, 0.0, px, py
    vp[0, 0] = sc.cam_pos[0]
    vp[0, 1] = sc.cam_pos[1]
    vp[0, 2] = sc.cam_pos[2]
    vn[0, 0] = sc.cam_fwd[0]
    vn[0, 1] = sc.cam_fwd[1]
    vn[0, 2] = sc.cam_fwd[2]
    vmat[0] = -1
    vprim[0] = -1
    vcls[0] = CLS_E

    cos_c = dx * sc.cam_fwd[0] + dy * sc.cam_fwd[1] + dz * sc.cam_fwd[2]
    hx = sc.cam_pos[0] + t * dx
    hy = sc.cam_pos[1] + t * dy
    hz = sc.cam_pos[2] + t * dz
    nx, ny, nz = prim_normal_at(sc, pid, hx, hy, hz)
    cos_1 = np.abs(dx * nx + dy * ny + dz * nz)
    fval = cos_c * cos_1 / (t * t)
    fr = fval
    fg = fval
    fb = fval
    twr = 1.0
    twg = 1.0
    twb = 1.0
    wix, wiy, wiz = dx, dy, dz
    k = 1
    while True:
        vp[k, 0] = hx
        vp[k, 1] = hy
        vp[k, 2] = hz
        vn[k, 0] = nx
        vn[k, 1] = ny
        vn[k, 2] = nz
        m = sc.prim_mat[pid]
        vmat[k] = m
        vprim[k] = pid
        kind = sc.mat_kind[m]
        front = -(wix * nx + wiy * ny + wiz * nz)
        if front > 0.0 and (sc.prim_emit[pid, 0] > 0.0 or sc.prim_emit[pid, 1] > 0.0
                            or sc.prim_emit[pid, 2] > 0.0):
            vcls[k] = CLS_L
            return (1, k + 1,
                    fr * sc.prim_emit[pid, 0],
                    fg * sc.prim_emit[pid, 1],
                    fb * sc.prim_emit[pid, 2], px, py)
        vcls[k] = CLS_D if kind == KIND_DIFFUSE else CLS_S
        if sc.mat_albedo[m, 0] <= 0.0 and sc.mat_albedo[m, 1] <= 0.0 \
                and sc.mat_albedo[m, 2] <= 0.0:
            return 0, 0, 0.0, 0.0, 0.0, px, py
        if k == max_depth:
            return 0, 0, 0.0, 0.0, 0.0, px, py
        if kind == KIND_DIFFUSE and sc.light_area > 0.0:
            u_stop = rng_uniform(seed, stream_id, ctr[0])
            ctr[0] += 1
            if u_stop < NEE_STOP:
                u1 = rng_uniform(seed, stream_id, ctr[0])
                ctr[0] += 1
                u2 = rng_uniform(seed, stream_id, ctr[0])
                ctr[0] += 1
                u3 = rng_uniform(seed, stream_id, ctr[0])
                ctr[0] += 1
                lpid, lx, ly, lz, lnx, lny, lnz = sample_light_point(sc, u1, u2, u3)
                ex = lx - hx
                ey = ly - hy
                ez = lz - hz
                e2 = ex * ex + ey * ey + ez * ez
                if e2 <= 0.0:
                    return 0, 0, 0.0, 0.0, 0.0, px, py
                edist = np.sqrt(e2)
                ex /= edist
                ey /= edist
                ez /= edist
                onx, ony, onz = nx, ny, nz
                if onx * wix + ony * wiy + onz * wiz > 0.0:
                    onx = -onx
                    ony = -ony
                    onz = -onz
                cos_k = ex * onx + ey * ony + ez * onz
                cos_y = -(ex * lnx + ey * lny + ez * lnz)
                if cos_k <= 1e-12 or cos_y <= 1e-12 \
                        or not visible(sc, hx, hy, hz, lx, ly, lz):
                    return 0, 0, 0.0, 0.0, 0.0, px, py
                g = cos_k * cos_y / e2
                vp[k + 1, 0] = lx
                vp[k + 1, 1] = ly
                vp[k + 1, 2] = lz
                vn[k + 1, 0] = lnx
                vn[k + 1, 1] = lny
                vn[k + 1, 2] = lnz
                vmat[k + 1] = sc.prim_mat[lpid]
                vprim[k + 1] = lpid
                vcls[k + 1] = CLS_L
                s = g / np.pi
                return (1, k + 2,
                        fr * sc.mat_albedo[m, 0] * s * sc.prim_emit[lpid, 0],
                        fg * sc.mat_albedo[m, 1] * s * sc.prim_emit[lpid, 1],
                        fb * sc.mat_albedo[m, 2] * s * sc.prim_emit[lpid, 2],
                        px, py)
        tw_max = max(twr, max(twg, twb))
        q = 1.0 if k < RR_START else min(1.0, tw_max)
        if q < 1.0:
            u = rng_uniform(seed, stream_id, ctr[0])
            ctr[0] += 1
            if u >= q:
                return 0, 0, 0.0, 0.0, 0.0, px, py
        twr /= q
        twg /= q
        twb /= q
        onx, ony, onz = nx, ny, nz
        if onx * wix + ony * wiy + onz * wiz > 0.0:
            onx = -onx
            ony = -ony
            onz = -onz
        if kind == KIND_DIFFUSE:
            u1 = rng_uniform(seed, stream_id, ctr[0])
            ctr[0] += 1
            u2 = rng_uniform(seed, stream_id, ctr[0])
            ctr[0] += 1
            wox, woy, woz = cosine_sample(onx, ony, onz, u1, u2)
            cos_o = wox * onx + woy * ony + woz * onz
            if cos_o <= 1e-12:
                return 0, 0, 0.0, 0.0, 0.0, px, py
            frv = 1.0 / np.pi
        elif kind == KIND_MIRROR:
            wox, woy, woz = _reflect(wix, wiy, wiz, onx, ony, onz)
            cos_o = wox * onx + woy * ony + woz * onz
            frv = 1.0 / np.abs(cos_o)
        else:
            cos_raw = -(wix * nx + wiy * ny + wiz * nz)
            if cos_raw >= 0.0:
                eta_rel = sc.mat_ior[m]
                gnx, gny, gnz = nx, ny, nz
                cos_i = cos_raw
            else:
                eta_rel = 1.0 / sc.mat_ior[m]
                gnx, gny, gnz = -nx, -ny, -nz
                cos_i = -cos_raw
            R, cos_t = fresnel_dielectric(cos_i, eta_rel)
            u = rng_uniform(seed, stream_id, ctr[0])
            ctr[0] += 1
            if u < R:
                wox, woy, woz = _reflect(wix, wiy, wiz, gnx, gny, gnz)
                prob = R
            else:
                inv_eta = 1.0 / eta_rel
                wox = inv_eta * wix + (inv_eta * cos_i - cos_t) * gnx
                woy = inv_eta * wiy + (inv_eta * cos_i - cos_t) * gny
                woz = inv_eta * wiz + (inv_eta * cos_i - cos_t) * gnz
                wl = 1.0 / np.sqrt(wox * wox + woy * woy + woz * woz)
                wox *= wl
                woy *= wl
                woz *= wl
                prob = 1.0 - R
            cos_o = wox * gnx + woy * gny + woz * gnz
            frv = prob / np.abs(cos_o)
        fr *= sc.mat_albedo[m, 0] * frv
        fg *= sc.mat_albedo[m, 1] * frv
        fb *= sc.mat_albedo[m, 2] * frv
        twr *= sc.mat_albedo[m, 0]
        twg *= sc.mat_albedo[m, 1]
        twb *= sc.mat_albedo[m, 2]
        t, pid2 = intersect_ray(sc, hx, hy, hz, wox, woy, woz, RAY_EPS, INF)
        if pid2 < 0:
            return 0, 0, 0.0, 0.0, 0.0, px, py
        nhx = hx + t * wox
        nhy = hy + t * woy
        nhz = hz + t * woz
        n2x, n2y, n2z = prim_normal_at(sc, pid2, nhx, nhy, nhz)
        cos_a = np.abs(wox * onx + woy * ony + woz * onz)
        cos_b = np.abs(wox * n2x + woy * n2y + woz * n2z)
        g = cos_a * cos_b / (t * t)
        fr *= g
        fg *= g
        fb *= g
        hx, hy, hz = nhx, nhy, nhz
        nx, ny, nz = n2x, n2y, n2z
        pid = pid2
        wix, wiy, wiz = wox, woy, woz
        k += 1


@njit(cache=True)
def retrace_prefix(sc, vp, vn, vmat, vprim, vcls, nv, s_idx, npx, npy,
                   ovp, ovn, ovmat, ovprim, ovcls):
    """Rebuild the camera prefix through a new image point.

    Follows the current path's specular chain, reusing each glass vertex's
    reflect/refract branch (derived from its geometry), and lands on the
    first non-specular vertex. The suffix s_idx+1.. is copied verbatim.
    Fails (returns 0) when the new chain's class pattern deviates from the
    current one, a refraction becomes impossible, or the chain escapes.

    When the current path's first non-specular vertex is the light itself
    (all-specular prefix), the final ray must land on a front-lit emissive
    surface instead.
    """
    ovp[0, 0] = sc.cam_pos[0]
    ovp[0, 1] = sc.cam_pos[1]
    ovp[0, 2] = sc.cam_pos[2]
    ovn[0, 0] = sc.cam_fwd[0]
    ovn[0, 1] = sc.cam_fwd[1]
    ovn[0, 2] = sc.cam_fwd[2]
    ovmat[0] = -1
    ovprim[0] = -1
    ovcls[0] = CLS_E
    dx, dy, dz = camera_dir(sc, npx, npy)
    ox = sc.cam_pos[0]
    oy = sc.cam_pos[1]
    oz = sc.cam_pos[2]
    light_terminal = vcls[s_idx] == CLS_L
    for k in range(1, s_idx + 1):
        t, pid = intersect_ray(sc, ox, oy, oz, dx, dy, dz, RAY_EPS, INF)
        if pid < 0:
            return 0
        hx = ox + t * dx
        hy = oy + t * dy
        hz = oz + t * dz
        nx, ny, nz = prim_normal_at(sc, pid, hx, hy, hz)
        m = sc.prim_mat[pid]
        kind = sc.mat_kind[m]
        ovp[k, 0] = hx
        ovp[k, 1] = hy
        ovp[k, 2] = hz
        ovn[k, 0] = nx
        ovn[k, 1] = ny
        ovn[k, 2] = nz
        ovmat[k] = m
        ovprim[k] = pid
        if k == s_idx:
            if light_terminal:
                front = -(dx * nx + dy * ny + dz * nz)
                if front <= 0.0 or (sc.prim_emit[pid, 0] <= 0.0
                                    and sc.prim_emit[pid, 1] <= 0.0
                                    and sc.prim_emit[pid, 2] <= 0.0):
                    return 0
                ovcls[k] = CLS_L
                return 1
            if kind != KIND_DIFFUSE:
                return 0
            ovcls[k] = CLS_D
            for j in range(s_idx + 1, nv):
                ovp[j, 0] = vp[j, 0]
                ovp[j, 1] = vp[j, 1]
                ovp[j, 2] = vp[j, 2]
                ovn[j, 0] = vn[j, 0]
                ovn[j, 1] = vn[j, 1]
                ovn[j, 2] = vn[j, 2]
                ovmat[j] = vmat[j]
                ovprim[j] = vprim[j]
                ovcls[j] = vcls[j]
            return 1
        # interior prefix vertex: must stay specular
        if kind != KIND_MIRROR and kind != KIND_GLASS:
            return 0
        ovcls[k] = CLS_S
        # branch pattern of the current path's k-th vertex:
        # reflect iff incoming and outgoing lie on the same side
        cwix = vp[k, 0] - vp[k - 1, 0]
        cwiy = vp[k, 1] - vp[k - 1, 1]
        cwiz = vp[k, 2] - vp[k - 1, 2]
        cwox = vp[k + 1, 0] - vp[k, 0]
        cwoy = vp[k + 1, 1] - vp[k, 1]
        cwoz = vp[k + 1, 2] - vp[k, 2]
        din = cwix * vn[k, 0] + cwiy * vn[k, 1] + cwiz * vn[k, 2]
        dout = cwox * vn[k, 0] + cwoy * vn[k, 1] + cwoz * vn[k, 2]
        want_refract = din * dout > 0.0
        if kind == KIND_MIRROR:
            if want_refract:
                return 0
            onx, ony, onz = nx, ny, nz
            if onx * dx + ony * dy + onz * dz > 0.0:
                onx = -onx
                ony = -ony
                onz = -onz
            dx, dy, dz = _reflect(dx, dy, dz, onx, ony, onz)
        else:
            cos_raw = -(dx * nx + dy * ny + dz * nz)
            if cos_raw >= 0.0:
                eta_rel = sc.mat_ior[m]
                gnx, gny, gnz = nx, ny, nz
                cos_i = cos_raw
            else:
                eta_rel = 1.0 / sc.mat_ior[m]
                gnx, gny, gnz = -nx, -ny, -nz
                cos_i = -cos_raw
            R, cos_t = fresnel_dielectric(cos_i, eta_rel)
            if want_refract:
                if R >= 1.0:
                    return 0
                inv_eta = 1.0 / eta_rel
                tx = inv_eta * dx + (inv_eta * cos_i - cos_t) * gnx
                ty = inv_eta * dy + (inv_eta * cos_i - cos_t) * gny
                tz = inv_eta * dz + (inv_eta * cos_i - cos_t) * gnz
                tl = 1.0 / np.sqrt(tx * tx + ty * ty + tz * tz)
                dx = tx * tl
                dy = ty * tl
                dz = tz * tl
            else:
                dx, dy, dz = _reflect(dx, dy, dz, gnx, gny, gnz)
        ox, oy, oz = hx, hy, hz
    return 0


@njit(cache=True)
def cand_weight(gb_pos, gb_nrm, gb_alb, gb_gcam, gb_valid, d_lum, eps_vis,
                ix, iy, tx, ty, tz, tnx, tny, tnz):
    """Approximate prefix contribution of reconnecting pixel (ix, iy) to the
    target vertex: Gcam * lum(albedo)/pi * cos*cos'/dist^2 * V'."""
    if gb_valid[iy, ix] == 0:
        return 0.0
    dx = tx - gb_pos[iy, ix, 0]
    dy = ty - gb_pos[iy, ix, 1]
    dz = tz - gb_pos[iy, ix, 2]
    d2 = dx * dx + dy * dy + dz * dz
    if d2 <= 0.0:
        return 0.0
    dist = np.sqrt(d2)
    cos_j = (dx * gb_nrm[iy, ix, 0] + dy * gb_nrm[iy, ix, 1]
             + dz * gb_nrm[iy, ix, 2]) / dist
    if cos_j <= 0.0:
        return 0.0
    cos_p = np.abs(dx * tnx + dy * tny + dz * tnz) / dist
    vprime = 1.0 if d_lum[iy, ix] > eps_vis else eps_vis
    alb = luminance(gb_alb[iy, ix, 0], gb_alb[iy, ix, 1], gb_alb[iy, ix, 2])
    return gb_gcam[iy, ix] * (alb / np.pi) * cos_j * cos_p / d2 * vprime


ETA_FLOOR = 1e-8  # in-bounds candidate weights are floored at this * max


@njit(cache=True)
def _fill_weights(gb_pos, gb_nrm, gb_alb, gb_gcam, gb_valid, d_lum, eps_vis,
                  offs, wbuf, cx, cy, width, height,
                  tx, ty, tz, tnx, tny, tnz):
    """Candidate weights around (cx, cy); returns their sum.

    Out-of-bounds candidates get 0; in-bounds ones are floored at
    ETA_FLOOR * max so reverse moves always have positive density.
    """
    nd = offs.shape[0]
    wmax = 0.0
    for i in range(nd):
        jx = cx + offs[i, 0]
        jy = cy + offs[i, 1]
        if jx < 0 or jx >= width or jy < 0 or jy >= height:
            wbuf[i] = -1.0
            continue
        w = cand_weight(gb_pos, gb_nrm, gb_alb, gb_gcam, gb_valid, d_lum,
                        eps_vis, jx, jy, tx, ty, tz, tnx, tny, tnz)
        wbuf[i] = w
        if w > wmax:
            wmax = w
    if wmax <= 0.0:
        return 0.0
    floor = ETA_FLOOR * wmax
    total = 0.0
    for i in range(nd):
        if wbuf[i] < 0.0:
            wbuf[i] = 0.0
        else:
            if wbuf[i] < floor:
                wbuf[i] = floor
            total += wbuf[i]
    return total


@njit(cache=True)
def _copy_path(svp, svn, svmat, svprim, svcls, n, dvp, dvn, dvmat, dvprim, dvcls):
    for j in range(n):
        dvp[j, 0] = svp[j, 0]
        dvp[j, 1] = svp[j, 1]
        dvp[j, 2] = svp[j, 2]
        dvn[j, 0] = svn[j, 0]
        dvn[j, 1] = svn[j, 1]
        dvn[j, 2] = svn[j, 2]
        dvmat[j] = svmat[j]
        dvprim[j] = svprim[j]
        dvcls[j] = svcls[j]


@njit(cache=True)
def sig_in_partition(sig, sel_sigs, is_complement):
    n = sel_sigs.shape[0]
    lo = 0
    hi = n
    while lo < hi:
        mid = (lo + hi) // 2
        if sel_sigs[mid] < sig:
            lo = mid + 1
        else:
            hi = mid
    found = lo < n and sel_sigs[lo] == sig
    if is_complement == 1:
        return not found
    return found


# st_f slots: 0 px, 1 py, 2..4 f rgb, 5 fstar, 6 F (= fstar * camera jacobian),
#             7 p_walk (BSDF-walk density of the current state)
# st_i slots: 0 nverts, 1/2 large proposed/accepted, 3/4 guided, 5/6 lens,
#             7 steps executed

ST_PX = 0
ST_PY = 1
ST_F0 = 2
ST_FSTAR = 5
ST_BIGF = 6
ST_PWALK = 7


@njit(cache=True)
def _splat(accum, px, py, wgt, f0, f1, f2, fstar):
    ix = int(px)
    iy = int(py)
    c = wgt / fstar
    accum[iy, ix, 0] += c * f0
    accum[iy, ix, 1] += c * f1
    accum[iy, ix, 2] += c * f2


@njit(cache=True)
def _accept_state(sc, st_f, st_i, vp, vn, vmat, vprim, vcls,
                  pvp, pvn, pvmat, pvprim, pvcls, nv_new,
                  npx, npy, f0, f1, f2, fstar, max_depth):
    _copy_path(pvp, pvn, pvmat, pvprim, pvcls, nv_new, vp, vn, vmat, vprim, vcls)
    st_i[0] = nv_new
    st_f[ST_PX] = npx
    st_f[ST_PY] = npy
    st_f[ST_F0] = f0
    st_f[ST_F0 + 1] = f1
    st_f[ST_F0 + 2] = f2
    st_f[ST_FSTAR] = fstar
    st_f[ST_BIGF] = fstar * camera_jacobian(sc, vp[1, 0], vp[1, 1], vp[1, 2],
                                            vn[1, 0], vn[1, 1], vn[1, 2])
    st_f[ST_PWALK] = bsdfwalk_pdf(sc, vp, vn, vmat, vprim, nv_new, max_depth)


@njit(cache=True)
def large_step_move(sc, sel_sigs, is_complement, pix_pmf, pix_cdf,
                    vp, vn, vmat, vprim, vcls, st_i, st_f,
                    pvp, pvn, pvmat, pvprim, pvcls,
                    seed, stream_id, ctr, splat_scale, accum, max_depth):
    """In-partition independence proposal: trace a fresh BSDF-walk path from a
    random pixel (uniform, or pix_pmf-distributed when pix_cdf is nonempty),
    reject if its signature leaves the partition, otherwise accept with the
    ratio of f*/density values. Splats both states in expectation form.
    Returns (acceptance, accepted, new_px, new_py)."""
    f0 = st_f[ST_F0]
    f1 = st_f[ST_F0 + 1]
    f2 = st_f[ST_F0 + 2]
    fstar = st_f[ST_FSTAR]
    ok, nv_new, nf0, nf1, nf2, npx, npy = walk_propose(
        sc, seed, stream_id, ctr, max_depth, pix_cdf,
        pvp, pvn, pvmat, pvprim, pvcls)
    a = 0.0
    nfstar = 0.0
    if ok == 1:
        sig_new = sig_of_path(pvcls, nv_new)
        if sig_in_partition(sig_new, sel_sigs, is_complement):
            nfstar = luminance(nf0, nf1, nf2)
            # a positive pixel-space target keeps later perturbations valid
            if nfstar > 0.0 and camera_jacobian(
                    sc, pvp[1, 0], pvp[1, 1], pvp[1, 2],
                    pvn[1, 0], pvn[1, 1], pvn[1, 2]) > 0.0:
                p_new = bsdfwalk_pdf(sc, pvp, pvn, pvmat, pvprim,
                                     nv_new, max_depth)
                if p_new > 0.0:
                    if pix_cdf.shape[0] > 0:
                        # swap the uniform pixel factor for the guided pmf
                        # (the common W*H scale cancels in the ratio)
                        p_new *= pix_pmf[int(npy), int(npx)]
                        p_cur = st_f[ST_PWALK] * pix_pmf[
                            int(st_f[ST_PY]), int(st_f[ST_PX])]
                    else:
                        p_cur = st_f[ST_PWALK]
                    if p_cur > 0.0:
                        a = min(1.0, (nfstar / p_new) / (fstar / p_cur))
                    else:
                        # current state lies outside the walk's support
                        # (possible only with emissive+reflective surfaces):
                        # escape unconditionally
                        a = 1.0
    if splat_scale > 0.0:
        if a < 1.0:
            _splat(accum, st_f[ST_PX], st_f[ST_PY],
                   (1.0 - a) * splat_scale, f0, f1, f2, fstar)
        if a > 0.0:
            _splat(accum, npx, npy, a * splat_scale, nf0, nf1, nf2, nfstar)
    u = rng_uniform(seed, stream_id, ctr[0])
    ctr[0] += 1
    accepted = 0
    if u < a:
        accepted = 1
        _accept_state(sc, st_f, st_i, vp, vn, vmat, vprim, vcls,
                      pvp, pvn, pvmat, pvprim, pvcls, nv_new,
                      npx, npy, nf0, nf1, nf2, nfstar, max_depth)
    return a, accepted, npx, npy


@njit(cache=True)
def lens_move(sc, vp, vn, vmat, vprim, vcls, st_i, st_f,
              pvp, pvn, pvmat, pvprim, pvcls,
              seed, stream_id, ctr, splat_scale, accum,
              r_min, r_max, max_depth):
    """Isotropic lens perturbation: log-uniform radial pixel offset, retrace
    of the camera prefix through the specular chain, reconnection at the
    first non-specular vertex. The offset density is symmetric, so the
    acceptance is the ratio of pixel-space targets f* * |dA/dpixel|.
    Off-image proposals, occluded reconnections, and class-pattern changes
    reject. Returns (acceptance, accepted, new_px, new_py)."""
    f0 = st_f[ST_F0]
    f1 = st_f[ST_F0 + 1]
    f2 = st_f[ST_F0 + 2]
    fstar = st_f[ST_FSTAR]
    nv = int(st_i[0])
    s_idx = first_nonspecular(vcls, nv)
    u1 = rng_uniform(seed, stream_id, ctr[0])
    ctr[0] += 1
    u2 = rng_uniform(seed, stream_id, ctr[0])
    ctr[0] += 1
    r = r_min * np.exp(u1 * np.log(r_max / r_min))
    phi = 2.0 * np.pi * u2
    npx = st_f[ST_PX] + r * np.cos(phi)
    npy = st_f[ST_PY] + r * np.sin(phi)
    a = 0.0
    nfstar = 0.0
    nf0 = 0.0
    nf1 = 0.0
    nf2 = 0.0
    if 0.0 <= npx < sc.width and 0.0 <= npy < sc.height:
        ok = retrace_prefix(sc, vp, vn, vmat, vprim, vcls, nv, s_idx,
                            npx, npy, pvp, pvn, pvmat, pvprim, pvcls)
        if ok == 1:
            conn_ok = True
            if pvcls[s_idx] != CLS_L:
                conn_ok = visible(sc, pvp[s_idx, 0], pvp[s_idx, 1], pvp[s_idx, 2],
                                  vp[s_idx + 1, 0], vp[s_idx + 1, 1],
                                  vp[s_idx + 1, 2])
            if conn_ok:
                nf0, nf1, nf2 = path_f_eval(sc, pvp, pvn, pvmat, pvprim, nv, False)
                nfstar = luminance(nf0, nf1, nf2)
                if nfstar > 0.0:
                    jac = camera_jacobian(sc, pvp[1, 0], pvp[1, 1], pvp[1, 2],
                                          pvn[1, 0], pvn[1, 1], pvn[1, 2])
                    if jac > 0.0:
                        a = min(1.0, nfstar * jac / st_f[ST_BIGF])
    if splat_scale > 0.0:
        if a < 1.0:
            _splat(accum, st_f[ST_PX], st_f[ST_PY],
                   (1.0 - a) * splat_scale, f0, f1, f2, fstar)
        if a > 0.0:
            _splat(accum, npx, npy, a * splat_scale, nf0, nf1, nf2, nfstar)
    u = rng_uniform(seed, stream_id, ctr[0])
    ctr[0] += 1
    accepted = 0
    if u < a and a > 0.0:
        accepted = 1
        _accept_state(sc, st_f, st_i, vp, vn, vmat, vprim, vcls,
                      pvp, pvn, pvmat, pvprim, pvcls, nv,
                      npx, npy, nf0, nf1, nf2, nfstar, max_depth)
    return a, accepted, npx, npy


@njit(cache=True)
def guided_move(sc, gb_pos, gb_nrm, gb_alb, gb_gcam, gb_valid, d_lum, eps_vis,
                offs, neg_idx, wbuf,
                vp, vn, vmat, vprim, vcls, st_i, st_f,
                pvp, pvn, pvmat, pvprim, pvcls,
                seed, stream_id, ctr, splat_scale, accum, max_depth):
    """Guided image-plane perturbation: draw an integer pixel shift from the
    candidate weights around the current pixel, retrace, reconnect, and
    accept with the full Metropolis-Hastings ratio (forward and reverse
    candidate sets both evaluated against the shared reconnection vertex).
    The caller guarantees the state has a reconnectable suffix (first
    non-specular vertex is not the light). Returns (acceptance, accepted,
    new_px, new_py)."""
    f0 = st_f[ST_F0]
    f1 = st_f[ST_F0 + 1]
    f2 = st_f[ST_F0 + 2]
    fstar = st_f[ST_FSTAR]
    nv = int(st_i[0])
    s_idx = first_nonspecular(vcls, nv)
    cx = int(st_f[ST_PX])
    cy = int(st_f[ST_PY])
    tx = vp[s_idx + 1, 0]
    ty = vp[s_idx + 1, 1]
    tz = vp[s_idx + 1, 2]
    tnx = vn[s_idx + 1, 0]
    tny = vn[s_idx + 1, 1]
    tnz = vn[s_idx + 1, 2]
    a = 0.0
    nfstar = 0.0
    nf0 = 0.0
    nf1 = 0.0
    nf2 = 0.0
    npx = st_f[ST_PX]
    npy = st_f[ST_PY]
    total_f = _fill_weights(gb_pos, gb_nrm, gb_alb, gb_gcam, gb_valid, d_lum,
                            eps_vis, offs, wbuf, cx, cy, sc.width, sc.height,
                            tx, ty, tz, tnx, tny, tnz)
    if total_f > 0.0:
        u = rng_uniform(seed, stream_id, ctr[0])
        ctr[0] += 1
        pickv = u * total_f
        acc = 0.0
        ksel = -1
        for i in range(offs.shape[0]):
            if wbuf[i] <= 0.0:
                continue
            ksel = i  # falls through to the last positive entry
            acc += wbuf[i]
            if pickv < acc:
                break
        if ksel >= 0:
            w_fwd = wbuf[ksel]
            npx = st_f[ST_PX] + offs[ksel, 0]
            npy = st_f[ST_PY] + offs[ksel, 1]
            ok = retrace_prefix(sc, vp, vn, vmat, vprim, vcls, nv, s_idx,
                                npx, npy, pvp, pvn, pvmat, pvprim, pvcls)
            if ok == 1 and visible(sc, pvp[s_idx, 0], pvp[s_idx, 1],
                                   pvp[s_idx, 2], tx, ty, tz):
                nf0, nf1, nf2 = path_f_eval(sc, pvp, pvn, pvmat, pvprim, nv, False)
                nfstar = luminance(nf0, nf1, nf2)
                if nfstar > 0.0:
                    jac = camera_jacobian(sc, pvp[1, 0], pvp[1, 1], pvp[1, 2],
                                          pvn[1, 0], pvn[1, 1], pvn[1, 2])
                    big_f_new = nfstar * jac
                    if big_f_new > 0.0:
                        total_r = _fill_weights(gb_pos, gb_nrm, gb_alb, gb_gcam,
                                                gb_valid, d_lum, eps_vis, offs,
                                                wbuf, cx + offs[ksel, 0],
                                                cy + offs[ksel, 1],
                                                sc.width, sc.height,
                                                tx, ty, tz, tnx, tny, tnz)
                        w_rev = wbuf[neg_idx[ksel]]
                        if total_r > 0.0 and w_rev > 0.0:
                            a = min(1.0, (big_f_new * (w_rev / total_r))
                                    / (st_f[ST_BIGF] * (w_fwd / total_f)))
    if splat_scale > 0.0:
        if a < 1.0:
            _splat(accum, st_f[ST_PX], st_f[ST_PY],
                   (1.0 - a) * splat_scale, f0, f1, f2, fstar)
        if a > 0.0:
            _splat(accum, npx, npy, a * splat_scale, nf0, nf1, nf2, nfstar)
    u = rng_uniform(seed, stream_id, ctr[0])
    ctr[0] += 1
    accepted = 0
    if u < a and a > 0.0:
        accepted = 1
        _accept_state(sc, st_f, st_i, vp, vn, vmat, vprim, vcls,
                      pvp, pvn, pvmat, pvprim, pvcls, nv,
                      npx, npy, nf0, nf1, nf2, nfstar, max_depth)
    return a, accepted, npx, npy


@njit(cache=True)
def run_chain(sc,
              gb_pos, gb_nrm, gb_alb, gb_gcam, gb_valid, d_lum, eps_vis,
              use_guided, offs, neg_idx, wbuf, pix_pmf, pix_cdf,
              sel_sigs, is_complement,
              vp, vn, vmat, vprim, vcls, st_i, st_f,
              pvp, pvn, pvmat, pvprim, pvcls,
              n_steps, splat_scale, accum,
              seed, stream_id, ctr,
              p_large, r_min, r_max, max_depth,
              visit_stride, visits):
    """Advance one in-partition chain by n_steps mutations.

    Mixes in-partition large steps (probability p_large) with image-plane
    perturbations: guided candidate proposals when use_guided is set (falling
    back to the isotropic lens move for states whose first non-specular
    vertex is the light itself), isotropic moves otherwise. splat_scale 0
    disables accumulation, which is how burn-in runs. With visit_stride > 0
    the current pixel is tallied into `visits` every visit_stride steps.
    """
    for _ in range(n_steps):
        u_sel = rng_uniform(seed, stream_id, ctr[0])
        ctr[0] += 1
        if u_sel < p_large:
            st_i[1] += 1
            _, acc, _, _ = large_step_move(
                sc, sel_sigs, is_complement, pix_pmf, pix_cdf,
                vp, vn, vmat, vprim, vcls,
                st_i, st_f, pvp, pvn, pvmat, pvprim, pvcls,
                seed, stream_id, ctr, splat_scale, accum, max_depth)
            st_i[2] += acc
        else:
            nv = int(st_i[0])
            s_idx = first_nonspecular(vcls, nv)
            if use_guided == 1 and vcls[s_idx] != CLS_L:
                st_i[3] += 1
                _, acc, _, _ = guided_move(
                    sc, gb_pos, gb_nrm, gb_alb, gb_gcam, gb_valid, d_lum,
                    eps_vis, offs, neg_idx, wbuf,
                    vp, vn, vmat, vprim, vcls, st_i, st_f,
                    pvp, pvn, pvmat, pvprim, pvcls,
                    seed, stream_id, ctr, splat_scale, accum, max_depth)
                st_i[4] += acc
            else:
                st_i[5] += 1
                _, acc, _, _ = lens_move(
                    sc, vp, vn, vmat, vprim, vcls, st_i, st_f,
                    pvp, pvn, pvmat, pvprim, pvcls,
                    seed, stream_id, ctr, splat_scale, accum,
                    r_min, r_max, max_depth)
                st_i[6] += acc
        st_i[7] += 1
        if visit_stride > 0 and st_i[7] % visit_stride == 0:
            visits[int(st_f[ST_PY]), int(st_f[ST_PX])] += 1
