"""Scene description: geometry, materials, lights, camera, and builtins.

Scenes are immutable after construction. Intersection queries go through a
BVH whose flattened arrays (see `Scene.flat`) are shared with the compiled
kernels; a linear-scan oracle is kept alongside for verification.
"""

from __future__ import annotations

import enum
import json
import math
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "VertexClass",
    "Material",
    "Camera",
    "Sphere",
    "Quad",
    "Triangle",
    "Scene",
    "Hit",
    "load_scene",
    "builtin_scene",
    "furnace_scene",
    "BUILTIN_NAMES",
    "RAY_EPS",
]

RAY_EPS = 1e-4  # self-intersection offset, scene scale ~1

KIND_DIFFUSE = 0
KIND_MIRROR = 1
KIND_GLASS = 2

_KIND_NAMES = {"diffuse": KIND_DIFFUSE, "mirror": KIND_MIRROR, "glass": KIND_GLASS}


class VertexClass(enum.IntEnum):
    """Heckbert-style interaction classes, camera-first."""

    E = 0  # eye
    D = 1  # diffuse
    S = 2  # specular (mirror or glass)
    L = 3  # light


@dataclass(frozen=True)
class Material:
    name: str
    kind: int
    albedo: np.ndarray  # (3,), channels in [0, 1]
    ior: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64))
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError(f"material {self.name!r}: albedo must lie in [0,1]^3")
        if self.kind == KIND_GLASS and self.ior <= 1.0:
            raise ValueError(f"material {self.name!r}: glass ior must be > 1")

    @property
    def vertex_class(self) -> VertexClass:
        return VertexClass.D if self.kind == KIND_DIFFUSE else VertexClass.S


def _vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {v.shape}")
    return v


def _normalize(v):
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalize zero vector")
    return v / n


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    material: str
    emission: np.ndarray | None = None

    def area(self) -> float:
        return 4.0 * math.pi * self.radius * self.radius


@dataclass(frozen=True)
class Quad:
    """Parallelogram: p0 + u*e1 + v*e2 with u, v in [0, 1]."""

    p0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    material: str
    emission: np.ndarray | None = None

    def area(self) -> float:
        return float(np.linalg.norm(np.cross(self.e1, self.e2)))

    def normal(self) -> np.ndarray:
        return _normalize(np.cross(self.e1, self.e2))


@dataclass(frozen=True)
class Triangle:
    p0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    material: str
    emission: np.ndarray | None = None

    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(np.cross(self.e1, self.e2)))

    def normal(self) -> np.ndarray:
        return _normalize(np.cross(self.e1, self.e2))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera. fov is the vertical field of view in degrees.

    Pixel (px, py) are continuous image coordinates with (0, 0) at the
    top-left corner; project(generate_ray(p)) round-trips exactly.
    """

    position: np.ndarray
    lookat: np.ndarray
    up: np.ndarray
    fov: float
    width: int
    height: int

    def __post_init__(self):
        fwd = _normalize(_vec(self.lookat) - _vec(self.position))
        right = _normalize(np.cross(fwd, _vec(self.up)))
        upv = np.cross(right, fwd)
        object.__setattr__(self, "_fwd", fwd)
        object.__setattr__(self, "_right", right)
        object.__setattr__(self, "_up", upv)
        f_img = (self.height / 2.0) / math.tan(math.radians(self.fov) / 2.0)
        object.__setattr__(self, "f_img", f_img)

    @property
    def forward(self) -> np.ndarray:
        return self._fwd

    def generate_ray(self, px: float, py: float):
        x = (px - self.width / 2.0) / self.f_img
        y = (self.height / 2.0 - py) / self.f_img
        d = _normalize(self._fwd + x * self._right + y * self._up)
        return np.array(self.position, dtype=np.float64), d

    def project(self, point: np.ndarray):
        """World point -> continuous pixel coordinates (None if behind)."""
        d = _vec(point) - self.position
        t = float(d @ self._fwd)
        if t <= 0:
            return None
        px = (d @ self._right) / t * self.f_img + self.width / 2.0
        py = self.height / 2.0 - (d @ self._up) / t * self.f_img
        return px, py


@dataclass(frozen=True)
class Hit:
    t: float
    point: np.ndarray
    normal: np.ndarray  # geometric normal, faces the ray origin
    material: Material
    prim_id: int
    emission: np.ndarray


# flattened arrays shared with the compiled kernels
SceneArrays = namedtuple(
    "SceneArrays",
    [
        "prim_kind",   # (N,) int32: 0 sphere, 1 quad, 2 triangle
        "prim_data",   # (N, 9) f8: sphere c,r | quad/tri p0,e1,e2
        "prim_norm",   # (N, 3) f8: unit normal (quads/tris), zero for spheres
        "prim_mat",    # (N,) int32
        "prim_emit",   # (N, 3) f8
        "mat_kind",    # (M,) int32
        "mat_albedo",  # (M, 3) f8
        "mat_ior",     # (M,) f8
        "light_prims", # (L,) int32: emissive primitive ids
        "light_cdf",   # (L,) f8: area-weighted cdf
        "light_area",  # float: total emissive area
        "node_min",    # (K, 3) f8 bvh
        "node_max",    # (K, 3) f8
        "node_left",   # (K,) int32: left child, or first prim slot for leaves
        "node_right",  # (K,) int32: right child, or -1 for leaves
        "node_count",  # (K,) int32: 0 interior, else leaf primitive count
        "prim_order",  # (N,) int32: bvh leaf ordering
        "cam_pos", "cam_right", "cam_up", "cam_fwd",  # (3,) f8 each
        "f_img",       # float, focal length in pixel units
        "width", "height",  # ints
    ],
)


def _prim_bounds(prim) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(prim, Sphere):
        c = _vec(prim.center)
        return c - prim.radius, c + prim.radius
    corners = [_vec(prim.p0), _vec(prim.p0) + prim.e1, _vec(prim.p0) + prim.e2]
    if isinstance(prim, Quad):
        corners.append(_vec(prim.p0) + prim.e1 + prim.e2)
    corners = np.stack(corners)
    return corners.min(axis=0), corners.max(axis=0)


def _build_bvh(primitives):
    """Median-split BVH; returns flat arrays plus the leaf ordering."""
    n = len(primitives)
    bounds = [_prim_bounds(p) for p in primitives]
    centroids = np.array([(lo + hi) * 0.5 for lo, hi in bounds])

    node_min, node_max, node_left, node_right, node_count = [], [], [], [], []
    order: list[int] = []

    def bbox_of(idx):
        lo = np.min([bounds[i][0] for i in idx], axis=0)
        hi = np.max([bounds[i][1] for i in idx], axis=0)
        return lo, hi

    def build(idx) -> int:
        me = len(node_min)
        lo, hi = bbox_of(idx)
        node_min.append(lo)
        node_max.append(hi)
        node_left.append(0)
        node_right.append(-1)
        node_count.append(0)
        if len(idx) <= 2:
            node_left[me] = len(order)
            node_count[me] = len(idx)
            order.extend(idx)
            return me
        axis = int(np.argmax(hi - lo))
        keys = sorted(idx, key=lambda i: (centroids[i][axis], i))
        mid = len(keys) // 2
        node_left[me] = build(keys[:mid])
        node_right[me] = build(keys[mid:])
        return me

    if n:
        build(list(range(n)))
    else:
        node_min.append(np.zeros(3))
        node_max.append(np.zeros(3))
        node_left.append(0)
        node_right.append(-1)
        node_count.append(0)

    return (
        np.asarray(node_min, dtype=np.float64).reshape(-1, 3),
        np.asarray(node_max, dtype=np.float64).reshape(-1, 3),
        np.asarray(node_left, dtype=np.int32),
        np.asarray(node_right, dtype=np.int32),
        np.asarray(node_count, dtype=np.int32),
        np.asarray(order, dtype=np.int32),
    )


@dataclass
class Scene:
    camera: Camera
    materials: dict[str, Material]
    primitives: list
    _flat: SceneArrays | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for p in self.primitives:
            if p.material not in self.materials:
                raise ValueError(f"primitive references unknown material {p.material!r}")

    @property
    def lights(self) -> list:
        return [p for p in self.primitives if p.emission is not None
                and float(np.max(p.emission)) > 0.0]

    def material_index(self, name: str) -> int:
        """Index of a material in the flattened arrays (sorted by name)."""
        return sorted(self.materials).index(name)

    def flat(self) -> SceneArrays:
        if self._flat is None:
            self._flat = _flatten(self)
        return self._flat

    # --- single-ray queries (thin wrappers over the kernels) ---

    def intersect(self, origin, direction, use_bvh: bool = True) -> Hit | None:
        from . import kernels

        sc = self.flat()
        o = _vec(origin)
        d = _vec(direction)
        if use_bvh:
            t, pid = kernels.intersect_ray(sc, o[0], o[1], o[2], d[0], d[1], d[2],
                                           RAY_EPS, np.inf)
        else:
            t, pid = kernels.intersect_ray_brute(sc, o[0], o[1], o[2], d[0], d[1], d[2],
                                                 RAY_EPS, np.inf)
        if pid < 0:
            return None
        point = o + t * d
        nx, ny, nz = kernels.prim_normal_at(sc, pid, point[0], point[1], point[2])
        normal = np.array([nx, ny, nz])
        if normal @ d > 0:
            normal = -normal
        mat_name = self.primitives[pid].material
        emit = self.primitives[pid].emission
        emit = np.zeros(3) if emit is None else np.asarray(emit, dtype=np.float64)
        return Hit(float(t), point, normal, self.materials[mat_name], int(pid), emit)

    def visible(self, a, b) -> bool:
        from . import kernels

        return bool(kernels.visible(self.flat(), *(_vec(a)), *(_vec(b))))


def geometry_term(a_pos, a_n, b_pos, b_n, scene: Scene) -> float:
    """cos * cos' / squared distance, gated by a shadow ray."""
    a_pos, b_pos = _vec(a_pos), _vec(b_pos)
    d = b_pos - a_pos
    dist2 = float(d @ d)
    if dist2 == 0:
        raise ValueError("geometry term of coincident points")
    d = d / math.sqrt(dist2)
    cos_a = max(0.0, float(_vec(a_n) @ d))
    cos_b = max(0.0, float(-(_vec(b_n) @ d)))
    if cos_a == 0.0 or cos_b == 0.0:
        return 0.0
    if not scene.visible(a_pos, b_pos):
        return 0.0
    return cos_a * cos_b / dist2


def _flatten(scene: Scene) -> SceneArrays:
    prims = scene.primitives
    n = len(prims)
    mat_names = sorted(scene.materials)
    mat_index = {m: i for i, m in enumerate(mat_names)}

    prim_kind = np.zeros(n, dtype=np.int32)
    prim_data = np.zeros((n, 9), dtype=np.float64)
    prim_norm = np.zeros((n, 3), dtype=np.float64)
    prim_mat = np.zeros(n, dtype=np.int32)
    prim_emit = np.zeros((n, 3), dtype=np.float64)

    for i, p in enumerate(prims):
        prim_mat[i] = mat_index[p.material]
        if p.emission is not None:
            prim_emit[i] = np.asarray(p.emission, dtype=np.float64)
        if isinstance(p, Sphere):
            prim_kind[i] = 0
            prim_data[i, :3] = _vec(p.center)
            prim_data[i, 3] = p.radius
        else:
            prim_kind[i] = 1 if isinstance(p, Quad) else 2
            prim_data[i, 0:3] = _vec(p.p0)
            prim_data[i, 3:6] = _vec(p.e1)
            prim_data[i, 6:9] = _vec(p.e2)
            prim_norm[i] = p.normal()

    mat_kind = np.array([scene.materials[m].kind for m in mat_names], dtype=np.int32)
    mat_albedo = np.stack([scene.materials[m].albedo for m in mat_names]) \
        if mat_names else np.zeros((0, 3))
    mat_ior = np.array([scene.materials[m].ior for m in mat_names], dtype=np.float64)

    light_ids = [i for i, p in enumerate(prims)
                 if p.emission is not None and float(np.max(p.emission)) > 0.0]
    areas = np.array([prims[i].area() for i in light_ids], dtype=np.float64)
    total = float(areas.sum())
    cdf = np.cumsum(areas) / total if total > 0 else np.zeros(0)
    if len(cdf):
        cdf[-1] = 1.0

    node_min, node_max, node_left, node_right, node_count, order = _build_bvh(prims)

    cam = scene.camera
    return SceneArrays(
        prim_kind, prim_data, prim_norm, prim_mat, prim_emit,
        mat_kind, mat_albedo.astype(np.float64), mat_ior,
        np.asarray(light_ids, dtype=np.int32), cdf, total,
        node_min, node_max, node_left, node_right, node_count, order,
        np.ascontiguousarray(cam.position, dtype=np.float64),
        np.ascontiguousarray(cam._right, dtype=np.float64),
        np.ascontiguousarray(cam._up, dtype=np.float64),
        np.ascontiguousarray(cam._fwd, dtype=np.float64),
        float(cam.f_img), int(cam.width), int(cam.height),
    )


# ---------------------------------------------------------------------------
# scene JSON (schema 1)
# ---------------------------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ValueError(f"scene json: missing field {key!r} in {where}")
    return obj[key]


def load_scene(path) -> Scene:
    """Load a scene from the versioned JSON format (see README)."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"scene json: parse error at line {e.lineno}: {e.msg}") from e
    return scene_from_dict(doc)


def scene_from_dict(doc: dict) -> Scene:
    schema = doc.get("schema")
    if schema != 1:
        raise ValueError(f"scene json: unsupported or missing 'schema' (got {schema!r})")
    cam_doc = _require(doc, "camera", "top level")
    camera = Camera(
        position=_vec(_require(cam_doc, "position", "camera")),
        lookat=_vec(_require(cam_doc, "lookat", "camera")),
        up=_vec(_require(cam_doc, "up", "camera")),
        fov=float(_require(cam_doc, "fov", "camera")),
        width=int(_require(cam_doc, "width", "camera")),
        height=int(_require(cam_doc, "height", "camera")),
    )
    materials = {}
    for m in _require(doc, "materials", "top level"):
        name = _require(m, "name", "materials[]")
        kind = _require(m, "kind", f"material {name!r}")
        if kind not in _KIND_NAMES:
            raise ValueError(f"scene json: material {name!r} has unknown kind {kind!r}")
        materials[name] = Material(
            name=name,
            kind=_KIND_NAMES[kind],
            albedo=_vec(_require(m, "albedo", f"material {name!r}")),
            ior=float(m.get("ior", 1.5)),
        )
    prims = []
    for i, p in enumerate(_require(doc, "primitives", "top level")):
        where = f"primitives[{i}]"
        ptype = _require(p, "type", where)
        mat = _require(p, "material", where)
        emission = np.asarray(p["emission"], dtype=np.float64) if "emission" in p else None
        if ptype == "sphere":
            prims.append(Sphere(_vec(_require(p, "center", where)),
                                float(_require(p, "radius", where)), mat, emission))
        elif ptype == "quad":
            prims.append(Quad(_vec(_require(p, "p0", where)),
                              _vec(_require(p, "e1", where)),
                              _vec(_require(p, "e2", where)), mat, emission))
        elif ptype == "triangle":
            prims.append(Triangle(_vec(_require(p, "p0", where)),
                                  _vec(_require(p, "e1", where)),
                                  _vec(_require(p, "e2", where)), mat, emission))
        else:
            raise ValueError(f"scene json: {where} has unknown type {ptype!r}")
    return Scene(camera=camera, materials=materials, primitives=prims)


# ---------------------------------------------------------------------------
# builtin procedural scenes
# ---------------------------------------------------------------------------

BUILTIN_NAMES = ("cornell-basic", "cornell-caustic", "veach-lamp")


def _cornell_shell(materials, prims):
    """Unit-cube box interior: floor, ceiling, back, left (red), right (green)."""
    materials.update({
        "white": Material("white", KIND_DIFFUSE, (0.73, 0.73, 0.73)),
        "red": Material("red", KIND_DIFFUSE, (0.65, 0.06, 0.06)),
        "green": Material("green", KIND_DIFFUSE, (0.12, 0.48, 0.10)),
        "light": Material("light", KIND_DIFFUSE, (0.0, 0.0, 0.0)),
    })
    z0, z1 = 0.0, 1.0
    # e1 x e2 keeps every canonical normal pointing into the box
    prims += [
        Quad((0, 0, z0), (0, 0, z1 - z0), (1, 0, 0), "white"),       # floor, n = +y
        Quad((0, 1, z0), (1, 0, 0), (0, 0, z1 - z0), "white"),       # ceiling, n = -y
        Quad((0, 0, z1), (0, 1, 0), (1, 0, 0), "white"),             # back, n = -z
        Quad((0, 0, z0), (0, 1, 0), (0, 0, z1 - z0), "red"),         # left, n = +x
        Quad((1, 0, z0), (0, 0, z1 - z0), (0, 1, 0), "green"),       # right, n = -x
    ]


def _cornell_camera(width, height):
    return Camera(position=(0.5, 0.5, -1.35), lookat=(0.5, 0.5, 1.0),
                  up=(0, 1, 0), fov=39.0, width=width, height=height)


def builtin_scene(name: str, width: int = 128, height: int = 128) -> Scene:
    """Procedural test scenes: cornell-basic, cornell-caustic, veach-lamp."""
    if name == "cornell-basic":
        materials: dict[str, Material] = {}
        prims: list = []
        _cornell_shell(materials, prims)
        prims.append(Quad((0.35, 0.9995, 0.35), (0.3, 0, 0), (0, 0, 0.3), "light",
                          emission=(12.0, 11.0, 9.0)))
        prims.append(Sphere((0.3, 0.2, 0.55), 0.2, "white"))
        return Scene(_cornell_camera(width, height), materials, prims)

    if name == "cornell-caustic":
        materials = {}
        prims = []
        _cornell_shell(materials, prims)
        materials["glass"] = Material("glass", KIND_GLASS, (0.98, 0.98, 0.98), ior=1.5)
        materials["mirror"] = Material("mirror", KIND_MIRROR, (0.9, 0.9, 0.9))
        # small hot light: caustic through the sphere dominates a tight region
        prims.append(Quad((0.42, 0.9995, 0.42), (0.16, 0, 0), (0, 0, 0.16), "light",
                          emission=(68.0, 60.0, 48.0)))
        prims.append(Sphere((0.62, 0.28, 0.5), 0.17, "glass"))
        prims.append(Sphere((0.22, 0.16, 0.7), 0.16, "mirror"))
        return Scene(_cornell_camera(width, height), materials, prims)

    if name == "veach-lamp":
        materials = {
            "floor": Material("floor", KIND_DIFFUSE, (0.6, 0.6, 0.6)),
            "wall": Material("wall", KIND_DIFFUSE, (0.5, 0.5, 0.55)),
            "hood": Material("hood", KIND_MIRROR, (0.92, 0.92, 0.92)),
            "light": Material("light", KIND_DIFFUSE, (0.0, 0.0, 0.0)),
        }
        prims = [
            Quad((-2, 0, -1), (4, 0, 0), (0, 0, 4), "floor"),
            Quad((-2, 0, 3), (0, 2.5, 0), (4, 0, 0), "wall"),
            # lamp: upward-facing strip whose light reaches the floor via the hood
            Quad((-0.35, 1.45, 1.3), (0, 0, 0.22), (0.7, 0, 0), "light",
                 emission=(40.0, 36.0, 30.0)),
            Quad((-0.5, 2.05, 1.1), (1.0, 0, 0), (0, -0.35, 0.75), "hood"),
        ]
        camera = Camera(position=(0, 1.1, -2.6), lookat=(0, 0.7, 1.2),
                        up=(0, 1, 0), fov=42.0, width=width, height=height)
        return Scene(camera, materials, prims)

    raise ValueError(f"unknown builtin scene {name!r}; choose from {BUILTIN_NAMES}")


def furnace_scene(width: int = 16, height: int = 16, albedo: float = 1.0,
                  le: float = 0.2) -> Scene:
    """Closed uniformly-emissive diffuse box around the camera (quad normals
    face inward; emission is one-sided).

    With albedo 1 each bounce preserves radiance, so a depth-capped tracer
    sees exactly (max vertices) * direct radiance. Used by energy tests.
    """
    materials = {
        "shell": Material("shell", KIND_DIFFUSE, (albedo, albedo, albedo)),
    }
    s = 5.0
    e = (le, le, le)
    # all canonical normals (e1 x e2) face the interior; emission is one-sided
    prims = [
        Quad((-s, -s, -s), (0, 0, 2 * s), (2 * s, 0, 0), "shell", emission=e),  # floor +y
        Quad((-s, s, -s), (2 * s, 0, 0), (0, 0, 2 * s), "shell", emission=e),   # ceiling -y
        Quad((-s, -s, s), (0, 2 * s, 0), (2 * s, 0, 0), "shell", emission=e),   # back -z
        Quad((-s, -s, -s), (2 * s, 0, 0), (0, 2 * s, 0), "shell", emission=e),  # front +z
        Quad((-s, -s, -s), (0, 2 * s, 0), (0, 0, 2 * s), "shell", emission=e),  # left +x
        Quad((s, -s, -s), (0, 0, 2 * s), (0, 2 * s, 0), "shell", emission=e),   # right -x
    ]
    camera = Camera(position=(0, 0, 0), lookat=(0, 0, 1), up=(0, 1, 0),
                    fov=60.0, width=width, height=height)
    return Scene(camera, materials, prims)


# ---------------------------------------------------------------------------
# BSDF queries
# ---------------------------------------------------------------------------
# Conventions: `incoming` points toward the surface point, `outgoing` away
# from it, `normal` is the canonical geometric normal (either side). Specular
# values are delta-factored (albedo * branch probability / |cos_out|), usable
# only along the sampled direction; their pdf is the discrete branch
# probability.

def _fresnel(cos_i: float, eta_rel: float) -> tuple[float, float]:
    sin2_t = (1.0 - cos_i * cos_i) / (eta_rel * eta_rel)
    if sin2_t >= 1.0:
        return 1.0, 0.0
    cos_t = math.sqrt(1.0 - sin2_t)
    rs = (cos_i - eta_rel * cos_t) / (cos_i + eta_rel * cos_t)
    rp = (eta_rel * cos_i - cos_t) / (eta_rel * cos_i + cos_t)
    return 0.5 * (rs * rs + rp * rp), cos_t


def _orient_glass(material: Material, incoming, normal):
    """Returns (eta_rel, oriented normal, cos_i, fresnel R, cos_t)."""
    cos_raw = -float(incoming @ normal)
    if cos_raw >= 0.0:
        eta_rel, nn, cos_i = material.ior, normal, cos_raw
    else:
        eta_rel, nn, cos_i = 1.0 / material.ior, -normal, -cos_raw
    r_coef, cos_t = _fresnel(cos_i, eta_rel)
    return eta_rel, nn, cos_i, r_coef, cos_t


def bsdf_eval(material: Material, incoming, outgoing, normal) -> np.ndarray:
    """BSDF value. Diffuse: albedo/pi (zero for invalid sides); mirror/glass:
    delta-factored value along the discrete branch directions, zero elsewhere."""
    incoming = _normalize(_vec(incoming))
    outgoing = _normalize(_vec(outgoing))
    normal = _vec(normal)
    if material.kind == KIND_GLASS:
        eta_rel, nn, cos_i, r_coef, cos_t = _orient_glass(material, incoming, normal)
        cos_o = float(outgoing @ nn)
        if abs(cos_o) < 1e-12:
            return np.zeros(3)
        refl = incoming - 2.0 * float(incoming @ nn) * nn
        if float(refl @ outgoing) > 1.0 - 1e-9:
            return material.albedo * (r_coef / abs(cos_o))
        if r_coef < 1.0:
            tdir = incoming / eta_rel + (cos_i / eta_rel - cos_t) * nn
            tdir = _normalize(tdir)
            if float(tdir @ outgoing) > 1.0 - 1e-9:
                return material.albedo * ((1.0 - r_coef) / abs(cos_o))
        return np.zeros(3)
    n = -normal if float(normal @ incoming) > 0 else normal
    cos_i = -float(incoming @ n)
    cos_o = float(outgoing @ n)
    if material.kind == KIND_DIFFUSE:
        if cos_i <= 0 or cos_o <= 0:
            return np.zeros(3)
        return material.albedo / math.pi
    refl = incoming - 2.0 * float(incoming @ n) * n
    if abs(cos_o) > 1e-12 and float(refl @ outgoing) > 1.0 - 1e-9:
        return material.albedo / abs(cos_o)
    return np.zeros(3)


def bsdf_pdf(material: Material, incoming, outgoing, normal) -> float:
    """Sampling density: cos/pi for diffuse (solid angle), the discrete
    branch probability for mirror (1) and glass (R or 1-R)."""
    incoming = _normalize(_vec(incoming))
    outgoing = _normalize(_vec(outgoing))
    normal = _vec(normal)
    if material.kind == KIND_GLASS:
        eta_rel, nn, cos_i, r_coef, cos_t = _orient_glass(material, incoming, normal)
        refl = incoming - 2.0 * float(incoming @ nn) * nn
        if float(refl @ outgoing) > 1.0 - 1e-9:
            return r_coef
        if r_coef < 1.0:
            tdir = _normalize(incoming / eta_rel + (cos_i / eta_rel - cos_t) * nn)
            if float(tdir @ outgoing) > 1.0 - 1e-9:
                return 1.0 - r_coef
        return 0.0
    n = -normal if float(normal @ incoming) > 0 else normal
    if material.kind == KIND_DIFFUSE:
        cos_o = float(outgoing @ n)
        return max(0.0, cos_o) / math.pi
    refl = incoming - 2.0 * float(incoming @ n) * n
    return 1.0 if float(refl @ outgoing) > 1.0 - 1e-9 else 0.0


def bsdf_sample(material: Material, incoming, normal, stream):
    """Draw an outgoing direction. Returns (direction, value, pdf, specular).

    Diffuse: cosine-weighted about the oriented normal. Mirror: the exact
    reflection. Glass: reflect with probability R, else refract (total
    internal reflection forces the reflect branch).
    """
    from . import kernels

    incoming = _normalize(_vec(incoming))
    normal = _vec(normal)
    if material.kind == KIND_DIFFUSE:
        n = -normal if float(normal @ incoming) > 0 else normal
        u1, u2 = stream.uniform2()
        d = np.array(kernels.cosine_sample(n[0], n[1], n[2], u1, u2))
        return d, bsdf_eval(material, incoming, d, normal), \
            bsdf_pdf(material, incoming, d, normal), False
    if material.kind == KIND_MIRROR:
        n = -normal if float(normal @ incoming) > 0 else normal
        d = incoming - 2.0 * float(incoming @ n) * n
        return d, material.albedo / abs(float(d @ n)), 1.0, True
    eta_rel, nn, cos_i, r_coef, cos_t = _orient_glass(material, incoming, normal)
    if stream.uniform() < r_coef:
        d = incoming - 2.0 * float(incoming @ nn) * nn
        prob = r_coef
    else:
        d = _normalize(incoming / eta_rel + (cos_i / eta_rel - cos_t) * nn)
        prob = 1.0 - r_coef
    return d, material.albedo * (prob / abs(float(d @ nn))), prob, True


def fresnel_split(material: Material, incoming, normal) -> tuple[float, float]:
    """(reflect, refract) event probabilities for a glass interface."""
    _, _, _, r_coef, _ = _orient_glass(material, _normalize(_vec(incoming)),
                                       _vec(normal))
    return r_coef, 1.0 - r_coef
