import json
import math

import numpy as np
import pytest

from partmlt import kernels
from partmlt.core import RandomStream
from partmlt.scene import (Camera, Material, Quad, Scene, Sphere, Triangle,
                           KIND_DIFFUSE, KIND_GLASS, KIND_MIRROR,
                           bsdf_eval, bsdf_pdf, bsdf_sample, builtin_scene,
                           fresnel_split, furnace_scene, geometry_term,
                           load_scene, scene_from_dict)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@pytest.fixture(scope="module")
def simple_scene():
    mats = {"white": Material("white", KIND_DIFFUSE, (0.7, 0.7, 0.7)),
            "light": Material("light", KIND_DIFFUSE, (0, 0, 0))}
    prims = [
        Sphere((0, 0, 0), 1.0, "white"),
        Quad((-5, -2, -5), (10, 0, 0), (0, 0, 10), "white"),
        Quad((-1, 4, -1), (2, 0, 0), (0, 0, 2), "light", emission=(5, 5, 5)),
    ]
    cam = Camera((0, 0, -4), (0, 0, 0), (0, 1, 0), 45.0, 32, 32)
    return Scene(cam, mats, prims)


class TestIntersect:
    def test_ray_from_sphere_center(self, simple_scene):
        # any direction from the center hits the unit sphere at t = 1
        for d in [(1, 0, 0), (0, 1, 0), (0.6, 0.8, 0), unit((1, 2, 3))]:
            hit = simple_scene.intersect((0, 0, 0), unit(d))
            assert hit is not None
            assert hit.t == pytest.approx(1.0, rel=1e-9)
            assert hit.prim_id == 0

    def test_escape(self, simple_scene):
        hit = simple_scene.intersect((0, 10, 0), (0, 1, 0))
        assert hit is None

    def test_normal_faces_ray(self, simple_scene):
        hit = simple_scene.intersect((0, 0, -4), (0, 0, 1))
        assert hit.normal @ np.array([0, 0, 1.0]) < 0

    def test_quad_bounds(self, simple_scene):
        assert simple_scene.intersect((0, 0, -5.5), (0, 0, 1)) is not None
        hit = simple_scene.intersect((20, 5, 0), (0, -1, 0))
        assert hit is None  # outside the floor quad


class TestBvhEquivalence:
    @pytest.mark.parametrize("name", ["cornell-basic", "cornell-caustic",
                                      "veach-lamp"])
    def test_matches_linear_scan(self, name):
        scene = builtin_scene(name, 16, 16)
        sc = scene.flat()
        rng = np.random.default_rng(12)
        n = 10_000
        # rays from random points in the scene bound toward random directions
        origins = rng.uniform(-1.5, 2.5, size=(n, 3))
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for i in range(n):
            t1, p1 = kernels.intersect_ray(sc, *origins[i], *dirs[i], 1e-4, np.inf)
            t2, p2 = kernels.intersect_ray_brute(sc, *origins[i], *dirs[i], 1e-4, np.inf)
            assert p1 == p2
            if p1 >= 0:
                assert t1 == pytest.approx(t2, rel=1e-12)


class TestCamera:
    def test_roundtrip_all_pixels(self):
        cam = Camera((0.3, 0.4, -1.0), (0.5, 0.5, 1.0), (0, 1, 0), 40.0, 17, 13)
        for py in range(13):
            for px in range(17):
                o, d = cam.generate_ray(px + 0.5, py + 0.5)
                proj = cam.project(o + 3.7 * d)
                assert proj is not None
                assert proj[0] == pytest.approx(px + 0.5, abs=1e-9)
                assert proj[1] == pytest.approx(py + 0.5, abs=1e-9)

    def test_behind_camera(self):
        cam = Camera((0, 0, 0), (0, 0, 1), (0, 1, 0), 60.0, 8, 8)
        assert cam.project((0, 0, -2)) is None

    def test_kernel_matches_python(self):
        scene = builtin_scene("cornell-basic", 24, 24)
        sc = scene.flat()
        cam = scene.camera
        for px, py in [(0.5, 0.5), (12.3, 7.9), (23.5, 23.5)]:
            o, d = cam.generate_ray(px, py)
            kd = kernels.camera_dir(sc, px, py)
            assert np.allclose(d, kd, atol=1e-12)
            kp = kernels.camera_project(sc, *(o + 2.0 * d))
            assert kp[0] == pytest.approx(px, abs=1e-9)
            assert kp[1] == pytest.approx(py, abs=1e-9)


class TestGeometryTerm:
    def test_facing_unit_patches(self, simple_scene):
        # patches 1 apart, normals facing each other, nothing between them
        g = geometry_term((0, 3, 0), (0, -1, 0), (0, 2, 0), (0, 1, 0),
                          simple_scene)
        assert g == pytest.approx(1.0, rel=1e-12)

    def test_occluded(self, simple_scene):
        # the unit sphere sits between these two points
        g = geometry_term((0, 0, -2), (0, 0, 1), (0, 0, 2), (0, 0, -1),
                          simple_scene)
        assert g == 0.0

    def test_random_pairs_rederived(self, simple_scene):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = np.array([rng.uniform(-3, 3), rng.uniform(2.0, 3.5),
                          rng.uniform(-3, 3)])
            b = np.array([rng.uniform(-3, 3), rng.uniform(2.0, 3.5),
                          rng.uniform(-3, 3)])
            na = unit(rng.normal(size=3))
            nb = unit(rng.normal(size=3))
            g = geometry_term(a, na, b, nb, simple_scene)
            d = b - a
            dist2 = d @ d
            w = d / math.sqrt(dist2)
            expected = max(0.0, w @ na) * max(0.0, -(w @ nb)) / dist2
            if expected > 0 and not simple_scene.visible(a, b):
                expected = 0.0
            assert g == pytest.approx(expected, rel=1e-12, abs=1e-15)


class TestBsdf:
    def test_diffuse_eval_constant(self):
        m = Material("d", KIND_DIFFUSE, (0.5, 0.5, 0.5))
        val = bsdf_eval(m, unit((1, -1, 0)), unit((1, 1, 0)), (0, 1, 0))
        assert np.allclose(val, 0.5 / math.pi)

    def test_diffuse_wrong_side(self):
        m = Material("d", KIND_DIFFUSE, (0.5, 0.5, 0.5))
        val = bsdf_eval(m, unit((1, -1, 0)), unit((1, -1, 0)), (0, 1, 0))
        assert np.allclose(val, 0.0)

    def test_cosine_pdf_integrates_to_one(self):
        # Monte Carlo quadrature over the hemisphere with uniform directions
        m = Material("d", KIND_DIFFUSE, (1, 1, 1))
        rng = np.random.default_rng(8)
        n = 1_000_000
        z = rng.uniform(0, 1, n)
        phi = rng.uniform(0, 2 * math.pi, n)
        r = np.sqrt(1 - z * z)
        dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
        pdf = np.maximum(dirs[:, 2], 0.0) / math.pi
        integral = pdf.mean() * 2 * math.pi  # hemisphere area 2*pi
        assert integral == pytest.approx(1.0, abs=1e-2)

    def test_cosine_sampling_statistics(self):
        m = Material("d", KIND_DIFFUSE, (1, 1, 1))
        stream = RandomStream(11, 0)
        incoming = unit((0.3, -1, 0.2))
        normal = np.array([0.0, 1.0, 0.0])
        cos_vals = []
        for _ in range(20_000):
            d, val, pdf, spec = bsdf_sample(m, incoming, normal, stream)
            assert not spec
            c = float(d @ normal)
            assert c > 0
            assert pdf == pytest.approx(c / math.pi, rel=1e-12)
            cos_vals.append(c)
        # E[cos] under cos-weighted sampling is 2/3
        assert np.mean(cos_vals) == pytest.approx(2 / 3, abs=0.01)

    def test_mirror_exact_reflection(self):
        m = Material("m", KIND_MIRROR, (0.9, 0.9, 0.9))
        stream = RandomStream(1, 1)
        incoming = unit((1, -2, 0.5))
        normal = np.array([0.0, 1.0, 0.0])
        d, val, pdf, spec = bsdf_sample(m, incoming, normal, stream)
        expected = incoming - 2 * (incoming @ normal) * normal
        assert spec and pdf == 1.0
        assert np.allclose(d, expected, atol=1e-15)

    def test_fresnel_probabilities_sum_to_one(self):
        m = Material("g", KIND_GLASS, (1, 1, 1), ior=1.5)
        for ang in (5, 30, 60, 85):
            theta = math.radians(ang)
            incoming = unit((math.sin(theta), -math.cos(theta), 0))
            r, t = fresnel_split(m, incoming, (0, 1, 0))
            assert r + t == pytest.approx(1.0, abs=1e-12)
            assert 0 <= r <= 1

    def test_glass_tir(self):
        m = Material("g", KIND_GLASS, (1, 1, 1), ior=1.5)
        # from inside the medium at a grazing angle: total internal reflection
        incoming = unit((0.9, 0.436, 0))  # moving upward from inside
        r, t = fresnel_split(m, incoming, (0, 1, 0))
        assert r == 1.0 and t == 0.0

    def test_glass_branches_match_eval(self):
        m = Material("g", KIND_GLASS, (0.98, 0.98, 0.98), ior=1.5)
        stream = RandomStream(2, 5)
        incoming = unit((0.5, -1, 0.1))
        normal = np.array([0.0, 1.0, 0.0])
        seen = set()
        for _ in range(200):
            d, val, pdf, spec = bsdf_sample(m, incoming, normal, stream)
            assert spec
            ev = bsdf_eval(m, incoming, d, normal)
            assert np.allclose(ev, val, rtol=1e-12)
            assert bsdf_pdf(m, incoming, d, normal) == pytest.approx(pdf, rel=1e-12)
            seen.add("reflect" if d[1] > 0 else "refract")
        assert seen == {"reflect", "refract"}


class TestSceneJson:
    def _doc(self):
        return {
            "schema": 1,
            "camera": {"position": [0, 0, -2], "lookat": [0, 0, 0],
                       "up": [0, 1, 0], "fov": 45, "width": 8, "height": 8},
            "materials": [{"name": "w", "kind": "diffuse",
                           "albedo": [0.5, 0.5, 0.5]}],
            "primitives": [
                {"type": "sphere", "center": [0, 0, 0], "radius": 1,
                 "material": "w"},
                {"type": "quad", "p0": [0, 2, 0], "e1": [1, 0, 0],
                 "e2": [0, 0, 1], "material": "w", "emission": [3, 3, 3]},
            ],
        }

    def test_load_roundtrip(self, tmp_path):
        p = tmp_path / "scene.json"
        p.write_text(json.dumps(self._doc()))
        scene = load_scene(p)
        assert len(scene.primitives) == 2
        assert len(scene.lights) == 1
        assert scene.camera.width == 8

    def test_missing_field_named(self):
        doc = self._doc()
        del doc["camera"]["fov"]
        with pytest.raises(ValueError, match="fov"):
            scene_from_dict(doc)

    def test_unknown_kind_named(self):
        doc = self._doc()
        doc["materials"][0]["kind"] = "velvet"
        with pytest.raises(ValueError, match="velvet"):
            scene_from_dict(doc)

    def test_bad_schema(self):
        doc = self._doc()
        doc["schema"] = 99
        with pytest.raises(ValueError, match="schema"):
            scene_from_dict(doc)

    def test_parse_error_line(self, tmp_path):
        p = tmp_path / "broken.json"
        p.write_text('{"schema": 1,\n  "camera": }')
        with pytest.raises(ValueError, match="line 2"):
            load_scene(p)

    def test_triangle_primitive(self):
        doc = self._doc()
        doc["primitives"].append({"type": "triangle", "p0": [0, 0, 0],
                                  "e1": [1, 0, 0], "e2": [0, 1, 0],
                                  "material": "w"})
        scene = scene_from_dict(doc)
        assert isinstance(scene.primitives[-1], Triangle)


class TestBuiltins:
    def test_basic_contents(self):
        scene = builtin_scene("cornell-basic", 16, 16)
        assert len(scene.lights) >= 1
        kinds = {scene.materials[p.material].kind for p in scene.primitives}
        assert kinds == {KIND_DIFFUSE}

    def test_caustic_has_specular(self):
        scene = builtin_scene("cornell-caustic", 16, 16)
        kinds = {scene.materials[p.material].kind for p in scene.primitives}
        assert KIND_GLASS in kinds

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown builtin"):
            builtin_scene("cornell-warped")


class TestWhiteFurnace:
    @pytest.mark.slow
    def test_energy_conservation(self):
        """Albedo-1 uniformly emissive enclosure: with the depth cap at D
        surface vertices, every one of the D path-length families carries
        exactly the direct radiance, so pixel values are D * direct. The
        direct-only image doubles as the per-pixel vignetting oracle."""
        from partmlt.engine import render_pt

        depth = 6
        le = 0.2
        scene = furnace_scene(12, 12, albedo=1.0, le=le)
        full = render_pt(scene, 3000, seed=4, max_depth=depth).image
        direct = render_pt(scene, 512, seed=9, max_depth=1).image
        ratio = full.pixels.astype(np.float64) / (depth * direct.pixels.astype(np.float64))
        assert abs(ratio.mean() - 1.0) < 0.005
        assert np.abs(ratio - 1.0).max() < 0.02
