import json

import numpy as np
import pytest

from partmlt.cli import main
from partmlt.imageio import read_pfm


def run_cli(*argv):
    return main(list(argv))


class TestRender:
    def test_partitioned_render(self, tmp_path, capsys):
        out = tmp_path / "img.pfm"
        rc = run_cli("render", "--scene", "builtin:cornell-basic",
                     "--width", "24", "--height", "24", "--algo", "partitioned",
                     "--mpp", "4", "--prepass-ppp", "4", "--burn-in", "16",
                     "--K", "3", "--y-size", "9", "--radius", "6",
                     "--seed", "3", "--out", str(out))
        assert rc == 0
        img = read_pfm(out)
        assert img.width == 24 and img.pixels.sum() > 0

    def test_pt_ppm_output(self, tmp_path):
        out = tmp_path / "img.ppm"
        rc = run_cli("render", "--scene", "cornell-basic", "--width", "16",
                     "--height", "16", "--algo", "pt", "--spp", "8",
                     "--out", str(out))
        assert rc == 0
        assert out.read_bytes().startswith(b"P6\n16 16\n255\n")

    def test_scene_file(self, tmp_path):
        doc = {
            "schema": 1,
            "camera": {"position": [0, 0, -2], "lookat": [0, 0, 1],
                       "up": [0, 1, 0], "fov": 45, "width": 12, "height": 12},
            "materials": [{"name": "w", "kind": "diffuse",
                           "albedo": [0.6, 0.6, 0.6]}],
            "primitives": [
                {"type": "quad", "p0": [-2, -2, 2], "e1": [0, 4, 0],
                 "e2": [4, 0, 0], "material": "w"},
                {"type": "quad", "p0": [-1, 2, 0], "e1": [2, 0, 0],
                 "e2": [0, 0, 2], "material": "w", "emission": [6, 6, 6]},
            ],
        }
        scene_path = tmp_path / "scene.json"
        scene_path.write_text(json.dumps(doc))
        out = tmp_path / "img.pfm"
        rc = run_cli("render", "--scene", str(scene_path), "--algo", "mlt",
                     "--mpp", "2", "--prepass-ppp", "2", "--burn-in", "8",
                     "--out", str(out))
        assert rc == 0

    def test_bad_scene_errors(self, tmp_path, capsys):
        rc = run_cli("render", "--scene", "builtin:nonexistent",
                     "--out", str(tmp_path / "x.pfm"))
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_dump_partitions(self, tmp_path):
        out = tmp_path / "img.pfm"
        dump = tmp_path / "parts"
        rc = run_cli("render", "--scene", "builtin:cornell-basic",
                     "--width", "16", "--height", "16", "--mpp", "2",
                     "--prepass-ppp", "4", "--burn-in", "8", "--K", "2",
                     "--y-size", "9", "--radius", "4",
                     "--out", str(out), "--dump-partitions", str(dump))
        assert rc == 0
        files = sorted(p.name for p in dump.iterdir())
        assert any(f.startswith("guidance_") for f in files)
        assert any(f.startswith("splat_") for f in files)


class TestCompare:
    def test_rmse_output(self, tmp_path, capsys):
        from partmlt.core import ImageBuffer
        from partmlt.imageio import write_pfm

        a = ImageBuffer.from_array(np.full((2, 2, 3), 1.0))
        b = ImageBuffer.from_array(np.zeros((2, 2, 3)))
        write_pfm(a, tmp_path / "a.pfm")
        write_pfm(b, tmp_path / "b.pfm")
        rc = run_cli("compare", str(tmp_path / "a.pfm"), str(tmp_path / "b.pfm"))
        assert rc == 0
        assert float(capsys.readouterr().out.strip()) == pytest.approx(1.0)

    def test_missing_file(self, capsys):
        rc = run_cli("compare", "/nonexistent/a.pfm", "/nonexistent/b.pfm")
        assert rc == 1


class TestSweep:
    def test_small_grid(self, tmp_path):
        out = tmp_path / "grid.csv"
        rc = run_cli("sweep", "--scene", "builtin:cornell-basic",
                     "--width", "16", "--height", "16", "--mpp", "2",
                     "--prepass-ppp", "4", "--burn-in", "8", "--K", "2",
                     "--y-sizes", "9,17", "--radii", "4,8",
                     "--ref-spp", "32", "--seed", "2", "--out", str(out))
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 5  # header + 2x2 grid
        assert lines[0].startswith("y_size,radius,rmse,structured_noise")


class TestToy1dCommand:
    def test_runs_and_writes_csv(self, tmp_path, capsys):
        out = tmp_path / "toy.csv"
        rc = run_cli("toy1d", "--reps", "10", "--samples", "200",
                     "--out", str(out))
        assert rc == 0
        assert "variance ratio" in capsys.readouterr().out
        assert out.exists()


class TestPartitionReport:
    def test_csv_columns(self, tmp_path):
        out = tmp_path / "parts.csv"
        rc = run_cli("partition-report", "--scene", "builtin:cornell-basic",
                     "--width", "16", "--height", "16", "--K", "3",
                     "--prepass-ppp", "4", "--out", str(out))
        assert rc == 0
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "partition_id,signatures,gamma,P,b,reservoir_size"
        assert len(lines) >= 3
        ps = [float(line.split(",")[3]) for line in lines[1:]]
        assert sum(ps) == pytest.approx(1.0, abs=1e-6)
