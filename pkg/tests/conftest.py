"""Shared fixtures and the reference-render cache.

Reference images are deterministic for a fixed seed, so long path-traced
references are cached on disk (under the system temp dir by default,
override with PARTMLT_TEST_CACHE). Delete the directory to force
recomputation.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
import pytest

from partmlt import builtin_scene
from partmlt.engine import render_pt
from partmlt.imageio import read_pfm, write_pfm


def cache_dir() -> Path:
    d = Path(os.environ.get("PARTMLT_TEST_CACHE",
                            Path(tempfile.gettempdir()) / "partmlt-test-cache"))
    d.mkdir(parents=True, exist_ok=True)
    return d


def cached_reference(scene_name: str, size: int, spp: int, seed: int,
                     max_depth: int = 12):
    """Path-traced reference image, computed once per parameter set."""
    key = f"ref_{scene_name}_{size}_{spp}_{seed}_{max_depth}.pfm"
    path = cache_dir() / key
    if path.exists():
        return read_pfm(path)
    scene = builtin_scene(scene_name, size, size)
    img = render_pt(scene, spp, seed, max_depth=max_depth).image
    write_pfm(img, path)
    return img


@pytest.fixture(scope="session")
def cornell_basic_32():
    return builtin_scene("cornell-basic", 32, 32)


@pytest.fixture(scope="session")
def cornell_basic_64():
    return builtin_scene("cornell-basic", 64, 64)


@pytest.fixture(scope="session")
def cornell_caustic_64():
    return builtin_scene("cornell-caustic", 64, 64)


@pytest.fixture(scope="session")
def prepass_basic_32(cornell_basic_32):
    from partmlt.path import run_prepass

    return run_prepass(cornell_basic_32, 8, seed=42)


@pytest.fixture(scope="session")
def prepass_caustic_64(cornell_caustic_64):
    from partmlt.path import run_prepass

    return run_prepass(cornell_caustic_64, 8, seed=42)


def rng(seed=0):
    return np.random.default_rng(seed)
