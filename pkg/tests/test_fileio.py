"""PPM / PFM round trips and invalid-value conventions."""

import numpy as np
import pytest

from raydepth import fileio
from raydepth.cost_volume import RGBImage
from raydepth.errors import ParameterError


def test_ppm_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    quantized = rng.integers(0, 256, size=(3, 5, 7)) / 255.0
    img = RGBImage(7, 5, quantized)
    path = tmp_path / "img.ppm"
    fileio.write_ppm(path, img)
    back = fileio.read_ppm(path)
    assert (back.width, back.height) == (7, 5)
    np.testing.assert_array_equal(back.channels, img.channels)


def test_ppm_header_comments_skipped(tmp_path):
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
    img = fileio.read_ppm(path)
    assert (img.width, img.height) == (2, 1)


def test_ppm_rejects_other_magic(tmp_path):
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P5\n2 1\n255\n" + bytes(2))
    with pytest.raises(ParameterError):
        fileio.read_ppm(path)


def test_pfm_roundtrip_float32_exact(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.uniform(0.1, 9.0, size=(4, 6)).astype(np.float32).astype(np.float64)
    path = tmp_path / "depth.pfm"
    fileio.write_pfm(path, data)
    back = fileio.read_pfm(path)
    np.testing.assert_array_equal(back, data)


def test_pfm_header_is_little_endian_scale(tmp_path):
    path = tmp_path / "depth.pfm"
    fileio.write_pfm(path, np.ones((2, 2)))
    header = path.read_bytes()[:20]
    assert header.startswith(b"Pf\n2 2\n-1.0\n")


def test_depth_map_invalid_convention(tmp_path):
    path = tmp_path / "depth.pfm"
    fileio.write_pfm(path, np.array([[2.0, 0.0], [-1.0, 3.0]]))
    s = fileio.read_depth_map(path)
    np.testing.assert_array_equal(s.valid, [[True, False], [False, True]])
    np.testing.assert_array_equal(s.depth, [[2.0, 0.0], [0.0, 3.0]])


def test_pfm_writer_rejects_rank3(tmp_path):
    with pytest.raises(ParameterError):
        fileio.write_pfm(tmp_path / "bad.pfm", np.zeros((2, 2, 2)))
