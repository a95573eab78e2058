import numpy as np
import pytest

from bruno.errors import ShapeMismatch
from bruno.images import emit_grid, read_pnm, to_pixels


def test_pgm_header_for_2x2_grid_of_28px(tmp_path):
    path = tmp_path / "g.pgm"
    emit_grid(np.zeros((4, 784)), 2, 2, path)
    raw = path.read_bytes()
    assert raw.startswith(b"P5 56 56 255\n")
    assert len(raw) == len(b"P5 56 56 255\n") + 56 * 56
    magic, pix = read_pnm(path)
    assert magic == "P5" and pix.shape == (56, 56) and not pix.any()


def test_clamping():
    np.testing.assert_array_equal(to_pixels([1.2, -0.3, 0.5, 255.5 / 256, np.nan]), [255, 0, 128, 255, 0])


def test_roundtrip_and_tile_layout(tmp_path):
    rng = np.random.default_rng(0)
    samples = rng.uniform(-0.2, 1.2, size=(6, 9))
    grid = emit_grid(samples, 2, 3, tmp_path / "t.pgm")
    _, pix = read_pnm(tmp_path / "t.pgm")
    np.testing.assert_array_equal(pix, grid)
    # tile (row 1, col 2) is sample 5
    np.testing.assert_array_equal(pix[3:6, 6:9], to_pixels(samples[5]).reshape(3, 3))


def test_colour_grid_is_ppm(tmp_path):
    samples = np.linspace(0, 0.99, 2 * 12).reshape(2, 12)
    emit_grid(samples, 1, 2, tmp_path / "c.ppm")
    magic, pix = read_pnm(tmp_path / "c.ppm")
    assert magic == "P6" and pix.shape == (2, 4, 3)
    np.testing.assert_array_equal(pix[:, :2].reshape(-1), to_pixels(samples[0]))


def test_shape_errors(tmp_path):
    with pytest.raises(ShapeMismatch):
        emit_grid(np.zeros((3, 4)), 2, 2, tmp_path / "x.pgm")
    with pytest.raises(ShapeMismatch):
        emit_grid(np.zeros((4, 5)), 2, 2, tmp_path / "x.pgm")
