"""Image round trips through PNG and netpbm, plus decode error handling."""

import numpy as np
import numpy.testing as npt
import pytest

from lmnet.errors import DataError
from lmnet.imgio import read_gray, read_rgb, write_gray, write_rgb


def eight_bit_grid(shape, seed=0):
    """Values exactly on the 8-bit lattice so a round trip is lossless."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=shape).astype(np.float32) / np.float32(255.0)


@pytest.mark.parametrize("ext", ["png", "ppm"])
def test_rgb_round_trip_is_exact_on_the_lattice(tmp_path, ext):
    img = eight_bit_grid((3, 7, 9))
    path = tmp_path / f"img.{ext}"
    write_rgb(path, img)
    back = read_rgb(path)
    assert back.dtype == np.float32 and back.shape == (3, 7, 9)
    npt.assert_array_equal(back, img)


@pytest.mark.parametrize("ext", ["png", "pgm"])
def test_gray_round_trip_is_exact_on_the_lattice(tmp_path, ext):
    img = eight_bit_grid((5, 6), seed=1)
    path = tmp_path / f"mask.{ext}"
    write_gray(path, img)
    back = read_gray(path)
    assert back.dtype == np.float32 and back.shape == (5, 6)
    npt.assert_array_equal(back, img)


def test_write_clips_out_of_range_values(tmp_path):
    img = np.array([[-0.5, 0.0], [1.0, 1.5]], dtype=np.float32)
    path = tmp_path / "clip.pgm"
    write_gray(path, img)
    back = read_gray(path)
    npt.assert_array_equal(back, [[0.0, 0.0], [1.0, 1.0]])


def test_gray_read_of_color_image_averages_channels(tmp_path):
    img = np.zeros((3, 2, 2), dtype=np.float32)
    img[0] = 1.0  # pure red
    path = tmp_path / "red.ppm"
    write_rgb(path, img)
    npt.assert_allclose(read_gray(path), np.full((2, 2), 1 / 3), atol=1e-6)


def test_rgb_read_of_gray_image_stacks_channels(tmp_path):
    img = eight_bit_grid((4, 4), seed=2)
    path = tmp_path / "g.pgm"
    write_gray(path, img)
    back = read_rgb(path)
    assert back.shape == (3, 4, 4)
    npt.assert_array_equal(back[0], back[1])
    npt.assert_array_equal(back[1], back[2])


def test_netpbm_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.pgm"
    payload = bytes(range(6))
    path.write_bytes(b"P5\n# a comment\n3 2\n# another\n255\n" + payload)
    back = read_gray(path)
    npt.assert_array_equal(back, np.frombuffer(payload, np.uint8).reshape(2, 3) / np.float32(255.0))


def test_netpbm_truncated_raster_is_a_data_error(tmp_path):
    path = tmp_path / "t.pgm"
    path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 7)
    with pytest.raises(DataError, match="raster"):
        read_gray(path)


def test_netpbm_wrong_magic_is_a_data_error(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")  # ascii variant not supported
    with pytest.raises(DataError, match="magic"):
        read_gray(path)


def test_missing_file_is_a_data_error(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        read_rgb(tmp_path / "nope.png")


def test_corrupt_png_is_a_data_error(tmp_path):
    path = tmp_path / "bad.png"
    path.write_bytes(b"\x89PNG\r\n\x1a\nnot really a png")
    with pytest.raises(DataError, match="decode"):
        read_rgb(path)


def test_write_shape_validation():
    with pytest.raises(DataError):
        write_rgb("x.png", np.zeros((4, 4)))
    with pytest.raises(DataError):
        write_gray("x.png", np.zeros((3, 4, 4)))
