import numpy as np
import pytest

from umbra.errors import DecodeError
from umbra.imageio import (
    PATCH_SIZE,
    decode_image,
    encode_image,
    extract_patch,
    patch_origin,
    probability_to_gray,
    rgb_to_lab,
)


def reference_lab(r, g, b):
    """Independent scalar evaluation of the CIE pipeline (test oracle)."""
    import math

    def lin(u):
        u = u / 255.0
        return ((u + 0.055) / 1.055) ** 2.4 if u > 0.04045 else u / 12.92

    rl, gl, bl = lin(r), lin(g), lin(b)
    matrix = [
        (0.412453, 0.357580, 0.180423),
        (0.212671, 0.715160, 0.072169),
        (0.019334, 0.119193, 0.950227),
    ]
    xyz = [m[0] * rl + m[1] * gl + m[2] * bl for m in matrix]
    white = [sum(m) for m in matrix]

    def f(t):
        return t ** (1.0 / 3.0) if t > (6.0 / 29.0) ** 3 else t / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0

    fx, fy, fz = (f(v / w) for v, w in zip(xyz, white))
    return 116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)


class TestDecode:
    def test_ppm_p6_direct_byte_layout(self):
        data = b"P6\n2 1\n255\n" + bytes([0, 0, 0, 255, 255, 255])
        img = decode_image(data)
        assert img.shape == (1, 2, 3)
        assert img.ravel().tolist() == [0, 0, 0, 255, 255, 255]

    def test_ppm_with_comment(self):
        data = b"P6\n# a comment\n2 2 255\n" + bytes(12)
        assert decode_image(data).shape == (2, 2, 3)

    def test_rgba_png_drops_alpha(self):
        rgba = np.zeros((3, 4, 4), dtype=np.uint8)
        rgba[:, :, 0] = 17
        rgba[:, :, 3] = 200
        from PIL import Image
        import io

        buf = io.BytesIO()
        Image.fromarray(rgba, mode="RGBA").save(buf, format="PNG")
        img = decode_image(buf.getvalue())
        assert img.shape == (3, 4, 3)
        assert (img[:, :, 0] == 17).all()

    def test_truncated_ppm_header_is_decode_error(self):
        with pytest.raises(DecodeError):
            decode_image(b"P6\n2 ")

    def test_truncated_ppm_data_names_offset(self):
        with pytest.raises(DecodeError, match="offset"):
            decode_image(b"P6\n2 2\n255\n" + bytes(5))

    def test_garbage_is_decode_error(self):
        with pytest.raises(DecodeError):
            decode_image(b"\x00\x01\x02 not an image")

    def test_bad_maxval_rejected(self):
        with pytest.raises(DecodeError, match="maxval"):
            decode_image(b"P6\n1 1\n65535\n" + bytes(6))


class TestEncode:
    def test_rgb_round_trip_bit_exact(self):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (13, 9, 3), dtype=np.uint8)
        assert np.array_equal(decode_image(encode_image(img)), img)

    def test_gray_round_trip_bit_exact(self):
        rng = np.random.default_rng(1)
        mask = rng.integers(0, 256, (7, 5, 1), dtype=np.uint8)
        assert np.array_equal(decode_image(encode_image(mask)), mask)

    def test_four_channels_rejected(self):
        with pytest.raises(ValueError):
            encode_image(np.zeros((4, 4, 4), dtype=np.uint8))

    def test_non_uint8_rejected(self):
        with pytest.raises(ValueError):
            encode_image(np.zeros((4, 4, 3), dtype=np.float64))


class TestRgbToLab:
    def test_black_point(self):
        lab = rgb_to_lab(np.zeros((1, 1, 3), dtype=np.uint8))
        assert np.allclose(lab[0, 0], [0.0, 0.0, 0.0], atol=1e-12)

    def test_white_point(self):
        lab = rgb_to_lab(np.full((1, 1, 3), 255, dtype=np.uint8))
        L, a, b = lab[0, 0]
        assert abs(L - 100.0) <= 0.01
        assert abs(a) <= 0.01 and abs(b) <= 0.01

    def test_mid_gray_matches_reference(self):
        lab = rgb_to_lab(np.full((1, 1, 3), 128, dtype=np.uint8))
        ref_L, _, _ = reference_lab(128, 128, 128)
        assert abs(lab[0, 0, 0] - ref_L) < 0.05

    def test_random_pixels_match_reference(self):
        rng = np.random.default_rng(42)
        img = rng.integers(0, 256, (20, 1, 3), dtype=np.uint8)
        lab = rgb_to_lab(img)
        for i in range(20):
            ref = reference_lab(*map(int, img[i, 0]))
            assert np.allclose(lab[i, 0], ref, atol=1e-9)

    def test_lightness_range_10k_random(self):
        rng = np.random.default_rng(7)
        img = rng.integers(0, 256, (100, 100, 3), dtype=np.uint8)
        L = rgb_to_lab(img)[:, :, 0]
        assert L.min() >= 0.0 and L.max() <= 100.0


class TestExtractPatch:
    def test_centered_window_origin(self):
        assert patch_origin(100, 100, (50, 50)) == (34, 34)

    def test_clamped_at_corner(self):
        assert patch_origin(100, 100, (0, 0)) == (0, 0)
        assert patch_origin(100, 100, (99, 99)) == (68, 68)

    def test_constant_image_constant_prior(self):
        img = np.full((40, 40, 3), 60, dtype=np.uint8)
        prior = np.full((40, 40), 0.25)
        patch = extract_patch(img, prior, (20, 20))
        assert patch.shape == (PATCH_SIZE, PATCH_SIZE, 4)
        assert np.allclose(patch[:, :, :3], 60 / 255.0)
        assert np.allclose(patch[:, :, 3], 0.25)

    def test_all_values_unit_interval(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 256, (50, 64, 3), dtype=np.uint8)
        prior = rng.random((50, 64))
        for center in [(0, 0), (63, 49), (10, 40), (32, 25)]:
            patch = extract_patch(img, prior, center)
            assert patch.size == 4096
            assert patch.min() >= 0.0 and patch.max() <= 1.0

    def test_small_image_rejected(self):
        img = np.zeros((16, 16, 3), dtype=np.uint8)
        with pytest.raises(ValueError):
            extract_patch(img, np.zeros((16, 16)), (8, 8))

    def test_patch_content_matches_manual_slice(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)
        prior = rng.random((48, 48))
        patch = extract_patch(img, prior, (5, 40))
        ox, oy = patch_origin(48, 48, (5, 40))
        assert np.array_equal(patch[:, :, :3], img[oy : oy + 32, ox : ox + 32] / 255.0)
        assert np.array_equal(patch[:, :, 3], prior[oy : oy + 32, ox : ox + 32])


def test_probability_to_gray_rounding():
    prob = np.array([[0.0, 0.5, 1.0, 0.999]])
    assert probability_to_gray(prob).tolist() == [[0, 128, 255, 255]]
