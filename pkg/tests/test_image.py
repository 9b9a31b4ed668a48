import numpy as np
import pytest

from impasto.errors import InvalidInputError
from impasto.image import (
    ImageTensor,
    LuminancePlane,
    quantize_like_png,
    read_delta_png,
    read_png,
    to_luminance,
    write_delta_png,
    write_png,
)

from testutil import random_image


class TestImageTensor:
    def test_accepts_valid_rgb(self, rng):
        img = random_image(rng, 20, 24, 3)
        assert img.shape == (20, 24, 3)
        assert img.data.dtype == np.float64

    def test_promotes_2d_to_single_channel(self):
        img = ImageTensor(np.zeros((16, 16)))
        assert img.channels == 1

    def test_rejects_bad_channel_count(self):
        with pytest.raises(InvalidInputError):
            ImageTensor(np.zeros((16, 16, 2)))

    def test_rejects_small_images(self):
        with pytest.raises(InvalidInputError):
            ImageTensor(np.zeros((15, 64, 3)))
        with pytest.raises(InvalidInputError):
            ImageTensor(np.zeros((64, 15, 3)))

    def test_rejects_out_of_range(self):
        arr = np.zeros((16, 16, 3))
        arr[0, 0, 0] = 1.5
        with pytest.raises(InvalidInputError):
            ImageTensor(arr)
        arr[0, 0, 0] = -0.1
        with pytest.raises(InvalidInputError):
            ImageTensor(arr)

    def test_rejects_non_finite(self):
        arr = np.zeros((16, 16, 3))
        arr[3, 3, 1] = np.nan
        with pytest.raises(InvalidInputError):
            ImageTensor(arr)

    def test_data_is_read_only(self, rng):
        img = random_image(rng)
        with pytest.raises(ValueError):
            img.data[0, 0, 0] = 0.0


class TestLuminance:
    def test_white_maps_to_255(self):
        img = ImageTensor(np.ones((16, 16, 3)))
        assert np.allclose(to_luminance(img).data, 255.0)

    def test_black_maps_to_0(self):
        img = ImageTensor(np.zeros((16, 16, 3)))
        assert np.all(to_luminance(img).data == 0.0)

    def test_pure_red_weight(self):
        arr = np.zeros((16, 16, 3))
        arr[:, :, 0] = 1.0
        lum = to_luminance(ImageTensor(arr))
        # 0.299 * 255, evaluated independently
        assert np.allclose(lum.data, 76.245)

    def test_single_channel_scales_by_255(self, rng):
        img = random_image(rng, c=1)
        assert np.allclose(to_luminance(img).data, img.data[:, :, 0] * 255.0)

    def test_linearity_in_pixel_values(self, rng):
        img = random_image(rng)
        for a in (0.0, 0.25, 0.5, 1.0):
            scaled = ImageTensor(a * img.data)
            assert np.allclose(
                to_luminance(scaled).data, a * to_luminance(img).data, atol=1e-12
            )

    def test_luminance_plane_validates_range(self):
        with pytest.raises(InvalidInputError):
            LuminancePlane(np.full((8, 8), 300.0))


class TestPngRoundtrip:
    @pytest.mark.parametrize("bit_depth", [8, 16])
    @pytest.mark.parametrize("channels", [1, 3])
    def test_save_load_bit_identical(self, rng, tmp_path, bit_depth, channels):
        img = quantize_like_png(random_image(rng, c=channels), bit_depth)
        path = tmp_path / "img.png"
        write_png(str(path), img, bit_depth)
        loaded = read_png(str(path))
        assert np.array_equal(loaded.data, img.data)

    def test_read_missing_file(self, tmp_path):
        with pytest.raises(InvalidInputError):
            read_png(str(tmp_path / "nope.png"))

    def test_delta_roundtrip(self, rng, tmp_path):
        delta = rng.uniform(-0.05, 0.05, size=(24, 24, 3))
        path = tmp_path / "delta.png"
        write_delta_png(str(path), delta)
        loaded = read_delta_png(str(path))
        # offset encoding quantizes to 2/65535 steps over [-1, 1]
        assert np.abs(loaded - delta).max() <= 1.0 / 65535.0

    def test_delta_rejects_out_of_range(self, tmp_path):
        with pytest.raises(InvalidInputError):
            write_delta_png(str(tmp_path / "d.png"), np.full((8, 8, 3), 1.5))


class TestPngStrictness:
    def test_non_png_content_rejected(self, tmp_path):
        fake = tmp_path / "image.png"
        fake.write_bytes(b"\xff\xd8\xff\xe0" + b"\x00" * 64)  # JPEG-ish header
        with pytest.raises(InvalidInputError):
            read_png(str(fake))

    def test_non_png_suffix_rejected_on_write(self, rng, tmp_path):
        img = random_image(rng)
        with pytest.raises(InvalidInputError):
            write_png(str(tmp_path / "out.jpg"), img)
