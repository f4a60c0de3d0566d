import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import stainalign as sa
from stainalign.raster import (
    BinaryMask,
    FloatRaster,
    Raster,
    bilinear_sample,
    downscale,
    load_image,
    load_mask,
    save_image,
    save_mask,
    to_grayscale,
)


def solid(w, h, rgb):
    return Raster(np.tile(np.array(rgb, dtype=np.uint8), (h, w, 1)))


class TestTypes:
    def test_raster_validates_channels(self):
        with pytest.raises(sa.InvalidChannelError):
            Raster(np.zeros((4, 4, 2), dtype=np.uint8))

    def test_raster_requires_uint8(self):
        with pytest.raises(sa.InvalidArgumentError):
            Raster(np.zeros((4, 4, 3), dtype=np.float32))

    def test_raster_is_immutable(self):
        r = solid(3, 3, (1, 2, 3))
        with pytest.raises(ValueError):
            r.data[0, 0, 0] = 9

    def test_grayscale_input_gets_channel_axis(self):
        r = Raster(np.zeros((5, 7), dtype=np.uint8))
        assert (r.width, r.height, r.channels) == (7, 5, 1)

    def test_float_raster_rejects_nan(self):
        arr = np.zeros((3, 3))
        arr[1, 1] = np.nan
        with pytest.raises(sa.InvalidArgumentError):
            FloatRaster(arr)

    def test_mask_coerces_to_bool(self):
        m = BinaryMask(np.array([[0, 2], [1, 0]]))
        assert m.bits.dtype == np.bool_
        assert m.bits.sum() == 2


class TestGrayscale:
    def test_white_maps_to_255(self):
        g = to_grayscale(solid(4, 4, (255, 255, 255)))
        assert np.allclose(g.data, 255.0)

    def test_black_maps_to_0(self):
        g = to_grayscale(solid(4, 4, (0, 0, 0)))
        assert np.allclose(g.data, 0.0)

    def test_pure_red(self):
        g = to_grayscale(solid(2, 2, (255, 0, 0)))
        assert np.allclose(g.data, 76.245)

    def test_gray_pixels_unchanged(self):
        for v in (0, 1, 77, 128, 254, 255):
            g = to_grayscale(solid(2, 2, (v, v, v)))
            assert np.allclose(g.data, float(v)), v

    def test_rejects_single_channel(self):
        with pytest.raises(sa.InvalidChannelError):
            to_grayscale(Raster(np.zeros((4, 4, 1), dtype=np.uint8)))


class TestBilinearSample:
    def setup_method(self):
        self.img = FloatRaster(np.array([[0.0, 100.0], [50.0, 150.0]]))

    def test_integer_coordinates_exact(self):
        assert bilinear_sample(self.img, 0, 0) == 0.0
        assert bilinear_sample(self.img, 1, 0) == 100.0
        assert bilinear_sample(self.img, 0, 1) == 50.0

    def test_midpoint_is_average(self):
        assert bilinear_sample(self.img, 0.5, 0.0) == 50.0
        assert bilinear_sample(self.img, 0.0, 0.5) == 25.0

    def test_out_of_bounds_fill(self):
        assert bilinear_sample(self.img, -5, -5) == 0.0
        assert bilinear_sample(self.img, 10, 0.5, fill=7.5) == 7.5

    def test_boundary_is_in_domain(self):
        assert bilinear_sample(self.img, 1.0, 1.0) == 150.0

    @settings(max_examples=50, deadline=None)
    @given(
        x=st.floats(0.0, 14.0),
        y=st.floats(0.0, 14.0),
        eps=st.floats(1e-6, 1e-3),
    )
    def test_continuity_inside_domain(self, x, y, eps):
        rng = np.random.default_rng(0)
        img = FloatRaster(rng.uniform(0, 255, size=(16, 16)))
        grad_bound = 2.0 * np.abs(np.diff(img.data)).max() + 2.0 * np.abs(np.diff(img.data, axis=0)).max()
        a = bilinear_sample(img, x, y)
        b = bilinear_sample(img, min(x + eps, 14.0), y)
        assert abs(a - b) <= eps * grad_bound + 1e-9


class TestDownscale:
    def test_factor_one_is_identity(self, hist512):
        out = downscale(hist512, 1.0)
        assert out.data is hist512.data

    def test_dimensions_are_ceil(self):
        img = solid(100, 100, (10, 20, 30))
        out = downscale(img, 2.0)
        assert (out.width, out.height) == (50, 50)
        out = downscale(solid(101, 53, (1, 2, 3)), 2.0)
        assert (out.width, out.height) == (51, 27)

    def test_constant_preserved(self):
        img = solid(64, 48, (123, 45, 200))
        for factor in (1.5, 2.0, 3.7):
            out = downscale(img, factor)
            assert np.abs(out.data.astype(int) - [123, 45, 200]).max() <= 1

    def test_rejects_factor_below_one(self, hist512):
        with pytest.raises(sa.InvalidArgumentError):
            downscale(hist512, 0.5)

    def test_chained_dims_close_to_single(self, hist512):
        a = downscale(downscale(hist512, 1.7), 2.3)
        b = downscale(hist512, 1.7 * 2.3)
        assert abs(a.width - b.width) <= 1
        assert abs(a.height - b.height) <= 1


class TestIO:
    def test_png_roundtrip(self, tmp_path, hist512):
        path = tmp_path / "img.png"
        save_image(hist512, path)
        back = load_image(path)
        assert np.array_equal(back.data, hist512.data)

    def test_tiff_roundtrip(self, tmp_path, hist512):
        path = tmp_path / "img.tiff"
        save_image(hist512, path)
        back = load_image(path)
        assert np.array_equal(back.data, hist512.data)

    def test_grayscale_roundtrip(self, tmp_path):
        img = Raster(np.arange(64, dtype=np.uint8).reshape(8, 8))
        path = tmp_path / "gray.png"
        save_image(img, path)
        back = load_image(path)
        assert back.channels == 1
        assert np.array_equal(back.data, img.data)

    def test_mask_roundtrip(self, tmp_path):
        rng = np.random.default_rng(3)
        mask = BinaryMask(rng.random((32, 32)) > 0.5)
        path = tmp_path / "mask.png"
        save_mask(mask, path)
        assert np.array_equal(load_mask(path).bits, mask.bits)

    def test_16bit_rejected(self, tmp_path):
        from PIL import Image

        path = tmp_path / "deep.png"
        Image.fromarray(np.zeros((8, 8), dtype=np.uint16)).save(path)
        with pytest.raises(sa.InvalidArgumentError):
            load_image(path)
