import numpy as np
import pytest

from csdet import featurizer as ft
from csdet.geometry import Box, horizontal_flip


def shape_raster(h=64, w=64):
    """Flat gray background with one bright block; no noise."""
    r = np.full((h, w, 3), 0.5, dtype=np.float32)
    r[10:30, 8:24, 0] = 0.9
    r[10:30, 8:24, 1] = 0.2
    r[10:30, 8:24, 2] = 0.2
    return r


class TestDims:
    def test_default_is_25(self):
        # 3 means + 3 stds + 16 grid + aspect + area + edge density.
        assert ft.feature_dim() == 25

    def test_small_grid(self):
        assert ft.feature_dim(ft.FeatureConfig(grid=2)) == 13

    def test_grid_zero_rejected(self):
        with pytest.raises(ValueError):
            ft.FeatureConfig(grid=0)

    def test_grid_for_dim(self):
        assert ft.grid_for_dim(25) == 4
        assert ft.grid_for_dim(13) == 2
        with pytest.raises(ValueError):
            ft.grid_for_dim(24)


class TestValues:
    def test_uniform_region_has_zero_spread(self):
        r = np.full((32, 32, 3), 0.5, dtype=np.float32)
        f = ft.region_features(r, Box(4, 4, 20, 20))
        np.testing.assert_array_equal(f[3:6], 0.0)  # channel std-devs
        assert f[-1] == 0.0  # edge density

    def test_square_box_zero_log_aspect(self):
        f = ft.region_features(shape_raster(), Box(5, 9, 25, 29))
        assert f[-3] == 0.0

    def test_purity(self):
        r = shape_raster()
        box = Box(7.5, 9.25, 26.0, 31.75)
        a = ft.region_features(r, box)
        b = ft.region_features(r, box)
        assert np.array_equal(a, b)

    def test_means_reflect_content(self):
        f = ft.region_features(shape_raster(), Box(8, 10, 24, 30))
        # Red channel mean 0.9 -> 0.8 after rescale; green 0.2 -> -0.6.
        assert f[0] == pytest.approx(0.8, abs=1e-6)
        assert f[1] == pytest.approx(-0.6, abs=1e-6)

    def test_degenerate_box(self):
        r = shape_raster()
        with pytest.raises(ft.DegenerateBoxError):
            ft.region_features(r, Box(-10, -10, -1, -1))

    def test_bad_raster_shape(self):
        with pytest.raises(ValueError):
            ft.region_features(np.zeros((8, 8)), Box(0, 0, 4, 4))


class TestCovariance:
    def test_translation(self):
        h = w = 64
        base = np.full((h, w, 3), 0.5, dtype=np.float32)

        def stamp(r, x, y):
            out = r.copy()
            out[y : y + 12, x : x + 9, 0] = 0.85
            out[y : y + 12, x : x + 9, 1] = 0.15
            return out

        box_a = Box(5.0, 7.0, 14.0, 19.0)
        f_a = ft.region_features(stamp(base, 5, 7), box_a)
        box_b = Box(31.0, 40.0, 40.0, 52.0)
        f_b = ft.region_features(stamp(base, 31, 40), box_b)
        np.testing.assert_allclose(f_a, f_b, atol=1e-6)

    def test_flip_mirrors_grid_columns(self):
        g = 4
        config = ft.FeatureConfig(grid=g)
        r = shape_raster()
        box = Box(6.0, 9.0, 27.0, 32.0)
        f = ft.region_features(r, box, config)
        flipped_raster, (flipped_box,) = horizontal_flip(r, [box])
        f_flip = ft.region_features(flipped_raster, flipped_box, config)

        mirrored = f.copy()
        grid = f[6 : 6 + g * g].reshape(g, g)
        mirrored[6 : 6 + g * g] = grid[:, ::-1].ravel()
        np.testing.assert_allclose(f_flip, mirrored, atol=1e-9)

    def test_flip_mirrors_grid_columns_fractional_box(self):
        g = 3
        config = ft.FeatureConfig(grid=g)
        r = shape_raster()
        box = Box(6.25, 9.5, 27.75, 31.5)
        f = ft.region_features(r, box, config)
        flipped_raster, (flipped_box,) = horizontal_flip(r, [box])
        f_flip = ft.region_features(flipped_raster, flipped_box, config)

        grid = f[6 : 6 + g * g].reshape(g, g)
        grid_flip = f_flip[6 : 6 + g * g].reshape(g, g)
        np.testing.assert_allclose(grid_flip, grid[:, ::-1], atol=1e-9)
        np.testing.assert_allclose(f_flip[:6], f[:6], atol=1e-12)
        np.testing.assert_allclose(f_flip[-3:], f[-3:], atol=1e-12)
