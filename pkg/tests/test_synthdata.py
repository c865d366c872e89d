import numpy as np
import pytest

from metricreg.errors import InputError
from metricreg.grid import GridSpec
from metricreg.synthdata import ShapeGenConfig, _rasterize, generate, read_dataset, write_dataset


@pytest.fixture(scope="module")
def small_sample():
    cfg = ShapeGenConfig(grid=GridSpec(32, 32), n_per_class=4, seed=3)
    images, labels = generate(cfg)
    return cfg, images, labels


class TestConfig:
    def test_rejects_oversized_shapes(self):
        with pytest.raises(InputError):
            ShapeGenConfig(size_min=0.3, size_max=0.3)

    def test_rejects_bad_aspect(self):
        with pytest.raises(InputError):
            ShapeGenConfig(aspect_min=0.9, aspect_max=0.5)

    def test_round_trips_through_dict(self):
        cfg = ShapeGenConfig(grid=GridSpec(32, 48), n_per_class=7, seed=42, noise=0.5)
        assert ShapeGenConfig.from_dict(cfg.to_dict()) == cfg


class TestRasterize:
    def test_clean_rectangle_matches_indicator(self):
        grid = GridSpec(64, 64)
        mask = _rasterize(grid, True, 32.0, 32.0, 10.0, 6.0, 0.0)
        ys, xs = np.mgrid[0:64, 0:64].astype(float)
        inside = (np.abs(xs - 32) <= 9.0) & (np.abs(ys - 32) <= 5.0)
        outside = (np.abs(xs - 32) >= 11.0) | (np.abs(ys - 32) >= 7.0)
        assert np.all(mask[inside] == 1.0)
        assert np.all(mask[outside] == 0.0)
        assert np.all((mask >= 0) & (mask <= 1))

    def test_clean_ellipse_matches_indicator(self):
        grid = GridSpec(64, 64)
        mask = _rasterize(grid, False, 32.0, 32.0, 12.0, 8.0, 0.0)
        ys, xs = np.mgrid[0:64, 0:64].astype(float)
        r = ((xs - 32) / 12.0) ** 2 + ((ys - 32) / 8.0) ** 2
        assert np.all(mask[r < 0.8] == 1.0)
        assert np.all(mask[r > 1.2] == 0.0)


class TestGenerate:
    def test_label_balance_and_order(self, small_sample):
        _, images, labels = small_sample
        assert len(images) == 8
        assert (labels == 1).sum() == 4
        assert (labels == -1).sum() == 4

    def test_determinism(self, small_sample):
        cfg, images, _ = small_sample
        again, _ = generate(cfg)
        for a, b in zip(images, again):
            assert np.array_equal(a.data, b.data)

    def test_seed_changes_output(self, small_sample):
        cfg, images, _ = small_sample
        other, _ = generate(ShapeGenConfig(grid=GridSpec(32, 32), n_per_class=4, seed=4))
        assert not np.array_equal(images[0].data, other[0].data)

    def test_intensity_range(self, small_sample):
        _, images, _ = small_sample
        for img in images:
            assert img.data.min() == 0.0
            assert img.data.max() == 1.0

    def test_margin_band_is_empty(self, small_sample):
        _, images, _ = small_sample
        for img in images:
            band = np.zeros(img.grid.shape, dtype=bool)
            b = int(0.10 * 32)
            band[:b, :] = band[-b:, :] = True
            band[:, :b] = band[:, -b:] = True
            assert np.all(img.data[band] <= 0.01)

    def test_undeformed_shapes_are_clean(self):
        cfg = ShapeGenConfig(
            grid=GridSpec(32, 32), n_per_class=2, seed=5, patch_scale=0.0, noise=0.0, smoothing=0.0
        )
        images, labels = generate(cfg)
        for img in images:
            # essentially binary up to the anti-aliased boundary ring
            interior = (img.data > 0.99).sum()
            boundary = ((img.data > 0.01) & (img.data < 0.99)).sum()
            assert interior > 0
            assert boundary < interior


class TestDatasetIo:
    def test_round_trip(self, small_sample, tmp_path):
        cfg, images, labels = small_sample
        names = write_dataset(tmp_path, images, labels, cfg)
        assert len(names) == 8
        assert (tmp_path / "manifest.json").exists()
        loaded, loaded_labels, loaded_names = read_dataset(tmp_path)
        assert loaded_names == names
        assert np.array_equal(loaded_labels, labels)
        for orig, back in zip(images, loaded):
            # 16-bit quantization error only
            assert np.abs(orig.data - back.data).max() <= 0.5 / 65535 + 1e-12
