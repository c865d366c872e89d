import numpy as np
import pytest
from scipy import ndimage

from metricreg.diffop import OperatorParams, build_operator
from metricreg.errors import InputError
from metricreg.grid import GridSpec, ScalarImage
from metricreg.evalsuite import (
    logistic_baseline,
    mi_select_alpha,
    momentum_map,
    mutual_information,
    roc_auc,
)
from metricreg.registration import RegistrationConfig, register


def brute_force_auc(scores, labels):
    """Concordant-pair count with half credit for ties."""
    pos = [s for s, z in zip(scores, labels) if z == 1]
    neg = [s for s, z in zip(scores, labels) if z == -1]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestRocAuc:
    def test_perfect_ranking(self):
        out = roc_auc(np.array([0.9, 0.1]), np.array([1, -1]))
        assert out.auc == 1.0

    def test_all_tied_scores(self):
        out = roc_auc(np.array([0.5, 0.5, 0.5, 0.5]), np.array([1, -1, 1, -1]))
        assert out.auc == 0.5

    def test_reversed_ranking(self):
        out = roc_auc(np.array([0.1, 0.9]), np.array([1, -1]))
        assert out.auc == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force_random(self, seed):
        rng = np.random.default_rng(seed)
        scores = rng.normal(size=20)
        labels = np.where(rng.uniform(size=20) < 0.5, 1, -1)
        if np.all(labels == labels[0]):
            labels[0] = -labels[0]
        out = roc_auc(scores, labels)
        assert out.auc == brute_force_auc(scores, labels)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_with_ties(self, seed):
        rng = np.random.default_rng(100 + seed)
        scores = rng.integers(0, 4, size=20).astype(float)
        labels = np.where(rng.uniform(size=20) < 0.5, 1, -1)
        if np.all(labels == labels[0]):
            labels[0] = -labels[0]
        out = roc_auc(scores, labels)
        assert out.auc == brute_force_auc(scores, labels)

    def test_curve_is_monotone_and_integrates_to_auc(self):
        rng = np.random.default_rng(7)
        scores = np.round(rng.normal(size=30), 1)  # force some ties
        labels = np.where(rng.uniform(size=30) < 0.4, 1, -1)
        out = roc_auc(scores, labels)
        assert np.all(np.diff(out.fpr) >= 0)
        assert np.all(np.diff(out.tpr) >= 0)
        assert out.fpr[0] == 0 and out.fpr[-1] == 1
        assert out.tpr[0] == 0 and out.tpr[-1] == 1
        area = np.trapezoid(out.tpr, out.fpr)
        assert area == pytest.approx(out.auc, abs=1e-12)

    def test_negating_scores_flips_auc(self):
        rng = np.random.default_rng(8)
        scores = rng.normal(size=25)  # continuous, no ties
        labels = np.where(rng.uniform(size=25) < 0.5, 1, -1)
        a1 = roc_auc(scores, labels).auc
        a2 = roc_auc(-scores, labels).auc
        assert a1 + a2 == pytest.approx(1.0, abs=1e-12)

    def test_one_class_rejected(self):
        with pytest.raises(InputError):
            roc_auc(np.array([0.1, 0.2]), np.array([1, 1]))


class TestMutualInformation:
    def test_self_information_is_entropy(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (32, 32))
        mi = mutual_information(img, img)
        hist, _ = np.histogram(img, bins=32, range=(0, 1))
        p = hist / hist.sum()
        p = p[p > 0]
        entropy = -np.sum(p * np.log2(p))
        assert mi == pytest.approx(entropy, rel=1e-12)

    def test_independent_images_near_zero(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (64, 64))
        b = rng.uniform(0, 1, (64, 64))
        assert mutual_information(a, b, bins=4) < 0.05

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, (16, 16))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        m_ab = mutual_information(a, b)
        m_ba = mutual_information(b, a)
        assert m_ab == pytest.approx(m_ba, rel=1e-12)
        assert m_ab >= 0


class TestMiSelectAlpha:
    def test_single_alpha_returned(self):
        grid = GridSpec(16, 16)
        rng = np.random.default_rng(4)
        data = ndimage.gaussian_filter(rng.uniform(0, 1, grid.shape), 1.5, mode="wrap")
        img = ScalarImage(grid, (data - data.min()) / (data.max() - data.min()))
        cfg = RegistrationConfig(sigma2=0.05, time_steps=2, max_iters=5)
        builder = lambda a: build_operator(grid, OperatorParams(a))
        out = mi_select_alpha([(img, img)], [2.5], builder, cfg)
        assert out == 2.5

    def test_identical_pair_prefers_any_alpha_with_max_mi(self):
        # identical images are perfectly registered at the identity for any
        # alpha, so the mean MI equals the image entropy for every candidate
        grid = GridSpec(16, 16)
        rng = np.random.default_rng(5)
        data = ndimage.gaussian_filter(rng.uniform(0, 1, grid.shape), 1.5, mode="wrap")
        img = ScalarImage(grid, (data - data.min()) / (data.max() - data.min()))
        cfg = RegistrationConfig(sigma2=0.05, time_steps=2, max_iters=5)
        builder = lambda a: build_operator(grid, OperatorParams(a))
        mis = []
        out = mi_select_alpha([(img, img)], [0.5, 5.0], builder, cfg,
                              progress=lambda a, mi: mis.append(mi))
        assert mis[0] == pytest.approx(mis[1], rel=1e-9)
        assert out == 0.5


class TestLogisticBaseline:
    def test_separable_toy_set(self):
        grid = GridSpec(8, 8)
        imgs = []
        labels = []
        for i in range(12):
            data = np.zeros(grid.shape)
            if i % 2 == 0:
                data[2, 2] = 1.0
                labels.append(1)
            else:
                data[5, 5] = 1.0
                labels.append(-1)
            imgs.append(ScalarImage(grid, data))
        out = logistic_baseline(imgs, np.array(labels), folds=3)
        assert out.auc_mean == 1.0

    def test_label_shuffle_near_chance(self):
        grid = GridSpec(8, 8)
        rng = np.random.default_rng(6)
        imgs = [ScalarImage(grid, rng.uniform(0, 1, grid.shape)) for _ in range(40)]
        labels = np.array([1, -1] * 20)
        out = logistic_baseline(imgs, labels, folds=5)
        assert abs(out.auc_mean - 0.5) < 0.15


class TestMomentumMap:
    def _registrations(self, grid, seeds, reference):
        op = build_operator(grid, OperatorParams(1.0))
        cfg = RegistrationConfig(sigma2=0.05, time_steps=3, max_iters=10)
        out = []
        for s in seeds:
            rng = np.random.default_rng(s)
            data = ndimage.gaussian_filter(rng.uniform(0, 1, grid.shape), 2.0, mode="wrap")
            img = ScalarImage(grid, (data - data.min()) / (data.max() - data.min()))
            out.append(register(reference, img, op, cfg))
        return out, op

    def test_identical_classes_give_zero_map(self):
        grid = GridSpec(16, 16)
        rng = np.random.default_rng(7)
        ref_data = ndimage.gaussian_filter(rng.uniform(0, 1, grid.shape), 2.0, mode="wrap")
        reference = ScalarImage(grid, (ref_data - ref_data.min()) / (ref_data.max() - ref_data.min()))
        results, op = self._registrations(grid, [10, 11, 10, 11], reference)
        labels = np.array([1, 1, -1, -1])
        out = momentum_map(results, labels, op, reference)
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_label_swap_negates_map(self):
        grid = GridSpec(16, 16)
        rng = np.random.default_rng(8)
        ref_data = ndimage.gaussian_filter(rng.uniform(0, 1, grid.shape), 2.0, mode="wrap")
        reference = ScalarImage(grid, (ref_data - ref_data.min()) / (ref_data.max() - ref_data.min()))
        results, op = self._registrations(grid, [20, 21, 22, 23], reference)
        labels = np.array([1, 1, -1, -1])
        out1 = momentum_map(results, labels, op, reference)
        out2 = momentum_map(results, -labels, op, reference)
        assert np.array_equal(out1.data, -out2.data)

    def test_localized_difference_concentrates(self):
        # two families differing by a bump at one spot: the map's top-decile
        # magnitude should sit inside the bump's neighborhood
        grid = GridSpec(32, 32)
        ys, xs = np.mgrid[0:32, 0:32].astype(float)
        base = np.exp(-((xs - 16) ** 2 + (ys - 16) ** 2) / (2 * 36.0))
        bump = 0.5 * np.exp(-((xs - 22) ** 2 + (ys - 16) ** 2) / (2 * 4.0))
        op = build_operator(grid, OperatorParams(1.0))
        cfg = RegistrationConfig(sigma2=0.02, time_steps=5, max_iters=30)
        reference = ScalarImage(grid, base)
        results = []
        labels = []
        for k in range(6):
            rng = np.random.default_rng(30 + k)
            jitter = ndimage.gaussian_filter(rng.normal(0, 0.01, grid.shape), 2.0, mode="wrap")
            with_bump = k < 3
            data = np.clip(base + (bump if with_bump else 0.0) + jitter, 0, 1)
            results.append(register(reference, ScalarImage(grid, data), op, cfg))
            labels.append(1 if with_bump else -1)
        out = momentum_map(results, np.array(labels), op, reference)
        mag = np.abs(out.data)
        threshold = np.quantile(mag, 0.9)
        top = mag >= threshold
        near_bump = (xs - 22) ** 2 + (ys - 16) ** 2 <= 10.0**2
        assert (top & near_bump).sum() / top.sum() > 0.8

    def test_missing_result_rejected(self):
        grid = GridSpec(16, 16)
        reference = ScalarImage(grid, np.zeros(grid.shape))
        op = build_operator(grid, OperatorParams(1.0))
        with pytest.raises(InputError):
            momentum_map([None, None], np.array([1, -1]), op, reference)

    def test_file_export(self, tmp_path):
        import json

        from metricreg.evalsuite import MomentumMap, write_momentum_map
        from metricreg.formats import read_matrix_csv, read_pgm

        grid = GridSpec(8, 8)
        rng = np.random.default_rng(9)
        mmap = MomentumMap(grid=grid, data=rng.normal(size=grid.shape))
        write_momentum_map(tmp_path / "mm", mmap)
        back = read_matrix_csv(tmp_path / "mm.csv")
        assert np.array_equal(back, mmap.data)
        heat = read_pgm(tmp_path / "mm.pgm")
        assert heat.data.min() == 0.0 and heat.data.max() == 1.0
        sidecar = json.loads((tmp_path / "mm.json").read_text())
        assert sidecar["min"] == mmap.data.min()
        assert sidecar["max"] == mmap.data.max()
