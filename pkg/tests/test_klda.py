import numpy as np
import pytest

from metricreg.errors import InputError, NumericalError
from metricreg.kernel import to_kernel
from metricreg.klda import (
    margin_scale,
    LabeledSample,
    class_means,
    decision,
    default_epsilon,
    fit,
    hinge,
    hinge_grad_alpha,
    predict_label,
    rayleigh_quotient,
    within_class,
    within_class_grad,
)


def random_kernel(n, seed, gamma=1.0):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(0.2, 2.0, (n, n))
    vals = 0.5 * (vals + vals.T)
    np.fill_diagonal(vals, 0.0)
    return to_kernel(vals, gamma)


def random_labels(n, seed):
    rng = np.random.default_rng(seed)
    while True:
        labels = rng.choice([-1, 1], size=n)
        if np.any(labels == 1) and np.any(labels == -1):
            return LabeledSample(labels)


class TestLabeledSample:
    def test_rejects_single_class(self):
        with pytest.raises(InputError):
            LabeledSample(np.array([1, 1, 1]))

    def test_rejects_other_labels(self):
        with pytest.raises(InputError):
            LabeledSample(np.array([0, 1, -1]))

    def test_index_sets(self):
        s = LabeledSample(np.array([1, -1, 1, -1, -1]))
        assert list(s.idx_pos) == [0, 2]
        assert list(s.idx_neg) == [1, 3, 4]


class TestClassMeans:
    def test_identity_kernel_singletons(self):
        k = np.eye(2)
        s = LabeledSample(np.array([1, -1]))
        mp, mn = class_means(k, s)
        assert np.array_equal(mp, [1.0, 0.0])
        assert np.array_equal(mn, [0.0, 1.0])

    def test_all_ones_kernel(self):
        k = np.ones((4, 4))
        s = LabeledSample(np.array([1, 1, -1, -1]))
        mp, mn = class_means(k, s)
        assert np.array_equal(mp, np.ones(4))
        assert np.array_equal(mn, np.ones(4))

    def test_three_point_hand_case(self):
        # positive class columns (1, .5, .2) and (.5, 1, .4)
        k = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.4], [0.2, 0.4, 1.0]])
        s = LabeledSample(np.array([1, 1, -1]))
        mp, _ = class_means(k, s)
        assert np.allclose(mp, [0.75, 0.75, 0.3])


class TestWithinClass:
    def test_singleton_classes_identity_kernel(self):
        k = np.eye(2)
        s = LabeledSample(np.array([1, -1]))
        n = within_class(k, s, epsilon=0.1)
        assert np.allclose(n, 0.1 * np.eye(2))

    def test_duplicated_points_zero_scatter(self):
        # two identical columns in the positive class contribute zero covariance
        col = np.array([0.9, 0.9, 0.3])
        k = np.column_stack([col, col, np.array([0.3, 0.3, 1.0])])
        s = LabeledSample(np.array([1, 1, -1]))
        n = within_class(k, s, epsilon=0.0)
        kneg = k[:, [2]]
        expected_neg = kneg @ kneg.T / 1 - np.outer(kneg[:, 0], kneg[:, 0])
        assert np.allclose(n, expected_neg, atol=1e-15)

    def test_matches_double_loop(self):
        k = random_kernel(6, 5).values
        s = random_labels(6, 6)
        eps = 0.05
        got = within_class(k, s, eps)
        brute = np.zeros((6, 6))
        for z, idx in ((1, s.idx_pos), (-1, s.idx_neg)):
            nz = idx.size
            mean = np.zeros(6)
            for i in range(6):
                mean[i] = sum(k[i, l] for l in idx) / nz
            for i in range(6):
                for j in range(6):
                    brute[i, j] += sum(k[i, l] * k[j, l] for l in idx) / nz - mean[i] * mean[j]
        brute += eps * np.eye(6)
        assert np.abs(got - brute).max() < 1e-12


class TestFit:
    def test_identity_kernel_closed_form(self):
        k = np.eye(2)
        s = LabeledSample(np.array([1, -1]))
        eps = 0.25
        model = fit(k, s, eps)
        assert np.allclose(model.projection, [1.0 / eps, -1.0 / eps], rtol=1e-12)

    def test_label_flip_negates_projection(self):
        k = random_kernel(8, 7).values
        s = random_labels(8, 8)
        m1 = fit(k, s, 0.01)
        m2 = fit(k, s.flipped(), 0.01)
        assert np.array_equal(m1.projection, -m2.projection)

    def test_solve_residual(self):
        k = random_kernel(10, 9).values
        s = random_labels(10, 10)
        model = fit(k, s, 1e-4)
        rhs = model.mean_pos - model.mean_neg
        res = np.linalg.norm(model.within @ model.projection - rhs)
        assert res / np.linalg.norm(rhs) < 1e-8

    def test_rayleigh_optimality(self):
        k = random_kernel(8, 11).values
        s = random_labels(8, 12)
        model = fit(k, s, 0.05)
        j_opt = rayleigh_quotient(model.mean_pos, model.mean_neg, model.within, model.projection)
        rng = np.random.default_rng(13)
        for _ in range(100):
            w = rng.normal(size=8)
            j_rand = rayleigh_quotient(model.mean_pos, model.mean_neg, model.within, w)
            assert j_opt >= j_rand - 1e-10

    def test_singular_without_ridge(self):
        # duplicate kernel columns make the within-class matrix singular at eps = 0
        col = np.array([1.0, 1.0, 0.5, 0.2])
        k = np.column_stack([col, col, col, col])
        k = 0.5 * (k + k.T)
        s = LabeledSample(np.array([1, 1, -1, -1]))
        with pytest.raises(NumericalError):
            fit(k, s, 0.0)


class TestDecision:
    def test_continues_identity_kernel_example(self):
        k = np.eye(2)
        s = LabeledSample(np.array([1, -1]))
        eps = 0.25
        model = fit(k, s, eps)
        score = decision(model, k[:, 0])
        assert score == pytest.approx(1.0 / eps, rel=1e-12)
        assert predict_label(score) == 1

    def test_midpoint_scores_zero(self):
        k = random_kernel(6, 14).values
        s = random_labels(6, 15)
        model = fit(k, s, 0.05)
        assert decision(model, model.midpoint) == pytest.approx(0.0, abs=1e-12)

    def test_negating_projection_negates_score(self):
        k = random_kernel(6, 16).values
        s = random_labels(6, 17)
        m1 = fit(k, s, 0.02)
        m2 = fit(k, s.flipped(), 0.02)
        col = k[:, 1]
        assert decision(m1, col) == -decision(m2, col)

    def test_tie_predicts_positive(self):
        assert predict_label(0.0) == 1

    def test_masked_entries_rejected(self):
        k = random_kernel(4, 18).values
        s = random_labels(4, 19)
        model = fit(k, s, 0.05)
        bad = k[:, 0].copy()
        bad[2] = np.nan
        with pytest.raises(InputError):
            decision(model, bad)


class TestHinge:
    def test_beyond_margin(self):
        assert hinge(2.0, 1) == 0.0

    def test_within_margin(self):
        assert hinge(0.5, 1) == 0.5

    def test_wrong_side(self):
        assert hinge(-1.0, 1) == 2.0

    def test_batch_mean(self):
        scores = np.array([2.0, 0.5, -1.0])
        labels = np.array([1, 1, 1])
        assert hinge(scores, labels) == pytest.approx((0.0 + 0.5 + 2.0) / 3)


class FrozenProblem:
    """A synthetic frozen-velocity problem: moments fixed, alpha varies."""

    def __init__(self, n_train, n_eval, seed, gamma=0.5, beta=1.0):
        rng = np.random.default_rng(seed)
        m = n_train + n_eval
        self.beta = beta
        self.gamma = gamma

        def sym(a):
            a = 0.5 * (a + a.T)
            np.fill_diagonal(a, 0.0)
            return a

        self.quad = sym(rng.uniform(0.05, 0.5, (m, m)))
        self.cross = sym(rng.uniform(0.05, 0.5, (m, m)))
        self.const = sym(rng.uniform(0.05, 0.5, (m, m)))
        self.train = np.arange(n_train)
        self.eval = np.arange(n_train, m)
        labels = rng.choice([-1, 1], size=m)
        labels[:2] = [1, -1]
        labels[n_train : n_train + 2] = [1, -1]
        self.labels = labels
        self.sample = LabeledSample(labels[self.train])
        self.eval_labels = labels[self.eval]
        self.epsilon = 1e-3

    def metric_at(self, alpha):
        return alpha**2 * self.quad + 2 * alpha * self.beta * self.cross + self.beta**2 * self.const

    def dmetric_at(self, alpha):
        return 2 * alpha * self.quad + 2 * self.beta * self.cross

    def kernel_at(self, alpha):
        return to_kernel(self.metric_at(alpha), self.gamma).values

    def loss_at(self, alpha, calibrated=False):
        k = self.kernel_at(alpha)
        model = fit(k[np.ix_(self.train, self.train)], self.sample, self.epsilon, self.gamma)
        cols = k[np.ix_(self.train, self.eval)]
        scores = decision(model, cols)
        if calibrated:
            scores = scores / margin_scale(model)
        return hinge(scores, self.eval_labels)

    def grad_at(self, alpha, calibrated=False):
        k = self.kernel_at(alpha)
        dk = -self.gamma * k * self.dmetric_at(alpha)
        np.fill_diagonal(dk, 0.0)
        ktr = k[np.ix_(self.train, self.train)]
        model = fit(ktr, self.sample, self.epsilon, self.gamma)
        cols = k[np.ix_(self.train, self.eval)]
        dcols = dk[np.ix_(self.train, self.eval)]
        dktr = dk[np.ix_(self.train, self.train)]
        return hinge_grad_alpha(model, self.eval_labels, cols, dcols, dktr, calibrated=calibrated)


class TestHingeGradAlpha:
    def test_zero_when_margins_satisfied(self):
        prob = FrozenProblem(6, 4, seed=30)
        k = prob.kernel_at(1.0)
        model = fit(k[np.ix_(prob.train, prob.train)], prob.sample, prob.epsilon, prob.gamma)
        cols = k[np.ix_(prob.train, prob.eval)]
        # scale projection so all eval margins exceed 1
        scores = decision(model, cols)
        scale = 2.0 / np.abs(scores).min()
        boosted = KldaModelScaled(model, scale)
        dk = np.zeros_like(k)
        got = hinge_grad_alpha(
            boosted, prob.eval_labels * np.sign(scores).astype(int), cols, dk[np.ix_(prob.train, prob.eval)],
            dk[np.ix_(prob.train, prob.train)],
        )
        assert got == 0.0

    def test_zero_kernel_gradient_gives_zero(self):
        prob = FrozenProblem(6, 4, seed=31)
        k = prob.kernel_at(1.0)
        model = fit(k[np.ix_(prob.train, prob.train)], prob.sample, prob.epsilon, prob.gamma)
        cols = k[np.ix_(prob.train, prob.eval)]
        zeros_tr = np.zeros((6, 6))
        zeros_cols = np.zeros_like(cols)
        assert hinge_grad_alpha(model, prob.eval_labels, cols, zeros_cols, zeros_tr) == 0.0

    @pytest.mark.parametrize("seed,alpha", [(32, 0.7), (33, 1.0), (34, 1.8)])
    def test_matches_end_to_end_finite_difference(self, seed, alpha):
        prob = FrozenProblem(6, 5, seed=seed)
        h = 1e-4
        fd = (prob.loss_at(alpha + h) - prob.loss_at(alpha - h)) / (2 * h)
        got = prob.grad_at(alpha)
        assert got == pytest.approx(fd, rel=1e-4, abs=1e-10)

    @pytest.mark.parametrize("seed,alpha", [(42, 0.7), (43, 1.0), (44, 1.6)])
    def test_calibrated_variant_matches_finite_difference(self, seed, alpha):
        prob = FrozenProblem(6, 5, seed=seed)
        h = 1e-4
        fd = (prob.loss_at(alpha + h, calibrated=True) - prob.loss_at(alpha - h, calibrated=True)) / (2 * h)
        got = prob.grad_at(alpha, calibrated=True)
        assert got == pytest.approx(fd, rel=1e-4, abs=1e-10)

    @pytest.mark.parametrize("seed,alpha", [(35, 0.9), (36, 1.4)])
    def test_dwithin_matches_finite_difference(self, seed, alpha):
        prob = FrozenProblem(6, 2, seed=seed)
        h = 1e-6

        def within_at(a):
            k = prob.kernel_at(a)[np.ix_(prob.train, prob.train)]
            return within_class(k, prob.sample, prob.epsilon)

        fd = (within_at(alpha + h) - within_at(alpha - h)) / (2 * h)
        k = prob.kernel_at(alpha)
        dk = -prob.gamma * k * prob.dmetric_at(alpha)
        np.fill_diagonal(dk, 0.0)
        got = within_class_grad(
            k[np.ix_(prob.train, prob.train)], dk[np.ix_(prob.train, prob.train)], prob.sample
        )
        denom = np.maximum(np.abs(fd), 1e-8)
        assert (np.abs(got - fd) / denom).max() < 1e-6


class KldaModelScaled:
    """Test helper: a model with its projection scaled, everything else shared."""

    def __init__(self, model, scale):
        self.projection = model.projection * scale
        self.mean_pos = model.mean_pos
        self.mean_neg = model.mean_neg
        self.within = model.within
        self.epsilon = model.epsilon
        self.gamma = model.gamma
        self.train_kernel = model.train_kernel
        self.sample = model.sample
        self.midpoint = model.midpoint


class TestDefaultEpsilon:
    def test_scales_with_trace(self):
        n = np.diag([1.0, 2.0, 3.0])
        assert default_epsilon(n) == pytest.approx(1e-3 * 2.0)
