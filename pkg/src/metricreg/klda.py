"""Kernel Fisher discriminant: fit, decision scores, hinge loss, and the
derivative of the hinge loss in the operator weight alpha.

Everything here treats the kernel matrix as data. The fit solves

    (scatter_pos + scatter_neg + epsilon*I) w = mean_pos - mean_neg

where mean_z / scatter_z are the per-class column means and covariance-style
second moments of the training kernel. The alpha-derivative machinery applies
the product rule entrywise through those definitions with the kernel gradient
supplied from outside; the projection derivative uses

    dw = N^{-1} (dmean_pos - dmean_neg - dN w),

and a margin-violating evaluation point contributes -z * dscore to the batch
hinge gradient while satisfied points contribute zero.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import InputError, NumericalError

__all__ = [
    "LabeledSample",
    "KldaModel",
    "class_means",
    "within_class",
    "fit",
    "decision",
    "hinge",
    "class_means_grad",
    "within_class_grad",
    "projection_grad",
    "hinge_grad_alpha",
    "margin_scale",
    "rayleigh_quotient",
    "default_epsilon",
]


@dataclass(frozen=True)
class LabeledSample:
    """Binary labels in {-1, +1} with per-class index bookkeeping."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        if labels.ndim != 1:
            raise InputError("labels must be a 1-D array")
        if not np.all(np.isin(labels, (-1, 1))):
            raise InputError("labels must be -1 or +1")
        if not (np.any(labels == 1) and np.any(labels == -1)):
            raise InputError("both classes must be present")
        labels = labels.copy()
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def n(self):
        return self.labels.size

    @property
    def idx_pos(self):
        return np.flatnonzero(self.labels == 1)

    @property
    def idx_neg(self):
        return np.flatnonzero(self.labels == -1)

    def flipped(self):
        return LabeledSample(-self.labels)


@dataclass(frozen=True)
class KldaModel:
    projection: np.ndarray
    mean_pos: np.ndarray
    mean_neg: np.ndarray
    within: np.ndarray
    epsilon: float
    gamma: float
    train_kernel: np.ndarray
    sample: LabeledSample

    @property
    def midpoint(self):
        return 0.5 * (self.mean_pos + self.mean_neg)


def _kernel_values(kernel):
    return kernel.values if hasattr(kernel, "values") else np.asarray(kernel)


def class_means(kernel, sample):
    """Per-class column averages of the kernel matrix."""
    k = _kernel_values(kernel)
    if k.shape[0] != sample.n:
        raise InputError("kernel size does not match the labeled sample")
    mean_pos = k[:, sample.idx_pos].mean(axis=1)
    mean_neg = k[:, sample.idx_neg].mean(axis=1)
    return mean_pos, mean_neg


def within_class(kernel, sample, epsilon):
    """Ridge-regularized within-class matrix: scatter_pos + scatter_neg + eps*I."""
    if epsilon < 0:
        raise InputError("epsilon must be nonnegative")
    k = _kernel_values(kernel)
    mean_pos, mean_neg = class_means(k, sample)
    within = np.zeros((sample.n, sample.n))
    for idx, mean in ((sample.idx_pos, mean_pos), (sample.idx_neg, mean_neg)):
        kz = k[:, idx]
        within += kz @ kz.T / idx.size - np.outer(mean, mean)
    within += epsilon * np.eye(sample.n)
    return within


def default_epsilon(within_unregularized, scale=1e-3):
    """Ridge sized relative to the mean diagonal of the unregularized matrix.

    Floored at a tiny positive value so zero-scatter cases (singleton or
    duplicated classes) still produce a solvable system.
    """
    n = within_unregularized.shape[0]
    return max(scale * float(np.trace(within_unregularized)) / n, 1e-12)


def fit(kernel, sample, epsilon, gamma=None):
    """Solve for the discriminant projection and package the model."""
    k = _kernel_values(kernel)
    if gamma is None:
        gamma = getattr(kernel, "gamma", np.nan)
    mean_pos, mean_neg = class_means(k, sample)
    within = within_class(k, sample, epsilon)
    rhs = mean_pos - mean_neg
    try:
        projection = scipy.linalg.solve(within, rhs, assume_a="pos")
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(
            f"within-class matrix is singular; increase the ridge epsilon ({epsilon!r})"
        ) from exc
    if not np.all(np.isfinite(projection)):
        raise NumericalError(
            f"within-class solve produced non-finite projection; increase epsilon ({epsilon!r})"
        )
    return KldaModel(
        projection=projection,
        mean_pos=mean_pos,
        mean_neg=mean_neg,
        within=within,
        epsilon=float(epsilon),
        gamma=float(gamma),
        train_kernel=k,
        sample=sample,
    )


def decision(model, k_col):
    """Signed score for a kernel column; class = sign(score), ties go to +1.

    Accepts a single column of length n or an (n, m) block of m columns.
    """
    k_col = np.asarray(k_col, dtype=float)
    if k_col.shape[0] != model.projection.size:
        raise InputError("kernel column length does not match the model")
    if not np.all(np.isfinite(k_col)):
        raise InputError("kernel column carries masked or non-finite entries")
    centered = k_col - (model.midpoint if k_col.ndim == 1 else model.midpoint[:, None])
    return model.projection @ centered


def predict_label(score):
    return np.where(np.asarray(score) >= 0, 1, -1)


def hinge(score, z):
    """Margin loss max(0, 1 - z*score); mean over a batch when given arrays."""
    score = np.asarray(score, dtype=float)
    z = np.asarray(z)
    loss = np.maximum(0.0, 1.0 - z * score)
    return float(loss.mean()) if loss.ndim else float(loss)


# ---------------------------------------------------------------------------
# alpha-derivative chain
# ---------------------------------------------------------------------------


def class_means_grad(kernel_grad, sample):
    """d(mean_z)/dalpha: the same column averages applied to dK/dalpha."""
    dk = _kernel_values(kernel_grad)
    dmean_pos = dk[:, sample.idx_pos].mean(axis=1)
    dmean_neg = dk[:, sample.idx_neg].mean(axis=1)
    return dmean_pos, dmean_neg


def within_class_grad(kernel, kernel_grad, sample):
    """Product rule through the scatter definition; the ridge term is constant."""
    k = _kernel_values(kernel)
    dk = _kernel_values(kernel_grad)
    mean_pos, mean_neg = class_means(k, sample)
    dmean_pos, dmean_neg = class_means_grad(dk, sample)
    dwithin = np.zeros_like(k)
    for idx, mean, dmean in (
        (sample.idx_pos, mean_pos, dmean_pos),
        (sample.idx_neg, mean_neg, dmean_neg),
    ):
        kz = k[:, idx]
        dkz = dk[:, idx]
        cross = dkz @ kz.T
        dwithin += (cross + cross.T) / idx.size
        outer = np.outer(dmean, mean)
        dwithin -= outer + outer.T
    return dwithin


def projection_grad(model, dwithin, dmean_pos, dmean_neg):
    """dw = N^{-1} (dmean_pos - dmean_neg - dN w)."""
    rhs = dmean_pos - dmean_neg - dwithin @ model.projection
    try:
        return scipy.linalg.solve(model.within, rhs, assume_a="pos")
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NumericalError("within-class matrix became singular in the gradient") from exc


def margin_scale(model):
    """Half the projected separation of the class means.

    Dividing decision scores by this calibrates the projected class means to
    sit at +1 and -1, which makes the hinge margin meaningful regardless of
    the arbitrary overall scale of the discriminant solution. Always positive
    for a non-degenerate fit since it equals a ridge-regularized quadratic
    form of mean_pos - mean_neg.
    """
    return 0.5 * float(model.projection @ (model.mean_pos - model.mean_neg))


def hinge_grad_alpha(model, eval_labels, k_cols, dk_cols, train_kernel_grad, calibrated=False):
    """Mean d(hinge)/dalpha over evaluation points at frozen velocities.

    ``k_cols``/``dk_cols`` are (n, m) kernel columns of the m evaluation
    points and their alpha-derivatives; ``train_kernel_grad`` is the (n, n)
    alpha-derivative of the training kernel, which drives the model's own
    dependence on alpha through its means and within-class matrix.

    With ``calibrated`` the loss is the hinge of score / margin_scale(model),
    and the quotient rule adds the margin's own alpha-dependence.
    """
    k_cols = np.atleast_2d(np.asarray(k_cols, dtype=float).T).T
    dk_cols = np.atleast_2d(np.asarray(dk_cols, dtype=float).T).T
    z = np.asarray(eval_labels)
    dmean_pos, dmean_neg = class_means_grad(train_kernel_grad, model.sample)
    dwithin = within_class_grad(model.train_kernel, train_kernel_grad, model.sample)
    dproj = projection_grad(model, dwithin, dmean_pos, dmean_neg)
    scores = decision(model, k_cols)
    centered = k_cols - model.midpoint[:, None]
    dmid = 0.5 * (dmean_pos + dmean_neg)
    dscores = dproj @ centered + model.projection @ (dk_cols - dmid[:, None])
    if calibrated:
        m = margin_scale(model)
        dm = 0.5 * (
            float(dproj @ (model.mean_pos - model.mean_neg))
            + float(model.projection @ (dmean_pos - dmean_neg))
        )
        dscores = dscores / m - scores * dm / (m * m)
        scores = scores / m
    grads = np.where(z * scores < 1.0, -z * dscores, 0.0)
    return float(grads.mean())


def rayleigh_quotient(mean_pos, mean_neg, within, w):
    """Between-class over within-class variance ratio along a direction."""
    sep = float(w @ (mean_pos - mean_neg))
    denom = float(w @ within @ w)
    return sep * sep / denom
