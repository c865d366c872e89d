"""Classification kernel built from pairwise registration energies.

The kernel is the elementwise map K = exp(-gamma * energy) applied to a
symmetrized matrix of registration metric values. Alongside the values the
matrix carries per-pair spectral moments, so both the values and their
alpha-derivatives can be re-evaluated exactly at any trial alpha while the
underlying velocities stay frozen. No positive-semidefiniteness projection is
applied; the downstream discriminant absorbs indefiniteness through its ridge.
"""

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .registration import PairwiseMetrics

__all__ = [
    "MetricMatrix",
    "KernelMatrix",
    "KernelGradient",
    "from_pairwise",
    "symmetrize",
    "to_kernel",
    "kernel_dalpha",
    "kernel_row",
]


@dataclass(frozen=True)
class MetricMatrix:
    """Pairwise metric values with their operator-weight polynomial moments.

    value_at / dalpha_at evaluate the frozen-velocity energies and their
    alpha-derivative at arbitrary operator weights:

        value(a, b)  = a^2 * quad + 2ab * cross + b^2 * const
        dalpha(a, b) = 2a * quad + 2b * cross
    """

    n: int
    values: np.ndarray
    quad: np.ndarray
    cross: np.ndarray
    const: np.ndarray
    failed: np.ndarray

    def __post_init__(self):
        for name in ("values", "quad", "cross", "const"):
            arr = getattr(self, name)
            if arr.shape != (self.n, self.n):
                raise InputError(f"{name} must be {self.n}x{self.n}")
        ok = ~self.failed
        if not np.all(np.isfinite(self.values[ok])):
            raise InputError("metric values must be finite outside the failure mask")
        if np.any(self.values[ok] < -1e-12):
            raise InputError("metric values must be nonnegative")
        if np.any(np.diag(self.values) != 0.0):
            raise InputError("metric diagonal must be exactly zero")

    @property
    def num_failed(self):
        return int(self.failed.sum())

    def value_at(self, alpha, beta=1.0):
        return alpha * alpha * self.quad + 2.0 * alpha * beta * self.cross + beta * beta * self.const

    def dalpha_at(self, alpha, beta=1.0):
        return 2.0 * alpha * self.quad + 2.0 * beta * self.cross


def from_pairwise(pw: PairwiseMetrics) -> MetricMatrix:
    """Wrap raw ordered-pair registration output as a MetricMatrix."""
    values = pw.values.copy()
    values[pw.failed] = 0.0
    np.fill_diagonal(values, 0.0)
    clean = {}
    for name in ("quad", "cross", "const"):
        arr = getattr(pw, name).copy()
        arr[pw.failed] = 0.0
        np.fill_diagonal(arr, 0.0)
        clean[name] = arr
    return MetricMatrix(n=pw.n, values=values, failed=pw.failed.copy(), **clean)


@dataclass(frozen=True)
class KernelMatrix:
    n: int
    values: np.ndarray
    gamma: float

    def __post_init__(self):
        if self.values.shape != (self.n, self.n):
            raise InputError("kernel matrix shape mismatch")
        if np.any(np.diag(self.values) != 1.0):
            raise InputError("kernel diagonal must be exactly one")
        if np.abs(self.values - self.values.T).max() > 1e-12:
            raise InputError("kernel matrix must be symmetric")
        if np.any(self.values <= 0) or np.any(self.values > 1):
            raise InputError("kernel entries must lie in (0, 1]")


@dataclass(frozen=True)
class KernelGradient:
    """Entrywise d(kernel)/d(alpha) at frozen velocities."""

    values: np.ndarray

    def __post_init__(self):
        if np.any(np.diag(self.values) != 0.0):
            raise InputError("kernel gradient diagonal must be zero")
        if not np.all(np.isfinite(self.values)):
            raise InputError("kernel gradient must be finite")


def symmetrize(metric: MetricMatrix) -> MetricMatrix:
    """Average the two directions of every ordered pair, moments included."""
    half = lambda a: 0.5 * (a + a.T)
    return MetricMatrix(
        n=metric.n,
        values=half(metric.values),
        quad=half(metric.quad),
        cross=half(metric.cross),
        const=half(metric.const),
        failed=metric.failed | metric.failed.T,
    )


def to_kernel(metric_values, gamma) -> KernelMatrix:
    """Elementwise exp(-gamma * value); accepts a MetricMatrix or a raw array."""
    if gamma <= 0:
        raise InputError("gamma must be positive")
    if isinstance(metric_values, MetricMatrix):
        if metric_values.num_failed:
            raise InputError("metric matrix carries failed cells; cannot build a kernel")
        values = metric_values.values
    else:
        values = np.asarray(metric_values)
    if np.abs(values - values.T).max() > 1e-10:
        raise InputError("metric must be symmetrized before building a kernel")
    k = np.exp(-gamma * 0.5 * (values + values.T))
    # exp underflows to 0.0 for huge exponents; clamp to keep entries positive
    k = np.maximum(k, np.finfo(float).tiny)
    np.fill_diagonal(k, 1.0)
    return KernelMatrix(n=k.shape[0], values=k, gamma=gamma)


def kernel_dalpha(metric: MetricMatrix, kernel: KernelMatrix, metric_dalpha) -> KernelGradient:
    """Chain rule through the exponential: dK/da = -gamma * K * d(value)/da."""
    if metric.n != kernel.n:
        raise InputError("metric and kernel dimensions disagree")
    metric_dalpha = np.asarray(metric_dalpha)
    if metric_dalpha.shape != kernel.values.shape:
        raise InputError("metric_dalpha shape does not match the kernel")
    grad = -kernel.gamma * kernel.values * metric_dalpha
    np.fill_diagonal(grad, 0.0)
    return KernelGradient(values=grad)


def kernel_row(new_image, train_images, op, cfg, gamma, jobs=1, both_directions=False):
    """Kernel column of a new image against the training sample.

    Registers each training image to the new image (optionally both ways,
    averaging the energies) and applies exp(-gamma * value). A failed
    registration raises: a prediction must not silently use masked entries.
    """
    if gamma <= 0:
        raise InputError("gamma must be positive")
    n = len(train_images)
    if n == 0:
        raise InputError("empty training sample")
    sample = list(train_images) + [new_image]
    pairs = [(i, n) for i in range(n)]
    if both_directions:
        pairs += [(n, i) for i in range(n)]
    values = register_selected(sample, pairs, op, cfg, jobs)
    col = np.empty(n)
    for i in range(n):
        if both_directions:
            col[i] = 0.5 * (values[(i, n)] + values[(n, i)])
        else:
            col[i] = values[(i, n)]
    if not np.all(np.isfinite(col)):
        bad = [i for i in range(n) if not np.isfinite(col[i])]
        raise NumericalError(f"registration failed for training indices {bad}; cannot predict")
    return np.exp(-gamma * col)


def register_selected(sample, pairs, op, cfg, jobs=1, checkpoint_dir=None):
    """Run a chosen list of ordered-pair registrations, returning {pair: energy}.

    Uses the same per-pair worker as register_pairwise in every mode, so the
    numbers are identical regardless of the jobs setting; failures map to NaN.
    """
    import metricreg.registration as regmod

    ctx = {"images": list(sample), "op": op, "cfg": cfg, "checkpoint_dir": checkpoint_dir}
    out = {}
    regmod._PAIR_CTX = ctx
    try:
        if jobs <= 1:
            results = map(regmod._pair_worker, pairs)
            for i, j, val, _q, _c, _c0, bad in results:
                out[(i, j)] = np.nan if bad else val
        else:
            mp_ctx = multiprocessing.get_context("fork")
            chunk = max(1, len(pairs) // (jobs * 8))
            with ProcessPoolExecutor(max_workers=jobs, mp_context=mp_ctx) as pool:
                for i, j, val, _q, _c, _c0, bad in pool.map(regmod._pair_worker, pairs, chunksize=chunk):
                    out[(i, j)] = np.nan if bad else val
    finally:
        regmod._PAIR_CTX = {}
    return out
