"""Evaluation tools: ROC AUC, the mutual-information alpha baseline, a
vectorized-mask logistic baseline, and class-mean momentum difference maps.
"""

from dataclasses import dataclass

import numpy as np

from .diffop import apply_L
from .errors import InputError
from .grid import image_gradient
from .registration import normalize_image

__all__ = [
    "RocResult",
    "roc_auc",
    "mutual_information",
    "mi_select_alpha",
    "logistic_baseline",
    "LogisticResult",
    "MomentumMap",
    "momentum_map",
    "write_momentum_map",
]


@dataclass(frozen=True)
class RocResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray


def roc_auc(scores, labels):
    """Threshold-sweep ROC with tie handling by rank averaging.

    The area equals the normalized Mann-Whitney statistic: the fraction of
    (positive, negative) pairs ranked concordantly, ties counted half.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("scores and labels must be matching 1-D arrays")
    pos = labels == 1
    neg = labels == -1
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise InputError("ROC needs both classes present")
    # average ranks (1-based) with ties sharing the mean rank
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    u_stat = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    auc = u_stat / (n_pos * n_neg)
    # sweep curve: thresholds descending, tie groups advance diagonally
    desc = np.argsort(-scores, kind="stable")
    fpr = [0.0]
    tpr = [0.0]
    tp = fp = 0
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and scores[desc[j + 1]] == scores[desc[i]]:
            j += 1
        group = desc[i : j + 1]
        tp += int(pos[group].sum())
        fp += int(neg[group].sum())
        tpr.append(tp / n_pos)
        fpr.append(fp / n_neg)
        i = j + 1
    return RocResult(auc=float(auc), fpr=np.array(fpr), tpr=np.array(tpr))


def mutual_information(a, b, bins=32):
    """Histogram mutual information in bits over the unit intensity range."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InputError("images must have matching sizes")
    joint, _, _ = np.histogram2d(a, b, bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    return float(np.sum(pxy[nz] * np.log2(pxy[nz] / np.outer(px, py)[nz])))


_MI_CTX = {}


def _mi_worker(pair_index):
    from .grid import warp
    from .registration import register

    moving, target = _MI_CTX["pairs"][pair_index]
    res = register(moving, target, _MI_CTX["op"], _MI_CTX["cfg"])
    warped = warp(normalize_image(moving), res.forward_map)
    return mutual_information(warped.data, normalize_image(target).data, bins=_MI_CTX["bins"])


def mi_select_alpha(pairs, alpha_grid, op_builder, cfg, bins=32, jobs=1, progress=None):
    """Pick the alpha whose registrations maximize mean mutual information.

    ``pairs`` is a sequence of (moving, target) image tuples; ``op_builder``
    maps an alpha to a spectral operator. The per-alpha registrations fan out
    over ``jobs`` forked workers, combined in pair order. Registration
    failures skip that alpha with a warning; if every alpha fails the
    selection errors out.
    """
    import multiprocessing
    import warnings
    from concurrent.futures import ProcessPoolExecutor

    from .errors import NumericalError

    alpha_grid = list(alpha_grid)
    if not pairs or not alpha_grid:
        raise InputError("need at least one pair and one alpha")
    global _MI_CTX
    best_alpha = None
    best_mi = -np.inf
    for alpha in alpha_grid:
        _MI_CTX = {"pairs": list(pairs), "op": op_builder(alpha), "cfg": cfg, "bins": bins}
        try:
            if jobs <= 1:
                values = [_mi_worker(i) for i in range(len(pairs))]
            else:
                mp_ctx = multiprocessing.get_context("fork")
                with ProcessPoolExecutor(max_workers=jobs, mp_context=mp_ctx) as pool:
                    values = list(pool.map(_mi_worker, range(len(pairs))))
        except NumericalError as exc:
            warnings.warn(f"alpha={alpha}: registration failed ({exc}); skipped")
            continue
        finally:
            _MI_CTX = {}
        mean_mi = float(np.mean(values))
        if progress is not None:
            progress(alpha, mean_mi)
        if mean_mi > best_mi:
            best_mi = mean_mi
            best_alpha = alpha
    if best_alpha is None:
        raise NumericalError("every alpha in the grid failed to register")
    return best_alpha


@dataclass(frozen=True)
class LogisticResult:
    auc_mean: float
    auc_std: float
    fold_aucs: tuple
    converged: bool


def logistic_baseline(images, labels, folds=5, l2=1.0, max_iters=500, lr=0.1, seed=0):
    """L2-regularized logistic regression on flattened binarized masks.

    Plain full-batch gradient descent; reports the cross-validated AUC of
    held-out decision scores per fold.
    """
    labels = np.asarray(labels)
    n = len(images)
    if n != labels.size:
        raise InputError("images and labels disagree in length")
    if folds < 2 or folds > n:
        raise InputError("folds must lie in [2, n]")
    x = np.stack([(img.data.ravel() >= 0.5).astype(float) for img in images])
    y01 = (labels == 1).astype(float)
    rng = np.random.default_rng(seed)
    # stratified fold assignment: round-robin within each shuffled class
    fold_ids = np.empty(n, dtype=int)
    for cls in (1, -1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        fold_ids[idx] = np.arange(idx.size) % folds
    aucs = []
    converged = True
    for f in range(folds):
        test = fold_ids == f
        train = ~test
        if len(np.unique(labels[test])) < 2 or len(np.unique(labels[train])) < 2:
            continue
        w = np.zeros(x.shape[1])
        b = 0.0
        xt, yt = x[train], y01[train]
        last_grad = np.inf
        for _ in range(max_iters):
            z = xt @ w + b
            p = 1.0 / (1.0 + np.exp(-z))
            err = p - yt
            gw = xt.T @ err / xt.shape[0] + l2 * w / xt.shape[0]
            gb = err.mean()
            w -= lr * gw
            b -= lr * gb
            last_grad = max(np.abs(gw).max(), abs(gb))
            if last_grad < 1e-6:
                break
        if last_grad >= 1e-6:
            converged = False
        scores = x[test] @ w + b
        aucs.append(roc_auc(scores, labels[test]).auc)
    if not aucs:
        raise InputError("no fold contained both classes")
    aucs = np.array(aucs)
    return LogisticResult(
        auc_mean=float(aucs.mean()),
        auc_std=float(aucs.std()),
        fold_aucs=tuple(aucs),
        converged=converged,
    )


@dataclass(frozen=True)
class MomentumMap:
    grid: object
    data: np.ndarray


def write_momentum_map(prefix, mmap):
    """Emit a momentum map as CSV plus a PGM heat image with a range sidecar.

    The PGM rescales values linearly onto [0, 1]; the sidecar JSON records the
    true min/max so magnitudes can be recovered.
    """
    import json
    from pathlib import Path

    from .formats import write_matrix_csv, write_pgm
    from .grid import ScalarImage

    prefix = Path(prefix)
    write_matrix_csv(prefix.with_suffix(".csv"), mmap.data)
    lo = float(mmap.data.min())
    hi = float(mmap.data.max())
    span = hi - lo if hi > lo else 1.0
    scaled = (mmap.data - lo) / span
    write_pgm(prefix.with_suffix(".pgm"), ScalarImage(mmap.grid, scaled))
    sidecar = {"schema_version": 1, "min": lo, "max": hi}
    prefix.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def momentum_map(results, labels, op, reference):
    """Class-mean difference of scalar momenta from registrations to a reference.

    Each subject's scalar momentum is the initial-time momentum L v_0 projected
    on the reference image's gradient direction (zero where the reference is
    flat). The output is mean over class +1 minus mean over class -1.
    """
    labels = np.asarray(labels)
    if len(results) != labels.size:
        raise InputError("results and labels disagree in length")
    if not (np.any(labels == 1) and np.any(labels == -1)):
        raise InputError("both classes must be present")
    grad = image_gradient(reference)
    mag = np.hypot(grad.vx, grad.vy)
    nx_dir = np.where(mag > 1e-12, grad.vx / np.maximum(mag, 1e-300), 0.0)
    ny_dir = np.where(mag > 1e-12, grad.vy / np.maximum(mag, 1e-300), 0.0)
    sums = {1: np.zeros(reference.grid.shape), -1: np.zeros(reference.grid.shape)}
    counts = {1: 0, -1: 0}
    for res, z in zip(results, labels):
        if res is None:
            raise InputError("missing registration result for a subject")
        v0 = res.velocity.steps[0]
        momentum = apply_L(op, v0)
        scalar = momentum.vx * nx_dir + momentum.vy * ny_dir
        sums[int(z)] += scalar
        counts[int(z)] += 1
    diff = sums[1] / counts[1] - sums[-1] / counts[-1]
    return MomentumMap(grid=reference.grid, data=diff)
