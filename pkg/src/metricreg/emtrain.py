"""Alternating trainer: pairwise registration at the current operator weight
(E-step), then grid-searched kernel width and projected gradient descent on
the weight against the validation hinge loss (M-step).

Between E-steps every energy is re-evaluated exactly from the frozen
velocities through the stored spectral moments, so an M-step line search
costs no registrations. The kernel width gamma and the discriminant ridge
epsilon chosen in an E-step stay frozen through the following M-step, which
keeps the analytic loss gradient consistent with what the line search
evaluates.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffop import OperatorParams, build_operator
from .errors import ConfigError, DegenerateSampleError, InputError, NumericalError
from .evalsuite import roc_auc
from .formats import read_matrix_csv, write_matrix_csv
from .kernel import MetricMatrix, from_pairwise, symmetrize, to_kernel
from .klda import (
    LabeledSample,
    decision,
    default_epsilon,
    fit,
    hinge,
    hinge_grad_alpha,
    margin_scale,
    within_class,
)
from .registration import register_pairwise

__all__ = ["EmConfig", "EmTrace", "EStepResult", "TrainResult", "split_folds", "e_step", "m_step", "train"]

_DEFAULT_GAMMA_GRID = tuple(float(g) for g in np.logspace(-3.0, 1.0, 7))


@dataclass(frozen=True)
class EmConfig:
    alpha0: float = 1.0
    alpha_bounds: tuple = (1e-3, 1e2)
    gamma_grid: tuple = _DEFAULT_GAMMA_GRID
    em_max_iters: int = 10
    mstep_max_iters: int = 25
    mstep_step0: float = 0.5
    mstep_trust: float = 2.0
    loss_tol: float = 1e-4
    alpha_change_tol: float = 1e-3
    ridge_scale: float = 1e-3
    select: str = "val"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.alpha_bounds
        if not (0 < lo < hi):
            raise ConfigError("alpha_bounds must be ordered and positive")
        if not (lo <= self.alpha0 <= hi):
            raise ConfigError("alpha0 must lie within alpha_bounds")
        if not self.gamma_grid or any(g <= 0 for g in self.gamma_grid):
            raise ConfigError("gamma_grid must be non-empty and positive")
        if self.select not in ("val", "train"):
            raise ConfigError("select must be 'val' or 'train'")
        if self.em_max_iters < 1 or self.mstep_max_iters < 1:
            raise ConfigError("iteration counts must be positive")
        if not (self.mstep_step0 > 0):
            raise ConfigError("mstep_step0 must be positive")
        if not (self.mstep_trust > 1):
            raise ConfigError("mstep_trust must exceed 1")


_TRACE_COLUMNS = (
    "iteration",
    "alpha",
    "gamma",
    "epsilon",
    "train_hinge",
    "val_hinge",
    "train_auc",
    "val_auc",
    "registrations",
)


@dataclass
class EmTrace:
    rows: list = field(default_factory=list)

    def append(self, **kwargs):
        if set(kwargs) != set(_TRACE_COLUMNS):
            raise InputError("trace row keys do not match the trace schema")
        self.rows.append({k: kwargs[k] for k in _TRACE_COLUMNS})

    def column(self, name):
        return np.array([row[name] for row in self.rows])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(",".join(_TRACE_COLUMNS) + "\n")
            for row in self.rows:
                cells = []
                for name in _TRACE_COLUMNS:
                    value = row[name]
                    cells.append(str(value) if isinstance(value, int) else repr(float(value)))
                fh.write(",".join(cells) + "\n")


@dataclass
class EStepResult:
    alpha: float
    metric: MetricMatrix
    gamma: float
    epsilon: float
    model: object
    train_hinge: float
    val_hinge: float
    train_auc: float
    val_auc: float
    val_scores: np.ndarray
    registrations: int


@dataclass
class TrainResult:
    alpha: float
    gamma: float
    epsilon: float
    model: object
    metric: MetricMatrix
    trace: EmTrace
    best_iteration: int
    train_idx: np.ndarray
    val_idx: np.ndarray


def split_folds(labels, seed):
    """Stratified 50/50 split into train/validation folds, seeded shuffle."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train_idx = []
    val_idx = []
    for cls in (1, -1):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            raise InputError(f"class {cls} needs at least 2 members to split")
        idx = idx[rng.permutation(idx.size)]
        half = (idx.size + 1) // 2
        train_idx.extend(idx[:half])
        val_idx.extend(idx[half:])
    return np.sort(np.array(train_idx)), np.sort(np.array(val_idx))


def _fit_at(metric_values, gamma, epsilon, train_idx, val_idx, train_sample, val_labels):
    """Fit on the train-fold kernel block and score the validation fold.

    The reported hinge is margin-calibrated (scores divided by the projected
    class-mean separation), so kernel widths that collapse every score toward
    zero cannot masquerade as low-loss fits. Raw scores are returned for
    AUC and prediction, which are scale-invariant anyway.
    """
    kernel = to_kernel(metric_values, gamma)
    k = kernel.values
    ktr = k[np.ix_(train_idx, train_idx)]
    model = fit(ktr, train_sample, epsilon, gamma)
    val_cols = k[np.ix_(train_idx, val_idx)]
    val_scores = decision(model, val_cols)
    val_hinge = hinge(val_scores / margin_scale(model), val_labels)
    return model, val_scores, val_hinge


def e_step(images, labels, train_idx, val_idx, alpha, em_cfg, reg_cfg, jobs=1, checkpoint_dir=None):
    """Register all ordered pairs at this alpha, then pick gamma on validation.

    Returns an EStepResult whose metric matrix is symmetrized and carries the
    spectral moments needed to re-evaluate energies at any other alpha.
    """
    labels = np.asarray(labels)
    n = len(images)
    op = build_operator(images[0].grid, OperatorParams(alpha=alpha, beta=1.0))
    pw = register_pairwise(images, op, reg_cfg, jobs=jobs, checkpoint_dir=checkpoint_dir)
    if pw.num_failed:
        bad = [tuple(int(v) for v in p) for p in np.argwhere(pw.failed)]
        raise NumericalError(f"E-step registrations failed for pairs {bad}")
    metric = symmetrize(from_pairwise(pw))
    return _estep_from_metric(metric, labels, train_idx, val_idx, alpha, em_cfg, n * (n - 1))


def _estep_from_metric(metric, labels, train_idx, val_idx, alpha, em_cfg, registrations):
    if float(np.max(metric.values)) < 1e-12:
        raise DegenerateSampleError(
            "pairwise metric is identically zero (identical images?); "
            "the kernel would be all-ones and carry no class signal"
        )
    train_sample = LabeledSample(labels[train_idx])
    val_labels = labels[val_idx]
    best = None
    for gamma in em_cfg.gamma_grid:
        kernel = to_kernel(metric, gamma)
        ktr = kernel.values[np.ix_(train_idx, train_idx)]
        epsilon = default_epsilon(within_class(ktr, train_sample, 0.0), em_cfg.ridge_scale)
        model, val_scores, val_hinge = _fit_at(
            metric.values, gamma, epsilon, train_idx, val_idx, train_sample, val_labels
        )
        if best is None or val_hinge < best[0]:
            best = (val_hinge, gamma, epsilon, model, val_scores)
    val_hinge, gamma, epsilon, model, val_scores = best
    train_scores = decision(model, model.train_kernel)
    train_hinge = hinge(train_scores / margin_scale(model), train_sample.labels)
    train_auc = roc_auc(train_scores, train_sample.labels).auc
    val_auc = roc_auc(val_scores, val_labels).auc
    return EStepResult(
        alpha=alpha,
        metric=metric,
        gamma=gamma,
        epsilon=epsilon,
        model=model,
        train_hinge=train_hinge,
        val_hinge=val_hinge,
        train_auc=train_auc,
        val_auc=val_auc,
        val_scores=val_scores,
        registrations=registrations,
    )


def m_step(estep, labels, train_idx, val_idx, em_cfg):
    """Projected gradient descent on alpha against the frozen-velocity loss.

    Gamma and epsilon stay fixed at the E-step's choices; every trial alpha
    re-evaluates the metric exactly through the stored moments. Returns the
    new alpha; an all-satisfied margin batch (zero gradient) is a fixed point
    and returns alpha unchanged.

    One M-step may move alpha by at most a factor of mstep_trust in either
    direction: frozen velocities overstate far-away energies (a fresh
    registration would re-optimize them), so the frozen loss is only locally
    trustworthy and the next E-step re-anchors the walk.
    """
    labels = np.asarray(labels)
    metric = estep.metric
    gamma = estep.gamma
    epsilon = estep.epsilon
    train_sample = LabeledSample(labels[train_idx])
    val_labels = labels[val_idx]
    lo, hi = em_cfg.alpha_bounds
    lo = max(lo, estep.alpha / em_cfg.mstep_trust)
    hi = min(hi, estep.alpha * em_cfg.mstep_trust)

    def loss_at(a):
        _, _, val_hinge = _fit_at(
            metric.value_at(a), gamma, epsilon, train_idx, val_idx, train_sample, val_labels
        )
        return val_hinge

    def grad_at(a):
        values = metric.value_at(a)
        kernel = to_kernel(values, gamma)
        k = kernel.values
        dmetric = metric.dalpha_at(a)
        dk = -gamma * k * dmetric
        np.fill_diagonal(dk, 0.0)
        model, _, _ = _fit_at(values, gamma, epsilon, train_idx, val_idx, train_sample, val_labels)
        cols = k[np.ix_(train_idx, val_idx)]
        dcols = dk[np.ix_(train_idx, val_idx)]
        dktr = dk[np.ix_(train_idx, train_idx)]
        return hinge_grad_alpha(model, val_labels, cols, dcols, dktr, calibrated=True)

    alpha = estep.alpha
    loss = loss_at(alpha)
    step = em_cfg.mstep_step0
    for _ in range(em_cfg.mstep_max_iters):
        grad = grad_at(alpha)
        if grad == 0.0:
            break
        step = min(2.0 * step, em_cfg.mstep_step0)
        moved = False
        while step > 1e-12 * em_cfg.mstep_step0:
            trial = min(max(alpha - step * grad, lo), hi)
            if trial == alpha:
                break
            trial_loss = loss_at(trial)
            if trial_loss <= loss:
                improvement = loss - trial_loss
                alpha = trial
                loss = trial_loss
                moved = True
                if improvement < em_cfg.loss_tol * max(loss, 1e-12):
                    return alpha
                break
            step *= 0.5
        if not moved:
            break
    return alpha


def train(images, labels, em_cfg, reg_cfg, jobs=1, checkpoint_dir=None, log=None):
    """Alternate E- and M-steps, tracking per-iteration quality.

    Returns the iteration with the best validation (or training, per
    em_cfg.select) ROC AUC. With a checkpoint directory, completed iterations
    are reloaded instead of recomputed, and resumed runs produce outputs
    identical to uninterrupted ones.
    """
    labels = np.asarray(labels)
    if len(images) != labels.size:
        raise InputError("images and labels disagree in length")
    LabeledSample(labels)  # validates binary labels with both classes
    train_idx, val_idx = split_folds(labels, em_cfg.seed)
    for idx, name in ((train_idx, "train"), (val_idx, "validation")):
        fold = labels[idx]
        if not (np.any(fold == 1) and np.any(fold == -1)):
            raise InputError(f"{name} fold lost a class; adjust the split seed")
    trace = EmTrace()
    esteps = []
    alpha = em_cfg.alpha0
    for iteration in range(em_cfg.em_max_iters):
        loaded = _load_em_checkpoint(checkpoint_dir, iteration, labels, train_idx, val_idx, em_cfg)
        if loaded is not None:
            estep, next_alpha = loaded
        else:
            estep = e_step(images, labels, train_idx, val_idx, alpha, em_cfg, reg_cfg, jobs=jobs)
            next_alpha = m_step(estep, labels, train_idx, val_idx, em_cfg)
            _save_em_checkpoint(checkpoint_dir, iteration, estep, next_alpha)
        esteps.append(estep)
        trace.append(
            iteration=iteration,
            alpha=estep.alpha,
            gamma=estep.gamma,
            epsilon=estep.epsilon,
            train_hinge=estep.train_hinge,
            val_hinge=estep.val_hinge,
            train_auc=estep.train_auc,
            val_auc=estep.val_auc,
            registrations=estep.registrations,
        )
        if log is not None:
            log(
                f"em iter {iteration}: alpha={estep.alpha:.6g} gamma={estep.gamma:.6g} "
                f"val_hinge={estep.val_hinge:.4f} val_auc={estep.val_auc:.4f}"
            )
        rel_change = abs(next_alpha - estep.alpha) / max(abs(estep.alpha), 1e-300)
        alpha = next_alpha
        if rel_change < em_cfg.alpha_change_tol:
            break
    key = "val_auc" if em_cfg.select == "val" else "train_auc"
    best_iteration = int(np.argmax(trace.column(key)))
    best = esteps[best_iteration]
    return TrainResult(
        alpha=best.alpha,
        gamma=best.gamma,
        epsilon=best.epsilon,
        model=best.model,
        metric=best.metric,
        trace=trace,
        best_iteration=best_iteration,
        train_idx=train_idx,
        val_idx=val_idx,
    )


# ---------------------------------------------------------------------------
# EM checkpointing
# ---------------------------------------------------------------------------


def _em_paths(checkpoint_dir, iteration):
    base = Path(checkpoint_dir)
    return (
        base / f"em_iter_{iteration:03d}.json",
        base / f"em_iter_{iteration:03d}_metric.csv",
        base / f"em_iter_{iteration:03d}_moments.npz",
    )


def _save_em_checkpoint(checkpoint_dir, iteration, estep, next_alpha):
    if checkpoint_dir is None:
        return
    meta_path, metric_path, moments_path = _em_paths(checkpoint_dir, iteration)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(metric_path, estep.metric.values)
    np.savez(
        moments_path,
        quad=estep.metric.quad,
        cross=estep.metric.cross,
        const=estep.metric.const,
    )
    meta = {
        "schema_version": 1,
        "iteration": iteration,
        "alpha": estep.alpha,
        "gamma": estep.gamma,
        "epsilon": estep.epsilon,
        "next_alpha": next_alpha,
        "registrations": estep.registrations,
        "metric_csv": metric_path.name,
        "moments_npz": moments_path.name,
    }
    tmp = meta_path.with_suffix(".tmp")
    tmp.write_text(json.dumps(meta, indent=2) + "\n")
    tmp.replace(meta_path)


def _load_em_checkpoint(checkpoint_dir, iteration, labels, train_idx, val_idx, em_cfg):
    if checkpoint_dir is None:
        return None
    meta_path, metric_path, moments_path = _em_paths(checkpoint_dir, iteration)
    if not (meta_path.exists() and metric_path.exists() and moments_path.exists()):
        return None
    meta = json.loads(meta_path.read_text())
    values = read_matrix_csv(metric_path)
    with np.load(moments_path) as moments:
        metric = MetricMatrix(
            n=values.shape[0],
            values=values,
            quad=moments["quad"],
            cross=moments["cross"],
            const=moments["const"],
            failed=np.zeros(values.shape, dtype=bool),
        )
    estep = _estep_from_metric(
        metric, labels, train_idx, val_idx, meta["alpha"], em_cfg, meta["registrations"]
    )
    # the stored gamma/epsilon must match what the reload re-derives
    if abs(estep.gamma - meta["gamma"]) > 0 or abs(estep.epsilon - meta["epsilon"]) > 1e-15:
        raise NumericalError(
            f"checkpoint {meta_path} disagrees with recomputation; delete it to restart"
        )
    return estep, meta["next_alpha"]
