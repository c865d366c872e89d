"""Pairwise diffeomorphic registration by gradient descent on a time-velocity.

The optimizer follows the classic relaxed formulation: the unknown is the full
time-indexed velocity, the deformation is its Euler flow, and each descent
step moves along the smoothed (operator-inverse) gradient of

    E(v) = mean_k <L v_k, v_k> * cell_area  +  ||I0 o phi - I1||^2 / sigma2.

Internally the flow bookkeeping uses two map families per iteration, both
stored as periodic displacements:

* end maps   F_k: positions at time 1 of particles at time k, built backwards;
* start maps G_k: positions at time 0 of particles at time k, built forwards.

The matching force at time k is jac(G_k) * residual(G_k) * grad(I0 o F_k),
the pullback of the final-time residual to time k. A backtracking line search
(halving on any energy increase) keeps the accepted energy sequence
non-increasing; the operator part of a trial energy is an exact quadratic
polynomial in the step size, so only the matching term needs a fresh flow
sweep per trial.
"""

import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft as sfft

from .diffop import metric_energy, rfft_parseval_weights, spectral_moments
from .errors import InputError, NumericalError
from .grid import (
    DeformationMap,
    ScalarImage,
    TimeVelocity,
    _central_grad,
    _jacdet_disp,
    _sample1,
    _sample2,
    jacobian_determinant,
    warp,
)

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "PairwiseMetrics",
    "register",
    "register_pairwise",
    "normalize_image",
]

_LINE_SEARCH_MIN_FACTOR = 1e-12


@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for a single pairwise registration."""

    sigma2: float = 0.01
    time_steps: int = 10
    max_iters: int = 200
    step_size: float = 0.1
    energy_tol: float = 1e-5
    energy_window: int = 5
    grad_tol: float = 1e-9

    def __post_init__(self):
        if not (self.sigma2 > 0):
            raise InputError("sigma2 must be positive")
        if self.time_steps < 1:
            raise InputError("need at least one time step")
        if self.max_iters < 1:
            raise InputError("max_iters must be at least 1")
        if not (self.step_size > 0):
            raise InputError("step_size must be positive")
        if not (0 < self.energy_tol < 1):
            raise InputError("energy_tol must lie in (0, 1)")
        if self.energy_window < 2:
            raise InputError("energy_window must be at least 2")
        if not (self.grad_tol > 0):
            raise InputError("grad_tol must be positive")


@dataclass(frozen=True)
class RegistrationResult:
    velocity: TimeVelocity
    forward_map: DeformationMap
    metric_value: float
    match_residual: float
    total_energy: float
    iterations: int
    converged: bool
    min_jacobian: float
    energy_trace: tuple = field(default_factory=tuple)


def normalize_image(image):
    """Min-max rescale to [0, 1]; a constant image maps to all zeros."""
    lo = float(image.data.min())
    hi = float(image.data.max())
    if hi - lo <= 0:
        return ScalarImage(image.grid, np.zeros(image.grid.shape))
    return ScalarImage(image.grid, (image.data - lo) / (hi - lo))


class _Engine:
    """Precomputed state for registering pairs on one grid with one operator."""

    def __init__(self, op, cfg):
        self.op = op
        self.grid = op.grid
        self.cfg = cfg
        self.T = cfg.time_steps
        self.dt = 1.0 / self.T
        self.X, self.Y = self.grid.coords()
        ncol = self.grid.nx // 2 + 1
        self.sym = np.ascontiguousarray(op.symbol[:, :ncol])
        self.inv_sym = np.ascontiguousarray(op.inv_symbol[:, :ncol])
        self.wsym = rfft_parseval_weights(self.grid)[None, :] * self.sym
        # spectral sums against wsym equal spatial sums of v * Lv
        self.spec_scale = self.grid.cell_area / (self.grid.nx * self.grid.ny) / self.T
        self.area = self.grid.cell_area

    # -- flow sweeps ------------------------------------------------------

    def end_maps(self, v):
        """Displacements of F_k (positions at time 1 of particles at time k)."""
        T, g = self.T, self.grid
        uf = np.zeros((T + 1, 2, g.ny, g.nx))
        sx = np.empty(g.shape)
        sy = np.empty(g.shape)
        for k in range(T - 1, -1, -1):
            dvx = self.dt * v[k, 0]
            dvy = self.dt * v[k, 1]
            _sample2(uf[k + 1, 0], uf[k + 1, 1], self.X + dvx, self.Y + dvy, g.hx, g.hy, sx, sy)
            np.add(sx, dvx, out=uf[k, 0])
            np.add(sy, dvy, out=uf[k, 1])
        return uf

    def warp_through(self, data, ux, uy, out=None):
        if out is None:
            out = np.empty(self.grid.shape)
        _sample1(data, self.X + ux, self.Y + uy, self.grid.hx, self.grid.hy, out)
        return out

    def match_energy(self, i0, i1, uf0):
        w = self.warp_through(i0, uf0[0], uf0[1])
        return float(np.sum((w - i1) ** 2)) * self.area

    # -- gradient ---------------------------------------------------------

    def gradient(self, v, v_hat, uf, i0, i1):
        """Descent direction with line-search polynomial pieces.

        Returns (d, d_hat, c1, c2, grad_norm) where the operator energy of
        v - s*d equals c0 - 2*s*c1 + s^2*c2 with c0 the current value.
        """
        T, g, cfg = self.T, self.grid, self.cfg
        w0 = self.warp_through(i0, uf[0, 0], uf[0, 1])
        residual = w0 - i1
        d = np.empty_like(v)
        d_hat = np.empty_like(v_hat)
        ugx = np.zeros(g.shape)
        ugy = np.zeros(g.shape)
        sx = np.empty(g.shape)
        sy = np.empty(g.shape)
        jac = np.empty(g.shape)
        wk = np.empty(g.shape)
        gx = np.empty(g.shape)
        gy = np.empty(g.shape)
        rg = np.empty(g.shape)
        c1 = 0.0
        c2 = 0.0
        two_over_s2 = 2.0 / cfg.sigma2
        for k in range(T):
            if k == 0:
                wk[...] = w0
            else:
                self.warp_through(i0, uf[k, 0], uf[k, 1], out=wk)
            _central_grad(wk, g.hx, g.hy, gx, gy)
            _jacdet_disp(ugx, ugy, g.hx, g.hy, jac)
            self.warp_through(residual, ugx, ugy, out=rg)
            scale = jac * rg
            fx_hat = sfft.rfft2(scale * gx)
            fy_hat = sfft.rfft2(scale * gy)
            d_hat[k, 0] = 2.0 * v_hat[k, 0] + two_over_s2 * self.inv_sym * fx_hat
            d_hat[k, 1] = 2.0 * v_hat[k, 1] + two_over_s2 * self.inv_sym * fy_hat
            d[k, 0] = sfft.irfft2(d_hat[k, 0], s=g.shape)
            d[k, 1] = sfft.irfft2(d_hat[k, 1], s=g.shape)
            c1 += np.sum(self.wsym * (v_hat[k, 0] * d_hat[k, 0].conj()).real)
            c1 += np.sum(self.wsym * (v_hat[k, 1] * d_hat[k, 1].conj()).real)
            c2 += np.sum(self.wsym * (np.abs(d_hat[k, 0]) ** 2 + np.abs(d_hat[k, 1]) ** 2))
            if k < T - 1:
                # advance G to time k+1: G_{k+1}(x) = G_k(x - dt v_k(x))
                dvx = -self.dt * v[k, 0]
                dvy = -self.dt * v[k, 1]
                _sample2(ugx, ugy, self.X + dvx, self.Y + dvy, g.hx, g.hy, sx, sy)
                np.add(sx, dvx, out=ugx)
                np.add(sy, dvy, out=ugy)
        c1 *= self.spec_scale
        c2 *= self.spec_scale
        grad_norm = math.sqrt(np.sum(d * d) * self.area / T)
        return d, d_hat, c1, c2, grad_norm

    # -- main loop --------------------------------------------------------

    def run(self, i0_img, i1_img):
        cfg, g, T = self.cfg, self.grid, self.T
        i0 = normalize_image(i0_img).data
        i1 = normalize_image(i1_img).data
        v = np.zeros((T, 2, g.ny, g.nx))
        v_hat = np.zeros((T, 2, g.ny, g.nx // 2 + 1), dtype=np.complex128)
        uf = np.zeros((T + 1, 2, g.ny, g.nx))
        metric_cur = 0.0
        match_cur = self.match_energy(i0, i1, uf[0])
        energy_cur = metric_cur + match_cur / cfg.sigma2
        if not np.isfinite(energy_cur):
            raise NumericalError("initial registration energy is not finite", iteration=0)
        trace = [energy_cur]
        step = cfg.step_size
        iterations = 0
        converged = False
        for it in range(1, cfg.max_iters + 1):
            iterations = it
            d, d_hat, c1, c2, grad_norm = self.gradient(v, v_hat, uf, i0, i1)
            if not np.isfinite(grad_norm):
                raise NumericalError("registration gradient is not finite", iteration=it)
            if grad_norm < cfg.grad_tol:
                converged = True
                break
            step = min(2.0 * step, cfg.step_size)
            accepted = False
            energy_try = np.inf
            while step >= _LINE_SEARCH_MIN_FACTOR * cfg.step_size:
                v_try = v - step * d
                uf_try = self.end_maps(v_try)
                match_try = self.match_energy(i0, i1, uf_try[0])
                metric_try = metric_cur - 2.0 * step * c1 + step * step * c2
                energy_try = metric_try + match_try / cfg.sigma2
                if np.isfinite(energy_try) and energy_try <= energy_cur:
                    v = v_try
                    v_hat = v_hat - step * d_hat
                    uf = uf_try
                    metric_cur = metric_try
                    match_cur = match_try
                    energy_cur = energy_try
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                if not np.isfinite(energy_try):
                    raise NumericalError("registration energy diverged", iteration=it)
                converged = True  # no descent at any step size: plateau
                break
            trace.append(energy_cur)
            if len(trace) > cfg.energy_window:
                prev = trace[-1 - cfg.energy_window]
                drop = (prev - trace[-1]) / max(abs(prev), 1e-300)
                if drop < cfg.energy_tol:
                    converged = True
                    break
        return self._finalize(i0, i1, v, uf, iterations, converged, trace)

    def _finalize(self, i0, i1, v, uf, iterations, converged, trace):
        g, cfg = self.grid, self.cfg
        velocity = TimeVelocity.from_array(g, v)
        # the endpoint map the optimizer actually minimized: F_0 = id + uf[0]
        dmap = DeformationMap(g, self.X + uf[0, 0], self.Y + uf[0, 1])
        warped = warp(ScalarImage(g, i0), dmap)
        match_residual = float(np.sum((warped.data - i1) ** 2)) * self.area
        metric_value = metric_energy(self.op, velocity)
        min_jac = float(jacobian_determinant(dmap).data.min())
        return RegistrationResult(
            velocity=velocity,
            forward_map=dmap,
            metric_value=metric_value,
            match_residual=match_residual,
            total_energy=metric_value + match_residual / cfg.sigma2,
            iterations=iterations,
            converged=converged,
            min_jacobian=min_jac,
            energy_trace=tuple(trace),
        )


def register(i0, i1, op, cfg):
    """Register one image pair; images are min-max normalized internally."""
    if i0.grid != i1.grid:
        raise InputError("images live on different grids")
    if i0.grid != op.grid:
        raise InputError("operator grid does not match image grid")
    return _Engine(op, cfg).run(i0, i1)


# ---------------------------------------------------------------------------
# pairwise fan-out
# ---------------------------------------------------------------------------


@dataclass
class PairwiseMetrics:
    """Ordered-pair registration energies plus their spectral moments.

    The moments express each pair's energy as an exact polynomial in the
    operator weights at the frozen optimal velocity:

        value[i, j] == alpha^2 * quad[i, j] + 2*alpha*beta * cross[i, j]
                       + beta^2 * const[i, j]

    so energies and their alpha-derivatives can be re-evaluated at any trial
    alpha without touching the velocities again. ``failed`` marks pairs whose
    registration raised a numerical error.
    """

    n: int
    values: np.ndarray
    quad: np.ndarray
    cross: np.ndarray
    const: np.ndarray
    failed: np.ndarray

    @property
    def num_failed(self):
        return int(self.failed.sum())


_PAIR_CTX = {}


def _pair_worker(task):
    i, j = task
    images = _PAIR_CTX["images"]
    op = _PAIR_CTX["op"]
    cfg = _PAIR_CTX["cfg"]
    ckpt = _PAIR_CTX["checkpoint_dir"]
    try:
        if ckpt is not None:
            cached = _load_pair_checkpoint(ckpt, i, j, op.grid, cfg.time_steps)
            if cached is not None:
                velocity = cached
            else:
                velocity = register(images[i], images[j], op, cfg).velocity
                _save_pair_checkpoint(ckpt, i, j, op, velocity)
        else:
            velocity = register(images[i], images[j], op, cfg).velocity
        quad, cross, const = spectral_moments(op.grid, velocity)
        value = (
            op.alpha**2 * quad + 2.0 * op.alpha * op.beta * cross + op.beta**2 * const
        )
        return i, j, value, quad, cross, const, False
    except NumericalError:
        return i, j, np.nan, np.nan, np.nan, np.nan, True


def _pair_checkpoint_path(ckpt_dir, i, j):
    return Path(ckpt_dir) / f"pair_{i:04d}_{j:04d}.vel"


def _save_pair_checkpoint(ckpt_dir, i, j, op, velocity):
    import json

    from .formats import write_velocity

    path = _pair_checkpoint_path(ckpt_dir, i, j)
    tmp = path.with_suffix(".tmp")
    write_velocity(tmp, velocity)
    tmp.replace(path)
    meta = {"metric_value": metric_energy(op, velocity), "alpha": op.alpha, "beta": op.beta}
    path.with_suffix(".json").write_text(json.dumps(meta) + "\n")


def _load_pair_checkpoint(ckpt_dir, i, j, grid, time_steps):
    from .formats import read_velocity

    path = _pair_checkpoint_path(ckpt_dir, i, j)
    if not path.exists():
        return None
    velocity = read_velocity(path)
    if velocity.grid != grid or velocity.num_steps != time_steps:
        return None
    return velocity


def register_pairwise(sample, op, cfg, jobs=1, checkpoint_dir=None):
    """Register every ordered pair (i, j), i != j, of a sample of images.

    Work is distributed over ``jobs`` forked workers; each pair is an
    independent computation keyed by its index, so results do not depend on
    scheduling. Failed pairs are masked rather than aborting the whole matrix.
    """
    n = len(sample)
    if n < 2:
        raise InputError("pairwise registration needs at least 2 images")
    grid = sample[0].grid
    for img in sample:
        if img.grid != grid:
            raise InputError("all sample images must share one grid")
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(i, j) for i in range(n) for j in range(n) if i != j]
    ctx = {"images": list(sample), "op": op, "cfg": cfg, "checkpoint_dir": checkpoint_dir}
    values = np.zeros((n, n))
    quad = np.zeros((n, n))
    cross = np.zeros((n, n))
    const = np.zeros((n, n))
    failed = np.zeros((n, n), dtype=bool)
    global _PAIR_CTX
    if jobs <= 1:
        _PAIR_CTX = ctx
        results = map(_pair_worker, tasks)
        _collect(results, values, quad, cross, const, failed)
        _PAIR_CTX = {}
    else:
        _PAIR_CTX = ctx  # inherited by forked children
        try:
            mp_ctx = multiprocessing.get_context("fork")
            chunk = max(1, len(tasks) // (jobs * 8))
            with ProcessPoolExecutor(max_workers=jobs, mp_context=mp_ctx) as pool:
                results = pool.map(_pair_worker, tasks, chunksize=chunk)
                _collect(results, values, quad, cross, const, failed)
        finally:
            _PAIR_CTX = {}
    return PairwiseMetrics(n=n, values=values, quad=quad, cross=cross, const=const, failed=failed)


def _collect(results, values, quad, cross, const, failed):
    for i, j, val, q, c, c0, bad in results:
        values[i, j] = val
        quad[i, j] = q
        cross[i, j] = c
        const[i, j] = c0
        failed[i, j] = bad
