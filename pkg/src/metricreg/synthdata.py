"""Synthetic benchmark data: rectangles vs ellipses under random locally
affine distortions.

Each item draws a base shape (rectangle labeled +1, ellipse labeled -1) with
random center, half-extents and orientation, rasterizes it with 4x4
supersampling, and warps it through a random diffeomorphic displacement built
as a Gaussian-blended mixture of per-patch affine perturbations plus a smooth
random obscuring field. Items whose deformation folds (nonpositive Jacobian)
or whose support drifts into the boundary band are regenerated from a fresh
per-attempt stream, so parallel generation and retries never perturb other
items.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import InputError, NumericalError
from .formats import read_labels_csv, read_pgm, write_labels_csv, write_pgm
from .grid import DeformationMap, GridSpec, ScalarImage, jacobian_determinant, warp

__all__ = ["ShapeGenConfig", "generate", "write_dataset", "read_dataset"]

_SUPERSAMPLE = 4
_MARGIN_BAND = 0.10  # fraction of each dimension that must stay empty
_SUPPORT_BUDGET = 0.35  # center offset + shape reach, fraction of min dimension


@dataclass(frozen=True)
class ShapeGenConfig:
    grid: GridSpec = GridSpec(64, 64)
    n_per_class: int = 100
    size_min: float = 0.16
    size_max: float = 0.22
    aspect_min: float = 0.55
    aspect_max: float = 0.80
    max_tilt_deg: float = 20.0
    center_jitter: float = 3.0
    num_patches: int = 4
    patch_scale: float = 1.0
    smoothing: float = 2.5
    noise: float = 1.5
    seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        if self.n_per_class < 1:
            raise InputError("n_per_class must be positive")
        if not (0 < self.size_min <= self.size_max):
            raise InputError("size range must satisfy 0 < size_min <= size_max")
        if not (0 < self.aspect_min <= self.aspect_max <= 1.0):
            raise InputError("aspect range must satisfy 0 < aspect_min <= aspect_max <= 1")
        if self.size_max * np.sqrt(2.0) > _SUPPORT_BUDGET:
            raise InputError(
                f"size_max {self.size_max} too large for the boundary margin; "
                f"keep size_max <= {_SUPPORT_BUDGET / np.sqrt(2.0):.3f}"
            )
        if self.num_patches < 1:
            raise InputError("need at least one deformation patch")
        if self.noise < 0 or self.patch_scale < 0 or self.center_jitter < 0:
            raise InputError("noise, patch_scale and center_jitter must be nonnegative")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = {"nx": self.grid.nx, "ny": self.grid.ny, "hx": self.grid.hx, "hy": self.grid.hy}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        g = d.pop("grid")
        return cls(grid=GridSpec(**g), **d)


def _rasterize(grid, is_rectangle, cx, cy, sa, sb, theta):
    """Anti-aliased indicator of a rotated rectangle or ellipse, in pixels."""
    ny, nx = grid.shape
    acc = np.zeros((ny, nx))
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    ys, xs = np.mgrid[0:ny, 0:nx].astype(float)
    for oy in range(_SUPERSAMPLE):
        for ox in range(_SUPERSAMPLE):
            px = xs + (ox + 0.5) / _SUPERSAMPLE - 0.5 - cx
            py = ys + (oy + 0.5) / _SUPERSAMPLE - 0.5 - cy
            u = cos_t * px + sin_t * py
            v = -sin_t * px + cos_t * py
            if is_rectangle:
                inside = (np.abs(u) <= sa) & (np.abs(v) <= sb)
            else:
                inside = (u / sa) ** 2 + (v / sb) ** 2 <= 1.0
            acc += inside
    return acc / _SUPERSAMPLE**2


def _random_deformation(cfg, rng):
    """Displacement field from blended per-patch affines plus smooth noise.

    The blend is a normalized partition of unity over Gaussian patch weights
    plus a constant-weight identity background, so the affine displacements
    (which grow linearly away from their patch centers) decay to zero in the
    far field instead of folding the map.
    """
    grid = cfg.grid
    ny, nx = grid.shape
    m = min(nx, ny)
    ys, xs = np.mgrid[0:ny, 0:nx].astype(float)
    scale = cfg.patch_scale
    ux = np.zeros((ny, nx))
    uy = np.zeros((ny, nx))
    weight_sum = np.full((ny, nx), 0.8)  # identity background member
    rho = 0.22 * m
    for _ in range(cfg.num_patches):
        c = rng.uniform(0.25 * m, 0.75 * m, size=2)
        theta = rng.uniform(-np.deg2rad(20.0), np.deg2rad(20.0)) * scale
        log_s = rng.uniform(np.log(0.8), np.log(1.25), size=2) * scale
        shear = rng.uniform(-0.15, 0.15) * scale
        trans = rng.uniform(-0.05 * m, 0.05 * m, size=2) * scale
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
        mat = rot @ np.array([[np.exp(log_s[0]), shear], [0.0, np.exp(log_s[1])]])
        dx = xs - c[0]
        dy = ys - c[1]
        disp_x = mat[0, 0] * dx + mat[0, 1] * dy + trans[0] - dx
        disp_y = mat[1, 0] * dx + mat[1, 1] * dy + trans[1] - dy
        w = np.exp(-((dx**2 + dy**2) / (2.0 * rho * rho)))
        ux += w * disp_x
        uy += w * disp_y
        weight_sum += w
    ux /= weight_sum
    uy /= weight_sum
    if cfg.smoothing > 0:
        ux = ndimage.gaussian_filter(ux, cfg.smoothing, mode="wrap")
        uy = ndimage.gaussian_filter(uy, cfg.smoothing, mode="wrap")
    if cfg.noise > 0:
        for comp in (0, 1):
            raw = ndimage.gaussian_filter(rng.standard_normal((ny, nx)), 6.0, mode="wrap")
            rms = np.sqrt(np.mean(raw**2))
            field = raw / max(rms, 1e-12) * cfg.noise
            if comp == 0:
                ux += field
            else:
                uy += field
    return ux, uy


def _make_item(cfg, index, label):
    grid = cfg.grid
    m = min(grid.nx, grid.ny)
    for attempt in range(cfg.max_retries):
        rng = np.random.default_rng([cfg.seed, index, attempt])
        sa = rng.uniform(cfg.size_min, cfg.size_max) * m
        ratio = rng.uniform(cfg.aspect_min, cfg.aspect_max)
        sb = sa * ratio
        tilt = np.deg2rad(cfg.max_tilt_deg)
        theta = rng.uniform(-tilt, tilt)
        reach = float(np.hypot(sa, sb))
        offset_budget = min(cfg.center_jitter, max(0.0, _SUPPORT_BUDGET * m - reach))
        cx = grid.nx / 2.0 + rng.uniform(-offset_budget, offset_budget)
        cy = grid.ny / 2.0 + rng.uniform(-offset_budget, offset_budget)
        mask = _rasterize(grid, label == 1, cx, cy, sa, sb, theta)
        ux, uy = _random_deformation(cfg, rng)
        x, y = grid.coords()
        dmap = DeformationMap(grid, x + ux, y + uy)
        if jacobian_determinant(dmap).data.min() <= 0:
            continue
        warped = warp(ScalarImage(grid, mask), dmap)
        data = warped.data
        lo, hi = data.min(), data.max()
        if hi - lo <= 0:
            continue
        data = (data - lo) / (hi - lo)
        if _touches_margin(data, grid):
            continue
        return ScalarImage(grid, data)
    raise NumericalError(
        f"item {index}: no valid deformation after {cfg.max_retries} attempts"
    )


def _touches_margin(data, grid, threshold=0.01):
    bx = int(np.floor(_MARGIN_BAND * grid.nx))
    by = int(np.floor(_MARGIN_BAND * grid.ny))
    band = np.zeros(grid.shape, dtype=bool)
    band[:by, :] = True
    band[-by:, :] = True
    band[:, :bx] = True
    band[:, -bx:] = True
    return bool(np.any(data[band] > threshold))


def generate(cfg):
    """Generate the full two-class sample: rectangles first, then ellipses.

    Returns (images, labels) with labels +1 for rectangles and -1 for
    ellipses; deterministic in cfg.seed, and each item has its own RNG stream
    keyed by (seed, item index, attempt).
    """
    images = []
    labels = []
    for index in range(2 * cfg.n_per_class):
        label = 1 if index < cfg.n_per_class else -1
        images.append(_make_item(cfg, index, label))
        labels.append(label)
    return images, np.array(labels, dtype=int)


def write_dataset(out_dir, images, labels, cfg):
    """Persist images as 16-bit PGM plus labels CSV and a config manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        name = f"img_{i:04d}.pgm"
        write_pgm(out_dir / name, img, maxval=65535)
        names.append(name)
    write_labels_csv(out_dir / "labels.csv", names, labels)
    manifest = {"schema_version": 1, "config": cfg.to_dict(), "count": len(images)}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return names


def read_dataset(data_dir):
    data_dir = Path(data_dir)
    names, labels = read_labels_csv(data_dir / "labels.csv")
    images = [read_pgm(data_dir / name) for name in names]
    grid = images[0].grid
    for img in images:
        if img.grid != grid:
            raise InputError("dataset images disagree on grid size")
    return images, labels, names
