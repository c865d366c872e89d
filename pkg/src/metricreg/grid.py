"""Grid-bound value types and the interpolation/warping primitives built on them.

Conventions used throughout the package:

* scalar and vector data live on a regular 2D grid with periodic boundaries,
  stored row-major as ``(ny, nx)`` arrays with x varying fastest;
* coordinates are physical: grid node ``(ix, iy)`` sits at ``(ix*hx, iy*hy)``;
* deformation maps store absolute mapped coordinates per node, so the identity
  map is just the node coordinate mesh.
"""

from dataclasses import dataclass

import numba
import numpy as np

from .errors import InputError

__all__ = [
    "GridSpec",
    "ScalarImage",
    "VectorField",
    "TimeVelocity",
    "DeformationMap",
    "interpolate",
    "compose_deform",
    "warp",
    "jacobian_determinant",
]


# ---------------------------------------------------------------------------
# numba kernels
#
# All sampling is bilinear with periodic wrapping, queries in physical units.
# Non-finite queries write NaN instead of indexing garbage.
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _sample1(f, qx, qy, hx, hy, out):
    ny, nx = f.shape
    n = qx.size
    qxf = qx.ravel()
    qyf = qy.ravel()
    of = out.ravel()
    for i in range(n):
        x = qxf[i] / hx
        y = qyf[i] / hy
        if not (x == x and y == y):
            of[i] = np.nan
            continue
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        ix0 = int(x0) % nx
        iy0 = int(y0) % ny
        ix1 = ix0 + 1
        if ix1 == nx:
            ix1 = 0
        iy1 = iy0 + 1
        if iy1 == ny:
            iy1 = 0
        of[i] = (f[iy0, ix0] * (1.0 - fx) + f[iy0, ix1] * fx) * (1.0 - fy) + (
            f[iy1, ix0] * (1.0 - fx) + f[iy1, ix1] * fx
        ) * fy


@numba.njit(cache=True)
def _sample2(fa, fb, qx, qy, hx, hy, oa, ob):
    """Sample two co-located fields at the same query points in one pass."""
    ny, nx = fa.shape
    n = qx.size
    qxf = qx.ravel()
    qyf = qy.ravel()
    oaf = oa.ravel()
    obf = ob.ravel()
    for i in range(n):
        x = qxf[i] / hx
        y = qyf[i] / hy
        if not (x == x and y == y):
            oaf[i] = np.nan
            obf[i] = np.nan
            continue
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        ix0 = int(x0) % nx
        iy0 = int(y0) % ny
        ix1 = ix0 + 1
        if ix1 == nx:
            ix1 = 0
        iy1 = iy0 + 1
        if iy1 == ny:
            iy1 = 0
        w00 = (1.0 - fx) * (1.0 - fy)
        w01 = fx * (1.0 - fy)
        w10 = (1.0 - fx) * fy
        w11 = fx * fy
        oaf[i] = fa[iy0, ix0] * w00 + fa[iy0, ix1] * w01 + fa[iy1, ix0] * w10 + fa[iy1, ix1] * w11
        obf[i] = fb[iy0, ix0] * w00 + fb[iy0, ix1] * w01 + fb[iy1, ix0] * w10 + fb[iy1, ix1] * w11


@numba.njit(cache=True)
def _jacdet_disp(ux, uy, hx, hy, out):
    """Jacobian determinant of x -> x + u(x) from central differences of u.

    The displacement u is periodic, so wrapping the stencil is exact for
    periodic maps and only the identity part contributes across the seam.
    """
    ny, nx = ux.shape
    for iy in range(ny):
        iyp = iy + 1 if iy + 1 < ny else 0
        iym = iy - 1 if iy - 1 >= 0 else ny - 1
        for ix in range(nx):
            ixp = ix + 1 if ix + 1 < nx else 0
            ixm = ix - 1 if ix - 1 >= 0 else nx - 1
            dux_dx = (ux[iy, ixp] - ux[iy, ixm]) / (2.0 * hx)
            dux_dy = (ux[iyp, ix] - ux[iym, ix]) / (2.0 * hy)
            duy_dx = (uy[iy, ixp] - uy[iy, ixm]) / (2.0 * hx)
            duy_dy = (uy[iyp, ix] - uy[iym, ix]) / (2.0 * hy)
            out[iy, ix] = (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx


@numba.njit(cache=True)
def _central_grad(f, hx, hy, gx, gy):
    ny, nx = f.shape
    for iy in range(ny):
        iyp = iy + 1 if iy + 1 < ny else 0
        iym = iy - 1 if iy - 1 >= 0 else ny - 1
        for ix in range(nx):
            ixp = ix + 1 if ix + 1 < nx else 0
            ixm = ix - 1 if ix - 1 >= 0 else nx - 1
            gx[iy, ix] = (f[iy, ixp] - f[iy, ixm]) / (2.0 * hx)
            gy[iy, ix] = (f[iyp, ix] - f[iym, ix]) / (2.0 * hy)


def _as_c_float64(a):
    # always copy so freezing the stored array never aliases caller data
    return np.array(a, dtype=np.float64, order="C")


# ---------------------------------------------------------------------------
# value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Regular periodic 2D grid: nx columns by ny rows with spacing (hx, hy)."""

    nx: int
    ny: int
    hx: float = 1.0
    hy: float = 1.0

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise InputError(f"grid must be at least 4x4, got {self.nx}x{self.ny}")
        if not (self.hx > 0 and self.hy > 0):
            raise InputError("grid spacings must be strictly positive")

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def cell_area(self):
        return self.hx * self.hy

    def coords(self):
        """Physical node coordinates as (X, Y) arrays of shape (ny, nx)."""
        x = np.arange(self.nx, dtype=np.float64) * self.hx
        y = np.arange(self.ny, dtype=np.float64) * self.hy
        return np.meshgrid(x, y)

    def identity_map(self):
        px, py = self.coords()
        return DeformationMap(self, px, py)


def _check_grid_array(grid, a, name):
    a = _as_c_float64(a)
    if a.shape != grid.shape:
        raise InputError(f"{name} has shape {a.shape}, expected {grid.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} contains non-finite values")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ScalarImage:
    """Intensity values on a grid."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _check_grid_array(self.grid, self.data, "image data"))


@dataclass(frozen=True)
class VectorField:
    """Per-node 2-vectors (displacement or velocity), components stored separately."""

    grid: GridSpec
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vx", _check_grid_array(self.grid, self.vx, "vx"))
        object.__setattr__(self, "vy", _check_grid_array(self.grid, self.vy, "vy"))

    @classmethod
    def zeros(cls, grid):
        z = np.zeros(grid.shape)
        return cls(grid, z, z.copy())


@dataclass(frozen=True)
class TimeVelocity:
    """Velocity field snapshots at uniform times k/T, k = 0..T-1."""

    steps: tuple

    def __post_init__(self):
        steps = tuple(self.steps)
        if len(steps) < 1:
            raise InputError("need at least one time step")
        grid = steps[0].grid
        for s in steps:
            if s.grid != grid:
                raise InputError("all velocity snapshots must share one grid")
        object.__setattr__(self, "steps", steps)

    @property
    def grid(self):
        return self.steps[0].grid

    @property
    def num_steps(self):
        return len(self.steps)

    @classmethod
    def zeros(cls, grid, num_steps):
        return cls(tuple(VectorField.zeros(grid) for _ in range(num_steps)))

    def as_array(self):
        """Stack into a (T, 2, ny, nx) array, component order (vx, vy)."""
        return np.stack([np.stack([s.vx, s.vy]) for s in self.steps])

    @classmethod
    def from_array(cls, grid, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[1] != 2 or arr.shape[2:] != grid.shape:
            raise InputError(f"velocity array has shape {arr.shape}, expected (T, 2, {grid.ny}, {grid.nx})")
        return cls(tuple(VectorField(grid, a[0], a[1]) for a in arr))


@dataclass(frozen=True)
class DeformationMap:
    """Absolute mapped coordinates per node; the identity map is the node mesh."""

    grid: GridSpec
    px: np.ndarray
    py: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "px", _check_grid_array(self.grid, self.px, "px"))
        object.__setattr__(self, "py", _check_grid_array(self.grid, self.py, "py"))

    def displacement(self):
        x, y = self.grid.coords()
        return self.px - x, self.py - y


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def interpolate(obj, qx, qy):
    """Bilinear periodic sampling of an image or field at physical points.

    Returns an array shaped like the query for a ScalarImage, or an
    (out_x, out_y) pair for a VectorField. Exact at grid nodes.
    """
    qx = np.asarray(qx, dtype=np.float64)
    qy = np.asarray(qy, dtype=np.float64)
    if qx.shape != qy.shape:
        raise InputError("query coordinate arrays must have matching shapes")
    if not (np.all(np.isfinite(qx)) and np.all(np.isfinite(qy))):
        raise InputError("query points must be finite")
    qx = np.ascontiguousarray(qx)
    qy = np.ascontiguousarray(qy)
    g = obj.grid
    if isinstance(obj, ScalarImage):
        out = np.empty(qx.shape)
        _sample1(obj.data, qx, qy, g.hx, g.hy, out)
        return out
    if isinstance(obj, VectorField):
        ox = np.empty(qx.shape)
        oy = np.empty(qx.shape)
        _sample2(obj.vx, obj.vy, qx, qy, g.hx, g.hy, ox, oy)
        return ox, oy
    raise InputError(f"cannot interpolate object of type {type(obj).__name__}")


def compose_deform(dmap, v, dt):
    """One explicit Euler step of the flow: phi <- phi + dt * v(phi)."""
    if dt <= 0:
        raise InputError("dt must be positive")
    if dmap.grid != v.grid:
        raise InputError("map and velocity live on different grids")
    sx = np.empty(dmap.grid.shape)
    sy = np.empty(dmap.grid.shape)
    _sample2(v.vx, v.vy, dmap.px, dmap.py, v.grid.hx, v.grid.hy, sx, sy)
    return DeformationMap(dmap.grid, dmap.px + dt * sx, dmap.py + dt * sy)


def warp(image, dmap):
    """Resample an image through a deformation map: out(x) = image(map(x))."""
    if image.grid != dmap.grid:
        raise InputError("image and map live on different grids")
    out = np.empty(image.grid.shape)
    _sample1(image.data, dmap.px, dmap.py, image.grid.hx, image.grid.hy, out)
    return ScalarImage(image.grid, out)


def jacobian_determinant(dmap):
    """Pointwise central-difference Jacobian determinant of a deformation map."""
    ux, uy = dmap.displacement()
    out = np.empty(dmap.grid.shape)
    _jacdet_disp(np.ascontiguousarray(ux), np.ascontiguousarray(uy), dmap.grid.hx, dmap.grid.hy, out)
    return ScalarImage(dmap.grid, out)


def image_gradient(image):
    """Central-difference spatial gradient of an image, periodic stencil."""
    gx = np.empty(image.grid.shape)
    gy = np.empty(image.grid.shape)
    _central_grad(image.data, image.grid.hx, image.grid.hy, gx, gy)
    return VectorField(image.grid, gx, gy)
