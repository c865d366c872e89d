import numpy as np
import pytest

from metricreg.errors import InputError
from metricreg.grid import (
    DeformationMap,
    GridSpec,
    ScalarImage,
    TimeVelocity,
    VectorField,
    compose_deform,
    interpolate,
    jacobian_determinant,
    warp,
)


@pytest.fixture
def grid():
    return GridSpec(8, 8)


def rand_image(grid, seed=0):
    rng = np.random.default_rng(seed)
    return ScalarImage(grid, rng.uniform(0, 1, grid.shape))


class TestGridSpec:
    def test_rejects_tiny_grids(self):
        with pytest.raises(InputError):
            GridSpec(3, 8)
        with pytest.raises(InputError):
            GridSpec(8, 3)

    def test_rejects_nonpositive_spacing(self):
        with pytest.raises(InputError):
            GridSpec(8, 8, hx=0.0)
        with pytest.raises(InputError):
            GridSpec(8, 8, hy=-1.0)

    def test_identity_map_is_node_mesh(self, grid):
        ident = grid.identity_map()
        x, y = grid.coords()
        assert np.array_equal(ident.px, x)
        assert np.array_equal(ident.py, y)


class TestValidation:
    def test_image_shape_mismatch(self, grid):
        with pytest.raises(InputError):
            ScalarImage(grid, np.zeros((4, 8)))

    def test_image_nonfinite(self, grid):
        data = np.zeros(grid.shape)
        data[2, 3] = np.nan
        with pytest.raises(InputError):
            ScalarImage(grid, data)

    def test_time_velocity_grid_consistency(self, grid):
        other = GridSpec(16, 16)
        with pytest.raises(InputError):
            TimeVelocity((VectorField.zeros(grid), VectorField.zeros(other)))

    def test_stored_arrays_are_frozen(self, grid):
        img = rand_image(grid)
        with pytest.raises(ValueError):
            img.data[0, 0] = 5.0


class TestInterpolate:
    def test_exact_at_nodes(self, grid):
        img = rand_image(grid, seed=1)
        x, y = grid.coords()
        out = interpolate(img, x, y)
        assert np.array_equal(out, img.data)

    def test_constant_everywhere(self, grid):
        img = ScalarImage(grid, np.full(grid.shape, 0.7))
        rng = np.random.default_rng(2)
        qx = rng.uniform(-20, 20, 50)
        qy = rng.uniform(-20, 20, 50)
        out = interpolate(img, qx, qy)
        assert np.allclose(out, 0.7, atol=1e-14)

    def test_linear_ramp_interior(self):
        # ramp in x evaluated strictly inside the grid matches the closed form
        grid = GridSpec(16, 16, hx=0.5, hy=0.5)
        x, y = grid.coords()
        img = ScalarImage(grid, 0.3 * x + 0.1 * y)
        rng = np.random.default_rng(3)
        qx = rng.uniform(0.5, 6.5, 200)
        qy = rng.uniform(0.5, 6.5, 200)
        out = interpolate(img, qx, qy)
        assert np.abs(out - (0.3 * qx + 0.1 * qy)).max() < 1e-12

    def test_periodic_wrap(self, grid):
        img = rand_image(grid, seed=4)
        rng = np.random.default_rng(5)
        qx = rng.uniform(0, 8, 40)
        qy = rng.uniform(0, 8, 40)
        period_x = grid.nx * grid.hx
        out0 = interpolate(img, qx, qy)
        out1 = interpolate(img, qx + period_x, qy)
        assert np.allclose(out0, out1, atol=1e-12)

    def test_negative_coordinates_wrap(self, grid):
        img = rand_image(grid, seed=6)
        qx = np.array([-1.0, -7.5, -16.0])
        qy = np.array([-2.0, -0.25, -8.0])
        out_neg = interpolate(img, qx, qy)
        out_pos = interpolate(img, qx + 16.0, qy + 16.0)
        assert np.allclose(out_neg, out_pos, atol=1e-12)

    def test_vector_field_sampling(self, grid):
        rng = np.random.default_rng(7)
        v = VectorField(grid, rng.normal(size=grid.shape), rng.normal(size=grid.shape))
        x, y = grid.coords()
        ox, oy = interpolate(v, x, y)
        assert np.array_equal(ox, v.vx)
        assert np.array_equal(oy, v.vy)

    def test_nonfinite_query_rejected(self, grid):
        img = rand_image(grid)
        with pytest.raises(InputError):
            interpolate(img, np.array([np.nan]), np.array([0.0]))


class TestComposeDeform:
    def test_zero_velocity_is_identity(self, grid):
        rng = np.random.default_rng(8)
        dmap = DeformationMap(
            grid,
            grid.coords()[0] + rng.normal(scale=0.3, size=grid.shape),
            grid.coords()[1] + rng.normal(scale=0.3, size=grid.shape),
        )
        out = compose_deform(dmap, VectorField.zeros(grid), dt=0.25)
        assert np.allclose(out.px, dmap.px, atol=1e-14)
        assert np.allclose(out.py, dmap.py, atol=1e-14)

    def test_constant_advection(self, grid):
        c = 0.8
        v = VectorField(grid, np.full(grid.shape, c), np.zeros(grid.shape))
        out = compose_deform(grid.identity_map(), v, dt=0.5)
        x, y = grid.coords()
        assert np.allclose(out.px, x + c * 0.5, atol=1e-14)
        assert np.allclose(out.py, y, atol=1e-14)

    def test_many_zero_steps_stay_identity(self, grid):
        dmap = grid.identity_map()
        v = VectorField.zeros(grid)
        for _ in range(10):
            dmap = compose_deform(dmap, v, dt=0.1)
        x, y = grid.coords()
        assert np.allclose(dmap.px, x, atol=1e-14)
        assert np.allclose(dmap.py, y, atol=1e-14)

    def test_rejects_nonpositive_dt(self, grid):
        with pytest.raises(InputError):
            compose_deform(grid.identity_map(), VectorField.zeros(grid), dt=0.0)


class TestWarp:
    def test_identity_map_identity_op(self, grid):
        img = rand_image(grid, seed=9)
        out = warp(img, grid.identity_map())
        assert np.array_equal(out.data, img.data)

    def test_half_shift_of_constant(self, grid):
        img = ScalarImage(grid, np.full(grid.shape, 0.42))
        x, y = grid.coords()
        dmap = DeformationMap(grid, x + 0.5 * grid.hx, y)
        out = warp(img, dmap)
        assert np.allclose(out.data, 0.42, atol=1e-14)

    def test_integer_shift_is_circular_roll(self, grid):
        img = rand_image(grid, seed=10)
        x, y = grid.coords()
        dmap = DeformationMap(grid, x + 3 * grid.hx, y + 5 * grid.hy)
        out = warp(img, dmap)
        # sampling at (x+3, y+5) pulls values from higher indices: roll backwards
        expected = np.roll(img.data, (-5, -3), axis=(0, 1))
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_grid_mismatch(self, grid):
        img = rand_image(grid)
        with pytest.raises(InputError):
            warp(img, GridSpec(16, 16).identity_map())


class TestJacobianDeterminant:
    def test_identity(self, grid):
        jd = jacobian_determinant(grid.identity_map())
        assert np.allclose(jd.data, 1.0, atol=1e-14)

    def test_translation(self, grid):
        x, y = grid.coords()
        dmap = DeformationMap(grid, x + 1.7, y - 0.3)
        jd = jacobian_determinant(dmap)
        assert np.allclose(jd.data, 1.0, atol=1e-14)

    def test_uniform_scaling_interior(self):
        grid = GridSpec(16, 16)
        s = 1.05
        x, y = grid.coords()
        jd = jacobian_determinant(DeformationMap(grid, s * x, s * y))
        # periodic wrap corrupts the two boundary rows/cols of the stencil
        interior = jd.data[2:-2, 2:-2]
        assert np.allclose(interior, s * s, atol=1e-10)
