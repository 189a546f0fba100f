import numpy as np
import pytest

from ibfem.grid import (
    BackgroundGrid,
    NodalField,
    gauss_rule,
    integrate_masked,
    interpolate,
    interpolate_gradient,
    interpolate_gradient_many,
    interpolate_many,
    shape_gradients,
    shape_values,
)


class TestShapeValues:
    def test_center(self):
        np.testing.assert_allclose(shape_values((0.0, 0.0)), 0.25)

    def test_corner_interpolation(self):
        vals = shape_values((-1.0, -1.0))
        np.testing.assert_allclose(vals, [1.0, 0.0, 0.0, 0.0])

    def test_partition_of_unity(self):
        rng = np.random.default_rng(0)
        for local in rng.uniform(-1, 1, size=(1000, 2)):
            vals = shape_values(local)
            assert abs(vals.sum() - 1.0) < 1e-13
            assert np.all(vals >= 0.0) and np.all(vals <= 1.0)

    def test_outside_reference_element(self):
        with pytest.raises(ValueError):
            shape_values((1.5, 0.0))


class TestShapeGradients:
    def test_zero_column_sums(self):
        rng = np.random.default_rng(1)
        for local in rng.uniform(-1, 1, size=(1000, 2)):
            g = shape_gradients(local, (0.37, 0.8))
            assert np.all(np.abs(g.sum(axis=0)) < 1e-13)

    def test_linear_field_reproduced(self):
        # u(x, y) = x on a unit element: corner values are the corner x's.
        corner_u = np.array([0.0, 1.0, 1.0, 0.0])
        g = shape_gradients((0.0, 0.0), (1.0, 1.0))
        np.testing.assert_allclose(corner_u @ g, [1.0, 0.0], atol=1e-14)

    def test_bilinear_xy_at_center(self):
        # u = x*y on the unit element [0,1]^2: hand differentiation gives
        # grad u(0.5, 0.5) = (y, x) = (0.5, 0.5).
        corner_u = np.array([0.0, 0.0, 1.0, 0.0])  # xy at the four corners
        g = shape_gradients((0.0, 0.0), (1.0, 1.0))
        np.testing.assert_allclose(corner_u @ g, [0.5, 0.5], atol=1e-14)


class TestGaussRule:
    def test_order_two_1d(self):
        rule = gauss_rule(2, dim=1)
        np.testing.assert_allclose(
            rule.points.ravel(), [-1 / np.sqrt(3), 1 / np.sqrt(3)]
        )
        np.testing.assert_allclose(rule.weights, [1.0, 1.0])

    def test_order_two_2d_tensor(self):
        rule = gauss_rule(2)
        assert rule.n_points == 4
        np.testing.assert_allclose(rule.weights, 1.0)

    def test_integrates_x_squared(self):
        rule = gauss_rule(2, dim=1)
        val = np.sum(rule.weights * rule.points.ravel() ** 2)
        assert abs(val - 2.0 / 3.0) < 1e-15

    def test_exactness_through_degree_three(self):
        # Exact reference-element integrals: int_{-1}^{1} x^a dx.
        exact_1d = lambda a: 2.0 / (a + 1) if a % 2 == 0 else 0.0
        rule = gauss_rule(2)
        for a in range(4):
            for b in range(4):
                val = np.sum(
                    rule.weights * rule.points[:, 0] ** a * rule.points[:, 1] ** b
                )
                assert abs(val - exact_1d(a) * exact_1d(b)) < 1e-14

    def test_weights_sum_to_reference_measure(self):
        for order in (1, 2, 3):
            assert abs(gauss_rule(order).weights.sum() - 4.0) < 1e-12

    def test_unsupported_order(self):
        with pytest.raises(ValueError):
            gauss_rule(4)


class TestInterpolate:
    def test_constant(self):
        grid = BackgroundGrid(8)
        field = NodalField(grid, np.full(grid.n_nodes, 3.25))
        assert abs(interpolate(field, (0.123, 0.877)) - 3.25) < 1e-14

    def test_linear(self):
        grid = BackgroundGrid(8)
        field = NodalField.from_function(grid, lambda x, y: x)
        assert abs(interpolate(field, (0.37, 0.9)) - 0.37) < 1e-13

    def test_exact_on_bilinear_span(self):
        grid = BackgroundGrid(5)
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 1, size=(50, 2))
        for fn in (
            lambda x, y: np.ones_like(x),
            lambda x, y: x,
            lambda x, y: y,
            lambda x, y: x * y,
        ):
            field = NodalField.from_function(grid, fn)
            np.testing.assert_allclose(
                interpolate_many(field, pts), fn(pts[:, 0], pts[:, 1]), atol=1e-13
            )

    def test_quadratic_second_order(self):
        # Bilinear interpolation of x^2 has max error h^2/4 (attained at
        # element mid-lines), so h^2/4 plus slack bounds all sample points.
        grid = BackgroundGrid(64)
        field = NodalField.from_function(grid, lambda x, y: x**2)
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 1, size=(100, 2))
        err = np.abs(interpolate_many(field, pts) - pts[:, 0] ** 2)
        h = grid.h[0]
        assert err.max() <= 0.26 * h**2

    def test_outside_domain(self):
        grid = BackgroundGrid(4)
        field = NodalField.zeros(grid)
        with pytest.raises(ValueError):
            interpolate(field, (1.2, 0.5))


class TestInterpolateGradient:
    def test_constant(self):
        grid = BackgroundGrid(6)
        field = NodalField(grid, np.full(grid.n_nodes, 2.0))
        np.testing.assert_allclose(
            interpolate_gradient(field, (0.3, 0.6)), [0.0, 0.0], atol=1e-13
        )

    def test_linear(self):
        grid = BackgroundGrid(6)
        field = NodalField.from_function(grid, lambda x, y: x)
        np.testing.assert_allclose(
            interpolate_gradient(field, (0.42, 0.11)), [1.0, 0.0], atol=1e-12
        )

    def test_quadratic_first_order(self):
        # d/dx of the bilinear fit of x^2 equals twice the element-center x,
        # so the pointwise error is at most h.
        grid = BackgroundGrid(128)
        field = NodalField.from_function(grid, lambda x, y: x**2)
        rng = np.random.default_rng(4)
        pts = rng.uniform(0.01, 0.99, size=(100, 2))
        grads = interpolate_gradient_many(field, pts)
        h = grid.h[0]
        assert np.abs(grads[:, 0] - 2 * pts[:, 0]).max() <= h * (1 + 1e-12)
        assert np.abs(grads[:, 1]).max() < 1e-10


class TestIntegrateMasked:
    def test_unit_integrand_full_mask(self):
        grid = BackgroundGrid(7)
        total = integrate_masked(grid, np.arange(grid.n_elements), lambda e, x: 1.0)
        assert abs(total - 1.0) < 1e-12

    def test_linear_integrand(self):
        grid = BackgroundGrid(9)
        total = integrate_masked(grid, np.arange(grid.n_elements), lambda e, x: x[0])
        assert abs(total - 0.5) < 1e-12

    def test_disk_mask_area(self):
        # Elements active iff their center lies outside the R=0.25 disk;
        # the active area approaches 1 - pi R^2 within a perimeter band.
        grid = BackgroundGrid(64)
        center = np.array([0.5, 0.5])
        dist = np.linalg.norm(grid.element_centers - center, axis=1)
        active = np.flatnonzero(dist > 0.25)
        area = integrate_masked(grid, active, lambda e, x: 1.0)
        exact = 1.0 - np.pi * 0.25**2
        assert abs(area - exact) <= 4 * grid.h[0]

    def test_empty_active_set(self):
        grid = BackgroundGrid(4)
        assert integrate_masked(grid, np.array([], dtype=int), lambda e, x: 1.0) == 0.0

    def test_full_mask_area_across_resolutions(self):
        for n_c in (4, 16, 64, 256):
            grid = BackgroundGrid(n_c)
            total = integrate_masked(
                grid, np.arange(grid.n_elements), lambda e, x: 1.0
            )
            assert abs(total - 1.0) < 1e-12


class TestGridIndexing:
    def test_node_element_counts(self):
        grid = BackgroundGrid((4, 3), bounds=((0.0, 2.0), (0.0, 1.0)))
        assert grid.n_nodes == 5 * 4
        assert grid.n_elements == 12
        np.testing.assert_allclose(grid.h, [0.5, 1.0 / 3.0])

    def test_half_open_element_ownership(self):
        grid = BackgroundGrid(4)
        # interior grid line x = 0.25 belongs to the element on its right
        assert grid.element_of(np.array([[0.25, 0.1]]))[0] == 1
        # the closing face belongs to the last element
        assert grid.element_of(np.array([[1.0, 1.0]]))[0] == grid.n_elements - 1

    def test_every_interior_point_has_one_element(self):
        grid = BackgroundGrid(5)
        rng = np.random.default_rng(5)
        pts = rng.uniform(0, 1, size=(200, 2))
        elems = grid.element_of(pts)
        corners = grid.element_corners[elems]
        lows = grid.node_coords[corners[:, 0]]
        highs = grid.node_coords[corners[:, 2]]
        assert np.all(pts >= lows - 1e-12) and np.all(pts <= highs + 1e-12)

    def test_wall_nodes(self):
        grid = BackgroundGrid(2)
        np.testing.assert_array_equal(grid.wall_nodes("bottom"), [0, 1, 2])
        np.testing.assert_array_equal(grid.wall_nodes("top"), [6, 7, 8])
        np.testing.assert_array_equal(grid.wall_nodes("left"), [0, 3, 6])
        np.testing.assert_array_equal(grid.wall_nodes("right"), [2, 5, 8])

    def test_nodal_field_validation(self):
        grid = BackgroundGrid(2)
        with pytest.raises(ValueError):
            NodalField(grid, np.zeros(5))
        with pytest.raises(ValueError):
            NodalField(grid, np.full(grid.n_nodes, np.nan))
