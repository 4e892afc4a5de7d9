from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cci_bins
from treex import (
    CCI_REGIONS,
    Circle,
    CircleFitParams,
    circle_from_three_points,
    circle_loss,
    circle_loss_derivatives,
    circle_objective,
    circular_completeness_index,
    fit_circle,
    fit_gradient,
    fit_ransac,
    least_squares_circle,
    select_best_circle,
)

TLS = CircleFitParams()
GRADIENT = replace(TLS, method="gradient")


def circle_points(a, b, r, n, start=0.0, stop=2 * np.pi):
    angles = np.linspace(start, stop, n, endpoint=False)
    return np.column_stack([a + r * np.cos(angles), b + r * np.sin(angles)])


class TestObjective:
    def test_points_on_circle(self):
        points = circle_points(0, 0, 0.3, 100)
        assert circle_objective(points, Circle(0, 0, 0.3), 0.01) == pytest.approx(100 / (0.01 * np.sqrt(2 * np.pi)))
        assert circle_objective(points, Circle(0, 0, 0.3), 0.01) == pytest.approx(3989.42, abs=0.01)

    def test_single_point(self):
        assert circle_objective([[1.0, 0.0]], Circle(0, 0, 1), 0.05) == pytest.approx(1 / (0.05 * np.sqrt(2 * np.pi)))

    def test_wrong_radius(self):
        assert circle_objective(circle_points(0, 0, 0.3, 100), Circle(0, 0, 0.6), 0.01) < 1e-6

    def test_empty_points(self):
        assert circle_objective(np.empty((0, 2)), Circle(0, 0, 1), 0.1) == 0.0

    def test_derivatives_match_finite_differences(self, rng):
        points = rng.normal(0, 0.2, (50, 2))
        for _ in range(20):
            theta = np.array([*rng.normal(0, 0.1, 2), rng.uniform(0.1, 0.4)])
            s = 0.05
            loss, gradient, hessian = circle_loss_derivatives(points, theta, s)
            assert loss == pytest.approx(circle_loss(points, theta, s), rel=1e-12)
            h = 1e-6
            for j in range(3):
                step = np.zeros(3)
                step[j] = h
                numeric = (circle_loss(points, theta + step, s) - circle_loss(points, theta - step, s)) / (2 * h)
                assert gradient[j] == pytest.approx(numeric, rel=1e-5, abs=1e-8)
                g_plus = circle_loss_derivatives(points, theta + step, s)[1]
                g_minus = circle_loss_derivatives(points, theta - step, s)[1]
                np.testing.assert_allclose(hessian[:, j], (g_plus - g_minus) / (2 * h), rtol=1e-4, atol=1e-4)


class TestGeometry:
    def test_three_points(self):
        a, b, r = circle_from_three_points([1, 0], [0, 1], [-1, 0])
        assert (a, b, r) == pytest.approx((0, 0, 1), abs=1e-12)

    def test_collinear_three_points(self):
        assert circle_from_three_points([0, 0], [1, 1], [2, 2]) is None

    def test_least_squares(self, rng):
        points = circle_points(2.0, -1.0, 0.4, 30) + rng.normal(0, 1e-3, (30, 2))
        a, b, r = least_squares_circle(points)
        assert (a, b, r) == pytest.approx((2.0, -1.0, 0.4), abs=2e-3)


class TestGradientFitting:
    def test_noiseless_circle(self):
        circle = fit_circle(circle_points(0, 0, 0.3, 200), GRADIENT)
        assert (circle.a, circle.b, circle.r) == pytest.approx((0, 0, 0.3), abs=1e-4)

    def test_collinear_points(self):
        assert fit_gradient(np.column_stack([np.arange(5.0), np.zeros(5)]), GRADIENT) == []

    def test_diameter_bound(self):
        assert fit_gradient(circle_points(0, 0, 2.0, 200), GRADIENT) == []

    def test_candidates_respect_bounds_and_score(self, rng):
        points = np.vstack([circle_points(1, 1, 0.2, 80), rng.uniform(0.5, 1.5, (40, 2))])
        for circle in fit_gradient(points, GRADIENT):
            assert GRADIENT.min_diameter <= circle.diameter <= GRADIENT.max_diameter
            assert circle.score >= GRADIENT.min_score


class TestRansacFitting:
    def test_noiseless_circle(self):
        circle = fit_circle(circle_points(1, 2, 0.25, 60), replace(TLS, rng_seed=42))
        assert (circle.a, circle.b, circle.r) == pytest.approx((1, 2, 0.25), abs=1e-6)

    def test_with_outliers(self, rng):
        points = np.vstack([circle_points(0.5, 0.5, 0.2, 40), rng.uniform(0, 1, (20, 2))])
        circle = fit_circle(points, replace(TLS, rng_seed=3))
        assert (circle.a, circle.b, circle.r) == pytest.approx((0.5, 0.5, 0.2), abs=5e-3)

    def test_too_few_points(self):
        assert fit_circle(np.array([[0.0, 0.0], [1.0, 1.0]]), TLS) is None
        uls = replace(TLS, min_points=3)
        assert fit_circle(np.array([[0.0, 0.0], [1.0, 1.0]]), uls) is None

    def test_reproducible(self, rng):
        points = np.vstack([circle_points(0, 0, 0.3, 50), rng.uniform(-0.4, 0.4, (30, 2))])
        params = replace(TLS, rng_seed=11, min_score=10)
        assert fit_ransac(points, params) == fit_ransac(points, params)

    def test_diameter_bound(self):
        assert fit_ransac(circle_points(0, 0, 2.0, 100), TLS) == []

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-np.pi, np.pi), st.floats(-100, 100), st.floats(-100, 100))
    def test_rigid_motion_equivariance(self, angle, tx, ty):
        points = circle_points(0.3, -0.2, 0.15, 40, 0.0, 1.5 * np.pi)
        rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        moved = points @ rotation.T + [tx, ty]
        center = rotation @ [0.3, -0.2] + [tx, ty]
        for params in (TLS, GRADIENT):
            circle = fit_circle(moved, params)
            assert (circle.a, circle.b, circle.r) == pytest.approx((*center, 0.15), abs=1e-6)


class TestCci:
    def test_regions_pinned(self):
        assert CCI_REGIONS == 73

    def test_full_circle(self):
        assert circular_completeness_index(circle_points(0, 0, 1, 730), Circle(0, 0, 1), 0.01) == 1.0

    def test_half_arc(self):
        angles = np.linspace(0, np.pi, 5000)
        points = np.column_stack([np.cos(angles), np.sin(angles)])
        value = circular_completeness_index(points, Circle(0, 0, 1), 0.01)
        assert value == cci_bins(angles, 73) == 37 / 73

    def test_threshold_is_bandwidth(self):
        angles = np.linspace(0, 2 * np.pi, 730, endpoint=False)
        near = np.column_stack([1.009 * np.cos(angles), 1.009 * np.sin(angles)])
        far = np.column_stack([1.011 * np.cos(angles), 1.011 * np.sin(angles)])
        assert circular_completeness_index(near, Circle(0, 0, 1), 0.01) == 1.0
        assert circular_completeness_index(far, Circle(0, 0, 1), 0.01) == 0.0

    def test_empty(self):
        assert circular_completeness_index(np.empty((0, 2)), Circle(0, 0, 1), 0.01) == 0.0

    def test_random_arcs_match_bin_oracle(self, rng):
        for _ in range(200):
            angles = rng.uniform(0, 2 * np.pi, int(rng.integers(1, 100)))
            regions = int(rng.integers(1, 100))
            points = np.column_stack([3 + 0.5 * np.cos(angles), -2 + 0.5 * np.sin(angles)])
            value = circular_completeness_index(points, Circle(3, -2, 0.5), 0.01, regions)
            assert value == pytest.approx(cci_bins(angles, regions), abs=1e-12)


class TestSelection:
    def test_deduplication(self):
        points = circle_points(0, 0, 0.3, 100)
        first = Circle(0.1234561, 0, 0.3, 50)
        second = Circle(0.1234564, 0, 0.3, 40)
        params = replace(TLS, min_cci=None)
        assert select_best_circle([first, second], points, params) == first

    def test_non_maximum_suppression(self):
        params = replace(TLS, min_cci=None)
        weak, strong = Circle(0, 0, 0.3, 10), Circle(0, 0, 0.2, 50)
        assert select_best_circle([weak, strong], np.empty((0, 2)), params) == strong

    def test_cci_filter(self):
        full = circle_points(0, 0, 0.3, 200)
        quarter = circle_points(2, 0, 0.3, 200, 0, np.pi / 2)
        points = np.vstack([full, quarter])
        ghost = Circle(2, 0, 0.3, 500)
        real = Circle(0, 0, 0.3, 400)
        assert circular_completeness_index(points, ghost, 0.01) == pytest.approx(19 / 73)
        assert select_best_circle([ghost, real], points, TLS) == real

    def test_no_candidates(self):
        assert select_best_circle([], np.zeros((3, 2)), TLS) is None

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            CircleFitParams(bandwidth=0)
        with pytest.raises(ValueError):
            CircleFitParams(min_diameter=2.0, max_diameter=1.0)
        with pytest.raises(ValueError):
            CircleFitParams(method="hough")
