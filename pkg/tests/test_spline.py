import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kanflux.spline import (EdgeFunction, PenaltyUndefined, SplineGrid,
                            eval_edge, smoothness_penalty)


def deboor_reference(knots, degree, i, x):
    """Independent Cox-de Boor recursion for a single basis function."""
    if degree == 0:
        return 1.0 if knots[i] <= x < knots[i + 1] else 0.0
    left = 0.0
    d1 = knots[i + degree] - knots[i]
    if d1 > 0:
        left = (x - knots[i]) / d1 * deboor_reference(knots, degree - 1, i, x)
    right = 0.0
    d2 = knots[i + degree + 1] - knots[i + 1]
    if d2 > 0:
        right = (knots[i + degree + 1] - x) / d2 * \
            deboor_reference(knots, degree - 1, i + 1, x)
    return left + right


class TestBasis:
    def test_partition_of_unity(self):
        grid = SplineGrid(0.0, 1.0, degree=3, num_cells=10)
        rng = np.random.default_rng(0)
        x = rng.uniform(grid.ext_lo, grid.ext_hi, size=500)
        B = grid.basis(x)
        np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(B >= -1e-14)

    def test_partition_of_unity_all_degrees(self):
        rng = np.random.default_rng(1)
        for degree in range(4):
            grid = SplineGrid(-2.0, 3.0, degree=degree, num_cells=8,
                              margin_factor=1.0)
            x = rng.uniform(grid.ext_lo, grid.ext_hi, size=1000)
            B = grid.basis(x)
            np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)

    def test_degree0_one_hot(self):
        grid = SplineGrid(0.0, 1.0, degree=0, num_cells=4, margin_factor=0.0)
        B = grid.basis(np.array([0.1, 0.3, 0.6, 0.9]))
        np.testing.assert_allclose(B, np.eye(4), atol=1e-12)

    def test_matches_deboor_reference(self):
        grid = SplineGrid(0.0, 2.0, degree=3, num_cells=6, margin_factor=0.5)
        # knot midpoints inside the span
        xs = 0.5 * (grid.knots[3:-4] + grid.knots[4:-3])
        B = grid.basis(xs)
        for r, x in enumerate(xs):
            for i in range(grid.num_coeffs):
                ref = deboor_reference(grid.knots, 3, i, float(x))
                assert abs(B[r, i] - ref) < 1e-12

    def test_extrapolation_is_polynomial_continuation(self):
        # beyond the span the boundary piece's polynomial continues: values
        # remain finite and the basis still sums to 1 (polynomial identity)
        grid = SplineGrid(0.0, 1.0, degree=3, num_cells=5, margin_factor=0.0)
        x = np.array([-0.5, 1.5])
        B = grid.basis(x)
        assert np.all(np.isfinite(B))
        np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-9)

    def test_derivative_matches_finite_difference(self):
        grid = SplineGrid(-1.0, 1.0, degree=3, num_cells=7)
        rng = np.random.default_rng(2)
        x = rng.uniform(-1.5, 1.5, size=50)
        eps = 1e-6
        _, dB = grid.basis(x, with_derivative=True)
        num = (grid.basis(x + eps) - grid.basis(x - eps)) / (2 * eps)
        np.testing.assert_allclose(dB, num, atol=1e-6)


class TestEvalEdge:
    def test_identity_base_zero_coeffs(self):
        grid = SplineGrid(0.0, 1.0)
        edge = EdgeFunction(grid, base_weight=2.5, base_kind="identity")
        x = np.linspace(-0.5, 1.5, 11)
        value, dvalue, _ = eval_edge(edge, x)
        np.testing.assert_allclose(value, 2.5 * x, atol=1e-12)
        np.testing.assert_allclose(dvalue, 2.5, atol=1e-12)

    def test_constant_coeffs_partition(self):
        grid = SplineGrid(0.0, 1.0, degree=3, num_cells=6)
        edge = EdgeFunction(grid, coeffs=np.full(grid.num_coeffs, 3.0),
                            base_weight=0.0, base_kind="zero")
        x = np.linspace(0.0, 1.0, 9)
        value, dvalue, _ = eval_edge(edge, x)
        np.testing.assert_allclose(value, 3.0, atol=1e-12)
        np.testing.assert_allclose(dvalue, 0.0, atol=1e-9)

    def test_gradients_match_central_differences(self):
        rng = np.random.default_rng(5)
        grid = SplineGrid(-1.0, 2.0, degree=3, num_cells=8)
        coeffs = rng.normal(0, 1, grid.num_coeffs)
        edge = EdgeFunction(grid, coeffs=coeffs, base_weight=0.7,
                            base_kind="smooth-gate")
        x = rng.uniform(-1.0, 2.0, size=20)
        value, dvalue, dcoeff = eval_edge(edge, x)
        eps = 1e-6
        vp = eval_edge(edge, x + eps)[0]
        vm = eval_edge(edge, x - eps)[0]
        num_dx = (vp - vm) / (2 * eps)
        rel = np.abs(dvalue - num_dx) / np.maximum(1.0, np.abs(dvalue))
        assert np.max(rel) < 1e-6
        for i in range(grid.num_coeffs):
            edge.coeffs[i] += eps
            vp = eval_edge(edge, x)[0]
            edge.coeffs[i] -= 2 * eps
            vm = eval_edge(edge, x)[0]
            edge.coeffs[i] += eps
            num = (vp - vm) / (2 * eps)
            assert np.max(np.abs(dcoeff[:, i] - num)) < 1e-6

    def test_linear_in_coeffs(self):
        rng = np.random.default_rng(9)
        grid = SplineGrid(0.0, 1.0, num_cells=5)
        c1 = rng.normal(0, 1, grid.num_coeffs)
        c2 = rng.normal(0, 1, grid.num_coeffs)
        x = rng.uniform(0, 1, 10)
        v1 = eval_edge(EdgeFunction(grid, c1, 0.0, "zero"), x)[0]
        v2 = eval_edge(EdgeFunction(grid, c2, 0.0, "zero"), x)[0]
        v12 = eval_edge(EdgeFunction(grid, c1 + c2, 0.0, "zero"), x)[0]
        np.testing.assert_allclose(v12, v1 + v2, atol=1e-12)


class TestSmoothnessPenalty:
    def test_linear_sequence_is_zero(self):
        value, _ = smoothness_penalty(np.array([1.0, 2.0, 3.0, 4.0]))
        assert value == 0.0

    def test_single_second_difference(self):
        value, _ = smoothness_penalty(np.array([0.0, 0.0, 1.0]))
        assert value == 1.0

    def test_kink(self):
        value, _ = smoothness_penalty(np.array([1.0, 0.0, 1.0]))
        assert value == 4.0

    def test_too_short_raises(self):
        with pytest.raises(PenaltyUndefined):
            smoothness_penalty(np.array([1.0, 2.0]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        c = rng.normal(0, 1, 12)
        value, grad = smoothness_penalty(c)
        eps = 1e-6
        for i in range(len(c)):
            c[i] += eps
            vp = smoothness_penalty(c)[0]
            c[i] -= 2 * eps
            vm = smoothness_penalty(c)[0]
            c[i] += eps
            num = (vp - vm) / (2 * eps)
            assert abs(grad[i] - num) / max(1.0, abs(grad[i])) < 1e-8

    @given(st.floats(-5, 5), st.floats(-5, 5),
           st.integers(min_value=3, max_value=20),
           st.integers(min_value=0, max_value=2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_affine_shift_invariance(self, a, b, G, seed):
        rng = np.random.default_rng(seed)
        c = rng.normal(0, 1, G)
        shift = a * np.arange(G) + b
        v1, _ = smoothness_penalty(c)
        v2, _ = smoothness_penalty(c + shift)
        assert abs(v1 - v2) < 1e-7 * max(1.0, abs(v1))
