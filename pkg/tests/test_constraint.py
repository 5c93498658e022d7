import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kanflux.constraint import (ConstraintSpec, MissingRange, constrain,
                                violation_loss)


def spec_hs(lo=1.0, hi=3.0):
    return ConstraintSpec(["hardsigmoid"], [(lo, hi)])


class TestConstrain:
    def test_hardsigmoid_midpoint(self):
        p, _ = constrain(spec_hs(), np.array([[0.0]]))
        assert p[0, 0] == 2.0

    def test_hardsigmoid_saturates(self):
        p, _ = constrain(spec_hs(), np.array([[9.0]]))
        assert p[0, 0] == 3.0
        p, _ = constrain(spec_hs(), np.array([[-9.0]]))
        assert p[0, 0] == 1.0

    def test_hardsigmoid_exact_at_pm3(self):
        p, _ = constrain(spec_hs(), np.array([[-3.0], [3.0]]))
        np.testing.assert_allclose(p.ravel(), [1.0, 3.0], atol=0)

    def test_relu(self):
        spec = ConstraintSpec(["relu"])
        p, _ = constrain(spec, np.array([[-0.5]]))
        assert p[0, 0] == 0.0

    def test_sigmoid_range(self):
        spec = ConstraintSpec(["sigmoid"], [(2.0, 4.0)])
        p, _ = constrain(spec, np.array([[0.0]]))
        np.testing.assert_allclose(p[0, 0], 3.0, atol=1e-12)

    def test_missing_range_raises(self):
        with pytest.raises(MissingRange):
            ConstraintSpec(["hardsigmoid"])

    def test_affine_inverse_roundtrip(self):
        # on [-3, 3] the hard-sigmoid is exactly affine and invertible
        spec = spec_hs(0.5, 2.5)
        pt = np.linspace(-3, 3, 25).reshape(-1, 1)
        p, _ = constrain(spec, pt)
        slope = (2.5 - 0.5) / 6.0
        mid = (2.5 + 0.5) / 2.0
        back = (p - mid) / slope
        np.testing.assert_allclose(back, pt, atol=1e-12)

    def test_derivative_at_kinks_uses_interior_slope(self):
        spec = spec_hs()
        _, dp = constrain(spec, np.array([[-3.0], [3.0]]))
        np.testing.assert_allclose(dp.ravel(), (3.0 - 1.0) / 6.0)

    @given(st.floats(-20, 20))
    @settings(max_examples=200, deadline=None)
    def test_containment_and_monotonicity(self, x):
        spec = spec_hs()
        p, _ = constrain(spec, np.array([[x]]))
        assert 1.0 <= p[0, 0] <= 3.0
        p2, _ = constrain(spec, np.array([[x + 0.1]]))
        assert p2[0, 0] >= p[0, 0] - 1e-12

    def test_gradients_match_finite_differences(self):
        spec = ConstraintSpec(
            ["hardsigmoid", "sigmoid", "relu", "softplus", "identity"],
            [(1.0, 3.0), (0.0, 2.0), None, None, None])
        rng = np.random.default_rng(0)
        pt = rng.uniform(-2.5, 2.5, size=(6, 5))
        _, dp = constrain(spec, pt)
        eps = 1e-6
        num = (constrain(spec, pt + eps)[0] - constrain(spec, pt - eps)[0]) \
            / (2 * eps)
        np.testing.assert_allclose(dp, num, atol=1e-6)


class TestViolationLoss:
    def test_values(self):
        spec = spec_hs()
        for x, expect in [(5.0, 2.0), (0.0, 0.0), (-3.0, 0.0), (3.0, 0.0)]:
            v, _ = violation_loss(spec, np.array([[x]]))
            assert v == expect

    def test_relu_case(self):
        spec = ConstraintSpec(["relu"])
        v, _ = violation_loss(spec, np.array([[-2.0]]))
        assert v == 2.0

    def test_zero_on_active_region(self):
        spec = spec_hs()
        x = np.linspace(-3, 3, 13).reshape(-1, 1)
        for xi in x:
            v, _ = violation_loss(spec, xi.reshape(1, 1))
            assert v == 0.0

    def test_gradient_signs(self):
        spec = spec_hs()
        _, g = violation_loss(spec, np.array([[5.0]]))
        assert g[0, 0] == 1.0
        _, g = violation_loss(spec, np.array([[-5.0]]))
        assert g[0, 0] == -1.0

    def test_batch_mean_reduction(self):
        spec = spec_hs()
        v, _ = violation_loss(spec, np.array([[5.0], [0.0]]))
        assert v == 1.0

    def test_smooth_kinds_incur_no_loss(self):
        spec = ConstraintSpec(["sigmoid", "softplus", "identity"],
                              [(0.0, 1.0), None, None])
        v, g = violation_loss(spec, np.array([[50.0, -50.0, 9.0]]))
        assert v == 0.0
        assert np.all(g == 0.0)
