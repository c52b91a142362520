import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vprkit.tensor import (
    NumericalError,
    Parameter,
    affine,
    finite_diff_check,
    l2_normalize,
    l2_normalize_rows,
    matmul,
    softmax_columns,
)

finite_floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8], atol=1e-12)

    def test_zero_vector_maps_to_zero(self):
        out = l2_normalize([0.0, 0.0], eps=1e-12)
        assert np.array_equal(out, [0.0, 0.0])
        assert np.isfinite(out).all()

    def test_unit_vector_unchanged(self):
        u = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(l2_normalize(u), u, atol=1e-12)

    def test_rejects_non_finite_with_index(self):
        with pytest.raises(NumericalError, match="index 2"):
            l2_normalize([1.0, 2.0, np.nan])

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            l2_normalize([1.0], eps=0.0)

    @given(st.lists(finite_floats, min_size=1, max_size=8), st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, values, c):
        v = np.array(values)
        if np.linalg.norm(v) < 1e-6:
            return
        np.testing.assert_allclose(l2_normalize(c * v), l2_normalize(v), atol=1e-6)

    @given(st.lists(finite_floats, min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_idempotent_and_unit(self, values):
        v = np.array(values)
        if np.linalg.norm(v) < 1e-6:
            return
        once = l2_normalize(v)
        assert abs(np.linalg.norm(once) - 1.0) < 1e-6
        np.testing.assert_allclose(l2_normalize(once), once, atol=1e-6)

    def test_rows_variant(self):
        m = np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 2.0]])
        out = l2_normalize_rows(m)
        np.testing.assert_allclose(out, [[0.6, 0.8], [0.0, 0.0], [0.0, 1.0]], atol=1e-12)


class TestSoftmaxColumns:
    def test_constant_column_is_uniform(self):
        for c in (-3.0, 0.0, 17.5):
            out = softmax_columns(np.full((4, 1), c))
            np.testing.assert_allclose(out, np.full((4, 1), 0.25), atol=1e-12)

    def test_closed_form_quarter_three_quarters(self):
        out = softmax_columns(np.array([[0.0], [np.log(3.0)]]))
        np.testing.assert_allclose(out[:, 0], [0.25, 0.75], atol=1e-12)

    def test_extreme_magnitude_no_overflow(self):
        out = softmax_columns(np.array([[1000.0], [0.0]]))
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out[0, 0], 1.0, atol=1e-12)
        assert out[1, 0] < 1e-300

    def test_rejects_non_finite(self):
        with pytest.raises(NumericalError):
            softmax_columns(np.array([[np.inf], [0.0]]))

    @given(
        st.integers(min_value=1, max_value=6),
        st.integers(min_value=1, max_value=5),
        st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_columns_sum_to_one_extreme_magnitudes(self, m, s, seed):
        rng = np.random.default_rng(seed)
        scores = rng.uniform(-1e6, 1e6, (m, s))
        out = softmax_columns(scores)
        np.testing.assert_allclose(out.sum(axis=0), np.ones(s), atol=1e-6)
        assert (out >= 0).all() and (out <= 1.0).all()

    @given(
        st.integers(min_value=1, max_value=6),
        st.integers(min_value=1, max_value=5),
        st.integers(min_value=0, max_value=2**31 - 1),
    )
    @settings(max_examples=50, deadline=None)
    def test_entries_strictly_positive_at_representable_gaps(self, m, s, seed):
        # exp underflows to exact 0 only for score gaps beyond ~745.
        rng = np.random.default_rng(seed)
        scores = rng.uniform(-350, 350, (m, s))
        out = softmax_columns(scores)
        assert (out > 0).all() and (out <= 1.0).all()


class TestMatmulAffine:
    def test_identity_and_zero(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(affine(x, np.eye(2), np.zeros(2)), x)
        np.testing.assert_array_equal(affine(x, np.zeros((2, 2)), np.zeros(2)), np.zeros((2, 2)))

    def test_two_by_two(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, np.eye(2)), a)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_bias_broadcast_per_row(self):
        x = np.zeros((3, 2))
        out = affine(x, np.eye(2), np.array([1.0, -1.0]))
        np.testing.assert_array_equal(out, np.tile([1.0, -1.0], (3, 1)))

    def test_associativity_random_triples(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, c = (rng.standard_normal((4, 4)) for _ in range(3))
            np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-4)


class TestParameter:
    def test_grad_allocated_and_zeroed(self):
        p = Parameter("w", np.ones((2, 2)))
        assert p.grad.shape == (2, 2) and not p.grad.any()
        p.add_grad(np.ones((2, 2)))
        p.add_grad(np.ones((2, 2)))
        np.testing.assert_array_equal(p.grad, 2 * np.ones((2, 2)))
        p.zero_grad()
        assert not p.grad.any()

    def test_shape_mismatch_rejected(self):
        p = Parameter("w", np.ones(3))
        with pytest.raises(ValueError, match="w"):
            p.add_grad(np.ones(4))

    def test_negative_multiplier_rejected(self):
        with pytest.raises(ValueError):
            Parameter("w", np.ones(1), lr_multiplier=-0.5)


class TestFiniteDiffCheck:
    def test_quadratic(self):
        theta = Parameter("theta", np.array([3.0]))

        def f():
            theta.zero_grad()
            theta.add_grad(2.0 * theta.value)
            return float(theta.value[0] ** 2)

        assert finite_diff_check(f, [theta], h=1e-3) < 1e-6

    def test_constant_function_passes(self):
        theta = Parameter("theta", np.array([1.0, -2.0]))

        def f():
            theta.zero_grad()
            return 5.0

        assert finite_diff_check(f, [theta], h=1e-3) == 0.0

    def test_detects_wrong_gradient(self):
        theta = Parameter("theta", np.array([3.0]))

        def f():
            theta.zero_grad()
            theta.add_grad(3.0 * theta.value)  # wrong: should be 2*theta
            return float(theta.value[0] ** 2)

        assert finite_diff_check(f, [theta], h=1e-3) > 0.1

    def test_h_out_of_range_rejected(self):
        theta = Parameter("theta", np.array([1.0]))
        with pytest.raises(ValueError):
            finite_diff_check(lambda: 0.0, [theta], h=1.0)
