"""Engine-level oracles: hand-computed gradients, finite differences,
and the exact subgradient conventions at kinks.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ovml import autodiff as ad
from ovml.autodiff import (
    DoubleBackward,
    KOutOfRange,
    NonFinite,
    NotScalar,
    ShapeMismatch,
    finite_difference_check,
)
from ovml.seeds import substream


def rng_for(name):
    return substream(0, f"test.autodiff.{name}")


def test_matmul_gradients_match_hand_formula():
    a = ad.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = ad.tensor([[5.0], [6.0]], requires_grad=True)
    out = ad.matmul(a, b)
    ad.backward(ad.mean_all(out))
    # d(mean)/dout = 1/2 each; dA = g @ B^T, dB = A^T @ g
    g = np.full((2, 1), 0.5)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ShapeMismatch):
        ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        ad.matmul(ad.tensor(np.ones(3)), ad.tensor(np.ones((3, 2))))


def test_nonfinite_rejected_at_construction():
    with pytest.raises(NonFinite):
        ad.tensor([1.0, np.inf])
    with pytest.raises(NonFinite):
        ad.tensor(np.nan)


def test_backward_requires_scalar():
    x = ad.tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(NotScalar):
        ad.backward(ad.add(x, x))


def test_double_backward_rejected():
    x = ad.tensor(np.ones(3), requires_grad=True)
    loss = ad.mean_all(x)
    ad.backward(loss)
    with pytest.raises(DoubleBackward):
        ad.backward(loss)


def test_grads_accumulate_across_separate_graphs():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.mean_all(x))
    ad.backward(ad.mean_all(x))
    np.testing.assert_allclose(x.grad, [1.0, 1.0])  # 0.5 + 0.5 per coordinate


@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(m, n, seed):
    rng = np.random.default_rng(seed)
    p = ad.softmax_rows(ad.tensor(rng.normal(0, 3, (m, n))))
    np.testing.assert_allclose(p.data.sum(axis=1), np.ones(m), atol=1e-12)
    assert (p.data > 0).all()


def test_softmax_shift_invariant_per_row():
    rng = rng_for("softmax")
    x = rng.normal(0, 1, (3, 5))
    shifted = x + rng.normal(0, 10, (3, 1))
    np.testing.assert_allclose(
        ad.softmax_rows(ad.tensor(x)).data,
        ad.softmax_rows(ad.tensor(shifted)).data,
        atol=1e-12,
    )


def test_layer_norm_standardizes_rows():
    rng = rng_for("ln")
    x = ad.tensor(rng.normal(3.0, 2.0, (4, 8)))
    out = ad.layer_norm(x, ad.tensor(np.ones(8)), ad.tensor(np.zeros(8)))
    np.testing.assert_allclose(out.data.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=1), 1.0, atol=1e-4)  # eps shifts variance slightly


def test_gelu_reference_points():
    # tanh-form reference evaluated independently
    c = np.sqrt(2.0 / np.pi)
    for x in (-2.0, -0.5, 0.0, 0.3, 1.0, 4.0):
        want = 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))
        got = ad.gelu(ad.tensor([[x]])).data[0, 0]
        assert got == pytest.approx(want, abs=1e-15)


class TestTopK:
    def test_k_equals_n_is_plain_mean(self):
        rng = rng_for("topk")
        v = rng.normal(0, 1, 9)
        assert ad.topk_mean(ad.tensor(v), 9).data == pytest.approx(v.mean(), abs=1e-12)

    def test_selects_largest(self):
        v = ad.tensor([0.1, 5.0, -2.0, 3.0])
        assert ad.topk_mean(v, 2).item() == pytest.approx(4.0)

    def test_backward_spreads_over_selected(self):
        v = ad.tensor([0.1, 5.0, -2.0, 3.0], requires_grad=True)
        ad.backward(ad.topk_mean(v, 2))
        np.testing.assert_allclose(v.grad, [0.0, 0.5, 0.0, 0.5])

    def test_ties_go_to_lower_index(self):
        v = ad.tensor([2.0, 1.0, 2.0], requires_grad=True)
        out = ad.topk_mean(v, 1)
        assert out.item() == 2.0
        ad.backward(out)
        np.testing.assert_allclose(v.grad, [1.0, 0.0, 0.0])

    def test_k_out_of_range(self):
        with pytest.raises(KOutOfRange):
            ad.topk_mean(ad.tensor([1.0, 2.0]), 3)
        with pytest.raises(KOutOfRange):
            ad.topk_mean(ad.tensor([1.0, 2.0]), 0)

    def test_cols_variant_matches_per_column_loop(self):
        rng = rng_for("topkc")
        x = rng.normal(0, 1, (7, 4))
        got = ad.topk_mean_cols(ad.tensor(x), 3).data
        want = [ad.topk_mean(ad.tensor(x[:, j]), 3).item() for j in range(4)]
        np.testing.assert_allclose(got, want, atol=0)


class TestHinge:
    def test_single_pair_value(self):
        s = ad.tensor([0.5, 0.2])
        loss = ad.pairwise_hinge(s, np.array([0]), np.array([1]))
        assert loss.item() == pytest.approx(0.7)

    def test_satisfied_pair_is_zero(self):
        s = ad.tensor([2.0, 0.5])
        assert ad.pairwise_hinge(s, np.array([0]), np.array([1])).item() == 0.0

    def test_kink_subgradient_is_zero(self):
        # margin exactly 0: s_p - s_n = 1
        s = ad.tensor([1.0, 0.0], requires_grad=True)
        loss = ad.pairwise_hinge(s, np.array([0]), np.array([1]))
        assert loss.item() == 0.0
        ad.backward(loss)
        np.testing.assert_allclose(s.grad, [0.0, 0.0])

    def test_gradient_counts_active_pairs(self):
        # pos 0 vs negs 1,2; both pairs violated
        s = ad.tensor([0.0, 0.5, 0.9], requires_grad=True)
        loss = ad.pairwise_hinge(s, np.array([0]), np.array([1, 2]))
        assert loss.item() == pytest.approx(1.5 + 1.9)
        ad.backward(loss)
        np.testing.assert_allclose(s.grad, [-2.0, 1.0, 1.0])


def test_l1_distance_tie_subgradient_zero():
    a = ad.tensor([1.0, 3.0], requires_grad=True)
    loss = ad.l1_distance(a, ad.tensor([1.0, 0.0]))
    assert loss.item() == pytest.approx(3.0)
    ad.backward(loss)
    np.testing.assert_allclose(a.grad, [0.0, 1.0])


def test_l2_normalize_zero_vector_rejected():
    with pytest.raises(NonFinite):
        ad.l2_normalize(ad.tensor(np.zeros(4)))


def test_l2_normalize_unit_output():
    rng = rng_for("l2")
    out = ad.l2_normalize(ad.tensor(rng.normal(0, 2, 6)))
    assert np.linalg.norm(out.data) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_concat_slice_round_trip(rows_a, rows_b, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, (rows_a, 3))
    b = rng.normal(0, 1, (rows_b, 3))
    joined = ad.concat([ad.tensor(a), ad.tensor(b)], axis=0)
    np.testing.assert_array_equal(ad.slice_rows(joined, 0, rows_a).data, a)
    np.testing.assert_array_equal(ad.slice_rows(joined, rows_a, rows_a + rows_b).data, b)


def test_reshape_round_trip_and_grad_flow():
    x = ad.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    back = ad.reshape(ad.reshape(x, (6,)), (2, 3))
    np.testing.assert_array_equal(back.data, x.data)
    ad.backward(ad.mean_all(back))
    np.testing.assert_allclose(x.grad, np.full((2, 3), 1.0 / 6.0))


def test_add_rowvec_backward_sums_rows():
    x = ad.tensor(np.zeros((3, 2)), requires_grad=True)
    b = ad.tensor(np.zeros(2), requires_grad=True)
    ad.backward(ad.mean_all(ad.add_rowvec(x, b)))
    np.testing.assert_allclose(b.grad, [0.5, 0.5])  # 3 rows x 1/6 each


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_finite_differences_on_random_chains(seed):
    rng = np.random.default_rng(seed)
    a = ad.tensor(rng.normal(0, 1, (3, 4)), requires_grad=True)
    b = ad.tensor(rng.normal(0, 1, (4, 3)), requires_grad=True)

    def build():
        h = ad.gelu(ad.matmul(a, b))
        return ad.mean_all(ad.softmax_rows(h))

    assert finite_difference_check(build, [a, b]) < 1e-4


def test_substreams_are_deterministic_and_distinct():
    a1 = substream(42, "alpha").normal(0, 1, 5)
    a2 = substream(42, "alpha").normal(0, 1, 5)
    b = substream(42, "beta").normal(0, 1, 5)
    np.testing.assert_array_equal(a1, a2)
    assert not np.array_equal(a1, b)
