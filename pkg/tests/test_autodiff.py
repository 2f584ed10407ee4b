import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dapt import autodiff as ad

from conftest import assert_grad_close, central_diff_grad, check_gradients


def leaf(rng, rows, cols):
    return ad.Tensor(rng.normal(size=(rows, cols)), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        x = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = ad.Tensor(np.eye(2))
        assert np.array_equal(ad.matmul(eye, x).data, x.data)

    def test_hand_product(self):
        out = ad.matmul(ad.Tensor([[1.0, 2.0]]), ad.Tensor([[3.0], [4.0]]))
        assert out.data == pytest.approx(np.array([[11.0]]))

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        v = ad.Tensor(rng.normal(size=(3, 2)))

        def loss():
            prod = ad.matmul(a, b)
            return ad.mean_all(ad.matmul(prod, ad.transpose(v)))

        check_gradients(loss, [a, b])


class TestSoftmaxRows:
    def test_uniform_logits(self):
        out = ad.softmax_rows(ad.Tensor([[0.0, 0.0, 0.0]]))
        assert out.data == pytest.approx(np.full((1, 3), 1 / 3), abs=1e-15)

    def test_shift_by_log3(self):
        for c in (-5.0, 0.0, 11.0):
            out = ad.softmax_rows(ad.Tensor([[c, c + math.log(3.0)]]))
            assert out.data == pytest.approx(np.array([[0.25, 0.75]]), abs=1e-12)

    def test_large_logits_stay_finite(self):
        out = ad.softmax_rows(ad.Tensor([[1000.0, 1001.0]]))
        expected = [math.exp(-1.0) / (1 + math.exp(-1.0)), 1 / (1 + math.exp(-1.0))]
        assert np.isfinite(out.data).all()
        assert out.data == pytest.approx(np.array([expected]), abs=1e-12)

    def test_nan_input_rejected(self):
        with pytest.raises(ad.NumericError):
            ad.softmax_rows(ad.Tensor([[0.0, float("nan")]]))

    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=6),
           st.floats(-50, 50))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_and_shift_invariance(self, row, shift):
        base = ad.softmax_rows(ad.Tensor([row])).data
        shifted = ad.softmax_rows(ad.Tensor([[v + shift for v in row]])).data
        assert abs(base.sum() - 1.0) < 1e-12
        assert np.allclose(base, shifted, atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 3, 4)
        v = ad.Tensor(rng.normal(size=(3, 4)))

        def loss():
            return ad.mean_all(ad.matmul(ad.softmax_rows(x), ad.transpose(v)))

        check_gradients(loss, [x])


class TestGRL:
    def test_forward_is_bitwise_identity(self):
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.normal(size=(4, 3)))
        out = ad.grl(x)
        assert np.array_equal(out.data, x.data)

    def test_scalar_gradient_is_minus_one(self):
        x = ad.Tensor([[2.5]], requires_grad=True)
        with ad.Tape():
            y = ad.mean_all(ad.grl(x))
        grads = ad.backward(y)
        assert grads[x][0, 0] == -1.0

    def test_composite_gradient_is_exact_negation(self):
        # same graph with and without the reversal node: gradients must be
        # exact elementwise negations, zero tolerance
        rng = np.random.default_rng(3)
        x = ad.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(3, 2)))

        def downstream(t):
            return ad.mean_all(ad.relu(ad.matmul(t, w)))

        with ad.Tape():
            plain = downstream(x)
        g_plain = ad.backward(plain)[x]
        with ad.Tape():
            reversed_ = downstream(ad.grl(x))
        g_rev = ad.backward(reversed_)[x]
        assert np.array_equal(g_rev, -g_plain)

    def test_coefficient_scales_reversal(self):
        x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
        with ad.Tape():
            y = ad.mean_all(ad.grl(x, coefficient=0.5))
        grads = ad.backward(y)
        assert np.array_equal(grads[x], np.full((1, 2), -0.25))


class TestCrossEntropyRows:
    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_uniform_logits_give_log_k(self, k):
        logits = ad.Tensor(np.zeros((4, k)))
        out = ad.cross_entropy_rows(logits, [0, k - 1, 1, 0][:4])
        assert out.item() == pytest.approx(math.log(k), abs=1e-15)

    def test_margin_monotonicity(self):
        k = 4
        values = []
        for margin in (1.0, 5.0, 20.0, 200.0):
            logits = np.zeros((1, k))
            logits[0, 2] = margin
            values.append(ad.cross_entropy_rows(ad.Tensor(logits), [2]).item())
        assert all(v < math.log(k) for v in values)
        assert values == sorted(values, reverse=True)
        assert values[-1] < 1e-12

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=(4, 3))
        targets = rng.integers(0, 3, size=4)
        # independent direct evaluation of the defining formula
        expected = 0.0
        for i in range(4):
            z = logits[i]
            expected += -(z[targets[i]] - math.log(sum(math.exp(v) for v in z)))
        expected /= 4
        out = ad.cross_entropy_rows(ad.Tensor(logits), targets)
        assert out.item() == pytest.approx(expected, abs=1e-12)

    def test_soft_targets(self):
        logits = ad.Tensor([[0.0, 0.0]])
        out = ad.cross_entropy_rows(logits, np.array([[0.25, 0.75]]))
        assert out.item() == pytest.approx(math.log(2.0), abs=1e-15)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ad.cross_entropy_rows(ad.Tensor(np.zeros((2, 3))), [0, 3])

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 5, 3)
        targets = rng.integers(0, 3, size=5)

        def loss():
            return ad.cross_entropy_rows(x, targets)

        check_gradients(loss, [x])


class TestNormalizeAndCosine:
    def test_three_four_five(self):
        out = ad.l2_normalize_rows(ad.Tensor([[3.0, 4.0]]))
        assert out.data == pytest.approx(np.array([[0.6, 0.8]]), abs=1e-15)

    def test_zero_row_passes_through_and_counts(self):
        x = ad.Tensor([[0.0, 0.0], [3.0, 4.0]])
        out = ad.l2_normalize_rows(x)
        assert np.array_equal(out.data[0], [0.0, 0.0])
        assert ad.zero_norm_count() == 1

    def test_cosine_with_itself_is_one(self):
        rng = np.random.default_rng(5)
        a = ad.Tensor(rng.normal(size=(4, 6)))
        out = ad.cosine_similarity_rows(a, a)
        assert out.data == pytest.approx(np.ones((4, 1)), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_normalize_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, 4, 3)
        v = ad.Tensor(rng.normal(size=(4, 3)))

        def loss():
            return ad.mean_all(ad.matmul(ad.l2_normalize_rows(x), ad.transpose(v)))

        check_gradients(loss, [x])

    @pytest.mark.parametrize("seed", range(10))
    def test_cosine_gradients(self, seed):
        rng = np.random.default_rng(100 + seed)
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)

        def loss():
            return ad.mean_all(ad.cosine_similarity_rows(a, b))

        check_gradients(loss, [a, b])


class TestElementwiseOps:
    @pytest.mark.parametrize("seed", range(10))
    def test_all_primitive_gradients(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = leaf(rng, 3, 4)
        row = leaf(rng, 1, 4)
        w = leaf(rng, 4, 2)
        b = leaf(rng, 1, 2)
        v = ad.Tensor(rng.normal(size=(3, 2)))

        def loss():
            h = ad.add(x, row)
            h = ad.scale(h, 0.7)
            h = ad.add_scalar(h, 0.3)
            h = ad.relu(ad.linear(h, w, b))
            h = ad.sigmoid(h)
            h = ad.log(ad.add_scalar(h, 1.0))
            picked = ad.gather_rows(h, [0, 2, 2])
            return ad.mean_all(ad.matmul(ad.transpose(picked), v))

        check_gradients(loss, [x, row, w, b])

    def test_mean_rows_gradient(self):
        rng = np.random.default_rng(42)
        x = leaf(rng, 5, 3)
        v = ad.Tensor(rng.normal(size=(1, 3)))

        def loss():
            return ad.mean_all(ad.matmul(ad.mean_rows(x), ad.transpose(v)))

        check_gradients(loss, [x])

    def test_add_broadcast_row(self):
        x = ad.Tensor(np.ones((3, 2)))
        row = ad.Tensor([[1.0, 2.0]])
        out = ad.add(x, row)
        assert np.array_equal(out.data, [[2, 3], [2, 3], [2, 3]])

    def test_add_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.add(ad.Tensor(np.ones((3, 2))), ad.Tensor(np.ones((3, 3))))


class TestTapeAndSgd:
    def test_backward_requires_recorded_loss(self):
        with pytest.raises(ad.TapeError):
            ad.backward(ad.Tensor([[1.0]], requires_grad=True))

    def test_tape_reuse_is_an_error(self):
        x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
        with ad.Tape():
            y = ad.mean_all(ad.scale(x, 2.0))
        ad.backward(y)
        with pytest.raises(ad.TapeError):
            ad.backward(y)

    def test_mixing_live_tapes_is_an_error(self):
        x = ad.Tensor([[1.0]], requires_grad=True)
        with ad.Tape():
            y = ad.scale(x, 2.0)
        # y's tape is still live (never consumed); using y on a new tape fails
        with pytest.raises(ad.TapeError):
            with ad.Tape():
                ad.scale(y, 3.0)

    def test_constants_do_not_receive_gradients(self):
        x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
        c = ad.Tensor([[5.0, 5.0]])
        with ad.Tape():
            y = ad.mean_all(ad.add(x, c))
        grads = ad.backward(y)
        assert c not in grads and c.grad is None
        assert x in grads

    def test_backward_finite_on_finite_forward(self):
        rng = np.random.default_rng(9)
        x = leaf(rng, 4, 3)
        w = leaf(rng, 3, 5)
        with ad.Tape():
            h = ad.softmax_rows(ad.matmul(ad.l2_normalize_rows(x), w))
            lossv = ad.cross_entropy_rows(ad.scale(h, 3.0), [0, 1, 2, 3])
        grads = ad.backward(lossv)
        for g in grads.values():
            assert np.isfinite(g).all()

    def test_sgd_zero_lr_is_bitwise_noop(self):
        rng = np.random.default_rng(1)
        p = leaf(rng, 3, 3)
        before = p.data.copy()
        with ad.Tape():
            lossv = ad.mean_all(ad.matmul(p, p))
        grads = ad.backward(lossv)
        ad.sgd_step([p], grads, 0.0)
        assert np.array_equal(p.data, before)

    def test_sgd_moves_against_gradient(self):
        p = ad.Tensor([[1.0, -2.0]], requires_grad=True)
        ad.sgd_step([p], {p: np.array([[0.5, -0.5]])}, 0.1)
        assert p.data == pytest.approx(np.array([[0.95, -1.95]]))

    def test_gradient_accumulates_over_shared_leaf(self):
        x = ad.Tensor([[1.0]], requires_grad=True)
        with ad.Tape():
            y = ad.mean_all(ad.add(ad.scale(x, 2.0), ad.scale(x, 3.0)))
        grads = ad.backward(y)
        assert grads[x][0, 0] == pytest.approx(5.0)
