"""Tape engine: forward values, backward rules, sparse and segment ops."""

import numpy as np
import pytest

from amlgnn import SparseAdj, Tape, Tensor, backward, parameter
from amlgnn import autodiff as ad
from amlgnn.errors import InvalidProbability, NotScalar, ShapeMismatch
from amlgnn.graph import build_csr
from amlgnn.rng import RngStream

from conftest import gradcheck


def path_adj(coeffs=None):
    # 0 - 1 - 2
    offsets, cols = build_csr(3, np.array([0, 1]), np.array([1, 2]))
    if coeffs == "unit":
        coeffs = np.ones(cols.shape[0])
    return SparseAdj(offsets, cols, 3, coeffs)


class TestForwardValues:
    def test_relu(self):
        x = parameter([[-1.0, 0.0, 2.0]])
        with Tape() as tape:
            y = ad.relu(x)
            np.testing.assert_array_equal(y.data, [[0.0, 0.0, 2.0]])
            tape.backward(ad.reduce_sum(y))
        np.testing.assert_array_equal(x.grad, [[0.0, 0.0, 1.0]])

    def test_leaky_relu(self):
        x = Tensor([[-2.0, 3.0]])
        y = ad.leaky_relu(x, 0.2)
        np.testing.assert_allclose(y.data, [[-0.4, 3.0]])

    def test_log_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(40, 5)) * 10)
        y = ad.log_softmax(x)
        np.testing.assert_allclose(np.exp(y.data).sum(axis=1), 1.0, atol=1e-12)

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_tensor_rejects_3d(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.ones((2, 2, 2)))

    def test_parameter_has_grad_buffer(self):
        p = parameter(np.ones((2, 2)))
        assert p.grad is not None and p.grad.shape == (2, 2)
        assert Tensor(np.ones(2)).grad is None

    def test_scalar_lifted_to_1x1(self):
        assert Tensor(3.0).shape == (1, 1)


class TestBackwardContract:
    def test_sum_of_weights_gives_ones(self):
        w = parameter(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            tape.backward(ad.reduce_sum(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_sum_of_squares_gives_2w(self):
        w = parameter(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            tape.backward(ad.reduce_sum(ad.mul(w, w)))
        np.testing.assert_array_equal(w.grad, 2 * w.data)

    def test_repeated_backward_accumulates(self):
        w = parameter(np.ones((2, 2)))
        with Tape() as tape:
            loss = ad.reduce_sum(w)
            tape.backward(loss)
            tape.backward(loss)
        np.testing.assert_array_equal(w.grad, 2 * np.ones((2, 2)))

    def test_not_scalar_rejected(self):
        w = parameter(np.ones((2, 2)))
        with Tape() as tape:
            y = ad.mul(w, w)
            with pytest.raises(NotScalar):
                tape.backward(y)

    def test_loss_off_tape_rejected(self):
        w = parameter(np.ones((1, 1)))
        loss = ad.reduce_sum(w)  # no active tape
        with pytest.raises(ValueError):
            backward(loss)

    def test_no_tape_means_no_recording(self):
        w = parameter(np.ones((2, 2)))
        y = ad.relu(w)
        assert not y._traced and y._tape is None


class TestPrimitiveGradients:
    """Central finite differences, h = 1e-5, relative error < 1e-6."""

    def test_matmul(self):
        rng = np.random.default_rng(1)
        a = parameter(rng.normal(size=(2, 3)))
        b = parameter(rng.normal(size=(3, 2)))
        assert gradcheck(lambda: ad.reduce_sum(ad.matmul(a, b)), [a, b]) < 1e-6

    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
    def test_binary_broadcast(self, op):
        rng = np.random.default_rng(2)
        a = parameter(rng.normal(size=(4, 3)))
        b = parameter(rng.normal(size=(1, 3)) + 2.0)  # keep away from zero for div
        assert gradcheck(lambda: ad.reduce_sum(op(a, b)), [a, b]) < 1e-6

    def test_scale_sqrt_leaky(self):
        rng = np.random.default_rng(3)
        x = parameter(rng.random((3, 3)) + 0.5)

        def loss():
            return ad.reduce_sum(ad.scale(ad.sqrt(x), 1.7))

        assert gradcheck(loss, [x]) < 1e-6
        y = parameter(rng.normal(size=(3, 3)))
        assert gradcheck(lambda: ad.reduce_sum(ad.leaky_relu(y, 0.2)), [y]) < 1e-6

    def test_concat_and_select(self):
        rng = np.random.default_rng(4)
        a = parameter(rng.normal(size=(2, 3)))
        b = parameter(rng.normal(size=(3, 3)))
        mask = np.array([True, False, True, True, False])

        def loss():
            stacked = ad.concat_rows(a, b)
            return ad.reduce_sum(ad.row_select(stacked, mask))

        assert gradcheck(loss, [a, b]) < 1e-6
        c = parameter(rng.normal(size=(2, 2)))
        d = parameter(rng.normal(size=(2, 3)))
        assert gradcheck(lambda: ad.reduce_sum(ad.concat_cols(c, d)), [c, d]) < 1e-6

    def test_row_select_repeated_indices_accumulate(self):
        x = parameter(np.ones((3, 2)))
        with Tape() as tape:
            tape.backward(ad.reduce_sum(ad.row_select(x, np.array([0, 0, 2]))))
        np.testing.assert_array_equal(x.grad, [[2, 2], [0, 0], [1, 1]])

    def test_reductions(self):
        rng = np.random.default_rng(5)
        x = parameter(rng.normal(size=(5, 3)))
        assert gradcheck(lambda: ad.reduce_sum(ad.reduce_mean(x)), [x]) < 1e-6
        assert gradcheck(lambda: ad.reduce_sum(ad.reduce_var(x)), [x]) < 1e-6

    def test_log_softmax(self):
        rng = np.random.default_rng(6)
        x = parameter(rng.normal(size=(4, 3)))
        picks = np.zeros((4, 3))
        picks[np.arange(4), [0, 2, 1, 1]] = 1.0
        assert gradcheck(lambda: ad.reduce_sum(ad.mul(ad.log_softmax(x), picks)), [x]) < 1e-6

    def test_flatten(self):
        rng = np.random.default_rng(7)
        x = parameter(rng.normal(size=(3, 2)))
        w = Tensor(rng.normal(size=6))
        assert gradcheck(lambda: ad.reduce_sum(ad.mul(ad.flatten(x), w)), [x]) < 1e-6


class TestDropout:
    def test_p_zero_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert ad.dropout(x, 0.0, RngStream(1), training=True) is x

    def test_eval_mode_is_identity(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert ad.dropout(x, 0.5, RngStream(1), training=False) is x

    def test_invalid_probability(self):
        x = Tensor(np.ones((2, 2)))
        for p in (-0.1, 1.0, 1.5):
            with pytest.raises(InvalidProbability):
                ad.dropout(x, p, RngStream(1), training=True)

    def test_keep_rate_within_3_sigma(self):
        p = 0.3
        n = 100_000
        x = Tensor(np.ones((n, 1)))
        y = ad.dropout(x, p, RngStream(99, ("drop",)), training=True)
        kept = np.count_nonzero(y.data) / n
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(kept - (1 - p)) < 3 * sigma

    def test_survivors_scaled(self):
        x = Tensor(np.ones((1000, 1)))
        y = ad.dropout(x, 0.25, RngStream(5), training=True)
        survivors = y.data[y.data != 0]
        np.testing.assert_allclose(survivors, 1.0 / 0.75)

    def test_same_stream_same_mask(self):
        x = Tensor(np.ones((50, 4)))
        y1 = ad.dropout(x, 0.4, RngStream(7, ("a",)), training=True)
        y2 = ad.dropout(x, 0.4, RngStream(7, ("a",)), training=True)
        np.testing.assert_array_equal(y1.data, y2.data)
        y3 = ad.dropout(x, 0.4, RngStream(7, ("b",)), training=True)
        assert not np.array_equal(y1.data, y3.data)

    def test_gradient_uses_mask(self):
        x = parameter(np.ones((20, 5)))
        with Tape() as tape:
            y = ad.dropout(x, 0.5, RngStream(3), training=True)
            tape.backward(ad.reduce_sum(y))
        np.testing.assert_array_equal(x.grad != 0, y.data != 0)


class TestSpmm:
    def test_path_hand_aggregation(self):
        adj = path_adj("unit")
        h = Tensor(np.eye(3))
        out = ad.spmm(adj, h)
        np.testing.assert_array_equal(out.data[0], [0, 1, 0])  # e1
        np.testing.assert_array_equal(out.data[1], [1, 0, 1])  # e0 + e2
        np.testing.assert_array_equal(out.data[2], [0, 1, 0])

    def test_isolated_node_gets_zero(self):
        offsets, cols = build_csr(3, np.array([0]), np.array([1]))
        adj = SparseAdj(offsets, cols, 3, np.ones(cols.shape[0]))
        out = ad.spmm(adj, Tensor(np.ones((3, 2))))
        np.testing.assert_array_equal(out.data[2], [0.0, 0.0])

    def test_requires_coefficients(self):
        with pytest.raises(ShapeMismatch):
            ad.spmm(path_adj(), Tensor(np.ones((3, 2))))

    def test_gradient_wrt_h(self):
        rng = np.random.default_rng(8)
        src = np.array([0, 1, 2, 3, 4])
        dst = np.array([1, 2, 3, 4, 5])
        offsets, cols = build_csr(6, src, dst)
        adj = SparseAdj(offsets, cols, 6, rng.random(cols.shape[0]))
        h = parameter(rng.normal(size=(6, 4)))
        weights = Tensor(rng.normal(size=(6, 4)))
        assert gradcheck(lambda: ad.reduce_sum(ad.mul(ad.spmm(adj, h), weights)), [h]) < 1e-6

    def test_gradient_wrt_differentiable_coeffs(self):
        rng = np.random.default_rng(9)
        offsets, cols = build_csr(4, np.array([0, 1, 2]), np.array([1, 2, 3]))
        structure = SparseAdj(offsets, cols, 4)
        coeffs = parameter(rng.random(cols.shape[0]))
        h = parameter(rng.normal(size=(4, 3)))
        weights = Tensor(rng.normal(size=(4, 3)))

        def loss():
            return ad.reduce_sum(ad.mul(ad.spmm(structure.with_coeffs(coeffs), h), weights))

        assert gradcheck(loss, [h, coeffs]) < 1e-6


class TestSegmentSoftmax:
    def test_singleton_segment(self):
        offsets = np.array([0, 1])
        out = ad.segment_softmax(Tensor(np.array([5.0])), offsets)
        np.testing.assert_allclose(out.data, [1.0])

    def test_uniform_logits(self):
        offsets = np.array([0, 3])
        out = ad.segment_softmax(Tensor(np.zeros(3)), offsets)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_two_logit_values(self):
        offsets = np.array([0, 2])
        out = ad.segment_softmax(Tensor(np.array([1.0, 2.0])), offsets)
        np.testing.assert_allclose(out.data, [0.26894142137, 0.73105857863], atol=1e-10)

    def test_segments_sum_to_one(self):
        rng = np.random.default_rng(10)
        offsets = np.array([0, 3, 3, 7, 12])
        logits = Tensor(rng.normal(size=12) * 4)
        out = ad.segment_softmax(logits, offsets)
        for a, b in zip(offsets[:-1], offsets[1:]):
            if a < b:
                assert abs(out.data[a:b].sum() - 1.0) < 1e-12

    def test_gradient(self):
        rng = np.random.default_rng(11)
        offsets = np.array([0, 2, 5, 6])
        logits = parameter(rng.normal(size=6))
        weights = Tensor(rng.normal(size=6))
        assert gradcheck(
            lambda: ad.reduce_sum(ad.mul(ad.segment_softmax(logits, offsets), weights)), [logits]
        ) < 1e-6


class TestNeighborMax:
    def test_empty_neighborhood_gives_zero(self):
        offsets, cols = build_csr(3, np.array([0]), np.array([1]))
        adj = SparseAdj(offsets, cols, 3)
        out = ad.neighbor_max(adj, Tensor(np.full((3, 2), 5.0)))
        np.testing.assert_array_equal(out.data[2], [0.0, 0.0])
        np.testing.assert_array_equal(out.data[0], [5.0, 5.0])

    def test_gradient(self):
        rng = np.random.default_rng(12)
        offsets, cols = build_csr(5, np.array([0, 1, 2, 0]), np.array([1, 2, 3, 4]))
        adj = SparseAdj(offsets, cols, 5)
        h = parameter(rng.normal(size=(5, 3)))
        weights = Tensor(rng.normal(size=(5, 3)))
        assert gradcheck(lambda: ad.reduce_sum(ad.mul(ad.neighbor_max(adj, h), weights)), [h]) < 1e-6
