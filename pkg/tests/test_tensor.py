import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from docnmt import tensor as T
from docnmt.tensor import ContractError, DimensionError, Graph, Tensor

from _oracles import grad_check, op_cases


def _t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float32), requires_grad=grad)


# ---------------------------------------------------------------------------
# worked examples
# ---------------------------------------------------------------------------


class TestLinear:
    def test_identity(self):
        out = T.linear(_t([[[1, 2]]]), _t(np.eye(2)), _t([0, 0]))
        np.testing.assert_array_equal(out.data, [[[1, 2]]])

    def test_zero_weights(self):
        out = T.linear(_t([[[1, 2]]]), _t(np.zeros((2, 2))), _t([3, 4]))
        np.testing.assert_array_equal(out.data, [[[3, 4]]])

    def test_hand_product(self):
        out = T.linear(_t([[[1, 2]]]), _t([[1, 1], [1, -1]]), _t([0.5, 0]))
        np.testing.assert_allclose(out.data, [[[3.5, -1.0]]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError) as exc:
            T.linear(_t(np.zeros((1, 2, 3))), _t(np.zeros((4, 5))), _t(np.zeros(5)))
        msg = str(exc.value)
        assert "[1, 2, 3]" in msg and "[4, 5]" in msg


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax(_t([0, 0])).data, [0.5, 0.5])

    def test_values(self):
        np.testing.assert_allclose(T.softmax(_t([1, 2, 3])).data, [0.09003, 0.24473, 0.66524], atol=1e-5)

    def test_no_overflow(self):
        out = T.softmax(_t([1000, 1000])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                      elements=st.floats(-1e4, 1e4, width=32)),
           st.floats(-100, 100, width=32))
    def test_sums_to_one_and_shift_invariant(self, x, c):
        p = T.softmax(_t(x)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
        q = T.softmax(_t(x.astype(np.float64) + c)).data
        np.testing.assert_allclose(p, q, atol=1e-6)


class TestAttention:
    def test_single_key_is_identity_on_values(self):
        q = _t([[[[0.3, -0.2]]]])
        v = _t([[[[5.0, 7.0]]]])
        out = T.scaled_dot_attention(q, q, v)
        np.testing.assert_allclose(out.data, v.data, rtol=0, atol=0)

    def test_identical_keys_average(self):
        q = _t([[[[1.0, 2.0]]]])
        k = _t([[[[0.5, 0.5], [0.5, 0.5]]]])
        v = _t([[[[1.0, 0.0], [3.0, 4.0]]]])
        np.testing.assert_allclose(T.scaled_dot_attention(q, k, v).data, [[[[2.0, 2.0]]]], atol=1e-6)

    def test_hand_computation(self):
        out, w = T.scaled_dot_attention(_t([[[[1, 0]]]]), _t([[[[1, 0], [0, 1]]]]), _t([[[[1, 0], [0, 1]]]]),
                                        return_weights=True)
        e = math.exp(1 / math.sqrt(2))
        expect = [e / (e + 1), 1 / (e + 1)]
        np.testing.assert_allclose(expect, [0.669762, 0.330238], atol=1e-6)
        np.testing.assert_allclose(w.data[0, 0, 0], expect, atol=1e-4)
        np.testing.assert_allclose(out.data[0, 0, 0], expect, atol=1e-4)

    def test_bad_mask_shape(self):
        x = _t(np.zeros((1, 1, 2, 3)))
        with pytest.raises(DimensionError):
            T.scaled_dot_attention(x, x, x, mask=np.zeros((1, 1, 3, 5)))

    def test_rows_sum_to_one_with_mask(self):
        rng = np.random.default_rng(0)
        q, k = _t(rng.normal(size=(2, 2, 3, 4))), _t(rng.normal(size=(2, 2, 5, 4)))
        mask = np.zeros((2, 1, 1, 5))
        mask[..., 3:] = T.MASK_VALUE
        _, w = T.scaled_dot_attention(q, k, k, mask, return_weights=True)
        np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)
        assert np.all(w.data[..., 3:] == 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        q = rng.normal(size=(1, 2, 3, 4))
        k, v = rng.normal(size=(1, 2, n, 4)), rng.normal(size=(1, 2, n, 5))
        mask = np.where(rng.random((1, 1, 1, n)) < 0.3, T.MASK_VALUE, 0.0)
        mask[..., 0] = 0.0
        perm = rng.permutation(n)
        a = T.scaled_dot_attention(_t(q), _t(k), _t(v), mask).data
        b = T.scaled_dot_attention(_t(q), _t(k[:, :, perm]), _t(v[:, :, perm]), mask[..., perm]).data
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestCrossEntropy:
    def test_confident_correct(self):
        assert T.cross_entropy_loss(_t([[100.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-6)

    def test_uniform(self):
        assert T.cross_entropy_loss(_t(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-5)

    def test_hand_value(self):
        expect = -(2 - math.log(math.exp(2) + math.exp(1) + 1))
        assert expect == pytest.approx(0.40761, abs=1e-4)
        assert T.cross_entropy_loss(_t([[2.0, 1.0, 0.0]]), [0]).item() == pytest.approx(expect, abs=1e-5)

    def test_label_smoothing_spreads_uniformly(self):
        logits = np.array([[2.0, 1.0, 0.0]])
        logp = logits - np.log(np.exp(logits).sum())
        ls = 0.1
        q = np.full(3, ls / 3)
        q[0] += 1 - ls
        expect = -(q * logp).sum()
        assert T.cross_entropy_loss(_t(logits), [0], label_smoothing=ls).item() == pytest.approx(expect, abs=1e-5)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy_loss(_t(np.zeros((1, 3))), [3])

    def test_ignore_index_and_sum(self):
        logits = np.random.default_rng(1).normal(size=(2, 3, 4))
        tgt = np.array([[1, 2, 0], [3, 0, 0]])
        per = T.cross_entropy_loss(_t(logits), tgt, ignore_index=0, reduction="sum").item()
        ref = sum(T.cross_entropy_loss(_t(logits[b, t][None]), [tgt[b, t]]).item()
                  for b in range(2) for t in range(3) if tgt[b, t] != 0)
        assert per == pytest.approx(ref, rel=1e-5)
        mean = T.cross_entropy_loss(_t(logits), tgt, ignore_index=0).item()
        assert mean == pytest.approx(ref / 3, rel=1e-5)


class TestOtherOps:
    def test_layer_norm_normalises(self):
        x = np.random.default_rng(0).normal(size=(3, 8)) * 10 + 4
        out = T.layer_norm(_t(x), _t(np.ones(8)), _t(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(-1), 0, atol=1e-5)
        np.testing.assert_allclose(out.std(-1), 1, atol=1e-3)

    def test_layer_norm_constant_row_is_finite(self):
        out = T.layer_norm(_t(np.full((2, 4), 3.0)), _t(np.ones(4)), _t(np.zeros(4))).data
        assert np.all(np.isfinite(out))

    def test_relu(self):
        np.testing.assert_array_equal(T.relu(_t([-1, 0, 2])).data, [0, 0, 2])

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding_lookup(_t(np.zeros((3, 2))), [[0, 3]])

    def test_sigmoid_open_interval(self):
        out = T.sigmoid(_t([-200.0, 0.0, 200.0]), open_interval=True).data
        assert np.all(out > 0) and np.all(out < 1)

    def test_dropout_inverted_and_eval_identity(self):
        x = _t(np.ones((200, 50)))
        rng = np.random.default_rng(0)
        y = T.dropout(x, 0.1, rng, training=True).data
        assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.9)}
        assert abs(y.mean() - 1.0) < 0.02
        np.testing.assert_array_equal(T.dropout(x, 0.1, rng, training=False).data, x.data)

    def test_precision_context(self):
        with T.precision(np.float64):
            assert Tensor([1.0], dtype=np.float32).data.dtype == np.float32
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


class TestBackward:
    def test_sum(self):
        x = _t([1, 2, 3], grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = _t([1, 2], grad=True)
        T.backward(T.tsum(x * x))
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_non_scalar(self):
        x = _t([1, 2], grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2)

    def test_twice_accumulates(self):
        x = _t([0.5, -1.0, 2.0], grad=True)
        loss = T.tsum(T.exp(x) * x)
        T.backward(loss)
        g1 = x.grad.copy()
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * g1, rtol=1e-6)

    def test_unreachable_untouched(self):
        x, y = _t([1.0], grad=True), _t([2.0], grad=True)
        y.grad = np.array([7.0], dtype=np.float32)
        T.backward(T.tsum(x * 3))
        np.testing.assert_array_equal(y.grad, [7.0])

    def test_shared_subexpression_visited_once(self):
        x = _t([2.0], grad=True)
        h = x * x
        loss = T.tsum(h + h * h)  # d/dx = 2x + 4x^3
        graph = Graph.trace(loss)
        ids = [id(n) for n in graph.nodes]
        assert len(ids) == len(set(ids))
        pos = graph.index()
        for node in graph.nodes:
            for p in node._prev:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]
        T.backward(loss)
        np.testing.assert_allclose(x.grad, [2 * 2 + 4 * 8])

    def test_composite_graph_against_finite_differences(self):
        rng = np.random.default_rng(3)

        def fn(x, W, b, g):
            h = T.tanh(T.linear(x, W, b))
            h = T.layer_norm(h, g, T.Tensor(np.zeros(4)))
            return T.softmax(T.matmul(h, T.swapaxes(h, -1, -2)))

        arrays = [rng.normal(size=(2, 3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4), rng.normal(size=4)]
        assert grad_check(fn, arrays) < 1e-3


N_SHAPES = 20  # random shapes per differentiable op


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
def test_op_gradients_float32(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    make = op_cases(rng)[name]
    for i in range(N_SHAPES):
        fn, arrays = make(rng)
        assert grad_check(fn, arrays, seed=i) < 1e-3


@pytest.mark.parametrize("name", sorted(op_cases(np.random.default_rng(0))))
def test_op_gradients_float64(name):
    with T.precision(np.float64):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        make = op_cases(rng)[name]
        for i in range(N_SHAPES):
            fn, arrays = make(rng)
            assert grad_check(fn, arrays, seed=i) < 1e-6
