import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conslide import tensor as T
from conslide.tensor import AttentionParams, ShapeError, Tensor

from oracles import attention_ref, finite_difference_grads, matmul_naive, max_relative_error


def leaf(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def rand(rng, *shape):
    return leaf(rng.standard_normal(shape))


class TestMatmul:
    def test_identity(self):
        b = leaf([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(leaf(np.eye(2)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_matches_naive_oracle(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(leaf(a), leaf(b))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_array_equal(out.data, matmul_naive(a, b))

    def test_random_matches_naive(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        np.testing.assert_allclose(T.matmul(leaf(a), leaf(b)).data, matmul_naive(a, b), atol=1e-12)

    def test_zero_case(self):
        out = T.matmul(leaf(np.zeros((2, 3))), leaf(np.ones((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_inner_dim_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(leaf(np.zeros((2, 3))), leaf(np.zeros((4, 2))))

    def test_batch_dims_must_be_equal(self):
        with pytest.raises(ShapeError):
            T.matmul(leaf(np.zeros((2, 3, 4))), leaf(np.zeros((3, 4, 5))))

    def test_batched_against_shared_matrix(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 2, 4))
        w = rng.standard_normal((4, 5))
        out = T.matmul(leaf(x), leaf(w))
        for i in range(3):
            np.testing.assert_allclose(out.data[i], matmul_naive(x[i], w), atol=1e-12)


class TestSoftmax:
    def test_uniform_on_constant_row(self):
        out = T.softmax_rows(leaf([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_hand_value(self):
        out = T.softmax_rows(leaf([math.log(1.0), math.log(3.0)]))
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8),
           st.floats(-50, 50))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, row, c):
        x = np.array(row)
        a = T.softmax_rows(leaf(x)).data
        b = T.softmax_rows(leaf(x + c)).data
        assert np.abs(a - b).max() <= 1e-12

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, row):
        out = T.softmax_rows(leaf(np.array(row))).data
        assert abs(out.sum() - 1.0) <= 1e-12
        assert (out >= 0).all()

    def test_rejects_non_finite(self):
        bad = leaf([0.0, 1.0])
        bad.data[0] = np.inf
        with pytest.raises(ValueError):
            T.softmax_rows(bad)


class TestLayerNorm:
    def test_constant_row_collapses_to_beta(self):
        x = leaf([[2.0, 2.0, 2.0]])
        out = T.layer_norm(x, leaf(np.ones(3)), leaf(np.zeros(3)), eps=1e-5)
        assert np.abs(out.data).max() < 1e-2

    def test_gamma_zero_forces_beta(self):
        rng = np.random.default_rng(1)
        x = rand(rng, 4, 6)
        beta = leaf(rng.standard_normal(6))
        out = T.layer_norm(x, leaf(np.zeros(6)), beta, eps=1e-5)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.data, (4, 6)), atol=1e-15)

    def test_hand_value_two_entries(self):
        out = T.layer_norm(leaf([[1.0, 3.0]]), leaf(np.ones(2)), leaf(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


class TestMsa:
    def test_single_token_is_value_path(self):
        rng = np.random.default_rng(5)
        c = 4
        params = AttentionParams(
            wq=rand(rng, c, c), bq=rand(rng, c), wk=rand(rng, c, c), bk=rand(rng, c),
            wv=rand(rng, c, c), bv=rand(rng, c), wo=rand(rng, c, c), bo=rand(rng, c),
        )
        x = rand(rng, 1, c)
        out = T.msa(x, params, heads=2)
        expected = (x.data @ params.wv.data + params.bv.data) @ params.wo.data + params.bo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        c = 6
        params = AttentionParams(
            wq=rand(rng, c, c), bq=rand(rng, c), wk=rand(rng, c, c), bk=rand(rng, c),
            wv=rand(rng, c, c), bv=rand(rng, c), wo=rand(rng, c, c), bo=rand(rng, c),
        )
        x = rng.standard_normal((5, c))
        perm = rng.permutation(5)
        out = T.msa(leaf(x), params, heads=3).data
        out_p = T.msa(leaf(x[perm]), params, heads=3).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_identity_projections_match_brute_force(self):
        eye = lambda: leaf(np.eye(2))
        zero = lambda: leaf(np.zeros(2))
        params = AttentionParams(wq=eye(), bq=zero(), wk=eye(), bk=zero(),
                                 wv=eye(), bv=zero(), wo=eye(), bo=zero())
        x = np.array([[1.0, 2.0], [3.0, -1.0]])
        out = T.msa(leaf(x), params, heads=1).data
        expected = attention_ref(x, np.eye(2), np.zeros(2), np.eye(2), np.zeros(2),
                                 np.eye(2), np.zeros(2), np.eye(2), np.zeros(2), heads=1)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_random_params_match_brute_force(self):
        rng = np.random.default_rng(7)
        c, heads = 8, 2
        arrays = {k: rng.standard_normal((c, c)) for k in ("wq", "wk", "wv", "wo")}
        biases = {k: rng.standard_normal(c) for k in ("bq", "bk", "bv", "bo")}
        params = AttentionParams(
            wq=leaf(arrays["wq"]), bq=leaf(biases["bq"]), wk=leaf(arrays["wk"]), bk=leaf(biases["bk"]),
            wv=leaf(arrays["wv"]), bv=leaf(biases["bv"]), wo=leaf(arrays["wo"]), bo=leaf(biases["bo"]),
        )
        x = rng.standard_normal((5, c))
        out = T.msa(leaf(x), params, heads).data
        expected = attention_ref(x, arrays["wq"], biases["bq"], arrays["wk"], biases["bk"],
                                 arrays["wv"], biases["bv"], arrays["wo"], biases["bo"], heads)
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_head_mismatch_is_configuration_error(self):
        c = 6
        params = AttentionParams(*(leaf(np.eye(c)) if i % 2 == 0 else leaf(np.zeros(c))
                                   for i in range(8)))
        with pytest.raises(T.ConfigurationError):
            T.msa(leaf(np.zeros((2, c))), params, heads=4)


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.random.default_rng(0).standard_normal((3, 4)))
        T.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_zero_scaled_loss_gives_zeros(self):
        x = leaf([1.0, 2.0, 3.0])
        loss = T.scale(T.sum_all(T.mul(x, x)), 0.0)
        loss.backward()
        np.testing.assert_array_equal(x.grad, np.zeros(3))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            T.backward(leaf([1.0, 2.0]))

    def test_accumulation_without_reset(self):
        x = leaf([2.0])
        for _ in range(3):
            T.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, [3.0])

    def test_max_routes_to_first_argmax_on_ties(self):
        x = leaf([[1.0, 3.0, 3.0]])
        T.sum_all(T.max_axis(x, axis=1)).backward()
        np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0]])

    def test_detach_blocks_gradient(self):
        x = leaf([1.0, 2.0])
        loss = T.sum_all(T.mul(T.detach(x), x))
        loss.backward()
        np.testing.assert_array_equal(x.grad, [1.0, 2.0])

    def test_same_graph_twice_is_bit_identical(self):
        def build():
            rng = np.random.default_rng(11)
            x = rand(rng, 3, 3)
            y = rand(rng, 3, 3)
            loss = T.sum_all(T.mul(T.softmax_rows(T.matmul(x, y)), x))
            loss.backward()
            return loss.data.copy(), x.grad.copy(), y.grad.copy()

        first, second = build(), build()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


def _composite_loss(ts):
    x, y, w, gamma, beta, conv_w, conv_b = ts
    h = T.linear(x, y, beta)
    h = T.relu(h)
    h = T.layer_norm(h, gamma, beta, eps=1e-5)
    s = T.softmax_rows(T.matmul(h, w))
    m = T.mean_axis(T.mul(s, s), axis=1)
    stack = T.reshape(T.concat_rows(h, h), (2, h.shape[0], h.shape[1]))
    conv = T.conv1d_same(stack, conv_w, conv_b)
    mx = T.max_axis(conv, axis=1)
    total = T.add(T.sum_all(m), T.sum_all(T.log(T.add_scalar(T.mul(mx, mx), 1.0))))
    return T.add(total, T.sum_all(T.pow_scalar(T.add_scalar(T.mul(h, h), 0.5), 0.7)))


class TestFiniteDifferences:
    def test_composite_expression_gradient(self):
        rng = np.random.default_rng(21)
        c = 4
        ts = (
            rand(rng, 5, c), rand(rng, c, c), rand(rng, c, c),
            leaf(1.0 + 0.1 * rng.standard_normal(c)), rand(rng, c),
            rand(rng, 3, c, c), rand(rng, c),
        )
        named = [(f"t{i}", t) for i, t in enumerate(ts)]
        loss = _composite_loss(ts)
        loss.backward()
        analytic = {name: t.grad.copy() for name, t in named}

        def value():
            with T.no_grad():
                return float(_composite_loss(ts).data)

        numeric = finite_difference_grads(value, named, h=1e-3)
        worst, where = max_relative_error(analytic, numeric)
        assert worst < 1e-4, f"gradient mismatch at {where}: {worst}"

    def test_every_primitive_has_correct_gradient(self):
        rng = np.random.default_rng(22)
        x = rand(rng, 3, 4)
        y = rand(rng, 3, 4)
        cases = {
            "add": lambda: T.sum_all(T.mul(T.add(x, y), y)),
            "sub": lambda: T.sum_all(T.mul(T.sub(x, y), x)),
            "mul": lambda: T.sum_all(T.mul(x, y)),
            "neg": lambda: T.sum_all(T.mul(T.neg(x), y)),
            "scale": lambda: T.sum_all(T.scale(T.mul(x, x), 1.7)),
            "exp": lambda: T.sum_all(T.exp(T.scale(x, 0.3))),
            "relu": lambda: T.sum_all(T.mul(T.relu(x), y)),
            "mean": lambda: T.sum_all(T.mul(T.mean_axis(x, 0), T.mean_axis(y, 0))),
            "sum_axis": lambda: T.sum_all(T.mul(T.sum_axis(x, 1, keepdims=True),
                                                T.sum_axis(y, 1, keepdims=True))),
            "broadcast": lambda: T.sum_all(T.mul(T.broadcast_to(T.mean_axis(x, 0, keepdims=True),
                                                                (3, 4)), y)),
            "logsoftmax": lambda: T.neg(T.take_scalar(T.reshape(T.log_softmax_rows(
                T.mean_axis(x, 0, keepdims=True)), (4,)), 2)),
            "slice": lambda: T.sum_all(T.mul(T.slice_rows(x, 1, 3), T.slice_rows(y, 0, 2))),
            "permute": lambda: T.sum_all(T.mul(T.permute(x, (1, 0)), T.permute(y, (1, 0)))),
        }
        named = [("x", x), ("y", y)]
        for op, build in cases.items():
            T.zero_grads([x, y])
            build().backward()
            analytic = {"x": x.grad.copy() if x.grad is not None else np.zeros_like(x.data),
                        "y": y.grad.copy() if y.grad is not None else np.zeros_like(y.data)}

            def value():
                with T.no_grad():
                    return float(build().data)

            numeric = finite_difference_grads(value, named, h=1e-3)
            worst, _ = max_relative_error(analytic, numeric)
            assert worst < 1e-4, f"{op} gradient mismatch: {worst}"


class TestShapeDiscipline:
    def test_elementwise_ops_refuse_broadcasting(self):
        with pytest.raises(ShapeError):
            T.add(leaf(np.zeros((2, 3))), leaf(np.zeros(3)))
        with pytest.raises(ShapeError):
            T.mul(leaf(np.zeros((2, 3))), leaf(np.zeros((2, 1))))

    def test_non_finite_leaf_rejected(self):
        with pytest.raises(ValueError):
            Tensor(np.array([1.0, np.nan]))

    def test_cross_entropy_hand_value(self):
        logits = leaf([0.0, math.log(3.0)])
        loss = T.cross_entropy(logits, 1)
        assert abs(loss.item() - (-math.log(0.75))) < 1e-12
        loss.backward()
        np.testing.assert_allclose(logits.grad, [0.25, -0.25], atol=1e-12)
