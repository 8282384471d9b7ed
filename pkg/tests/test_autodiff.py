"""Reverse-mode engine: adjoints vs finite differences, invariants, determinism."""

import math

import numpy as np
import pytest

from groupaqa import autodiff as ad


def _rng(seed=0):
    return np.random.default_rng(seed)


def _scalarize(node):
    """Reduce any node to a well-mixed 1x1 scalar for gradient checking."""
    rng = _rng(99)
    mix = ad.constant(rng.normal(size=node.shape))
    return ad.sum_all(ad.mul(node, mix))


def _fd_case(build, shapes, seed):
    """Wrap an op builder into the (theta) -> (value, grad) form."""
    sizes = [r * c for r, c in shapes]

    def f(theta):
        nodes, at = [], 0
        for (r, c), n in zip(shapes, sizes):
            nodes.append(ad.parameter(theta[at:at + n].reshape(r, c)))
            at += n
        out = _scalarize(build(*nodes))
        ad.backward(out)
        grad = np.concatenate([
            (p.grad if p.grad is not None else np.zeros(p.shape)).ravel()
            for p in nodes
        ])
        return float(out.value[0, 0]), grad

    return f, sum(sizes)


# One entry per registered op: builder, input shapes, and a point generator.
OP_CASES = [
    ("matmul", lambda a, b: ad.matmul(a, b), [(3, 4), (4, 2)], None),
    ("add", lambda a, b: ad.add(a, b), [(3, 4), (3, 4)], None),
    ("add_broadcast", lambda a, b: ad.add(a, b), [(3, 4), (1, 4)], None),
    ("sub", lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)], None),
    ("sub_broadcast", lambda a, b: ad.sub(a, b), [(3, 4), (1, 4)], None),
    ("mul", lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)], None),
    ("scale", lambda a: ad.scale(a, -1.7), [(3, 4)], None),
    ("relu", lambda a: ad.relu(a), [(3, 4)], "offgrid"),
    ("sigmoid", lambda a: ad.sigmoid(a), [(3, 4)], None),
    ("log", lambda a: ad.log(a), [(3, 4)], "positive"),
    ("clip", lambda a: ad.clip(a, -0.8, 0.8), [(3, 4)], "offgrid"),
    ("softmax_rows", lambda a: ad.softmax_rows(a), [(3, 4)], None),
    ("transpose", lambda a: ad.transpose(a), [(3, 4)], None),
    ("mean_rows", lambda a: ad.mean_rows(a), [(5, 3)], None),
    ("mean_all", lambda a: ad.mean_all(a), [(3, 4)], None),
    ("sum_all", lambda a: ad.sum_all(a), [(3, 4)], None),
    ("slice_rows", lambda a: ad.slice_rows(a, 1, 3), [(4, 3)], None),
    ("slice_cols", lambda a: ad.slice_cols(a, 1, 3), [(3, 4)], None),
    ("concat_rows", lambda a, b: ad.concat_rows([a, b]), [(2, 3), (4, 3)], None),
    ("concat_cols", lambda a, b: ad.concat_cols([a, b]), [(3, 2), (3, 4)], None),
]


def _sample_point(size, kind, rng):
    theta = rng.normal(size=size)
    if kind == "positive":
        theta = np.abs(theta) + 0.5
    elif kind == "offgrid":
        # Keep points away from the kink so finite differences stay valid.
        theta = np.where(np.abs(theta) < 0.05, theta + 0.2, theta)
    return theta


@pytest.mark.parametrize("name,build,shapes,kind", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_every_op_matches_finite_differences(name, build, shapes, kind):
    for trial in range(3):
        rng = _rng(hash(name) % 2**31 + trial)
        f, size = _fd_case(build, shapes, seed=trial)
        theta = _sample_point(size, kind, rng)
        ad.assert_gradients_close(f, theta, tolerance=1e-6)


def test_batch_norm_train_matches_finite_differences():
    rows, cols = 5, 3
    state = ad.BatchNormState(cols)

    def f(theta):
        x = ad.parameter(theta[:rows * cols].reshape(rows, cols))
        gamma = ad.parameter(theta[rows * cols:rows * cols + cols].reshape(1, cols))
        beta = ad.parameter(theta[rows * cols + cols:].reshape(1, cols))
        out = _scalarize(ad.batch_norm(x, gamma, beta, state.copy(), mode="train"))
        ad.backward(out)
        grad = np.concatenate([x.grad.ravel(), gamma.grad.ravel(), beta.grad.ravel()])
        return float(out.value[0, 0]), grad

    rng = _rng(5)
    theta = rng.normal(size=rows * cols + 2 * cols)
    ad.assert_gradients_close(f, theta, tolerance=1e-6)


def test_batch_norm_eval_matches_finite_differences():
    rows, cols = 4, 3
    state = ad.BatchNormState(cols)
    state.running_mean = _rng(1).normal(size=(1, cols))
    state.running_var = np.abs(_rng(2).normal(size=(1, cols))) + 0.5

    def f(theta):
        x = ad.parameter(theta[:rows * cols].reshape(rows, cols))
        gamma = ad.parameter(theta[rows * cols:rows * cols + cols].reshape(1, cols))
        beta = ad.parameter(theta[rows * cols + cols:].reshape(1, cols))
        out = _scalarize(ad.batch_norm(x, gamma, beta, state, mode="eval"))
        ad.backward(out)
        grad = np.concatenate([x.grad.ravel(), gamma.grad.ravel(), beta.grad.ravel()])
        return float(out.value[0, 0]), grad

    theta = _rng(6).normal(size=rows * cols + 2 * cols)
    ad.assert_gradients_close(f, theta, tolerance=1e-6)


class TestSoftmaxRows:
    def test_symmetric_pair(self):
        out = ad.softmax_rows(ad.constant([[0.0, 0.0]]))
        np.testing.assert_allclose(out.value, [[0.5, 0.5]])

    def test_constant_row(self):
        out = ad.softmax_rows(ad.constant([[5.0, 5.0, 5.0]]))
        np.testing.assert_allclose(out.value, [[1 / 3, 1 / 3, 1 / 3]])

    def test_hand_evaluated_ratio(self):
        out = ad.softmax_rows(ad.constant([[0.0, math.log(2.0)]]))
        np.testing.assert_allclose(out.value, [[1 / 3, 2 / 3]], atol=1e-15)

    def test_rows_sum_to_one(self):
        x = _rng(3).normal(scale=10.0, size=(20, 7))
        out = ad.softmax_rows(ad.constant(x))
        np.testing.assert_allclose(out.value.sum(axis=1), 1.0, atol=1e-9)

    def test_shift_invariance_per_row(self):
        x = _rng(4).normal(size=(6, 5))
        shifts = _rng(5).normal(size=(6, 1))
        a = ad.softmax_rows(ad.constant(x)).value
        b = ad.softmax_rows(ad.constant(x + shifts)).value
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestBatchNorm:
    def test_constant_column_maps_to_zero(self):
        state = ad.BatchNormState(2)
        x = ad.constant(np.full((4, 2), 3.7))
        out = ad.batch_norm(x, ad.constant(np.ones((1, state.width))), ad.constant(np.zeros((1, state.width))),
                            state, mode="train")
        np.testing.assert_allclose(out.value, 0.0, atol=1e-12)

    def test_standardized_input_passes_through(self):
        # Column with (biased) mean 0 and variance 1 stays put up to eps.
        state = ad.BatchNormState(1)
        x = ad.constant([[-1.0], [1.0]])
        out = ad.batch_norm(x, ad.constant(np.ones((1, state.width))), ad.constant(np.zeros((1, state.width))),
                            state, mode="train")
        np.testing.assert_allclose(out.value, x.value, atol=1e-4)

    def test_zero_gamma_yields_beta(self):
        state = ad.BatchNormState(3)
        beta = np.array([[1.0, -2.0, 0.5]])
        x = ad.constant(_rng(7).normal(size=(6, 3)))
        out = ad.batch_norm(x, ad.constant(np.zeros((1, 3))), ad.constant(beta),
                            state, mode="train")
        np.testing.assert_allclose(out.value, np.repeat(beta, 6, axis=0), atol=1e-12)

    def test_single_row_train_rejected(self):
        state = ad.BatchNormState(2)
        with pytest.raises(ValueError):
            ad.batch_norm(ad.constant([[1.0, 2.0]]), ad.constant(np.ones((1, state.width))),
                          ad.constant(np.zeros((1, state.width))), state, mode="train")

    def test_running_stats_ema(self):
        state = ad.BatchNormState(1, momentum=0.1)
        x = np.array([[0.0], [2.0]])  # mean 1, biased var 1
        ad.batch_norm(ad.constant(x), ad.constant(np.ones((1, state.width))),
                      ad.constant(np.zeros((1, state.width))), state, mode="train")
        np.testing.assert_allclose(state.running_mean, [[0.1]])
        np.testing.assert_allclose(state.running_var, [[1.0]])  # 0.9*1 + 0.1*1


class TestBackward:
    def test_shared_subgraph_accumulates(self):
        rng = _rng(11)
        x_val = rng.normal(size=(3, 3))
        w_val = rng.normal(size=(3, 3))

        x = ad.constant(x_val)
        w = ad.parameter(w_val)
        shared = ad.matmul(x, w)
        out = ad.sum_all(ad.add(ad.relu(shared), ad.sigmoid(shared)))
        ad.backward(out)

        # Unrolled twin: duplicate the shared node with two equal parameters.
        w1, w2 = ad.parameter(w_val), ad.parameter(w_val)
        o2 = ad.sum_all(ad.add(ad.relu(ad.matmul(x, w1)),
                               ad.sigmoid(ad.matmul(x, w2))))
        ad.backward(o2)
        np.testing.assert_allclose(w.grad, w1.grad + w2.grad, atol=1e-12)

    def test_same_node_used_twice_in_one_op(self):
        a = ad.parameter([[2.0, -3.0]])
        out = ad.sum_all(ad.mul(a, a))
        ad.backward(out)
        np.testing.assert_allclose(a.grad, 2.0 * a.value)

    def test_backward_requires_scalar(self):
        a = ad.parameter([[1.0, 2.0]])
        with pytest.raises(ValueError):
            ad.backward(ad.relu(a))

    def test_constants_get_no_grad(self):
        c = ad.constant([[1.0]])
        p = ad.parameter([[2.0]])
        out = ad.sum_all(ad.mul(c, p))
        ad.backward(out)
        assert c.grad is None
        np.testing.assert_allclose(p.grad, [[1.0]])


def test_ops_are_deterministic():
    rng = _rng(21)
    x = rng.normal(size=(6, 6))
    w = rng.normal(size=(6, 6))
    runs = []
    for _ in range(2):
        out = ad.softmax_rows(ad.matmul(ad.constant(x), ad.constant(w)))
        runs.append(out.value.tobytes())
    assert runs[0] == runs[1]


def test_values_are_immutable():
    node = ad.relu(ad.constant([[1.0, -1.0]]))
    with pytest.raises(ValueError):
        node.value[0, 0] = 5.0


class TestGradientChecker:
    def test_linear_function_is_exact(self):
        c = np.array([2.0, -3.0, 0.5])

        def f(theta):
            return float(c @ theta), c.copy()

        result = ad.check_gradients(f, np.array([1.0, 2.0, 3.0]))
        assert result.max_rel_error < 1e-10

    def test_sigmoid_bce_four_elements(self):
        targets = np.array([[1.0, 0.0, 1.0, 0.0]])

        def f(theta):
            x = ad.parameter(theta.reshape(1, 4))
            p = ad.clip(ad.sigmoid(x), 1e-7, 1.0 - 1e-7)
            t = ad.constant(targets)
            ones = ad.constant(np.ones_like(targets))
            loss = ad.scale(ad.sum_all(ad.add(
                ad.mul(t, ad.log(p)),
                ad.mul(ad.sub(ones, t), ad.log(ad.sub(ones, p))),
            )), -1.0)
            ad.backward(loss)
            return float(loss.value[0, 0]), x.grad.ravel()

        theta = np.array([0.3, -1.2, 0.8, 2.0])
        result = ad.check_gradients(f, theta)
        assert result.max_rel_error < 1e-6

    def test_reports_offending_index(self):
        def f(theta):
            # Deliberately wrong gradient in slot 1.
            grad = 2.0 * theta
            grad[1] += 1.0
            return float(theta @ theta), grad

        with pytest.raises(AssertionError, match="parameter 1"):
            ad.assert_gradients_close(f, np.array([0.5, 1.5]), tolerance=1e-6)
