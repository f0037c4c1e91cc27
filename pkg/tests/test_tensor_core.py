"""Differentiation engine and MLP primitives, checked against finite differences."""

import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drills import tensor_core as tc
from drills.tensor_core import Mlp, Var


def central_diff(fn, x, h=1e-6):
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def random_net(sizes, seed):
    rng = np.random.default_rng(seed)
    net = Mlp.glorot(sizes, rng)
    for b in net.biases:
        b[:] = rng.normal(scale=0.3, size=b.shape)
    return net


class TestMlpForward:
    def test_zero_net_gives_zero(self):
        net = Mlp.from_arrays([np.zeros((3, 2)), np.zeros((2, 3))], [np.zeros(3), np.zeros(2)])
        np.testing.assert_array_equal(tc.mlp_forward(net, np.array([0.4, -2.0])), [0.0, 0.0])

    def test_identity_without_hidden_layers(self):
        net = Mlp.from_arrays([np.eye(2)], [np.zeros(2)])
        np.testing.assert_array_equal(tc.mlp_forward(net, [0.3, -0.7]), [0.3, -0.7])

    def test_scalar_hand_evaluation(self):
        net = Mlp.from_arrays([np.array([[1.0]]), np.array([[2.0]])], [np.zeros(1), np.zeros(1)])
        assert tc.mlp_forward(net, [0.5])[0] == pytest.approx(2.0 * np.tanh(0.5), abs=1e-15)

    def test_batch_matches_rows(self):
        net = random_net([3, 5, 3], 1)
        X = np.random.default_rng(2).normal(size=(7, 3))
        batch = tc.mlp_forward(net, X)
        for n in range(7):
            np.testing.assert_allclose(batch[n], tc.mlp_forward(net, X[n]), rtol=0, atol=1e-15)

    def test_dimension_mismatch(self):
        net = random_net([2, 4, 2], 0)
        with pytest.raises(tc.DimensionError):
            tc.mlp_forward(net, np.zeros(3))

    def test_weight_shapes_must_chain(self):
        with pytest.raises(tc.DimensionError):
            Mlp.from_arrays([np.zeros((3, 2)), np.zeros((2, 4))], [np.zeros(3), np.zeros(2)])

    def test_parameter_count(self):
        sizes = [3, 7, 5, 3]
        assert Mlp.glorot(sizes, np.random.default_rng(0)).n_params == 7 * 4 + 5 * 8 + 3 * 6
        assert tc.mlp_param_count(sizes) == 7 * 4 + 5 * 8 + 3 * 6


class TestInputJacobian:
    def test_identity_net(self):
        net = Mlp.from_arrays([np.eye(3)], [np.zeros(3)])
        np.testing.assert_array_equal(tc.mlp_input_jacobian(net, np.ones(3)), np.eye(3))

    def test_zero_net(self):
        net = Mlp.from_arrays([np.zeros((4, 2)), np.zeros((2, 4))], [np.zeros(4), np.zeros(2)])
        np.testing.assert_array_equal(tc.mlp_input_jacobian(net, [0.1, 0.2]), np.zeros((2, 2)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        net = random_net([2, 4, 2], seed)
        x = np.random.default_rng(seed + 10).uniform(-1, 1, 2)
        fd = np.stack([central_diff(lambda v: tc.mlp_forward(net, v)[i], x) for i in range(2)])
        assert rel_err(tc.mlp_input_jacobian(net, x), fd) < 1e-6

    @pytest.mark.parametrize("sizes", [[2, 4, 2], [3, 6, 6, 3], [5, 8, 2]])
    def test_forward_and_reverse_agree(self, sizes):
        net = random_net(sizes, 3)
        X = np.random.default_rng(4).normal(size=(6, sizes[0]))
        jf = tc.mlp_input_jacobian(net, X)
        jr = tc.mlp_input_jacobian_reverse(net, X)
        np.testing.assert_allclose(jf, jr, rtol=0, atol=1e-10)
        # column i is the tangent seeded with e_i
        ws, bs = tc.mlp_vars(net)
        _, acts = tc.mlp_forward_var(ws, bs, X)
        cols = tc.mlp_tangents_var(ws, acts, np.broadcast_to(np.eye(sizes[0]), (6, sizes[0], sizes[0]))).value
        np.testing.assert_allclose(np.swapaxes(cols, 1, 2), jf, rtol=0, atol=1e-10)

    def test_vjp_is_cotangent_times_jacobian(self):
        net = random_net([3, 5, 3], 7)
        rng = np.random.default_rng(8)
        X, C = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        expected = np.einsum("ni,nij->nj", C, tc.mlp_input_jacobian(net, X))
        np.testing.assert_allclose(tc.mlp_vjp(net, X, C), expected, rtol=0, atol=1e-12)


class TestFlatten:
    def test_round_trip(self):
        nets = [random_net([2, 3, 2], 0), random_net([2, 3, 2], 1)]
        theta = tc.flatten(nets)
        back = tc.unflatten(theta, [n.layer_sizes for n in nets])
        np.testing.assert_array_equal(tc.flatten(back), theta)
        for a, b in zip(nets, back):
            for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
                np.testing.assert_array_equal(wa, wb)

    def test_documented_order(self):
        # per net: every weight matrix row-major, then every bias
        net = Mlp.from_arrays([np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])],
                              [np.array([5.0]), np.array([6.0, 7.0])])
        np.testing.assert_array_equal(tc.flatten([net]), [1, 2, 3, 4, 5, 6, 7])

    def test_wrong_length_rejected(self):
        with pytest.raises(tc.DimensionError):
            tc.unflatten(np.zeros(5), [[2, 3, 2]])


class TestPrimitiveGradients:
    """Reverse-mode pullback of every primitive against central differences."""

    cases = {
        "add": lambda a, b: tc.vsum(tc.square(a + b)),
        "sub": lambda a, b: tc.vsum(tc.square(a - b)),
        "mul": lambda a, b: tc.vsum(a * b),
        "broadcast_mul": lambda a, b: tc.vsum(tc.square(a * b[0])),
        "scale": lambda a, b: tc.vsum(tc.square(tc.scale(a, -1.7))),
        "tanh": lambda a, b: tc.vsum(tc.tanh(a) * b),
        "sigmoid": lambda a, b: tc.vsum(tc.sigmoid(a) * b),
        "exp": lambda a, b: tc.vsum(tc.exp(a) * b),
        "sqrt": lambda a, b: tc.vsum(tc.sqrt(tc.square(a) + 1.0)),
        "mean": lambda a, b: tc.mean(tc.square(a - b)),
        "norm": lambda a, b: tc.vsum(tc.norm(a, axis=-1)),
        "inner": lambda a, b: tc.vsum(tc.square(tc.inner(a, b))),
        "matmul": lambda a, b: tc.vsum(tc.tanh(a @ b.T)),
        "transpose": lambda a, b: tc.vsum(tc.transpose(a) * tc.transpose(b)),
        "reshape": lambda a, b: tc.vsum(tc.square(tc.reshape(a, (-1,)))),
        "getitem": lambda a, b: tc.vsum(tc.square(a[:, 1:])),
        "fancy_getitem": lambda a, b: tc.vsum(tc.square(a[np.array([0, 0, 2])])),
        "concat": lambda a, b: tc.vsum(tc.square(tc.concat([a, b], axis=1))),
        "expand_dims": lambda a, b: tc.vsum(tc.expand_dims(a, 1) * tc.expand_dims(b, 1)),
        "vsum_axis": lambda a, b: tc.vsum(tc.square(tc.vsum(a, axis=0))),
    }

    @pytest.mark.parametrize("name", sorted(cases))
    def test_against_finite_differences(self, name):
        fn = self.cases[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(5):
            A, B = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
            a = Var(A)
            grad = tc.backward(fn(a, Var(B)), [a])[0]
            fd = central_diff(lambda v: fn(Var(v), Var(B)).value, A)
            assert rel_err(grad, fd) < 1e-4, name

    def test_norm_is_safe_at_zero(self):
        a = Var(np.zeros((2, 3)))
        g = tc.backward(tc.vsum(tc.norm(a)), [a])[0]
        assert np.all(np.isfinite(g))


class TestParamGradients:
    def test_constant_function_has_zero_gradient(self):
        theta = np.random.default_rng(0).normal(size=6)
        g = tc.grad_scalar_wrt_params(lambda p: tc.scale(tc.vsum(p), 0.0) + 3.0, theta)
        np.testing.assert_array_equal(g, np.zeros(6))

    @pytest.mark.parametrize("seed", range(3))
    def test_reconstruction_loss(self, seed):
        sizes = [3, 5, 3]
        net = random_net(sizes, seed)
        x = np.random.default_rng(seed).normal(size=(4, 3))

        def loss(p):
            (ws, bs), = tc.split_param_vars(p, [sizes])
            out, _ = tc.mlp_forward_var(ws, bs, x)
            return tc.vsum(tc.square(out - x))

        theta = tc.flatten([net])
        g = tc.grad_scalar_wrt_params(loss, theta)
        fd = central_diff(lambda t: loss(Var(t)).value, theta)
        assert rel_err(g, fd) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_second_order_jacobian_column(self, seed):
        """Squared inner product of a Jacobian column with a fixed vector."""
        sizes = [2, 4, 2]
        net = random_net(sizes, seed)
        rng = np.random.default_rng(seed + 50)
        x, c = rng.normal(size=(1, 2)), rng.normal(size=2)
        e1 = np.eye(2)[None, :1, :]

        def loss(p):
            (ws, bs), = tc.split_param_vars(p, [sizes])
            _, acts = tc.mlp_forward_var(ws, bs, x)
            col = tc.mlp_tangents_var(ws, acts, e1)
            return tc.vsum(tc.square(tc.vsum(col * c, axis=-1)))

        theta = tc.flatten([net])
        g = tc.grad_scalar_wrt_params(loss, theta)
        fd = central_diff(lambda t: loss(Var(t)).value, theta)
        assert rel_err(g, fd) < 1e-4

    def test_non_finite_reported(self):
        with pytest.raises(tc.NonFiniteError):
            tc.check_finite(np.array([1.0, np.nan]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), width=st.integers(1, 6))
def test_jacobian_batch_consistency(seed, width):
    net = random_net([2, width, 2], seed)
    X = np.random.default_rng(seed).uniform(-2, 2, size=(3, 2))
    batch = tc.mlp_input_jacobian(net, X)
    for n in range(3):
        np.testing.assert_allclose(batch[n], tc.mlp_input_jacobian(net, X[n]), rtol=0, atol=1e-14)
