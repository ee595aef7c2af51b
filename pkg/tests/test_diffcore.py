import numpy as np
import pytest

from gcmcg import diffcore as dc


def _scalar(fn):
    """Weighted sum of an op's output, so every output coordinate matters to grad_check."""
    def f(p):
        y = fn(p["x"])
        return dc.sum_(y * np.linspace(0.5, 1.5, y.data.size).reshape(y.shape))
    return f


class TestForward:
    def test_matmul_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(dc.matmul(np.eye(3), a).data, a)

    def test_conv1d_hand_example(self):
        out = dc.conv1d(np.array([[1.0, 2.0, 3.0]]), np.array([[[1.0, 1.0]]]), stride=1)
        np.testing.assert_array_equal(out.data, [[3.0, 5.0]])

    def test_conv1d_stride(self):
        x = np.arange(7.0).reshape(1, 1, 7)
        out = dc.conv1d(x, np.ones((1, 1, 3)), np.array([1.0]), stride=2)
        np.testing.assert_array_equal(out.data, [[[4.0, 10.0, 16.0]]])

    def test_softmax_symmetric(self):
        np.testing.assert_array_equal(dc.softmax(np.zeros(2)).data, [0.5, 0.5])

    def test_softmax_large_inputs_finite(self):
        out = dc.softmax(np.array([1000.0, 0.0, -1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out.sum(), 1.0, atol=1e-15)

    def test_leaky_relu_slope(self):
        np.testing.assert_array_equal(dc.leaky_relu(np.array([-1.0, 2.0])).data, [-0.2, 2.0])

    def test_log_nonpositive_raises(self):
        with pytest.raises(ValueError, match="log"):
            dc.log(np.array([1.0, 0.0]))

    def test_shape_mismatch_names_op(self):
        with pytest.raises(dc.ShapeError, match="matmul"):
            dc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_conv_short_sequence(self):
        with pytest.raises(dc.ShapeError, match="shorter than kernel"):
            dc.conv1d(np.ones((1, 1, 3)), np.ones((1, 1, 5)))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        x, w, u = rng.normal(size=(2, 5, 4)), rng.normal(size=(4, 9)), rng.normal(size=(3, 9))
        a = dc.gru_sequence(x, w, u).data
        b = dc.gru_sequence(x, w, u).data
        assert a.tobytes() == b.tobytes()

    def test_broadcast_rows(self):
        out = dc.broadcast_rows(np.array([1.0, 2.0]), 3)
        np.testing.assert_array_equal(out.data, [[1, 2]] * 3)


class TestBackward:
    def test_square(self):
        tape, out = dc.forward(lambda p: p["x"] * p["x"], {"x": np.array(3.0)})
        assert dc.backward(tape, seed=np.array(1.0))["x"] == pytest.approx(6.0)

    def test_sigmoid_at_zero(self):
        tape, _ = dc.forward(lambda p: dc.sigmoid(p["x"]), {"x": np.array(0.0)})
        assert dc.backward(tape)["x"] == pytest.approx(0.25, abs=1e-15)

    def test_mask_gradient(self):
        m = np.array([1.0, 0.0, 1.0, 1.0])
        tape, _ = dc.forward(lambda p: dc.sum_(dc.mask_mul(p["x"], m)), {"x": np.ones(4)})
        np.testing.assert_array_equal(dc.backward(tape)["x"], m)

    def test_backward_before_forward(self):
        with pytest.raises(dc.TapeError):
            dc.backward(dc.Tape())

    def test_seed_shape_checked(self):
        tape, _ = dc.forward(lambda p: p["x"] * 2.0, {"x": np.ones(3)})
        with pytest.raises(dc.ShapeError):
            dc.backward(tape, seed=np.ones(2))

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 4))

        def f(p):
            return dc.sum_(dc.tanh(dc.matmul(p["x"], np.ones((4, 2)))))

        def g(p):
            return dc.sum_(dc.exp(p["x"] * 0.3))

        a, b = 1.7, -0.4
        tape, _ = dc.forward(lambda p: f(p) * a + g(p) * b, {"x": x})
        combined = dc.backward(tape)["x"]
        tf, _ = dc.forward(f, {"x": x})
        tg, _ = dc.forward(g, {"x": x})
        np.testing.assert_allclose(combined, a * dc.backward(tf)["x"] + b * dc.backward(tg)["x"],
                                   atol=1e-10)

    def test_unused_input_gets_zero(self):
        tape, _ = dc.forward(lambda p: dc.sum_(p["x"]), {"x": np.ones(2), "y": np.ones(3)})
        np.testing.assert_array_equal(dc.backward(tape)["y"], np.zeros(3))


class TestGradCheck:
    def test_quadratic(self):
        err = dc.grad_check(lambda p: p["x"] * p["x"], {"x": np.array(3.0)}, step=1e-4)
        assert err < 1e-6

    def test_constant(self):
        assert dc.grad_check(lambda p: dc.sum_(p["x"] * 0.0) + 5.0, {"x": np.ones(3)}) == 0.0

    def test_step_range(self):
        with pytest.raises(ValueError):
            dc.grad_check(lambda p: dc.sum_(p["x"]), {"x": np.ones(2)}, step=1e-2)

    def test_non_scalar(self):
        with pytest.raises(dc.ShapeError):
            dc.grad_check(lambda p: p["x"] * 2.0, {"x": np.ones(2)})

    UNARY = {
        "exp": dc.exp,
        "log": lambda x: dc.log(x * x + 1.0),
        "tanh": dc.tanh,
        "sigmoid": dc.sigmoid,
        "relu": dc.relu,
        "leaky_relu": dc.leaky_relu,
        "elu": dc.elu,
        "softmax": lambda x: dc.softmax(x, axis=-1),
        "mean": lambda x: dc.mean(x, axis=0),
        "sum_keep": lambda x: dc.sum_(x, axis=1, keepdims=True),
        "reshape": lambda x: dc.reshape(x, (-1,)),
        "transpose": dc.transpose,
        "getitem": lambda x: x[np.array([0, 2, 2])],
        "concat": lambda x: dc.concat([x, x * 2.0], axis=1),
        "pow": lambda x: dc.pow_(x * x + 0.5, 1.5),
        "clip": lambda x: dc.clip(x, -0.5, 0.5),
        "div": lambda x: x / (x * x + 2.0),
        "broadcast_rows": lambda x: dc.broadcast_rows(x[0], 4),
    }

    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_primitive_ops(self, name):
        rng = np.random.default_rng(sorted(self.UNARY).index(name))
        worst = 0.0
        for _ in range(20):
            x = rng.normal(size=(3, 4))
            # keep kinks out of the finite-difference stencil
            x[np.abs(x) < 1e-3] += 0.01
            if name == "clip":
                x[np.abs(np.abs(x) - 0.5) < 1e-3] += 0.01
            worst = max(worst, dc.grad_check(_scalar(self.UNARY[name]), {"x": x}, step=1e-4))
        assert worst < 1e-5

    def test_matmul_shapes(self):
        rng = np.random.default_rng(3)
        for sa, sb in [((3, 4), (4, 2)), ((4,), (4, 2)), ((3, 4), (4,)), ((2, 3, 4), (4, 5)),
                       ((4,), (4,))]:
            pt = {"a": rng.normal(size=sa), "b": rng.normal(size=sb)}
            err = dc.grad_check(lambda p: dc.sum_(dc.tanh(dc.matmul(p["a"], p["b"]))), pt)
            assert err < 1e-5, (sa, sb)

    def test_conv1d(self):
        rng = np.random.default_rng(4)
        pt = {"x": rng.normal(size=(2, 3, 11)), "w": rng.normal(size=(4, 3, 3)),
              "b": rng.normal(size=4)}
        for stride in (1, 2):
            err = dc.grad_check(lambda p: dc.sum_(dc.tanh(dc.conv1d(p["x"], p["w"], p["b"], stride))), pt)
            assert err < 1e-5

    @pytest.mark.parametrize("cell", ["gru", "lstm"])
    def test_recurrent_sequences(self, cell):
        rng = np.random.default_rng(5)
        d = 3
        width = 3 * d if cell == "gru" else 4 * d
        fn = dc.gru_sequence if cell == "gru" else dc.lstm_sequence
        pt = {"x": rng.normal(size=(2, 5, 4)), "wi": rng.normal(size=(4, width)) * 0.5,
              "wr": rng.normal(size=(d, width)) * 0.5}
        weights = rng.normal(size=(2, 5, d))
        err = dc.grad_check(lambda p: dc.sum_(fn(p["x"], p["wi"], p["wr"]) * weights), pt)
        assert err < 1e-5

    def test_binary_broadcast(self):
        rng = np.random.default_rng(6)
        pt = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,))}
        for op in (dc.add, dc.sub, dc.mul):
            assert dc.grad_check(lambda p: dc.sum_(dc.tanh(op(p["a"], p["b"]))), pt) < 1e-5
