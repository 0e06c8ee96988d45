import numpy as np
import pytest

from celltwin.errors import FormatError, ShapeError, TrainingError
from celltwin.nn import (
    MLP,
    ParamStore,
    add_grad,
    finite_difference_check,
    mse_loss,
    softmax,
    softmax_backward,
)


class TestForward:
    def test_identity_network(self):
        store = ParamStore()
        net = MLP(store, "net", (3, 3), output_activation="linear")
        store.set("net/W0", np.eye(3))
        store.set("net/b0", np.zeros(3))
        x = np.array([[1.0, -2.0, 0.5]])
        out, _ = net.forward(x)
        assert np.array_equal(out, x)

    def test_zero_weights_yield_activated_bias(self):
        store = ParamStore()
        net = MLP(store, "net", (4, 2), output_activation="tanh")
        store.set("net/W0", np.zeros((2, 4)))
        store.set("net/b0", np.array([0.5, -0.5]))
        out, _ = net.forward(np.ones((3, 4)))
        assert np.allclose(out, np.tanh([0.5, -0.5]))

    def test_two_layer_hand_computed(self):
        # x = [1, 2]; W0 = [[1, 1], [0, 1]], b0 = [0, -1]; relu
        # h = relu([3, 1]) = [3, 1]
        # W1 = [[2, -1]], b1 = [0.5] -> y = 6 - 1 + 0.5 = 5.5
        store = ParamStore()
        net = MLP(store, "net", (2, 2, 1), hidden_activation="relu")
        store.set("net/W0", np.array([[1.0, 1.0], [0.0, 1.0]]))
        store.set("net/b0", np.array([0.0, -1.0]))
        store.set("net/W1", np.array([[2.0, -1.0]]))
        store.set("net/b1", np.array([0.5]))
        out, _ = net.forward(np.array([[1.0, 2.0]]))
        assert out[0, 0] == pytest.approx(5.5, abs=1e-12)

    def test_shape_mismatch_names_network(self):
        store = ParamStore()
        net = MLP(store, "enc", (3, 2))
        with pytest.raises(ShapeError, match="enc"):
            net.forward(np.ones((1, 4)))


def _mse_closure(store, net, x, target):
    def loss_fn():
        out, cache = net.forward(x)
        loss, dout = mse_loss(out, target)
        grads = {}
        net.backward(cache, dout, grads)
        return loss, grads

    return loss_fn


class TestBackward:
    def test_matches_finite_differences_on_200_param_net(self):
        rng = np.random.default_rng(0)
        store = ParamStore()
        net = MLP(store, "net", (6, 12, 8, 2), hidden_activation="tanh", rng=rng)
        assert 150 <= store.n_params() <= 300
        x = rng.normal(size=(5, 6))
        target = rng.normal(size=(5, 2))
        err = finite_difference_check(store, _mse_closure(store, net, x, target))
        assert err < 1e-4

    def test_relu_path_finite_differences(self):
        rng = np.random.default_rng(1)
        store = ParamStore()
        net = MLP(store, "net", (4, 8, 3), hidden_activation="relu", rng=rng)
        x = rng.normal(size=(4, 4))
        target = rng.normal(size=(4, 3))
        err = finite_difference_check(store, _mse_closure(store, net, x, target))
        assert err < 1e-4

    def test_zero_upstream_gradient_gives_zero_grads(self):
        rng = np.random.default_rng(2)
        store = ParamStore()
        net = MLP(store, "net", (3, 5, 2), rng=rng)
        out, cache = net.forward(rng.normal(size=(2, 3)))
        grads = {}
        net.backward(cache, np.zeros_like(out), grads)
        assert all((g == 0).all() for g in grads.values())

    def test_frozen_gradients_computed_but_not_applied(self):
        rng = np.random.default_rng(3)
        store = ParamStore()
        net = MLP(store, "net", (3, 4, 2), rng=rng)
        store.freeze(["net/W0"])
        out, cache = net.forward(rng.normal(size=(2, 3)))
        grads = {}
        net.backward(cache, np.ones_like(out), grads)
        assert (grads["net/W0"] != 0).any()
        before = store["net/W0"].copy()
        store.adam_step(grads, lr=0.1)
        assert np.array_equal(store["net/W0"], before)
        assert not np.array_equal(store["net/W1"], np.zeros_like(store["net/W1"]))

    def test_corrupted_backward_fails_the_oracle(self):
        rng = np.random.default_rng(4)
        store = ParamStore()
        net = MLP(store, "net", (3, 4, 2), rng=rng)
        x = rng.normal(size=(3, 3))
        target = rng.normal(size=(3, 2))
        honest = _mse_closure(store, net, x, target)

        def corrupted():
            loss, grads = honest()
            grads["net/W1"] = grads["net/W1"] * 2.0
            return loss, grads

        assert finite_difference_check(store, corrupted, names=["net/W1"]) > 1e-2


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        probs = softmax(rng.normal(size=(10, 4)) * 5.0)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(3, 4))
        w = rng.normal(size=(3, 4))

        def f(lg):
            return float((softmax(lg) * w).sum())

        probs = softmax(logits)
        analytic = softmax_backward(probs, w)
        eps = 1e-6
        for i in range(3):
            for j in range(4):
                up = logits.copy()
                up[i, j] += eps
                down = logits.copy()
                down[i, j] -= eps
                fd = (f(up) - f(down)) / (2 * eps)
                assert fd == pytest.approx(analytic[i, j], abs=1e-6)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        store = ParamStore()
        store.add("w", np.array([1.0, -2.0, 3.0]))
        g = np.array([0.3, -0.7, 0.001])
        before = store["w"].copy()
        store.adam_step({"w": g}, lr=0.01)
        delta = store["w"] - before
        # Bias-corrected first step is -lr * g / (|g| + eps) ~= -lr * sign(g).
        assert np.allclose(delta, -0.01 * np.sign(g), atol=1e-5)

    def test_zero_gradient_zero_update(self):
        store = ParamStore()
        store.add("w", np.array([1.0, 2.0]))
        before = store["w"].copy()
        store.adam_step({"w": np.zeros(2)}, lr=0.5)
        assert np.array_equal(store["w"], before)

    def test_frozen_tensor_bit_exact(self):
        store = ParamStore()
        store.add("w", np.array([1.0, 2.0]), trainable=False)
        before = store["w"].copy()
        store.adam_step({"w": np.ones(2)}, lr=0.5)
        assert np.array_equal(store["w"], before)

    def test_nan_gradient_fails_fast(self):
        store = ParamStore()
        store.add("w", np.array([1.0]))
        with pytest.raises(TrainingError):
            store.adam_step({"w": np.array([np.nan])}, lr=0.1)

    def test_deterministic_trajectory(self):
        def run():
            rng = np.random.default_rng(7)
            store = ParamStore()
            net = MLP(store, "net", (2, 4, 1), rng=rng)
            x = rng.normal(size=(8, 2))
            y = rng.normal(size=(8, 1))
            for _ in range(20):
                out, cache = net.forward(x)
                loss, dout = mse_loss(out, y)
                grads = {}
                net.backward(cache, dout, grads)
                store.adam_step(grads, lr=0.01)
            return store["net/W0"].copy()

        assert np.array_equal(run(), run())


class TestFiniteDifferenceOracle:
    def test_quadratic_loss_analytic_gradient(self):
        store = ParamStore()
        store.add("theta", np.array([0.5, -1.5, 2.0]))

        def loss_fn():
            th = store["theta"]
            return float((th * th).sum()), {"theta": 2.0 * th}

        assert finite_difference_check(store, loss_fn) < 1e-7


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        store = ParamStore()
        MLP(store, "net", (3, 4, 2), rng=rng)
        store.freeze(["net/W0"])
        path = str(tmp_path / "ckpt.npz")
        store.save(path, manifest={"kind": "traffic"})
        back, manifest = ParamStore.load(path)
        assert manifest == {"kind": "traffic"}
        assert set(back.names()) == set(store.names())
        assert not back.is_trainable("net/W0")
        for name in store.names():
            assert np.array_equal(back[name], store[name])

    def test_shape_validation_on_load(self, tmp_path):
        store = ParamStore()
        store.add("w", np.zeros((2, 2)))
        path = str(tmp_path / "ckpt.npz")
        store.save(path)
        with pytest.raises(FormatError, match="w"):
            ParamStore.load(path, expect_shapes={"w": (3, 3)})

    def test_truncated_checkpoint(self, tmp_path):
        store = ParamStore()
        store.add("w", np.zeros(4))
        path = tmp_path / "ckpt.npz"
        store.save(str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError):
            ParamStore.load(str(path))


class TestGradAccumulation:
    def test_add_grad_accumulates(self):
        grads = {}
        add_grad(grads, "w", np.ones(3))
        add_grad(grads, "w", np.ones(3))
        assert np.array_equal(grads["w"], 2 * np.ones(3))
