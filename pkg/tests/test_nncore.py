"""Tests for nncore module."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dataset import ShapeError
from nncore import (
    MLP,
    Activation,
    AdamState,
    CheckpointError,
    ForwardCache,
    LearningRateSchedule,
    MLPSpec,
    NonFiniteGradientError,
    ParamStore,
    activate,
    adam_step,
    backward,
    decode_checkpoint,
    encode_checkpoint,
    init_params,
    load_checkpoint,
    mlp_forward,
    param_count,
    save_checkpoint,
)
from odegen import make_rng


def numeric_gradient(loss, flat: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        up = loss()
        flat[i] = saved - eps
        down = loss()
        flat[i] = saved
        grad[i] = (up - down) / (2 * eps)
    return grad


# =============================================================================
# Activation and Spec Tests
# =============================================================================


class TestActivations:
    def test_parse_aliases(self):
        assert Activation.parse("LeakyReLU") == Activation.LEAKY_RELU
        assert Activation.parse("ReLU") == Activation.RELU
        assert Activation.parse("Softplus") == Activation.SOFTPLUS
        assert Activation.parse(Activation.TANH) == Activation.TANH

    def test_parse_unknown(self):
        with pytest.raises(ValueError, match="unknown activation"):
            Activation.parse("swish")

    @pytest.mark.parametrize("kind", [Activation.TANH, Activation.RELU, Activation.LEAKY_RELU])
    def test_zero_fixed_point(self, kind):
        assert activate(kind, np.zeros(3)).tolist() == [0.0, 0.0, 0.0]

    def test_leaky_relu_slope(self):
        np.testing.assert_allclose(activate(Activation.LEAKY_RELU, np.array([-2.0, 3.0])), [-0.02, 3.0])

    def test_softplus_is_stable(self):
        out = activate(Activation.SOFTPLUS, np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_allclose(out, [0.0, np.log(2.0), 800.0])


class TestMLPSpec:
    def test_param_count_fully_connected(self):
        assert param_count(MLPSpec((30, 400, 400, 29))) == 184429

    def test_param_count_small(self):
        assert param_count(MLPSpec((2, 2))) == 6

    def test_param_count_operator_network(self):
        branch = MLPSpec((29, 150, 150, 150, 150, 1160))
        trunk = MLPSpec((1, 150, 150, 150, 150, 150, 150, 150, 1160))
        assert param_count(branch) + param_count(trunk) == 558970

    def test_rejects_single_layer(self):
        with pytest.raises(ValueError):
            MLPSpec((3,))

    def test_rejects_zero_width(self):
        with pytest.raises(ValueError):
            MLPSpec((3, 0, 2))

    def test_dict_round_trip(self):
        spec = MLPSpec((3, 8, 2), Activation.LEAKY_RELU)
        assert MLPSpec.from_dict(spec.to_dict()) == spec

    @settings(max_examples=100, deadline=None)
    @given(sizes=st.lists(st.integers(min_value=1, max_value=64), min_size=2, max_size=6))
    def test_param_count_matches_store(self, sizes):
        spec = MLPSpec(tuple(sizes))
        store = ParamStore(spec)
        assert param_count(spec) == store.total_count
        assert store.total_count == sum(w.size for w in store.weights) + sum(b.size for b in store.biases)


# =============================================================================
# Forward Tests
# =============================================================================


class TestForward:
    def test_zero_parameters(self):
        spec = MLPSpec((4, 6, 6, 3), Activation.TANH)
        out = mlp_forward(spec, ParamStore(spec), np.ones((5, 4)))
        np.testing.assert_array_equal(out, 0.0)

    def test_affine(self):
        spec = MLPSpec((1, 1), Activation.IDENTITY)
        params = ParamStore(spec)
        params.weights[0][...] = 2.0
        params.biases[0][...] = 1.0
        assert mlp_forward(spec, params, np.array([[3.0]]))[0, 0] == 7.0

    def test_tanh_hidden_layer(self):
        spec = MLPSpec((1, 1, 1), Activation.TANH)
        params = ParamStore(spec)
        params.flat[...] = [1.0, 0.0, 1.0, 0.0]
        out = mlp_forward(spec, params, np.array([[0.5]]))
        assert out[0, 0] == pytest.approx(0.462117, abs=1e-6)

    def test_layout_is_weights_then_biases(self):
        spec = MLPSpec((2, 3, 1))
        params = ParamStore(spec, np.arange(13, dtype=np.float64))
        np.testing.assert_array_equal(params.weights[0], [[0, 1, 2], [3, 4, 5]])
        np.testing.assert_array_equal(params.biases[0], [6, 7, 8])
        np.testing.assert_array_equal(params.weights[1], [[9], [10], [11]])
        np.testing.assert_array_equal(params.biases[1], [12])

    def test_store_aliases_buffer(self):
        spec = MLPSpec((2, 2))
        flat = np.zeros(6)
        params = ParamStore(spec, flat)
        params.biases[0][1] = 4.0
        assert flat[5] == 4.0

    def test_wrong_buffer_length(self):
        with pytest.raises(ShapeError):
            ParamStore(MLPSpec((2, 2)), np.zeros(5))

    @pytest.mark.parametrize("kind", list(Activation))
    def test_rows_are_independent(self, kind):
        spec = MLPSpec((3, 6, 4, 2), kind)
        params = init_params(spec, make_rng(5))
        x = make_rng(6).normal(size=(9, 3))
        perm = make_rng(7).permutation(9)
        out = mlp_forward(spec, params, x)
        np.testing.assert_allclose(mlp_forward(spec, params, x[perm]), out[perm], rtol=1e-13, atol=1e-15)

    def test_wrong_input_width(self):
        spec = MLPSpec((3, 2))
        with pytest.raises(ShapeError):
            mlp_forward(spec, ParamStore(spec), np.ones((4, 2)))

    def test_init_is_seeded_and_bounded(self):
        spec = MLPSpec((16, 8, 2))
        a = init_params(spec, make_rng(1))
        b = init_params(spec, make_rng(1))
        assert a.flat.tobytes() == b.flat.tobytes()
        assert np.all(np.abs(a.weights[0]) <= 0.25)
        assert np.all(np.abs(a.weights[1]) <= 1 / np.sqrt(8))


# =============================================================================
# Backward Tests
# =============================================================================


class TestBackward:
    def test_affine_gradient(self):
        spec = MLPSpec((1, 1), Activation.IDENTITY)
        params = ParamStore(spec)
        params.weights[0][...] = 2.0
        grads, dx = backward(spec, params, np.array([[3.0]]), np.array([[1.0]]))
        assert grads.weights[0][0, 0] == 3.0
        assert grads.biases[0][0] == 1.0
        assert dx[0, 0] == 2.0

    def test_zero_upstream(self):
        spec = MLPSpec((3, 5, 2))
        params = init_params(spec, make_rng(0))
        grads, _ = backward(spec, params, np.ones((4, 3)), np.zeros((4, 2)))
        np.testing.assert_array_equal(grads.flat, 0.0)

    def test_accumulates(self):
        spec = MLPSpec((3, 4, 2))
        params = init_params(spec, make_rng(2))
        x = make_rng(3).normal(size=(5, 3))
        g = np.ones((5, 2))
        once, _ = backward(spec, params, x, g)
        twice = params.zeros_like()
        backward(spec, params, x, g, grads=twice)
        backward(spec, params, x, g, grads=twice)
        np.testing.assert_allclose(twice.flat, 2 * once.flat)

    def test_upstream_shape_mismatch(self):
        spec = MLPSpec((3, 2))
        with pytest.raises(ShapeError):
            backward(spec, ParamStore(spec), np.ones((4, 3)), np.ones((4, 3)))

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("kind", list(Activation))
    def test_finite_differences(self, seed, kind):
        spec = MLPSpec((3, 7, 5, 2), kind)
        params = init_params(spec, make_rng(seed))
        rng = make_rng(seed + 100)
        x = rng.normal(size=(6, 3))
        target = rng.normal(size=(6, 2))

        def loss():
            return float(np.sum((mlp_forward(spec, params, x) - target) ** 2))

        cache = ForwardCache()
        out = mlp_forward(spec, params, x, cache)
        grads, dx = backward(spec, params, x, 2 * (out - target), cache)
        numeric = numeric_gradient(loss, params.flat)
        scale = np.max(np.abs(numeric))
        assert np.max(np.abs(grads.flat - numeric)) / scale < 1e-5

        numeric_x = numeric_gradient(loss, x.reshape(-1)).reshape(x.shape)
        assert np.max(np.abs(dx - numeric_x)) / np.max(np.abs(numeric_x)) < 1e-5

    def test_mlp_wrapper(self):
        spec = MLPSpec((2, 3, 1))
        net = MLP(spec, init_params(spec, make_rng(4)))
        x = np.ones((2, 2))
        np.testing.assert_array_equal(net(x), mlp_forward(spec, net.params, x))
        grads, _ = net.backward(x, np.ones((2, 1)))
        assert grads.total_count == param_count(spec)


# =============================================================================
# Adam Tests
# =============================================================================


class TestAdam:
    @pytest.mark.parametrize("g", [0.5, -3.0, 0.1])
    def test_first_step_moves_by_learning_rate(self, g):
        state = AdamState.create(1, LearningRateSchedule(1e-3))
        params = np.array([1.0])
        adam_step(state, params, np.array([g]))
        assert params[0] == pytest.approx(1.0 - 1e-3 * np.sign(g), abs=1e-9)
        assert state.t == 1

    def test_zero_gradient(self):
        state = AdamState.create(3, LearningRateSchedule(1e-3))
        params = np.array([1.0, 2.0, 3.0])
        adam_step(state, params, np.zeros(3))
        np.testing.assert_array_equal(params, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(state.m, 0.0)
        np.testing.assert_array_equal(state.v, 0.0)

    def test_non_finite_gradient(self):
        state = AdamState.create(2, LearningRateSchedule(1e-3))
        params = np.zeros(2)
        with pytest.raises(NonFiniteGradientError):
            adam_step(state, params, np.array([np.nan, 0.0]))
        np.testing.assert_array_equal(params, 0.0)
        assert state.t == 0

    def test_shape_mismatch(self):
        state = AdamState.create(2, LearningRateSchedule(1e-3))
        with pytest.raises(ShapeError):
            adam_step(state, np.zeros(3), np.zeros(3))

    def test_decay_schedule(self):
        schedule = LearningRateSchedule(5e-3, floor=1e-5, final_epoch=99)
        assert schedule.at(0) == pytest.approx(5e-3)
        assert schedule.at(99) == pytest.approx(1e-5)
        assert schedule.at(500) == pytest.approx(1e-5)
        assert 1e-5 < schedule.at(50) < 5e-3

    def test_constant_schedule(self):
        schedule = LearningRateSchedule(2e-3)
        assert schedule.at(0) == schedule.at(1000) == 2e-3

    def test_minimizes_quadratic(self):
        state = AdamState.create(2, LearningRateSchedule(0.05))
        params = np.array([3.0, -2.0])
        for _ in range(500):
            adam_step(state, params, 2 * params)
        assert np.max(np.abs(params)) < 0.1


# =============================================================================
# Checkpoint Tests
# =============================================================================


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        spec = MLPSpec((3, 4, 2), Activation.RELU)
        params = init_params(spec, make_rng(9))
        save_checkpoint(tmp_path / "net.ckpt", params.flat, seed=9, epoch=12, spec=spec)
        header, values = load_checkpoint(tmp_path / "net.ckpt")
        assert values.tobytes() == params.flat.tobytes()
        assert header["seed"] == 9 and header["epoch"] == 12
        assert MLPSpec.from_dict(header["spec"]) == spec
        assert header["n_values"] == param_count(spec)

    def test_raw_array_keeps_shape(self, tmp_path):
        coeffs = np.arange(12.0).reshape(4, 3)
        save_checkpoint(tmp_path / "c.ckpt", coeffs, seed=1, epoch=0, shape=(4, 3))
        _, values = load_checkpoint(tmp_path / "c.ckpt")
        np.testing.assert_array_equal(values, coeffs)

    def test_bad_magic(self):
        data = bytearray(encode_checkpoint({}, np.zeros(2)))
        data[:8] = b"CODESDS1"
        with pytest.raises(CheckpointError, match="bad magic"):
            decode_checkpoint(bytes(data))

    def test_truncated(self):
        data = encode_checkpoint({}, np.zeros(4))
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[:-1])
