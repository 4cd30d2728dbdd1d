import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nodeoed import autodiff as ad
from nodeoed.autodiff import ContractError, Tape, TapeError
from nodeoed.nn import (
    MLP,
    AdamState,
    adam_step,
    forward,
    gradient_check,
    loss_cce,
    loss_max,
    loss_mse,
)


def zero_model(sizes, output):
    model = MLP.init(sizes, output, 0)
    return MLP(sizes, output, {k: np.zeros_like(v) for k, v in model.params.items()})


class TestForward:
    def test_zero_identity(self):
        np.testing.assert_array_equal(forward(zero_model([3, 5, 2], "identity"), [1.0, -2.0, 3.0]), [0.0, 0.0])

    def test_zero_sigmoid(self):
        np.testing.assert_array_equal(forward(zero_model([3, 5, 4], "sigmoid"), [1.0, 2.0, 3.0]), 0.5)

    def test_single_affine(self):
        model = MLP([1, 1], "identity", {"W0": np.array([[2.0]]), "b0": np.array([1.0])})
        np.testing.assert_array_equal(forward(model, [3.0]), [7.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ContractError):
            forward(MLP.init([3, 2], rng=0), [1.0, 2.0])

    def test_layers_must_chain(self):
        with pytest.raises(ContractError):
            MLP([2, 3, 1], "identity", {"W0": np.zeros((3, 2)), "b0": np.zeros(3), "W1": np.zeros((1, 4)), "b1": np.zeros(1)})

    def test_output_ranges(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(6) * 5
        s = forward(MLP.init([6, 8, 4], "sigmoid", rng), x)
        assert np.all((s > 0) & (s < 1))
        p = forward(MLP.init([6, 8, 4], "softmax", rng), x)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1.0) < 1e-12

    def test_glorot_bounds(self):
        model = MLP.init([30, 50, 20], rng=3)
        assert np.all(np.abs(model.params["W0"]) <= math.sqrt(6 / 80))
        assert np.all(model.params["b0"] == 0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=20))
def test_softmax_normalised(logits):
    p = ad.softmax(np.array([logits]))
    assert abs(p.sum() - 1.0) < 1e-12


class TestLosses:
    @pytest.mark.parametrize(
        "p, t, expected",
        [([1, 2], [1, 2], 0.0), ([0, 0], [3, 4], 25.0), ([1, 1, 1], [0, 2, 1], 2.0)],
    )
    def test_mse(self, p, t, expected):
        assert loss_mse(np.array(p, float), np.array(t, float)) == expected

    @pytest.mark.parametrize(
        "p, t, expected",
        [([0, 0], [3, 4], 16.0), ([1], [1], 0.0), ([0, 0, 0], [1, -2, 1], 4.0)],
    )
    def test_max(self, p, t, expected):
        assert loss_max(np.array(p, float), np.array(t, float)) == expected

    def test_max_empty(self):
        with pytest.raises(ContractError):
            loss_max(np.array([]), np.array([]))

    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            loss_mse(np.zeros(2), np.zeros(3))

    def test_cce_values(self):
        onehot = np.eye(10)[3]
        assert loss_cce(onehot, onehot) == 0.0
        assert abs(loss_cce(np.full(10, 0.1), onehot) - math.log(10)) < 1e-12
        p = np.full(10, 0.5 / 9)
        p[3] = 0.5
        np.testing.assert_allclose(loss_cce(p, onehot), math.log(2), rtol=1e-12)

    def test_cce_clamped(self):
        p = np.eye(10)[0]
        assert np.isclose(loss_cce(p, np.eye(10)[1]), -math.log(1e-12))

    def test_cce_requires_onehot(self):
        with pytest.raises(ContractError):
            loss_cce(np.full(10, 0.1), np.full(10, 0.1))

    def test_max_ties_lowest_index(self):
        tape = Tape()
        p = tape.leaf(np.array([[1.0, -1.0, 0.0]]), "p")
        g = tape.backward(ad.total(ad.max_sq(p)))["p"]
        np.testing.assert_array_equal(g, [[2.0, 0.0, 0.0]])


class TestBackward:
    def test_constant_loss(self):
        tape = Tape()
        w = tape.leaf(np.array([1.0, 2.0]), "w")
        loss = ad.add(ad.scale(ad.total(w), 0.0), 3.0)
        np.testing.assert_array_equal(tape.backward(loss)["w"], 0.0)

    def test_scalar_chain_rule(self):
        w, x, t = 1.5, 2.0, 0.5
        tape = Tape()
        wv = tape.leaf(np.array([w]), "w")
        r = ad.sub(ad.scale(wv, x), t)
        g = tape.backward(ad.total(ad.mul(r, r)))["w"]
        np.testing.assert_allclose(g, [2 * (w * x - t) * x])

    def test_tape_reuse(self):
        tape = Tape()
        w = tape.leaf(np.ones(2), "w")
        loss = ad.total(w)
        tape.backward(loss)
        with pytest.raises(TapeError):
            tape.backward(loss)

    def test_relu_zero_derivative(self):
        tape = Tape()
        x = tape.leaf(np.array([0.0, 1.0, -1.0]), "x")
        np.testing.assert_array_equal(tape.backward(ad.total(ad.relu(x)))["x"], [0.0, 1.0, 0.0])

    def test_plain_arrays_pass_through(self):
        out = ad.affine(np.ones((2, 3)), np.ones((4, 3)), np.zeros(4))
        assert isinstance(out, np.ndarray)
        np.testing.assert_array_equal(out, 3.0)


class TestGradientCheck:
    def test_linear_function(self):
        c = np.array([1.0, -2.0, 0.5])
        report = gradient_check(lambda v: ad.total(ad.mul(v["x"], c)), {"x": np.array([0.3, 0.1, -0.7])})
        assert report.max_error < 1e-9

    def test_mlp_exponential_inputs(self):
        rng = np.random.default_rng(0)
        model = MLP.init([3, 256, 2], "identity", rng)
        x = np.concatenate([rng.random((16, 3))], axis=1)
        target = rng.random((16, 2))

        def f(v):
            return ad.mean(ad.sq_norm(ad.sub(model.apply(x, v), target)))

        assert gradient_check(f, model.params).passed(1e-5)

    def test_bilinear_query(self):
        images = np.random.default_rng(2).random((2, 5, 5))

        def f(v):
            return ad.total(ad.gather_bilinear(images, v["q"]))

        assert gradient_check(f, {"q": np.array([[1.3, 2.6], [3.2, 0.45]])}).passed(1e-5)

    def test_detects_wrong_gradient(self):
        def bad(v):
            x = v["x"]
            out = ad._record(ad._tape_of(x), ad.value_of(x) ** 2, (x,), lambda g: (g * ad.value_of(x),))
            return ad.total(out)

        assert not gradient_check(bad, {"x": np.array([1.0, 2.0])}).passed(1e-3)


class TestAdam:
    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(params, {"w": np.zeros(2)}, AdamState(0.1))
        np.testing.assert_array_equal(new["w"], params["w"])
        assert state.step == 1

    def test_single_step(self):
        new, _ = adam_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, AdamState(0.1))
        np.testing.assert_allclose(new["w"], [-0.1 / (1 + 1e-8)], rtol=1e-15)

    def test_constant_gradient_limit(self):
        # closed form: m_hat = g and v_hat = g^2 for a constant gradient at every step
        state = AdamState(0.01)
        params = {"w": np.array([0.0])}
        for t in range(1, 2001):
            prev = params["w"].copy()
            params, state = adam_step(params, {"w": np.array([3.0])}, state)
            assert state.step == t
        assert abs(abs(params["w"][0] - prev[0]) - 0.01) < 1e-9

    def test_nonfinite_gradient_names_group(self):
        state = AdamState(0.1, name="design")
        with pytest.raises(FloatingPointError, match="design"):
            adam_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, state)
        assert state.step == 0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(0.1))

    def test_deterministic(self):
        def trajectory():
            rng = np.random.default_rng(5)
            params, state = {"w": rng.standard_normal(4)}, AdamState(0.05)
            for _ in range(50):
                params, state = adam_step(params, {"w": np.sin(params["w"]) + rng.standard_normal(4)}, state)
            return params["w"]

        assert trajectory().tobytes() == trajectory().tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mlp_gradients_property(seed):
    rng = np.random.default_rng(seed)
    model = MLP.init([3, 7, 2], "sigmoid", rng)
    x = rng.standard_normal((4, 3))
    # keep pre-activations away from the ReLU kink
    pre = x @ model.params["W0"].T
    if np.min(np.abs(pre)) < 1e-3:
        return
    target = rng.random((4, 2))

    def f(v):
        return ad.mean(ad.sq_norm(ad.sub(model.apply(x, v), target)))

    assert gradient_check(f, model.params).passed(1e-5)
