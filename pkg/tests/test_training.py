import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saconvnet.errors import ContractError, InputError, TrainingError
from saconvnet.nn import ModelConfig, SAConvNet
from saconvnet.tensor import GradTape, Tensor
from saconvnet.training import (
    AdamState,
    TrainConfig,
    adam_step,
    class_weights,
    cross_entropy,
    cross_entropy_from_logits,
    lr_schedule,
    predict_proba,
    train,
)

SMALL = ModelConfig(input_h=6, input_w=8, total_filters_per_block=6, attn_channels=2, d_k=2)


def small_problem(n=24, seed=0):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, 6, 8, 2))
    y = (np.arange(n) % 4 == 0).astype(int)
    x[y == 1, 2:4, 2:5, :] += 4.0
    return x, y


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        cfg = TrainConfig()
        assert lr_schedule(0, cfg) == 1e-2
        assert lr_schedule(100, cfg) == pytest.approx(1e-4, abs=1e-18)
        assert lr_schedule(50, cfg) == pytest.approx((1e-2 + 1e-4) / 2, abs=1e-15)
        assert lr_schedule(50, cfg) == pytest.approx(5.05e-3, abs=1e-15)

    @pytest.mark.parametrize("epoch", [-1, 101])
    def test_out_of_range(self, epoch):
        with pytest.raises(ContractError):
            lr_schedule(epoch, TrainConfig())

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 500), st.data())
    def test_non_increasing_and_bounded(self, epochs, data):
        cfg = TrainConfig(epochs=epochs)
        e = data.draw(st.integers(0, epochs - 1))
        a, b = lr_schedule(e, cfg), lr_schedule(e + 1, cfg)
        assert b <= a
        assert cfg.lr_min - 1e-18 <= b and a <= cfg.lr_max

    def test_config_invariants(self):
        with pytest.raises(Exception):
            TrainConfig(lr_min=1.0, lr_max=0.1)
        with pytest.raises(Exception):
            TrainConfig(epochs=0)
        with pytest.raises(Exception):
            TrainConfig(batch_size=0)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert cross_entropy(Tensor(np.eye(2)), [0, 1], [1, 1]).item() == 0.0

    def test_uniform_prediction(self):
        assert cross_entropy(Tensor(np.full((3, 2), 0.5)), [0, 1, 1], [1, 1]).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_worked_batch(self):
        expected = -(math.log(0.9) + math.log(0.8)) / 2
        assert expected == pytest.approx(0.1643, abs=5e-5)
        loss = cross_entropy(Tensor(np.array([[0.9, 0.1], [0.2, 0.8]])), [0, 1], [1, 1])
        assert loss.item() == pytest.approx(expected, abs=1e-15)

    def test_clamped_at_zero_probability(self):
        loss = cross_entropy(Tensor(np.array([[1.0, 0.0]])), [1], [1, 1]).item()
        assert loss == pytest.approx(-math.log(1e-12))

    def test_bad_target(self):
        with pytest.raises(InputError):
            cross_entropy(Tensor(np.full((1, 2), 0.5)), [2], [1, 1])

    def test_rows_must_be_distributions(self):
        with pytest.raises(InputError):
            cross_entropy(Tensor(np.array([[0.5, 0.6]])), [0], [1, 1])

    def test_minority_sample_counts_19x(self):
        y = np.array([0] * 95 + [1] * 5)
        w = class_weights(y)
        assert w.tolist() == pytest.approx([100 / 190, 10.0])
        assert w[1] / w[0] == pytest.approx(19.0)
        p = Tensor(np.full((1, 2), 0.5))
        ratio = cross_entropy(p, [1], w).item() / cross_entropy(p, [0], w).item()
        assert ratio == pytest.approx(19.0)

    def test_gradient_matches_finite_differences(self, rng):
        logits = rng.standard_normal((4, 2))
        target, w = np.array([0, 1, 1, 0]), np.array([0.7, 3.0])

        def loss_of(z):
            e = np.exp(z - z.max(1, keepdims=True))
            return cross_entropy(Tensor(e / e.sum(1, keepdims=True)), target, w).item()

        from saconvnet.tensor import softmax

        tape = GradTape()
        z = tape.watch(logits, "z")
        g = tape.backward(cross_entropy(softmax(z), target, w))["z"]
        from conftest import assert_grad_close, numeric_grad

        assert_grad_close(g, numeric_grad(loss_of, logits))


class TestLogitLoss:
    def test_value_matches_composed_form(self, rng):
        z = rng.standard_normal((6, 2)) * 5
        y, w = np.array([0, 1, 1, 0, 1, 0]), np.array([0.6, 2.5])
        e = np.exp(z - z.max(1, keepdims=True))
        composed = cross_entropy(Tensor(e / e.sum(1, keepdims=True)), y, w).item()
        assert cross_entropy_from_logits(Tensor(z), y, w).item() == pytest.approx(composed, rel=1e-13)

    def test_gradient_matches_finite_differences(self, rng):
        from conftest import check_op_gradients

        y, w = np.array([1, 0, 1]), np.array([0.8, 4.0])
        check_op_gradients(lambda z: cross_entropy_from_logits(z, y, w), rng.standard_normal((3, 2)))

    def test_saturated_target_still_has_gradient(self):
        tape = GradTape()
        z = tape.watch(np.array([[50.0, -50.0]]), "z")
        loss = cross_entropy_from_logits(z, [1], [1.0, 1.0])
        assert loss.item() == pytest.approx(-math.log(1e-12))
        np.testing.assert_allclose(tape.backward(loss)["z"], [[1.0, -1.0]], atol=1e-12)

    def test_bad_target(self):
        with pytest.raises(InputError):
            cross_entropy_from_logits(Tensor(np.zeros((1, 2))), [3], [1, 1])


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        p = {"w": rng.standard_normal(5)}
        before = p["w"].copy()
        adam_step(p, {"w": np.zeros(5)}, AdamState.zeros_like(p), 1e-2)
        assert np.array_equal(p["w"], before)

    @pytest.mark.parametrize("g", [1e-6, 0.3, 250.0, -4.0])
    def test_first_step_is_lr_sized(self, g):
        p = {"w": np.zeros(3)}
        adam_step(p, {"w": np.full(3, g)}, AdamState.zeros_like(p), 1e-2)
        # m_hat = g, v_hat = g^2 at t=1, so the step is lr * |g| / (|g| + eps)
        np.testing.assert_allclose(-p["w"] * np.sign(g), 1e-2 * abs(g) / (abs(g) + 1e-8), rtol=1e-12)

    def test_non_finite_gradient_names_parameter(self):
        p = {"a": np.zeros(2), "layer.w": np.zeros(2)}
        state = AdamState.zeros_like(p)
        with pytest.raises(TrainingError, match="layer.w"):
            adam_step(p, {"a": np.zeros(2), "layer.w": np.array([0.0, np.nan])}, state, 1e-2)
        assert state.t == 0 and not p["a"].any()

    def test_identical_optimizers_stay_identical(self, rng):
        p1 = {"w": rng.standard_normal((3, 3))}
        p2 = {"w": p1["w"].copy()}
        s1, s2 = AdamState.zeros_like(p1), AdamState.zeros_like(p2)
        for _ in range(5):
            g = rng.standard_normal((3, 3))
            adam_step(p1, {"w": g}, s1, 1e-3)
            adam_step(p2, {"w": g.copy()}, s2, 1e-3)
        assert np.array_equal(p1["w"], p2["w"]) and s1.t == s2.t == 5


class TestTrain:
    def test_single_class_refused(self):
        x, _ = small_problem()
        with pytest.raises(TrainingError, match="single class"):
            train(SAConvNet.create(SMALL), x, np.zeros(len(x), int), TrainConfig(epochs=1))

    def test_bit_exact_rerun(self):
        x, y = small_problem()
        cfg = TrainConfig(epochs=3, batch_size=8, seed=11)
        a = train(SAConvNet.create(SMALL, seed=1), x, y, cfg)
        b = train(SAConvNet.create(SMALL, seed=1), x, y, cfg)
        assert a.log_lines() == b.log_lines()
        assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)

    def test_does_not_touch_input_model(self):
        x, y = small_problem()
        model = SAConvNet.create(SMALL, seed=1)
        before = {k: v.copy() for k, v in model.params.items()}
        train(model, x, y, TrainConfig(epochs=1, batch_size=8))
        assert all(np.array_equal(before[k], model.params[k]) for k in before)

    def test_log_records(self):
        x, y = small_problem()
        seen = []
        res = train(SAConvNet.create(SMALL), x, y, TrainConfig(epochs=4, batch_size=10), on_epoch=seen.append)
        assert [r.epoch for r in res.history] == [1, 2, 3, 4] and seen == res.history
        assert [r.lr for r in res.history] == [lr_schedule(e, TrainConfig(epochs=4)) for e in range(4)]
        assert res.history[0].to_json().startswith('{"epoch": 1, "lr": 0.01')

    def test_starts_near_weighted_ln2(self):
        x, y = small_problem()
        model = SAConvNet.create(SMALL)
        model.params["dense.w"][...] = 0.0
        p = predict_proba(model, x)
        w = class_weights(y)
        start = cross_entropy(Tensor(p), y, w).item()
        assert start == pytest.approx(np.mean(w[y]) * math.log(2), rel=1e-12)

    def test_learns_small_separable_problem(self):
        x, y = small_problem(n=32)
        res = train(SAConvNet.create(SMALL, seed=0), x, y, TrainConfig(epochs=30, batch_size=8, seed=0))
        assert res.history[-1].loss < res.history[0].loss
        assert np.array_equal(predict_proba(res.model, x).argmax(1), y)
