import math

import numpy as np
import pytest

from nodeoed.autodiff import ContractError
from nodeoed.design import init_by_variance, project_to_box
from nodeoed.forward import make_phantoms
from nodeoed.problems import CTProblem, ExponentialProblem, ImageProblem
from nodeoed.trainer import (
    AdaptiveState,
    CheckpointError,
    MetricSummary,
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    evaluate,
    per_sample_metric,
    train_adaptive,
    train_baseline,
    train_node,
)


def exp_setup(**kw):
    base = dict(experiment="exponential", budget=3, epochs=60, batch_size=32, hidden=(16,), log_every=1)
    cfg = TrainConfig(**{**base, **kw})
    return cfg, ExponentialProblem(3, cfg.noise_sigma, cfg.hidden)


def image_setup(**kw):
    rng = np.random.default_rng(0)
    # smooth blobs with a location-dependent brightness so pixel variances differ
    imgs = np.clip(rng.random((60, 8, 8)) * np.linspace(0.1, 1, 64).reshape(8, 8), 0, 1)
    base = dict(experiment="image", budget=4, epochs=2, batch_size=16, hidden=(12,), lr_design=5e-2,
                noise_sigma=0.05, noise_kind="additive", init="variance")
    cfg = TrainConfig(**{**base, **kw})
    return cfg, ImageProblem(imgs[:40], imgs[40:], 4, "mse", hidden=cfg.hidden)


def ct_setup(**kw):
    rng = np.random.default_rng(1)
    base = dict(experiment="ct", budget=5, epochs=1, batch_size=8, hidden=(16,), lr_design=2e-3,
                noise_sigma=0.01, noise_kind="relative", init="uniform", n=16, rho=24)
    cfg = TrainConfig(**{**base, **kw})
    prob = CTProblem(make_phantoms(16, 16, rng), make_phantoms(4, 16, rng), 5, rho=24, hidden=cfg.hidden)
    return cfg, prob


class TestConfig:
    @pytest.mark.parametrize("field, value", [("lr_theta", 0.0), ("lr_design", -1.0), ("gamma", -0.1), ("batch_size", 0)])
    def test_invalid(self, field, value):
        with pytest.raises(ContractError):
            TrainConfig(**{field: value}).validate()

    def test_json_round_trip(self):
        cfg = TrainConfig(experiment="ct", hidden=(1024,), tau=math.pi, design=[0.1, 0.2])
        assert TrainConfig.from_json(cfg.to_json()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ContractError):
            TrainConfig.from_dict({"epochs": 3, "learning_rate": 0.1})


class TestTrainNode:
    def test_frozen_design(self):
        cfg, prob = exp_setup(lr_design=0.0)
        trace = train_node(cfg, prob)
        first = trace.designs[0]
        for d in trace.designs:
            np.testing.assert_array_equal(d, first)
        np.testing.assert_array_equal(trace.final_design.locations, trace.initial_design.locations)

    def test_design_moves(self):
        cfg, prob = exp_setup()
        trace = train_node(cfg, prob)
        assert not np.array_equal(trace.final_design.locations, trace.initial_design.locations)

    def test_seed_determinism(self):
        cfg, prob = exp_setup()
        a, b = train_node(cfg, prob), train_node(cfg, prob)
        assert a.losses == b.losses
        assert a.theta_checksum == b.theta_checksum
        assert a.final_design.locations.tobytes() == b.final_design.locations.tobytes()

    def test_different_seeds_differ(self):
        cfg, prob = exp_setup()
        assert train_node(cfg, prob).losses != train_node(cfg.replace(seed=1), prob).losses

    def test_steps_logged(self):
        cfg, prob = exp_setup(epochs=25)
        cfg = cfg.replace(log_every=10)
        assert train_node(cfg, prob).steps == [10, 20, 25]

    def test_snapshots_feasible(self):
        cfg, prob = exp_setup(lr_design=0.5)
        trace = train_node(cfg, prob)
        for d in trace.design_history():
            snap = trace.final_design.with_locations(d)
            np.testing.assert_array_equal(project_to_box(snap).locations, d)

    def test_gamma_zero_is_pure_risk(self):
        cfg, prob = exp_setup()
        trainer = Trainer(cfg, prob)
        loss, risk, _ = trainer.loss_and_grads(prob.batch(32, np.random.default_rng(0)))
        assert loss == risk

    def test_gamma_positive_adds_consistency(self):
        cfg, prob = exp_setup(gamma=0.5)
        trainer = Trainer(cfg, prob)
        loss, risk, _ = trainer.loss_and_grads(prob.batch(32, np.random.default_rng(0)))
        assert loss > risk

    def test_ct_gamma_zero_is_pure_risk(self):
        cfg, prob = ct_setup()
        trainer = Trainer(cfg, prob)
        loss, risk, _ = trainer.loss_and_grads(prob.train_images[:4])
        assert loss == risk

    def test_epoch_covers_dataset(self):
        cfg, prob = image_setup()
        trainer = Trainer(cfg, prob)
        assert trainer.steps_per_epoch == 3
        assert trainer.total_steps == 6

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_loss_settles_without_noise(self):
        cfg = TrainConfig(budget=3, epochs=1500, batch_size=256, noise_sigma=0.0, log_every=1)
        trace = train_node(cfg, ExponentialProblem(3, 0.0))
        losses = np.asarray(trace.losses)
        windows = [losses[s : s + 200] for s in range(500, 1500, 200)]
        # near the noise-free optimum Adam jitters, so a window's median may not climb above the previous window's spread
        for prev, cur in zip(windows, windows[1:]):
            assert np.median(cur) <= prev.max()
        assert np.median(windows[-1]) < 1e-2 * np.median(losses[:100])

    def test_nonfinite_loss_aborts_with_checkpoint(self, tmp_path):
        cfg, prob = exp_setup()

        class Broken(ExponentialProblem):
            def loss(self, *args, **kw):
                total, risk = super().loss(*args, **kw)
                return total * np.nan, risk

        trainer = Trainer(cfg, Broken(3, 0.05, (16,)))
        path = tmp_path / "last.bin"
        with pytest.raises(NonFiniteLossError):
            trainer.run(checkpoint_path=path)
        assert path.exists()


class TestBaselines:
    def test_variance_design_frozen(self):
        cfg, prob = image_setup()
        (trace,) = train_baseline(cfg, prob, "variance")
        expected = init_by_variance(prob.train_images, 4).locations
        for d in trace.designs:
            np.testing.assert_array_equal(d, expected)
        np.testing.assert_array_equal(trace.final_design.locations, expected)

    def test_random_repeats_distinct(self):
        cfg, prob = image_setup(repeats=3)
        traces = train_baseline(cfg, prob, "random")
        assert len(traces) == 3
        keys = {t.final_design.locations.tobytes() for t in traces}
        assert len(keys) == 3
        for t in traces:
            np.testing.assert_array_equal(t.final_design.locations, t.initial_design.locations)

    def test_unknown_kind(self):
        cfg, prob = image_setup()
        with pytest.raises(ContractError):
            train_baseline(cfg, prob, "greedy")


class TestCheckpoint:
    def test_resume_matches_uninterrupted(self, tmp_path):
        cfg, prob = exp_setup(epochs=110)
        straight = Trainer(cfg, prob)
        straight.run(110)
        first = Trainer(cfg, prob)
        first.run(100)
        first.save(tmp_path / "ck.bin")
        resumed = Trainer(cfg, prob).load(tmp_path / "ck.bin")
        resumed.run(10)
        assert resumed.step == 110
        assert resumed.model.checksum() == straight.model.checksum()
        assert resumed.design.locations.tobytes() == straight.design.locations.tobytes()
        assert resumed.trace.losses == straight.trace.losses

    def test_resume_with_permutation(self, tmp_path):
        cfg, prob = image_setup(epochs=3)
        straight = Trainer(cfg, prob)
        straight.run()
        first = Trainer(cfg, prob)
        first.run(4)
        first.save(tmp_path / "ck.bin")
        resumed = Trainer(cfg, prob).load(tmp_path / "ck.bin")
        resumed.run()
        assert resumed.model.checksum() == straight.model.checksum()
        assert resumed.design.locations.tobytes() == straight.design.locations.tobytes()

    def test_bad_magic(self, tmp_path):
        cfg, prob = exp_setup()
        trainer = Trainer(cfg, prob)
        trainer.save(tmp_path / "ck.bin")
        raw = bytearray((tmp_path / "ck.bin").read_bytes())
        raw[0] ^= 0xFF
        (tmp_path / "bad.bin").write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            trainer.load(tmp_path / "bad.bin")

    def test_shape_mismatch_leaves_state(self, tmp_path):
        cfg, prob = exp_setup()
        Trainer(cfg, prob).save(tmp_path / "ck.bin")
        other = Trainer(cfg.replace(hidden=(8,)), ExponentialProblem(3, 0.05, (8,)))
        before = other.model.checksum()
        with pytest.raises(CheckpointError):
            other.load(tmp_path / "ck.bin")
        assert other.model.checksum() == before
        assert other.step == 0

    def test_empty_path(self):
        cfg, prob = exp_setup()
        trainer = Trainer(cfg, prob)
        trainer.run(3)
        before = trainer.model.checksum()
        with pytest.raises(OSError):
            trainer.load("")
        assert trainer.model.checksum() == before and trainer.step == 3


class TestEvaluate:
    def test_perfect_reconstructor(self):
        class Oracle:
            def predict(self, model, design, rng=None):
                truth = np.random.default_rng(0).random((20, 9))
                return truth.copy(), truth

        summary = evaluate(None, None, Oracle(), "mse")
        np.testing.assert_array_equal(summary.values, 0.0)

    def test_random_classifier(self):
        rng = np.random.default_rng(3)
        labels = np.eye(10)[np.repeat(np.arange(10), 300)]
        guesses = rng.random(labels.shape)
        acc = per_sample_metric(guesses, labels, "accuracy").mean()
        assert abs(acc - 0.1) < 0.02

    def test_max_dominates_mean(self):
        rng = np.random.default_rng(4)
        p, t = rng.random((50, 30)), rng.random((50, 30))
        assert np.all(per_sample_metric(p, t, "max") >= per_sample_metric(p, t, "mse"))

    def test_summary(self):
        s = MetricSummary("mse", np.arange(11.0))
        d = s.to_dict()
        assert (d["mean"], d["median"], d["n"]) == (5.0, 5.0, 11)
        assert d["q25"] == 2.5

    def test_unknown_metric(self):
        with pytest.raises(ContractError):
            per_sample_metric(np.zeros((2, 2)), np.zeros((2, 2)), "psnr")

    def test_image_evaluation_shapes(self):
        cfg, prob = image_setup()
        trace = train_node(cfg, prob)
        s = evaluate(trace.model, trace.final_design, prob, "mse", rng=0)
        assert s.values.shape == (20,)
        assert np.all(s.values >= 0)


class TestAdaptive:
    def test_bookkeeping(self):
        cfg, prob = ct_setup(increment=5, rounds=2)
        rng = np.random.default_rng(0)
        truths = make_phantoms(3, 16, rng)
        w0 = np.mod(np.arange(1, 6) * math.pi / 5, math.pi)
        state = AdaptiveState.start(truths, w0, prob, rng, increment=5, max_rounds=2)
        assert state.measurements.shape == (3, 24, 5)
        state = train_adaptive(state, cfg, prob, rng)
        assert state.iteration == 2
        assert state.design.size == 15
        assert state.measurements.shape == (3, 24, 15)
        np.testing.assert_array_equal(state.design[:5], w0)
        assert len(state.medians) == 3 and len(state.traces) == 3
        # each round starts from the fixed n pi / 30 initialization
        for trace in state.traces[1:]:
            np.testing.assert_allclose(trace.initial_design.locations.ravel(), np.arange(1, 6) * math.pi / 30)

    def test_fresh_training_called_per_round(self):
        cfg, prob = ct_setup(increment=2, rounds=2)
        rng = np.random.default_rng(2)
        calls = []

        def fresh():
            calls.append(1)
            return make_phantoms(prob.dataset_size, 16, rng)

        state = AdaptiveState.start(make_phantoms(2, 16, rng), [0.5, 1.5], prob, rng, increment=2, max_rounds=2)
        state = train_adaptive(state, cfg, prob, rng, fresh_training=fresh)
        assert len(calls) == 2
        assert state.design.size == 6

    def test_with_past_replaces_training_images(self):
        _, prob = ct_setup()
        new = np.zeros_like(prob.train_images)
        rp = prob.with_past([0.3], budget=2, train_images=new)
        assert rp.train_images is not prob.train_images
        np.testing.assert_array_equal(rp.train_images, new)
        np.testing.assert_array_equal(rp.val_images, prob.val_images)

    def test_target_loss_stops(self):
        cfg, prob = ct_setup()
        rng = np.random.default_rng(1)
        state = AdaptiveState.start(make_phantoms(2, 16, rng), [0.5, 1.5], prob, rng,
                                    increment=2, max_rounds=5, target_loss=np.inf)
        state = train_adaptive(state, cfg, prob, rng)
        assert state.iteration == 0 and state.design.size == 2

    def test_mismatch_detected(self):
        cfg, prob = ct_setup()
        state = AdaptiveState(np.zeros((1, 16, 16)), np.zeros(3), np.zeros((1, 24, 2)))
        with pytest.raises(ContractError):
            state.check()
