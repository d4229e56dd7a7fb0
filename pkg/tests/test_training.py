import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import model_gradient_errors
from oracles import central_difference, relative_error
from tbedge import modelio
from tbedge.data import synth_blob_dataset
from tbedge.nn import build_model, tiny_spec
from tbedge.optim import OptimizerState, lr_at_epoch, momentum_step
from tbedge.training import TrainConfig, backward, predict_scores, softmax_cross_entropy, train


class TestLoss:
    def test_uniform_logits_give_log2(self):
        lv = softmax_cross_entropy(np.zeros((4, 2)), np.eye(2)[[0, 1, 0, 1]])
        assert np.isclose(lv.loss, np.log(2))
        np.testing.assert_allclose(lv.grad.sum(axis=1), 0, atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.integers(0, 2**32 - 1))
    def test_gradient_matches_finite_differences(self, n, seed):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, 2)) * 3
        y = np.eye(2)[rng.integers(0, 2, n)]
        g = softmax_cross_entropy(z, y).grad
        for idx in np.ndindex(z.shape):
            fd = central_difference(lambda: softmax_cross_entropy(z, y).loss, z, idx)
            assert relative_error(g[idx], fd, floor=1e-8) < 1e-5

    def test_extreme_logits_finite(self):
        lv = softmax_cross_entropy(np.array([[1e4, -1e4]]), np.array([[0, 1]]))
        assert np.isfinite(lv.loss) and np.isclose(lv.loss, 2e4)

    def test_rejects_soft_labels(self):
        with pytest.raises(ValueError, match="one-hot"):
            softmax_cross_entropy(np.zeros((1, 2)), np.array([[0.5, 0.5]]))


class TestModelGradients:
    def test_train_mode_one_instance(self):
        errs = model_gradient_errors(seed=11, per_tensor=2)
        assert max(errs.values()) <= 1e-4, errs

    def test_infer_mode_one_instance(self):
        errs = model_gradient_errors(seed=12, per_tensor=2, train=False)
        assert max(errs.values()) <= 1e-4, errs

    def test_hard_swish_variant(self):
        errs = model_gradient_errors(seed=13, per_tensor=2, spec=tiny_spec(hard_swish=True))
        assert max(errs.values()) <= 1e-4, errs

    def test_loss_scale_scales_gradients(self):
        m = build_model(tiny_spec(), seed=0, dtype=np.float64)
        x = np.random.default_rng(0).random((2, 1, 32, 32))
        y = np.eye(2)[[0, 1]]
        g1 = backward(m.copy(), x, y)
        g8 = backward(m.copy(), x, y, loss_scale=8.0)
        for k in g1:
            np.testing.assert_allclose(g8[k], 8 * g1[k], rtol=1e-12, atol=1e-300)

    def test_batch_mismatch(self):
        m = build_model(tiny_spec())
        with pytest.raises(ValueError, match="batch mismatch"):
            backward(m, np.zeros((2, 1, 32, 32)), np.eye(2)[[0]])


class TestOptimizer:
    def test_two_step_trace(self):
        params = {"w": np.array([1.0])}
        state = OptimizerState.for_params(params, beta=0.9, base_lr=0.001)
        grads = {"w": np.array([0.5])}
        momentum_step(params, grads, state)
        assert state.velocity["w"][0] == 0.0005 and params["w"][0] == 0.9995
        momentum_step(params, grads, state)
        assert np.isclose(state.velocity["w"][0], 0.00095, rtol=0, atol=1e-18)
        assert np.isclose(params["w"][0], 0.99855, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("epoch,expected", [(0, 0.001), (9, 0.001), (10, 0.0009), (25, 0.00081), (30, 0.000729)])
    def test_schedule(self, epoch, expected):
        assert lr_at_epoch(OptimizerState(), epoch) == expected

    @given(st.integers(0, 500))
    def test_schedule_is_monotone_step(self, epoch):
        s = OptimizerState()
        assert lr_at_epoch(s, epoch + 1) <= lr_at_epoch(s, epoch)
        assert lr_at_epoch(s, epoch) == lr_at_epoch(s, (epoch // 10) * 10)

    def test_zero_gradient_decays_velocity(self):
        params = {"w": np.array([1.0])}
        state = OptimizerState(velocity={"w": np.array([0.1])}, beta=0.9)
        momentum_step(params, {"w": np.array([0.0])}, state)
        assert np.isclose(state.velocity["w"][0], 0.09) and np.isclose(params["w"][0], 0.91)

    def test_shape_mismatch(self):
        state = OptimizerState()
        with pytest.raises(ValueError, match="does not match"):
            momentum_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, state)
        with pytest.raises(KeyError, match="missing gradient"):
            momentum_step({"w": np.zeros(3)}, {}, state)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            lr_at_epoch(OptimizerState(), -1)


@pytest.fixture(scope="module")
def small():
    return synth_blob_dataset(12, size=64, seed=3, ratios=(0.5, 0.5, 0.0))


class TestTrainLoop:
    def test_history_and_checkpoints(self, small, tmp_path):
        cfg = TrainConfig(epochs=2, batch_size=8, seed=0, checkpoint_every=1, checkpoint_dir=str(tmp_path))
        model, hist = train(build_model(tiny_spec(), seed=0), small, cfg)
        assert [h["epoch"] for h in hist] == [1, 2]
        assert all({"lr", "loss", "accuracy", "val_loss", "val_accuracy"} <= set(h) for h in hist)
        m2, state = modelio.load_checkpoint(tmp_path / "checkpoint_epoch002.tbw")
        assert state.epoch == 2 and set(state.velocity) == set(model.params)
        assert all(np.array_equal(m2.params[k], model.params[k]) for k in model.params)

    def test_resume_matches_uninterrupted(self, small, tmp_path):
        full, _ = train(build_model(tiny_spec(), seed=1), small, TrainConfig(epochs=2, batch_size=8))
        cfg = TrainConfig(epochs=1, batch_size=8, checkpoint_every=1, checkpoint_dir=str(tmp_path))
        train(build_model(tiny_spec(), seed=1), small, cfg)
        m, state = modelio.load_checkpoint(tmp_path / "checkpoint_epoch001.tbw")
        m, hist = train(m, small, TrainConfig(epochs=2, batch_size=8), state=state)
        assert [h["epoch"] for h in hist] == [2]
        assert all(np.array_equal(m.params[k], full.params[k]) for k in full.params)
        assert all(np.array_equal(m.buffers[k], full.buffers[k]) for k in full.buffers)

    def test_zero_epochs_is_identity(self, small):
        m0 = build_model(tiny_spec(), seed=4)
        m, hist = train(m0.copy(), small, TrainConfig(epochs=0))
        assert hist == [] and all(np.array_equal(m.params[k], m0.params[k]) for k in m.params)

    def test_single_class_train_split_rejected(self):
        ds = synth_blob_dataset(4, seed=0, ratios=(0.5, 0.5, 0.0))
        ds.splits = ["train" if s.label == 0 else "val" for s in ds.samples]
        with pytest.raises(ValueError, match="both classes"):
            train(build_model(tiny_spec()), ds, TrainConfig(epochs=1))

    def test_predict_scores_shapes(self, small):
        p, y = predict_scores(build_model(tiny_spec()), small, "val", batch_size=5)
        assert p.shape == (12, 2) and y.shape == (12,)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)
        with pytest.raises(ValueError):
            TrainConfig(momentum=1.0)
