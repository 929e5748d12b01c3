"""MSE loss, Adam updates, clipping, and finite-difference gradient checks."""

import numpy as np
import pytest

from energyfc.errors import ConfigError, NumericError
from energyfc.nncore import (
    Arch,
    NetworkConfig,
    init_params,
    network_backward,
    network_forward,
)
from energyfc.optimizer import (
    AdamState,
    Hyperparams,
    adam_step,
    clip_global_norm,
    gradient_check,
    init_adam_state,
    make_check_problem,
    mse_loss,
    mse_loss_batch,
)


class TestMseLoss:
    def test_zero_for_equal_vectors(self):
        loss, d = mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert loss == 0.0
        assert np.all(d == 0.0)

    def test_scalar_example(self):
        loss, d = mse_loss(np.array([2.0]), np.array([0.0]))
        assert loss == 4.0
        np.testing.assert_array_equal(d, [4.0])

    def test_two_element_example(self):
        loss, d = mse_loss(np.array([1.0, 3.0]), np.array([0.0, 0.0]))
        assert loss == 5.0
        np.testing.assert_array_equal(d, [1.0, 3.0])

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            mse_loss(np.array([1.0]), np.array([1.0, 2.0]))

    def test_batch_mean_matches_loop(self):
        rng = np.random.default_rng(0)
        preds = rng.normal(size=(6, 3))
        targets = rng.normal(size=(6, 3))
        loss, d = mse_loss_batch(preds, targets)
        per_sample = [mse_loss(preds[k], targets[k])[0] for k in range(6)]
        assert loss == pytest.approx(np.mean(per_sample), rel=1e-12)
        np.testing.assert_allclose(d, 2.0 * (preds - targets) / preds.size, rtol=1e-15)


def scalar_params():
    """A 1-tensor parameter set for scalar Adam arithmetic."""
    cfg = NetworkConfig(arch=Arch.LSTMP, t_steps=1, h_in=1, h_cell=2, h_out=1)
    params = init_params(cfg, seed=0)
    for _, a in params.named_arrays():
        a[...] = 0.0
    return params


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        cfg = NetworkConfig(arch=Arch.LSTMP, t_steps=1, h_in=2, h_cell=3, h_out=1)
        params = init_params(cfg, seed=1)
        grads = init_params(cfg, seed=2)
        for _, g in grads.named_arrays():
            g[...] = 0.0
        state = init_adam_state(params)
        new_params, new_state = adam_step(params, grads, state, Hyperparams())
        for (_, a), (_, b) in zip(params.named_arrays(), new_params.named_arrays()):
            np.testing.assert_array_equal(a, b)
        assert new_state.step == 1

    def test_first_step_scalar_value(self):
        hp = Hyperparams(learning_rate=1e-3)
        params = scalar_params()
        grads = scalar_params()
        grads.layers[0].W_ix[0, 0] = 1.0
        new_params, _ = adam_step(params, grads, init_adam_state(params), hp)
        expected = -1e-3 * (1.0 / (1.0 + hp.adam_eps))
        assert new_params.layers[0].W_ix[0, 0] == pytest.approx(expected, rel=1e-9)

    def test_bias_correction_changes_consecutive_deltas(self):
        hp = Hyperparams()
        params = scalar_params()
        grads = scalar_params()
        grads.layers[0].W_ix[0, 0] = 1.0
        p1, s1 = adam_step(params, grads, init_adam_state(params), hp)
        delta1 = p1.layers[0].W_ix[0, 0] - params.layers[0].W_ix[0, 0]
        p2, _ = adam_step(p1, grads, s1, hp)
        delta2 = p2.layers[0].W_ix[0, 0] - p1.layers[0].W_ix[0, 0]
        assert delta1 != delta2

    def test_inputs_not_mutated(self):
        params = scalar_params()
        grads = scalar_params()
        grads.layers[0].W_ix[0, 0] = 2.0
        state = init_adam_state(params)
        adam_step(params, grads, state, Hyperparams())
        assert params.layers[0].W_ix[0, 0] == 0.0
        assert state.step == 0
        assert np.all(state.m.layers[0].W_ix == 0.0)

    def test_non_finite_gradient_names_tensor(self):
        params = scalar_params()
        grads = scalar_params()
        grads.layers[1].b_g[0] = np.nan
        with pytest.raises(NumericError, match=r"layers\[1\].b_g"):
            adam_step(params, grads, init_adam_state(params), Hyperparams())

    def test_update_is_elementwise(self):
        # The update of one tensor never depends on any other tensor.
        hp = Hyperparams()
        params = scalar_params()
        grads_a = scalar_params()
        grads_a.layers[0].W_ix[0, 0] = 1.0
        grads_b = scalar_params()
        grads_b.layers[0].W_ix[0, 0] = 1.0
        grads_b.layers[1].b_o[...] = 3.0  # extra gradient elsewhere
        pa, _ = adam_step(params, grads_a, init_adam_state(params), hp)
        pb, _ = adam_step(params, grads_b, init_adam_state(params), hp)
        assert pa.layers[0].W_ix[0, 0] == pb.layers[0].W_ix[0, 0]


class TestClipping:
    def test_small_gradients_untouched(self):
        params = scalar_params()
        grads = scalar_params()
        grads.layers[0].W_ix[0, 0] = 0.5
        clipped, norm = clip_global_norm(grads, max_norm=1.0)
        assert norm == 0.5
        assert clipped is grads

    def test_large_gradients_scaled_to_max_norm(self):
        grads = scalar_params()
        grads.layers[0].W_ix[0, 0] = 3.0
        grads.layers[1].b_i[0] = 4.0
        clipped, norm = clip_global_norm(grads, max_norm=1.0)
        assert norm == pytest.approx(5.0)
        total = sum(float(np.sum(g * g)) for _, g in clipped.named_arrays())
        assert np.sqrt(total) == pytest.approx(1.0, rel=1e-12)


class TestGradientCheck:
    def test_zero_weight_network_passes(self):
        cfg = NetworkConfig(arch=Arch.LSTMP, t_steps=3, h_in=2, h_cell=3, h_out=1)
        window = np.random.default_rng(0).normal(size=(3, 2))
        params = init_params(cfg, seed=0)
        for _, a in params.named_arrays():
            a[...] = 0.0
        report = gradient_check(cfg, window, np.array([1.5]), params=params)
        assert report.passed, report

    def test_twenty_random_configs_pass(self):
        rng = np.random.default_rng(2024)
        for trial in range(20):
            h_cell = int(rng.integers(2, 9))
            h_out = int(rng.integers(1, h_cell))
            cfg = NetworkConfig(
                arch=Arch.LSTMP,
                t_steps=int(rng.integers(1, 7)),
                h_in=int(rng.integers(1, 5)),
                h_cell=h_cell,
                h_out=h_out,
            )
            window, target = make_check_problem(cfg, seed=trial)
            report = gradient_check(cfg, window, target, seed=trial)
            assert report.passed, (trial, cfg, report.worst_tensor, report.max_rel_err)

    def test_baseline_architecture_passes(self):
        cfg = NetworkConfig(arch=Arch.LSTM_BASELINE, t_steps=4, h_in=3, h_cell=4, h_out=2)
        window, target = make_check_problem(cfg, seed=9)
        report = gradient_check(cfg, window, target, seed=9)
        assert report.passed, (report.worst_tensor, report.max_rel_err)

    def test_grid_shapes_scaled_down_pass(self):
        # Same family of output sizes as the training grid, cell size capped.
        for h_cell, h_out in [(4, 1), (8, 2), (8, 3), (8, 7)]:
            cfg = NetworkConfig(arch=Arch.LSTMP, t_steps=5, h_in=3, h_cell=h_cell, h_out=h_out)
            window, target = make_check_problem(cfg, seed=h_cell)
            report = gradient_check(cfg, window, target, seed=h_cell)
            assert report.passed, (h_cell, h_out, report.max_rel_err)

    def test_corrupted_gradient_fails_and_names_tensor(self):
        cfg = NetworkConfig(arch=Arch.LSTMP, t_steps=4, h_in=3, h_cell=4, h_out=2)
        window, target = make_check_problem(cfg, seed=21)
        params = init_params(cfg, seed=21)
        pred, tape = network_forward(window, params)
        _, d_pred = mse_loss(pred, target)
        grads = network_backward(tape, window, d_pred, params)
        grads.layers[0].W_gx[1, 2] *= 2.0
        report = gradient_check(cfg, window, target, seed=21, analytic=grads)
        assert not report.passed
        assert report.worst_tensor == "layers[0].W_gx"


class TestHyperparams:
    def test_validation(self):
        with pytest.raises(ConfigError):
            Hyperparams(learning_rate=0.0)
        with pytest.raises(ConfigError):
            Hyperparams(beta1=1.0)
        with pytest.raises(ConfigError):
            Hyperparams(patience=0)
