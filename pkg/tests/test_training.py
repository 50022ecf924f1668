import csv

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biapnn.losses import LOSS_COLUMNS, LossBreakdown
from biapnn.nn import NetworkBundle, build_bundle, mlp_forward
from biapnn.problems import problem_one
from biapnn.reference import SpatialGrid, run_reference
from biapnn.training import (
    DIVERGENCE_THRESHOLD,
    LOG_COLUMNS,
    LrSchedule,
    TrainConfig,
    TrainingDiverged,
    TrainingLog,
    adam_init,
    adam_step,
    lr_at,
    make_observations,
    relative_l2_error,
    run_training,
    train_forward,
    train_inverse,
)

TINY = dict(hidden=(4,), phi_hidden=(4,), nt=2, nx=4, eval_every=1)


@pytest.fixture(scope="module")
def coarse_reference():
    return run_reference(problem_one(), 1e-3, SpatialGrid(0.0, 1.0, 11), dt=0.02)


def quadratic_loss(target):
    def loss(b):
        out = mlp_forward(b.rho_apnn, jnp.zeros((1, 2)))[0, 0]
        return LossBreakdown.of(macro=(out - target) ** 2)

    return loss


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    params = {"a": jnp.array([1.0, -2.0, 0.5])}
    grad = {"a": jnp.array([3.0, -1e-3, 0.0])}
    state, new = adam_step(adam_init(params), params, grad, 0.1)
    # bias correction makes the first step lr * g / (|g| + eps)
    expected = params["a"] - 0.1 * grad["a"] / (jnp.abs(grad["a"]) + 1e-8)
    np.testing.assert_allclose(new["a"], expected, rtol=1e-12)
    assert int(state.t) == 1


def test_adam_minimizes_a_quadratic():
    p = {"w": jnp.array([5.0, -3.0])}
    st_ = adam_init(p)
    for _ in range(2000):
        st_, p = adam_step(st_, p, {"w": 2 * p["w"]}, 0.05)
    assert float(jnp.abs(p["w"]).max()) < 1e-2


@pytest.mark.parametrize(
    "epoch,expected",
    [(0, 1e-3), (999, 1e-3), (1000, 8e-4), (2500, 6.4e-4), (10**6, 1e-6)],
)
def test_step_decay_schedule(epoch, expected):
    s = LrSchedule("step_decay", 1e-3, 0.8, 1000, 1e-6)
    assert lr_at(s, epoch) == pytest.approx(expected, rel=1e-12)


def test_schedule_validation():
    assert lr_at(LrSchedule(), 12345) == 1e-4
    with pytest.raises(ValueError):
        LrSchedule("cosine")
    with pytest.raises(ValueError):
        LrSchedule(base_lr=0.0)
    with pytest.raises(ValueError):
        lr_at(LrSchedule(), -1)


def test_relative_error_examples():
    assert relative_l2_error([1, 2, 3], [1, 2, 3]) == 0.0
    assert relative_l2_error([0, 0], [3, 4]) == 1.0
    assert relative_l2_error([3, 5], [3, 4]) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        relative_l2_error([1], [1, 2])
    with pytest.raises(ValueError):
        relative_l2_error([1, 2], [0, 0])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20),
    st.floats(0.01, 100),
)
def test_relative_error_is_scale_invariant(vals, c):
    ref = np.asarray(vals) + 1.0 + np.arange(len(vals))
    pred = ref * 1.1
    assert relative_l2_error(pred * c, ref * c) == pytest.approx(relative_l2_error(pred, ref), rel=1e-9)
    assert relative_l2_error(pred, ref) == pytest.approx(0.1, rel=1e-9)


def test_zero_epochs_returns_input():
    b = build_bundle("apnn", (4,), seed=0)
    out, log = run_training(b, quadratic_loss(1.0), 0, LrSchedule())
    assert out is b and len(log) == 0


def test_frozen_network_is_untouched():
    b = build_bundle("bi_implicit", (4,), seed=0).freeze("rho_diff")

    def loss(bb):
        tx = jnp.array([[0.05, 0.5]])
        v = mlp_forward(bb.rho_diff, tx)[0, 0] + mlp_forward(bb.rho_corr, tx)[0, 0]
        return LossBreakdown.of(macro=(v - 3.0) ** 2)

    out, _ = run_training(b, loss, 20, LrSchedule(base_lr=1e-2))
    for a, c in zip(b.rho_diff.weights + b.rho_diff.biases, out.rho_diff.weights + out.rho_diff.biases):
        assert np.array_equal(a, c)
    assert not np.array_equal(b.rho_corr.biases[-1], out.rho_corr.biases[-1])


def test_training_is_deterministic():
    b = build_bundle("apnn", (4,), seed=3)
    o1, l1 = run_training(b, quadratic_loss(2.0), 30, LrSchedule(base_lr=1e-2))
    o2, l2 = run_training(b, quadratic_loss(2.0), 30, LrSchedule(base_lr=1e-2))
    assert np.array_equal(l1.column("total"), l2.column("total"))
    assert np.array_equal(o1.rho_apnn.biases[-1], o2.rho_apnn.biases[-1])
    assert l1.column("total")[-1] < l1.column("total")[0]


def test_divergence_raises_with_epoch():
    b = build_bundle("apnn", (4,), seed=0)
    with pytest.raises(TrainingDiverged) as info:
        run_training(b, quadratic_loss(10 * DIVERGENCE_THRESHOLD), 5, LrSchedule(), epoch_offset=7)
    assert info.value.epoch == 7


def test_nan_loss_raises():
    b = build_bundle("apnn", (4,), seed=0)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        run_training(b, lambda bb: LossBreakdown.of(macro=jnp.log(-1.0 + 0 * bb.rho_apnn.biases[-1][0])), 3, LrSchedule())


def test_log_csv_columns(tmp_path):
    b = build_bundle("apnn", (4,), seed=0)
    _, log = run_training(b, quadratic_loss(1.0), 4, LrSchedule(), eval_fn=lambda bb: 0.5, eval_every=2)
    rows = list(csv.reader(log.write_csv(tmp_path / "log.csv").open()))
    assert tuple(rows[0]) == LOG_COLUMNS[:-1]
    assert [int(r[0]) for r in rows[1:]] == [0, 1, 2, 3]
    assert [r[LOG_COLUMNS.index("rel_error")] for r in rows[1:]] == ["0.5", "", "0.5", "0.5"]
    timed = list(csv.reader(log.write_csv(tmp_path / "t.csv", timing=True).open()))
    assert tuple(timed[0]) == LOG_COLUMNS
    assert set(LOSS_COLUMNS) <= set(LOG_COLUMNS)


def test_log_last_skips_missing():
    log = TrainingLog()
    log.append(0, LossBreakdown.of(), 1e-3, rel_error=0.3)
    log.append(1, LossBreakdown.of(), 1e-3)
    assert log.last("rel_error") == 0.3 and log.last("sigma") is None


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="fem")
    with pytest.raises(ValueError):
        TrainConfig(eps=0.0)
    with pytest.raises(ValueError):
        TrainConfig(drift="other")
    assert TrainConfig().variant_for(problem_one()) == "v1"


def test_bi_fidelity_forward_run_stages(coarse_reference):
    cfg = TrainConfig(method="bi_implicit", eps=1e-3, epochs=3, pretrain_epochs=2, **TINY)
    res = train_forward(cfg, problem_one(), coarse_reference)
    stages = [r["stage"] for r in res.log.rows]
    assert stages == ["pretrain"] * 2 + ["main"] * 3
    assert [r["epoch"] for r in res.log.rows] == [0, 1, 2, 3, 4]
    assert res.bundle.frozen == frozenset({"rho_diff"})
    assert 0 < res.rel_error_rho < 10 and res.rel_error_phi is None


def test_apnn_forward_run_without_reference():
    res = train_forward(TrainConfig(method="apnn", eps=0.5, epochs=2, pretrain_epochs=5, **TINY), problem_one())
    assert len(res.log) == 2 and res.rel_error_rho is None


def test_observations_sampled_from_trajectory(coarse_reference):
    obs = make_observations(coarse_reference, n_rho=30, seed=4)
    assert obs.rho_tx.shape == (30, 2) and len({tuple(p) for p in obs.rho_tx}) == 30
    assert np.all(obs.rho_tx[:, 0] > 0)
    np.testing.assert_allclose(coarse_reference.rho_at(obs.rho_tx[:, 0], obs.rho_tx[:, 1]), obs.rho_values, rtol=1e-12)
    again = make_observations(coarse_reference, n_rho=30, seed=4)
    assert np.array_equal(obs.rho_tx, again.rho_tx)
    with pytest.raises(ValueError):
        make_observations(coarse_reference, n_rho=10**6)


def test_inverse_trajectory_starts_at_initial_guess(coarse_reference):
    obs = make_observations(coarse_reference, n_rho=10, seed=0)
    cfg = TrainConfig(method="bi_implicit", eps=1e-3, epochs=3, lr=1e-2, **TINY)
    res = train_inverse(cfg, problem_one(), obs, sigma0=1.0)
    traj = res.sigma_trajectory
    assert traj[0] == pytest.approx(1.0, rel=1e-12)
    assert traj.size == 3 and res.sigma_hat != traj[0]
    with pytest.raises(ValueError):
        train_inverse(cfg, problem_one(), obs, sigma0=0.0)
    with pytest.raises(ValueError):
        train_inverse(TrainConfig(method="pinn", eps=1e-3, epochs=1, **TINY), problem_one(), obs, sigma0=1.0)
