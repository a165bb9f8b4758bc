from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsma_platoon.errors import InvalidConfigError, PayloadInfeasibleError, StepSizeError
from rsma_platoon.feel import (FeelConfig, LocalDataset, ModelVector, aggregate, downlink_latency, feel_round,
                               global_loss, global_update, local_gradient, local_loss, make_task, run_training,
                               smoothness)


def test_model_bit_size():
    assert ModelVector(np.zeros(10)).bit_size == 320
    assert ModelVector(np.zeros(10), precision=16).bit_size == 160


def test_empty_dataset():
    with pytest.raises(InvalidConfigError):
        LocalDataset(np.zeros((0, 3)), np.zeros(0))


def test_gradient_examples():
    D = LocalDataset([[1.0]], [0.0])
    np.testing.assert_allclose(local_gradient([2.0], D), [2.0])
    shards, full = make_task(60, 3, 3, seed=1, noise=0.0)
    w_star = np.linalg.lstsq(shards[0].X, shards[0].y, rcond=None)[0]
    np.testing.assert_allclose(local_gradient(w_star, shards[0]), 0.0, atol=1e-12)


def test_gradient_dimension_mismatch():
    with pytest.raises(InvalidConfigError):
        local_gradient([1.0, 2.0], LocalDataset([[1.0]], [0.0]))


@pytest.mark.parametrize("loss", ["least-squares", "logistic"])
@pytest.mark.parametrize("seed", range(3))
def test_gradient_finite_differences(loss, seed):
    shards, _ = make_task(90, 5, 3, loss, seed)
    D = shards[0]
    w = np.random.default_rng(seed).normal(size=5)
    g = local_gradient(w, D, loss)
    h = 1e-6
    fd = np.array([(local_loss(w + h * e, D, loss) - local_loss(w - h * e, D, loss)) / (2 * h) for e in np.eye(5)])
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_aggregate_examples():
    g = np.array([1.0, -2.0])
    np.testing.assert_array_equal(aggregate([g]), g)
    np.testing.assert_array_equal(aggregate([g, -g]), 0.0)
    shards, full = make_task(120, 4, 4, seed=2)
    w = np.ones(4)
    np.testing.assert_allclose(aggregate([local_gradient(w, D) for D in shards]), local_gradient(w, full),
                               atol=1e-12)
    with pytest.raises(InvalidConfigError):
        aggregate([np.zeros(2), np.zeros(3)])


def test_weighted_aggregate():
    g = aggregate([np.array([1.0]), np.array([4.0])], sizes=[3, 1], weighted=True)
    np.testing.assert_allclose(g, [1.75])


def test_global_update_examples():
    w = np.array([1.0, 2.0])
    np.testing.assert_array_equal(global_update(w, [5.0, 5.0], 0.0), w)
    np.testing.assert_array_equal(global_update(w, [0.0, 0.0], 0.3), w)
    np.testing.assert_allclose(global_update([1.0], [2.0], 0.1), [0.8])


def schedule(psi, delivered=1e9, dt=0.05):
    idx = np.nonzero(np.asarray(psi) >= 0.5)[0]
    return SimpleNamespace(latency_index=int(idx[-1] + 1) if idx.size else 0, delivered=np.array([delivered]))


def test_round_latency():
    shards, _ = make_task(60, 3, 3)
    _, lat = feel_round(np.zeros(3), shards, 0.1, schedule([1, 0, 0]), 0.05)
    assert lat == pytest.approx(0.05)
    _, lat = feel_round(np.zeros(3), shards, 0.1, schedule([0, 0, 0]), 0.05, bit_size=0)
    assert lat == 0.0
    with pytest.raises(PayloadInfeasibleError):
        feel_round(np.zeros(3), shards, 0.1, schedule([1, 1], delivered=10.0), 0.05)


def test_first_gradient_on_centred_data():
    shards, full = make_task(100, 4, 2, seed=3)
    expected = -(full.X.T @ full.y) / len(full)
    np.testing.assert_allclose(aggregate([local_gradient(np.zeros(4), D) for D in shards]), expected, atol=1e-12)


@pytest.mark.parametrize("K", [1, 2, 5])
def test_rounds_equal_centralised_descent(K):
    shards, full = make_task(200, 6, K, seed=K)
    cfg = FeelConfig(step_size=0.3, rounds=20, K=K)
    curve = run_training(cfg, shards)
    w = np.zeros(6)
    for r in range(1, 21):
        w = w - 0.3 * local_gradient(w, full)
        assert np.max(np.abs(curve.params[r] - w)) < 1e-10


def test_step_one_over_L_decays():
    shards, _ = make_task(300, 6, 3, seed=4)
    L = smoothness(shards)
    curve = run_training(FeelConfig(step_size=1.0 / L, rounds=30, K=3), shards)
    ratios = np.array(curve.loss[1:]) / np.array(curve.loss[:-1])
    assert np.all(ratios <= 1.0 + 1e-12)


@settings(max_examples=20)
@given(st.floats(0.05, 0.99), st.integers(0, 50))
def test_loss_monotone_below_one_over_L(frac, seed):
    shards, _ = make_task(120, 4, 3, "logistic", seed)
    L = smoothness(shards, "logistic")
    curve = run_training(FeelConfig(frac / L, 15, 3, "logistic"), shards)
    assert all(b <= a + 1e-12 for a, b in zip(curve.loss, curve.loss[1:]))


def test_divergence_detected():
    shards, _ = make_task(120, 4, 3, seed=5)
    L = smoothness(shards)
    with pytest.raises(StepSizeError):
        run_training(FeelConfig(step_size=3.0 / L, rounds=30, K=3), shards)


def test_cumulative_latency_axis():
    shards, _ = make_task(60, 3, 3)
    curve = run_training(FeelConfig(0.1, 5, 3), shards, latencies=0.75)
    np.testing.assert_allclose(curve.cumulative_latency, [0, 0.75, 1.5, 2.25, 3.0, 3.75])
    assert global_loss(curve.params[-1], shards) == pytest.approx(curve.loss[-1])


def test_task_split_rules():
    with pytest.raises(InvalidConfigError):
        make_task(100, 3, 3)
    with pytest.raises(InvalidConfigError):
        FeelConfig(step_size=0.0)
