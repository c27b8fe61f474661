import numpy as np
import pytest

from rramsnn.datasets import EncodedDataset
from rramsnn.errors import ConfigError, NumericalFault
from rramsnn.heterogeneity import HeterogeneityModel
from rramsnn.seeding import make_rng
from rramsnn.snn import RealWeights, build_topology, forward, init_weights
from rramsnn.training import (Adam, TrainingConfig, check_gradients, cross_entropy, gradients, load_checkpoint,
                              new_run, record_forward, relaxed_spike, retrain_with_faults, save_checkpoint,
                              substrate_hash, surrogate_grad, train, with_substrate)


def toy_dataset(n=96, T=10, C=6, seed=0):
    """Two classes that differ only in which half of the channels is active."""
    rng = make_rng(seed, "toy")
    y = np.arange(n) % 2
    p = np.where(np.arange(C)[None, :] < C // 2, 0.6, 0.05)
    p = np.where(y[:, None] == 1, p[:, ::-1], p)
    x = (rng.random((n, T, C)) < p[:, None, :]).astype(np.uint8)
    return EncodedDataset("toy", (x[: n - 32], y[: n - 32]), (x[n - 32:], y[n - 32:]), 2)


def test_surrogate_shape():
    assert surrogate_grad(0.0) == 1.0
    assert surrogate_grad(0.1, 10.0) == pytest.approx(0.25)
    assert surrogate_grad(-0.1, 10.0) == surrogate_grad(0.1, 10.0)
    with pytest.raises(ConfigError):
        surrogate_grad(0.0, 0.0)


def test_relaxed_spike_derivative_is_the_surrogate():
    x = np.linspace(-1, 1, 41) + 1e-3
    h = 1e-6
    num = (relaxed_spike(x + h) - relaxed_spike(x - h)) / (2 * h)
    assert np.allclose(num, surrogate_grad(x), rtol=1e-6)


def test_cross_entropy_gradient():
    rng = make_rng(0, "ce")
    z = rng.normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    loss, g = cross_entropy(z, y)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    assert loss == pytest.approx(-np.log(p[np.arange(4), y]).mean())
    onehot = np.eye(3)[y]
    assert np.allclose(g, (p - onehot) / 4)


@pytest.mark.parametrize("recurrent,reset", [(False, "subtract"), (True, "subtract"), (True, "to-zero")])
def test_gradients_match_finite_differences(recurrent, reset):
    net = build_topology(3, 2, (3,), recurrent, heterogeneity=HeterogeneityModel(seed=4), reset=reset)
    w = init_weights(net, 4, scale=3.0)
    rng = make_rng(1, "gc")
    x = (rng.random((2, 8, 3)) < 0.5).astype(float)
    assert check_gradients(net, x, np.array([0, 1]), w) <= 1e-4


def test_two_layer_gradients_match_finite_differences():
    net = build_topology(3, 2, (3, 2), [True, False], heterogeneity=HeterogeneityModel(seed=5))
    w = init_weights(net, 5, scale=3.0)
    x = (make_rng(2, "gc").random((2, 6, 3)) < 0.5).astype(float)
    assert check_gradients(net, x, np.array([1, 0]), w) <= 1e-4


def test_hard_forward_matches_simulator():
    net = build_topology(5, 3, (6,), True, heterogeneity=HeterogeneityModel(seed=1))
    w = init_weights(net, 0, scale=3.0)
    x = (make_rng(3, "x").random((4, 12, 5)) < 0.4).astype(np.uint8)
    tape = record_forward(net, x, w, dtype=np.float64)
    res = forward(net, x, RealWeights(w))
    assert np.allclose(tape.logits, res.logits, atol=1e-12)
    assert np.array_equal(tape.s[0].sum(axis=1), res.hidden_counts[0])


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0])}
    Adam(lr=0.1).step(p, {"w": np.array([3.0, -0.5])})
    assert np.allclose(p["w"], [0.9, -1.9])


def test_training_learns_and_is_deterministic():
    ds = toy_dataset()
    net = build_topology(6, 2, (8,), False)
    cfg = TrainingConfig(epochs=6, learning_rate=1e-2, batch_size=16, seed=3, init_scale=2.0)
    a = train(new_run(cfg, net), ds)
    b = train(new_run(cfg, net), ds)
    assert a.metrics == b.metrics
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    test_acc = [m["accuracy"] for m in a.metrics if m["split"] == "test"]
    assert test_acc[-1] >= 0.9


def test_frozen_weights_stay_put():
    ds = toy_dataset()
    net = build_topology(6, 2, (8,), True)
    run = train(new_run(TrainingConfig(epochs=1, learning_rate=1e-2, batch_size=16), net), ds)
    mask = {"W0": np.zeros((6, 8), bool)}
    mask["W0"][0, :3] = True
    values = {"W0": np.full((6, 8), 0.77)}
    new = retrain_with_faults(run, ds, mask, values, epochs=2)
    eff = new.effective_weights()["W0"]
    assert np.all(eff[0, :3] == 0.77)
    assert not np.array_equal(new.weights["R0"], run.weights["R0"])
    assert run.frozen_mask == {}


def test_divergence_raises():
    ds = toy_dataset()
    net = build_topology(6, 2, (8,), False)
    # any epoch loss above 1e-3 x the initial loss counts as divergent
    cfg = TrainingConfig(epochs=5, batch_size=16, divergence_factor=1e-3)
    with pytest.raises(NumericalFault, match="diverged"):
        train(new_run(cfg, net), ds)


def test_non_finite_weights_raise():
    net = build_topology(6, 2, (8,), False)
    w = init_weights(net, 0)
    w["W0"][0, 0] = np.nan
    with pytest.raises(NumericalFault):
        record_forward(net, np.ones((1, 4, 6)), w)


def test_checkpoint_roundtrip(tmp_path):
    ds = toy_dataset()
    net = build_topology(6, 2, (4,), True, heterogeneity=HeterogeneityModel(seed=2))
    run = train(new_run(TrainingConfig(epochs=1, batch_size=32), net), ds)
    run.frozen_mask = {"W0": np.eye(6, 4, dtype=bool)}
    run.frozen_values = {"W0": np.full((6, 4), 0.5)}
    save_checkpoint(run, tmp_path / "c.npz", extra={"note": "x"})
    back, extra = load_checkpoint(tmp_path / "c.npz")
    assert extra == {"note": "x"}
    assert substrate_hash(back.topology) == substrate_hash(run.topology)
    assert back.metrics == run.metrics and back.config == run.config
    for k in run.weights:
        assert np.array_equal(back.weights[k], run.weights[k])
    assert np.array_equal(back.frozen_mask["W0"], run.frozen_mask["W0"])


def test_with_substrate_swaps_only_taus():
    net = build_topology(6, 2, (4,), False, heterogeneity=HeterogeneityModel(seed=1))
    other = build_topology(6, 2, (4,), False, heterogeneity=HeterogeneityModel(seed=2))
    run = new_run(TrainingConfig(), net)
    moved = with_substrate(run, other)
    assert moved.weights is run.weights
    assert substrate_hash(moved.topology) != substrate_hash(run.topology)


def test_gradient_entry_point_shapes():
    net = build_topology(4, 3, (5,), True)
    w = init_weights(net, 0)
    x = np.ones((2, 3, 4))
    loss, g = gradients(net, x, np.array([0, 2]), w)
    assert loss > 0 and {k: v.shape for k, v in g.items()} == {k: v.shape for k, v in w.items()}


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(mode="other")
    with pytest.raises(ConfigError):
        TrainingConfig(learning_rate=0)
