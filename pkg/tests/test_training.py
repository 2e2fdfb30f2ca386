import math

import numpy as np
import pytest

from allmargin.data import gen_synthetic
from allmargin.network import PerturbationSet, init_network, perturbed_grads
from allmargin.training import (
    TrainConfig,
    amo_update,
    evaluate,
    perturbed_objective,
    train,
)
from allmargin.data import Dataset
from allmargin.network import Network


def _moons(n=40, seed=1):
    return gen_synthetic("two-moons", n, noise=0.05, seed=seed)


# ------------------------------------------------------------- config rules

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(t=0)
    with pytest.raises(ValueError):
        TrainConfig(eta_perturb=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        TrainConfig(lam=-1.0)
    # eta_perturb = 0 is the documented SGD-fallback setting
    assert TrainConfig(eta_perturb=0.0).eta_perturb == 0.0


def test_train_rejects_unknown_method_and_empty_data():
    net = init_network([2, 4, 2], "tanh", seed=0)
    ds = _moons()
    with pytest.raises(ValueError):
        train(net, ds, "adamw", TrainConfig(epochs=1))
    empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2,
                    provenance="test")
    with pytest.raises(ValueError):
        train(net, empty, "sgd", TrainConfig(epochs=1))


# -------------------------------------------------------------- equivalence

def test_amo_with_zero_perturb_rate_matches_sgd_exactly():
    net = init_network([2, 8, 2], "tanh", seed=3)
    ds = _moons(48, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=8, lr=0.1, seed=5, eta_perturb=0.0)
    sgd = train(net, ds, "sgd", cfg)
    amo = train(net, ds, "amo", cfg)
    for a, b in zip(sgd.network.weights, amo.network.weights):
        assert np.array_equal(a, b)


def test_amo_update_single_batch_matches_manual_sgd():
    net = init_network([2, 5, 2], "tanh", seed=1)
    ds = _moons(16, seed=3)
    cfg = TrainConfig(batch_size=16, lr=0.05, seed=0, eta_perturb=0.0,
                      weight_decay=0.01)
    stepped = amo_update(net, ds.inputs, ds.labels, cfg)
    sums = [np.zeros_like(w) for w in net.weights]
    for x, y in zip(ds.inputs, ds.labels):
        pset = PerturbationSet.zeros(net, cfg.placement)
        _, _, gws, _, _ = perturbed_grads(net, x, int(y), pset, cfg.scaling,
                                          "loss", need_gw=True)
        for s, g in zip(sums, gws):
            s += g
    for w, s, got in zip(net.weights, sums, stepped.weights):
        manual = (1.0 - cfg.lr * cfg.weight_decay) * w - cfg.lr * (s / len(ds))
        np.testing.assert_allclose(got, manual, rtol=1e-12, atol=1e-15)


def test_amo_with_perturbation_differs_from_sgd():
    net = init_network([2, 8, 2], "tanh", seed=3)
    ds = _moons(48, seed=2)
    sgd = train(net, ds, "sgd", TrainConfig(epochs=2, batch_size=8, lr=0.1,
                                            seed=5))
    amo = train(net, ds, "amo", TrainConfig(epochs=2, batch_size=8, lr=0.1,
                                            seed=5, eta_perturb=0.01, t=1))
    assert any(not np.array_equal(a, b)
               for a, b in zip(sgd.network.weights, amo.network.weights))


# --------------------------------------------------------- objective pieces

def test_perturbed_objective_zero_delta_is_plain_loss():
    net = init_network([2, 4, 2], "tanh", seed=2)
    x = np.array([0.4, -0.2])
    pset = PerturbationSet.zeros(net, "all-layers")
    obj, grads = perturbed_objective(net, x, 1, pset, lam=0.7)
    loss, _, _, _, _ = perturbed_grads(net, x, 1, pset, "pre-scale", "loss")
    assert obj == pytest.approx(loss, rel=1e-15)


def test_perturbed_objective_subtracts_penalty():
    net = init_network([2, 4, 2], "tanh", seed=2)
    x = np.array([0.4, -0.2])
    pset = PerturbationSet.zeros(net, "all-layers")
    pset.deltas[0] = np.array([0.1, -0.3, 0.2, 0.0])
    lam = 0.5
    obj, grads = perturbed_objective(net, x, 1, pset, lam=lam)
    loss, _, _, _, gds = perturbed_grads(net, x, 1, pset, "pre-scale", "loss",
                                         need_gd=True)
    penalty = lam * sum(float(np.dot(d, d)) for d in pset.deltas)
    assert obj == pytest.approx(loss - penalty, rel=1e-12)
    np.testing.assert_allclose(grads[0], gds[0] - 2 * lam * pset.deltas[0],
                               rtol=1e-12)


# ----------------------------------------------------------- training loops

def test_weight_decay_shrinks_exactly_on_zero_inputs():
    # tanh(0) = 0 end to end, so data gradients vanish and only decay acts
    net = init_network([2, 4, 2], "tanh", seed=7)
    n = 8
    ds = Dataset(np.zeros((n, 2)), np.zeros(n, dtype=int), 2,
                 provenance="test")
    cfg = TrainConfig(epochs=2, batch_size=4, lr=0.5, weight_decay=0.1, seed=0)
    out = train(net, ds, "sgd", cfg)
    steps = 2 * (n // 4)
    factor = (1.0 - cfg.lr * cfg.weight_decay) ** steps
    for w0, w1 in zip(net.weights, out.network.weights):
        np.testing.assert_allclose(w1, factor * w0, rtol=1e-12)


def test_training_is_seed_deterministic():
    net = init_network([2, 6, 2], "tanh", seed=1)
    ds = _moons(40, seed=4)
    cfg = TrainConfig(epochs=2, batch_size=8, lr=0.2, seed=9)
    a = train(net, ds, "sgd", cfg)
    b = train(net, ds, "sgd", cfg)
    for wa, wb in zip(a.network.weights, b.network.weights):
        assert np.array_equal(wa, wb)
    assert [(r.epoch, r.split, r.error, r.loss) for r in a.records] == \
           [(r.epoch, r.split, r.error, r.loss) for r in b.records]
    c = train(net, ds, "sgd", TrainConfig(epochs=2, batch_size=8, lr=0.2,
                                          seed=10))
    assert any(not np.array_equal(wa, wc)
               for wa, wc in zip(a.network.weights, c.network.weights))


def test_loss_mostly_descends_on_easy_data():
    hits = total = 0
    for seed in range(3):
        net = init_network([2, 8, 2], "tanh", seed=seed)
        ds = gen_synthetic("two-gaussians", 40, noise=0.03, seed=seed)
        cfg = TrainConfig(epochs=6, batch_size=8, lr=0.2, seed=seed)
        out = train(net, ds, "sgd", cfg)
        losses = [r.loss for r in out.records if r.split == "train"]
        hits += sum(b < a for a, b in zip(losses, losses[1:]))
        total += len(losses) - 1
    assert hits / total >= 0.9


def test_dropout_method_and_inert_dropout_config():
    net = init_network([2, 6, 2], "tanh", seed=2)
    ds = _moons(32, seed=6)
    base = TrainConfig(epochs=2, batch_size=8, lr=0.1, seed=3)
    with_p = TrainConfig(epochs=2, batch_size=8, lr=0.1, seed=3, dropout_p=0.4)
    # sgd ignores dropout_p entirely
    a = train(net, ds, "sgd", base)
    b = train(net, ds, "sgd", with_p)
    for wa, wb in zip(a.network.weights, b.network.weights):
        assert np.array_equal(wa, wb)
    # the dropout method with p = 0 is plain sgd
    c = train(net, ds, "dropout", base)
    for wa, wc in zip(a.network.weights, c.network.weights):
        assert np.array_equal(wa, wc)
    # and with p > 0 it is not
    d = train(net, ds, "dropout", with_p)
    assert any(not np.array_equal(wa, wd)
               for wa, wd in zip(a.network.weights, d.network.weights))


def test_records_and_margin_logging():
    net = init_network([2, 6, 2], "tanh", seed=2)
    ds = _moons(30, seed=5)
    val = _moons(10, seed=6)
    cfg = TrainConfig(epochs=2, batch_size=8, lr=0.1, seed=1,
                      margin_log_subsample=4)
    out = train(net, ds, "sgd", cfg, val=val)
    splits = [r.split for r in out.records]
    assert splits == ["train", "val"] * 2
    train_rows = [r for r in out.records if r.split == "train"]
    assert all(math.isfinite(r.mean_margin) for r in train_rows)
    assert all(r.wall_clock >= 0.0 for r in out.records)
    # without subsampling the margin column is absent, encoded as nan
    cfg0 = TrainConfig(epochs=1, batch_size=8, lr=0.1, seed=1)
    out0 = train(net, ds, "sgd", cfg0)
    assert all(math.isnan(r.mean_margin) for r in out0.records)


def test_evaluate_counts_ties_as_errors():
    w = np.array([[1.0, 0.0], [1.0, 0.0]])
    net = Network([w], "tanh")
    inputs = np.array([[1.0, 0.0], [0.5, 0.5]])
    labels = np.array([0, 1])
    err, loss = evaluate(net, inputs, labels)
    assert err == 1.0
    assert loss > 0


def test_evaluate_hand_counts():
    w = np.array([[1.0, 0.0]])
    net = Network([w], "tanh")
    inputs = np.array([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]])
    labels = np.array([1, 0, 0])
    err, _ = evaluate(net, inputs, labels)
    assert err == pytest.approx(1.0 / 3.0)


def test_lr_decay_schedule_applies():
    net = init_network([2, 4, 2], "tanh", seed=1)
    ds = _moons(16, seed=2)
    fast = TrainConfig(epochs=4, batch_size=16, lr=0.3, seed=0,
                       lr_decay_factor=0.1, lr_decay_every=1)
    flat = TrainConfig(epochs=4, batch_size=16, lr=0.3, seed=0)
    a = train(net, ds, "sgd", fast)
    b = train(net, ds, "sgd", flat)
    assert any(not np.array_equal(wa, wb)
               for wa, wb in zip(a.network.weights, b.network.weights))
