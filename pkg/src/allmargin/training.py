"""Minibatch training: plain SGD, the perturbed-objective method, dropout.

The perturbed method runs t ascent steps on per-example perturbations
before each weight update, with the update rule as printed: the decay
factor is (1 - eta_perturb * lam) on the old perturbation plus a plain
loss-gradient step. The literal objective gradient would carry -2 lam
delta instead; that variant sits behind the grad_variant flag. Either way
a zero perturbation rate makes every step arithmetically identical to
plain SGD, because all methods carry the same zero perturbation set
through the kernels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._util import map_indexed, rng_for
from .margin import SolverConfig, estimate_margin
from .network import MODES, PLACEMENTS, Network, NormSpec, PerturbationSet, perturbed_grads

METHODS = ("sgd", "amo", "dropout")
GRAD_VARIANTS = ("printed", "objective")

# cheap settings for the per-epoch margin log; accuracy there is cosmetic
_LOG_SOLVER = SolverConfig(ascent_steps=60, restarts=1)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.1
    lr_decay_factor: float = 1.0
    lr_decay_every: int = 0
    weight_decay: float = 0.0
    t: int = 1
    eta_perturb: float = 0.01
    lam: float = 0.0
    placement: str = "all-layers"
    scaling: str = "pre-scale"
    grad_variant: str = "printed"
    dropout_p: float = 0.0
    margin_log_subsample: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.eta_perturb < 0:
            raise ValueError("eta_perturb must be nonnegative")
        if self.t < 1:
            raise ValueError("t must be at least 1")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.scaling not in MODES:
            raise ValueError(f"unknown scaling {self.scaling!r}")
        if self.grad_variant not in GRAD_VARIANTS:
            raise ValueError(f"unknown grad_variant {self.grad_variant!r}")
        if self.lr_decay_every < 0 or self.lr_decay_factor <= 0:
            raise ValueError("bad lr schedule")


@dataclass
class TrainRecord:
    epoch: int
    split: str
    error: float
    loss: float
    mean_margin: float
    wall_clock: float = 0.0


@dataclass
class TrainResult:
    network: Network
    records: list
    margins: list
    method: str
    config: TrainConfig


def split_arrays(dataset):
    """Accept a dataset object with .inputs/.labels or a bare (X, y) pair."""
    if hasattr(dataset, "inputs"):
        return np.asarray(dataset.inputs), np.asarray(dataset.labels)
    x, y = dataset
    return np.asarray(x), np.asarray(y)


def _lr_at(cfg, epoch):
    if cfg.lr_decay_every <= 0:
        return cfg.lr
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def perturbed_objective(net, x, y, pset, lam, mode="pre-scale"):
    """Value and slot gradients of the penalized perturbed loss.

    G is the loss at (x, delta) minus lam times the squared 2-norm of the
    stacked perturbations; the gradient list is aligned with layers.
    """
    loss, _, _, _, gds = perturbed_grads(net, x, y, pset, mode, "loss",
                                         need_gd=True)
    sq = sum(float(np.dot(d, d)) for d in pset.deltas)
    grads = []
    for j, d in enumerate(pset.deltas):
        if gds[j] is None:
            grads.append(None)
        else:
            grads.append(gds[j] - 2.0 * lam * d)
    return loss - lam * sq, grads


def _dropped(net, rng, p):
    """Fold inverted-dropout masks into the columns of the following matrix.

    Returns the masked network and the per-activation column scales needed
    to map its weight gradients back to the unmasked parameters.
    """
    if p <= 0.0:
        return net, None
    weights = [w.copy() for w in net.weights]
    scales = []
    for a in range(net.r - 1):
        keep = rng.random(net.widths[a + 1]) >= p
        sc = keep.astype(np.float64) / (1.0 - p)
        weights[a + 1] = weights[a + 1] * sc
        scales.append(sc)
    return Network(weights, net.activation), scales


def _example_grad(net, x, y, cfg, inner_steps, dropout_p, norm, ex_seed):
    dnet, scales = _dropped(net, rng_for(*ex_seed), dropout_p)
    pset = PerturbationSet.zeros(dnet, cfg.placement, norm)
    decay = 1.0 - cfg.eta_perturb * cfg.lam
    if cfg.grad_variant == "objective":
        decay = 1.0 - 2.0 * cfg.eta_perturb * cfg.lam
    free = pset.free_mask()
    for _ in range(inner_steps):
        _, _, _, _, gds = perturbed_grads(dnet, x, y, pset, cfg.scaling,
                                          "loss", need_gd=True)
        for j, d in enumerate(pset.deltas):
            if free[j]:
                d *= decay
                d += cfg.eta_perturb * gds[j]
    loss, _, gws, _, _ = perturbed_grads(dnet, x, y, pset, cfg.scaling,
                                         "loss", need_gw=True)
    if scales is not None:
        for a, sc in enumerate(scales):
            gws[a + 1] = gws[a + 1] * sc
    return gws, loss


def _batch_grad(net, xb, yb, cfg, inner_steps, dropout_p, norm, epoch, batch_start):
    items = list(zip(xb, yb))
    out = map_indexed(
        lambda i, pair: _example_grad(net, pair[0], int(pair[1]), cfg,
                                      inner_steps, dropout_p, norm,
                                      (cfg.seed, 2, epoch, batch_start + i)),
        items)
    gsum = [np.zeros_like(w) for w in net.weights]
    for gws, _ in out:
        for i in range(net.r):
            gsum[i] += gws[i]
    scale = 1.0 / len(items)
    return [g * scale for g in gsum], float(np.mean([loss for _, loss in out]))


def amo_update(net, xb, yb, cfg, lr=None, inner_steps=None, dropout_p=0.0,
               epoch=0, batch_start=0):
    """One batch step: per-example inner ascent, then one weight update.

    Returns a new network. inner_steps = 0 (used by the plain-SGD path) or
    eta_perturb = 0 leave the perturbations at zero, making the step
    bit-identical to plain SGD.
    """
    lr = cfg.lr if lr is None else lr
    steps = cfg.t if inner_steps is None else inner_steps
    norm = NormSpec.uniform(net.layer_count)
    grads, _ = _batch_grad(net, xb, yb, cfg, steps, dropout_p, norm,
                           epoch, batch_start)
    out = net.copy()
    for i in range(out.r):
        out.weights[i] -= lr * (grads[i] + cfg.weight_decay * out.weights[i])
    return out


def evaluate(net, inputs, labels):
    """Mean misclassification rate (ties count as errors) and mean loss."""
    items = list(zip(inputs, labels))
    if not items:
        return 0.0, 0.0
    rows = map_indexed(
        lambda _, pair: perturbed_grads(net, pair[0], int(pair[1]), None,
                                        "pre-scale", "loss")[:2],
        items)
    losses = np.array([r[0] for r in rows])
    gaps = np.array([r[1] for r in rows])
    return float(np.mean(gaps <= 0.0)), float(np.mean(losses))


def train(net, dataset, method="sgd", config=None, val=None):
    """Train a copy of net; the inner ascent runs only for the amo method."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    cfg = config if config is not None else TrainConfig()
    x, y = split_arrays(dataset)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    work = net.copy()
    inner_steps = cfg.t if method == "amo" else 0
    dropout_p = cfg.dropout_p if method == "dropout" else 0.0
    norm = NormSpec.uniform(work.layer_count)
    n = len(x)
    sub = None
    if cfg.margin_log_subsample > 0:
        take = min(cfg.margin_log_subsample, n)
        sub = np.sort(rng_for(cfg.seed, 4).choice(n, size=take, replace=False))
    records, margin_log = [], []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = _lr_at(cfg, epoch)
        perm = rng_for(cfg.seed, 1, epoch).permutation(n)
        for b0 in range(0, n, cfg.batch_size):
            idx = perm[b0:b0 + cfg.batch_size]
            grads, _ = _batch_grad(work, x[idx], y[idx], cfg, inner_steps,
                                   dropout_p, norm, epoch, b0)
            for i in range(work.r):
                work.weights[i] -= lr * (grads[i] + cfg.weight_decay * work.weights[i])
        err, loss = evaluate(work, x, y)
        mean_margin = float("nan")
        if sub is not None:
            vals = []
            for j in sub:
                res = estimate_margin(work, x[j], int(y[j]), cfg=_LOG_SOLVER)
                v = res.value
                vals.append(0.0 if not np.isfinite(v) else v)
                margin_log.append((epoch, int(j), v))
            mean_margin = float(np.mean(vals))
        elapsed = time.perf_counter() - started
        records.append(TrainRecord(epoch, "train", err, loss, mean_margin,
                                   elapsed))
        if val is not None:
            vx, vy = split_arrays(val)
            verr, vloss = evaluate(work, vx, vy)
            records.append(TrainRecord(epoch, "val", verr, vloss,
                                       float("nan"), elapsed))
    return TrainResult(network=work, records=records, margins=margin_log,
                       method=method, config=cfg)
