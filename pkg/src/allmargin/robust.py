"""Projected-gradient attacks and robust training.

Attacks live in an l-infinity ball intersected with the pixel box. Robust
training comes in two flavors: standard adversarial training on the
attacked input, and the variant whose inner loop pairs each attack step
with a decayed ascent step on the per-layer perturbations, then takes the
weight gradient at the attacked input with those perturbations applied.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._util import as_vector, map_indexed, rng_for
from .network import NormSpec, PerturbationSet, perturbed_grads
from .training import TrainConfig, TrainRecord, TrainResult, _lr_at, evaluate, split_arrays

ROBUST_METHODS = ("madry", "robust-amo")

# fixed coefficients of the paired perturbation update
DELTA_DECAY = 0.92
DELTA_RATE = 6.4e-3


def pixel_radius(p):
    """Attack radius for a p/255 pixel budget."""
    return p / 255.0


@dataclass
class AttackSpec:
    radius: float
    steps: int = 10
    step_size: Optional[float] = None
    restarts: int = 1
    box_min: float = -1.0
    box_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be at least 1")
        if self.box_min > self.box_max:
            raise ValueError("empty pixel box")
        if self.step_size is None:
            self.step_size = 2.5 * self.radius / self.steps

    @classmethod
    def evaluation(cls, radius, **kw):
        """The heavier search used for reporting robust error."""
        kw.setdefault("steps", 20)
        kw.setdefault("restarts", 3)
        return cls(radius, **kw)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    loss: float
    flipped: bool
    iterations: int


def _ball(x, spec):
    lo = np.maximum(x - spec.radius, spec.box_min)
    hi = np.minimum(x + spec.radius, spec.box_max)
    return lo, hi


def pgd_attack(net, x, y, spec):
    """Sign-gradient ascent with random restarts.

    Every projected starting point is a candidate, so a clean mistake
    always reports as flipped. Misclassifying iterates outrank correct
    ones; loss breaks ties within each group.
    """
    x = as_vector(x)
    lo, hi = _ball(x, spec)
    best_x, best_key, flipped, iters = x, (False, -np.inf), False, 0

    def consider(xp):
        nonlocal best_x, best_key, flipped
        loss, gap, _, _, _ = perturbed_grads(net, xp, y, None, "pre-scale", "loss")
        key = (gap <= 0.0, loss)
        flipped = flipped or key[0]
        if key > best_key:
            best_x, best_key = xp, key

    for restart in range(spec.restarts):
        if restart == 0:
            xp = np.clip(x, lo, hi)
        else:
            rng = rng_for(spec.seed, restart)
            xp = np.clip(x + rng.uniform(-spec.radius, spec.radius, size=x.size),
                         lo, hi)
        consider(xp)
        for _ in range(spec.steps):
            _, _, _, gx, _ = perturbed_grads(net, xp, y, None, "pre-scale",
                                             "loss", need_gx=True)
            xp = np.clip(xp + spec.step_size * np.sign(gx), lo, hi)
            consider(xp)
            iters += 1
    return AttackResult(x_adv=best_x, loss=float(best_key[1]), flipped=flipped,
                        iterations=iters)


def robust_error(net, inputs, labels, spec):
    """Fraction of examples some ball point misclassifies; at least the clean error."""
    items = list(zip(np.asarray(inputs), np.asarray(labels)))
    if not items:
        raise ValueError("dataset is empty")
    flags = map_indexed(
        lambda _, pair: pgd_attack(net, pair[0], int(pair[1]), spec).flipped,
        items)
    return float(np.mean(np.asarray(flags, dtype=np.float64)))


def _paired_step(net, x, y, xp, pset, spec, scaling, decay, rate):
    # gradients for both moves come from the same point, then apply together
    lo, hi = _ball(x, spec)
    free = pset.free_mask()
    _, _, _, gx, gds = perturbed_grads(net, xp, y, pset, scaling, "loss",
                                       need_gx=True, need_gd=True)
    for j, d in enumerate(pset.deltas):
        if free[j]:
            d *= decay
            d += rate * gds[j]
    return np.clip(xp + spec.step_size * np.sign(gx), lo, hi)


def _madry_grad(net, x, y, spec):
    lo, hi = _ball(x, spec)
    xp = np.clip(x, lo, hi)
    for _ in range(spec.steps):
        _, _, _, gx, _ = perturbed_grads(net, xp, y, None, "pre-scale", "loss",
                                         need_gx=True)
        xp = np.clip(xp + spec.step_size * np.sign(gx), lo, hi)
    loss, _, gws, _, _ = perturbed_grads(net, xp, y, None, "pre-scale", "loss",
                                         need_gw=True)
    return gws, loss


def _ramo_grad(net, x, y, spec, cfg, norm, decay, rate):
    xp = np.clip(x, *_ball(x, spec))
    pset = PerturbationSet.zeros(net, cfg.placement, norm)
    for _ in range(spec.steps):
        xp = _paired_step(net, x, y, xp, pset, spec, cfg.scaling, decay, rate)
    loss, _, gws, _, _ = perturbed_grads(net, xp, y, pset, cfg.scaling, "loss",
                                         need_gw=True)
    return gws, loss


def _mean_grads(net, out):
    gsum = [np.zeros_like(w) for w in net.weights]
    for gws, _ in out:
        for i in range(net.r):
            gsum[i] += gws[i]
    return [g / len(out) for g in gsum]


def robust_amo_update(net, xb, yb, cfg, spec, lr=None, decay=DELTA_DECAY,
                      rate=DELTA_RATE):
    """One batch step of the paired method; returns a new network.

    Perturbations start at zero per example, each inner iteration advances
    the attack point and the slot perturbations together, and the weight
    step uses the doubly-perturbed loss. With the ball and the slot steps
    both degenerate this is exactly a plain SGD step.
    """
    lr = cfg.lr if lr is None else lr
    norm = NormSpec.uniform(net.layer_count)
    items = list(zip(xb, yb))
    out = map_indexed(
        lambda _, pair: _ramo_grad(net, pair[0], int(pair[1]), spec, cfg,
                                   norm, decay, rate), items)
    grads = _mean_grads(net, out)
    new = net.copy()
    for i in range(new.r):
        new.weights[i] -= lr * (grads[i] + cfg.weight_decay * new.weights[i])
    return new


def train_robust(net, dataset, method, attack, config=None, val=None):
    """Adversarial training.

    Per-epoch records log the clean error and loss for each split plus a
    robust row per split (split name suffixed "-robust", error column =
    robust error under the training attack spec).
    """
    if method not in ROBUST_METHODS:
        raise ValueError(f"unknown robust method {method!r}")
    cfg = config if config is not None else TrainConfig()
    x, y = split_arrays(dataset)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    work = net.copy()
    norm = NormSpec.uniform(work.layer_count)
    n = len(x)
    records = []
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lr = _lr_at(cfg, epoch)
        perm = rng_for(cfg.seed, 1, epoch).permutation(n)
        for b0 in range(0, n, cfg.batch_size):
            idx = perm[b0:b0 + cfg.batch_size]
            items = list(zip(x[idx], y[idx]))
            if method == "madry":
                out = map_indexed(
                    lambda _, pair: _madry_grad(work, pair[0], int(pair[1]),
                                                attack), items)
            else:
                out = map_indexed(
                    lambda _, pair: _ramo_grad(work, pair[0], int(pair[1]),
                                               attack, cfg, norm, DELTA_DECAY,
                                               DELTA_RATE), items)
            grads = _mean_grads(work, out)
            for i in range(work.r):
                work.weights[i] -= lr * (grads[i]
                                         + cfg.weight_decay * work.weights[i])
        elapsed = time.perf_counter() - started
        err, loss = evaluate(work, x, y)
        records.append(TrainRecord(epoch, "train", err, loss, float("nan"),
                                   elapsed))
        records.append(TrainRecord(epoch, "train-robust",
                                   robust_error(work, x, y, attack), loss,
                                   float("nan"), elapsed))
        if val is not None:
            vx, vy = split_arrays(val)
            verr, vloss = evaluate(work, vx, vy)
            records.append(TrainRecord(epoch, "val", verr, vloss,
                                       float("nan"), elapsed))
            records.append(TrainRecord(epoch, "val-robust",
                                       robust_error(work, vx, vy, attack),
                                       vloss, float("nan"), elapsed))
    return TrainResult(network=work, records=records, margins=[], method=method,
                       config=cfg)
