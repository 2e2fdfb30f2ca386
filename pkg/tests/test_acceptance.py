"""Release acceptance: one test per shipped guarantee, one verdict line each.

Each test exercises a public contract end to end at its stated tolerance.
Hyperparameters for the two training comparisons are frozen; every input
is seeded, so a pass here is reproducible bit for bit.
"""

import json
import math
import time

import numpy as np

from conftest import correctly_classified_instance

from allmargin import cli
from allmargin._util import rng_for
from allmargin.analytic import (
    bound_report,
    margin_lower_bound,
    optimal_alpha,
    surrogate_loss,
)
from allmargin.autodiff import Graph, finite_diff_check
from allmargin.data import corrupt_labels, gen_synthetic, partition
from allmargin.margin import (
    GridSpec,
    SolverConfig,
    brute_force_margin,
    estimate_margin,
    margin_lipschitz_gap,
)
from allmargin.network import (
    Network,
    NormSpec,
    PerturbationSet,
    build_network_graph,
    forward_trace,
    init_network,
    interlayer_jacobian_norm,
    perturbed_grads,
)
from allmargin.robust import AttackSpec, robust_error, train_robust
from allmargin.training import TrainConfig, evaluate, train


def _verdict(num, ok, detail):
    print(f"criterion {num:02d}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num:02d}: {detail}"


# ------------------------------------------------------------- criterion 1

def _grad_graph(idx, rng):
    kind = idx % 6
    if kind == 0:
        g = Graph()
        m, v = g.input((3, 4)), g.input(4)
        g.norm2(g.act("tanh", g.matvec(m, v)))
        return g, [rng.standard_normal((3, 4)), rng.standard_normal(4)]
    if kind == 1:
        g = Graph()
        m, v = g.input((2, 5)), g.input(5)
        g.norm2(g.act("softplus", g.matvec(m, v)))
        return g, [rng.standard_normal((2, 5)), rng.standard_normal(5)]
    if kind == 2:
        g = Graph()
        g.softmax_xent(g.input(4), idx % 4)
        return g, [rng.standard_normal(4)]
    if kind == 3:
        g = Graph()
        a, b, s = g.input(3), g.input(3), g.input(1)
        g.norm2(g.smul(s, g.add(a, g.scale(b, 1.7))))
        return g, [rng.standard_normal(3), rng.standard_normal(3),
                   rng.standard_normal(1)]
    widths, act = ([3, 5, 2], "tanh") if kind == 4 else ([4, 6, 1], "softplus")
    net = init_network(widths, act, seed=idx)
    y = idx % widths[-1] if widths[-1] > 1 else 1
    graph, _ = build_network_graph(net, y, head="loss")
    return graph, [rng.standard_normal(widths[0])] + list(net.weights)


def test_c01_gradient_suite():
    t0 = time.monotonic()
    worst = 0.0
    for idx in range(100):
        graph, inputs = _grad_graph(idx, rng_for(41, idx))
        report = finite_diff_check(graph, inputs)
        assert not report.flagged
        worst = max(worst, report.max_rel_error)
    elapsed = time.monotonic() - t0
    _verdict(1, worst <= 1e-5 and elapsed < 30.0,
             f"max rel err {worst:.2e} over 100 points in {elapsed:.1f}s")


# ------------------------------------------------------------- criterion 2

def test_c02_linear_margin_exactness():
    worst = 0.0
    for idx in range(100):
        rng = rng_for(42, idx)
        d = 2 + idx % 5
        w = rng.standard_normal((1, d))
        x = rng.standard_normal(d)
        x /= np.linalg.norm(x)
        y = int(w[0] @ x > 0)
        if idx % 5 == 0:
            y = 1 - y  # misclassified instances must come back as 0
        expect = max(0.0, (2 * y - 1) * float(w[0] @ x))
        net = Network([w], "tanh")
        got = estimate_margin(net, x, y).value
        worst = max(worst, abs(got - expect))
        if idx % 10 == 0:
            via_pga = estimate_margin(
                net, x, y, cfg=SolverConfig(use_exact_linear=False)).value
            worst = max(worst, abs(via_pga - expect))
    _verdict(2, worst <= 1e-3, f"max deviation {worst:.2e} on 100 instances")


# ------------------------------------------------------------- criterion 3

_SANDWICH_ARCHS = ([2, 1], [1, 2, 1], [2, 2, 1], [3, 2, 1], [1, 3, 1])


def test_c03_margin_sandwich():
    t0 = time.monotonic()
    close = 0
    for idx in range(50):
        widths = _SANDWICH_ARCHS[idx % len(_SANDWICH_ARCHS)]
        dim = sum(widths[1:])
        budget = 0.55 if dim > 3 else 0.8
        for attempt in range(40):
            net, x, y = correctly_classified_instance(
                widths, "tanh", seed=100 * idx + attempt, min_gamma=0.08)
            spec = NormSpec.linear_only(net.layer_count)
            pga = estimate_margin(net, x, y, norm_spec=spec,
                                  cfg=SolverConfig(use_exact_linear=False))
            if pga.value <= budget:
                break
        else:
            raise AssertionError(f"no in-budget instance for {widths}")
        lower = margin_lower_bound(net, x, y, norm_spec=spec).value
        res = 0.025 if dim > 3 else 0.02
        grid = GridSpec(res, min(1.3, pga.value + 4 * res))
        brute = brute_force_margin(net, x, y, grid=grid, norm_spec=spec)
        assert brute.kind == "brute-force"
        slack = res * math.sqrt(dim)
        assert lower <= brute.value + 1e-9
        assert brute.value <= pga.value + slack + 1e-9
        if abs(pga.value - brute.value) <= 0.05 * brute.value:
            close += 1
    elapsed = time.monotonic() - t0
    _verdict(3, close >= 45 and elapsed < 600.0,
             f"ascent within 5% of brute on {close}/50 in {elapsed:.0f}s")


# ------------------------------------------------------------- criterion 4

def test_c04_lipschitz_decomposition():
    grid = GridSpec(0.03, 1.2)
    slack = 2 * grid.resolution * math.sqrt(3)
    for idx in range(35):
        widths = [1, 2, 1] if idx % 2 == 0 else [2, 2, 1]
        for attempt in range(40):
            net_a, x, y = correctly_classified_instance(
                widths, "tanh", seed=7000 + 100 * idx + attempt, min_gamma=0.08)
            spec = NormSpec.linear_only(net_a.layer_count)
            rng = rng_for(44, idx, attempt)
            net_b = Network([w + 0.1 * rng.standard_normal(w.shape)
                             for w in net_a.weights], "tanh")
            cfg = SolverConfig(use_exact_linear=False)
            if max(estimate_margin(net_a, x, y, norm_spec=spec, cfg=cfg).value,
                   estimate_margin(net_b, x, y, norm_spec=spec,
                                   cfg=cfg).value) <= 0.9:
                break
        else:
            raise AssertionError("no in-budget pair")
        report = margin_lipschitz_gap(net_a, net_b, ([x], [y]),
                                      norm_spec=spec, margin_method="brute",
                                      grid=grid)
        assert report.violation_count(slack=slack) == 0
    worst = 0.0
    for idx in range(15):
        rng = rng_for(45, idx)
        wa = rng.standard_normal((1, 3))
        net_a = Network([wa], "tanh")
        net_b = Network([wa + 0.2 * rng.standard_normal((1, 3))], "tanh")
        xs = rng.standard_normal((3, 3))
        ys = (xs @ wa[0] > 0).astype(int)
        report = margin_lipschitz_gap(net_a, net_b, (xs, ys),
                                      margin_method="auto")
        assert report.violation_count(slack=1e-9) == 0
        worst = max(worst, float(np.max(report.diffs - report.rhs)))
    _verdict(4, True, f"35 grid pairs within 2x slack; "
                      f"linear pairs exact (worst excess {worst:.1e})")


# ------------------------------------------------------------- criterion 5

def test_c05_amo_reduces_to_sgd():
    ds = gen_synthetic("two-gaussians", 32, noise=0.1, seed=6)
    net0 = init_network([2, 8, 2], "tanh", seed=3)
    sgd = train(net0, ds, "sgd",
                TrainConfig(epochs=3, batch_size=8, lr=0.15, seed=5))
    amo = train(net0, ds, "amo",
                TrainConfig(epochs=3, batch_size=8, lr=0.15, seed=5,
                            t=1, eta_perturb=0.0))
    same = all(np.array_equal(a, b) for a, b in
               zip(sgd.network.weights, amo.network.weights))
    _verdict(5, same, "zero perturbation rate reproduces the descent "
                      "trajectory bit for bit")


# ------------------------------------------------------------- criterion 6

def test_c06_noisy_moons_generalization():
    t0 = time.monotonic()
    cfg_margin = SolverConfig(ascent_steps=60, restarts=1)
    errs = {"sgd": [], "amo": []}
    margins = {"sgd": [], "amo": []}
    for seed in range(5):
        ds = corrupt_labels(
            gen_synthetic("two-moons", 240, noise=0.12, seed=seed),
            0.2, seed=seed)
        tr, va = partition(ds, 160, seed=seed)
        net0 = init_network([2, 64, 64, 2], "tanh", seed=seed)
        for method, extra in (("sgd", {}),
                              ("amo", {"t": 1, "eta_perturb": 0.01})):
            cfg = TrainConfig(epochs=40, batch_size=16, lr=0.2, seed=seed,
                              **extra)
            out = train(net0, tr, method, cfg, val=va)
            err, _ = evaluate(out.network, va.inputs, va.labels)
            errs[method].append(err)
            keep = [i for i in range(len(tr))
                    if forward_trace(out.network, tr.inputs[i],
                                     int(tr.labels[i])).gamma > 0][:40]
            margins[method].append(np.mean(
                [estimate_margin(out.network, tr.inputs[i],
                                 int(tr.labels[i]), cfg=cfg_margin).value
                 for i in keep]))
    err_sgd, err_amo = np.mean(errs["sgd"]), np.mean(errs["amo"])
    m_sgd, m_amo = np.mean(margins["sgd"]), np.mean(margins["amo"])
    elapsed = time.monotonic() - t0
    _verdict(6, err_amo <= err_sgd and m_amo > m_sgd and elapsed < 900.0,
             f"val err {err_amo:.4f} vs {err_sgd:.4f}, "
             f"margin {m_amo:.4f} vs {m_sgd:.4f}, {elapsed:.0f}s")


# ------------------------------------------------------------- criterion 7

def test_c07_robust_training_comparison():
    eps = 0.05
    wins = 0
    dominance = True
    for seed in range(5):
        ds = gen_synthetic("two-gaussians", 200, noise=0.15, seed=seed)
        tr, va = partition(ds, 160, seed=seed)
        net0 = init_network([2, 16, 2], "tanh", seed=seed)
        spec = AttackSpec(eps, steps=5, seed=seed)
        ev = AttackSpec.evaluation(eps, seed=100 + seed)
        rob = {}
        for method, extra in (("madry", {}),
                              ("robust-amo", {"t": 1, "eta_perturb": 0.01})):
            cfg = TrainConfig(epochs=15, batch_size=16, lr=0.2, seed=seed,
                              **extra)
            out = train_robust(net0, tr, method, spec, cfg, val=va)
            clean, _ = evaluate(out.network, va.inputs, va.labels)
            rob[method] = robust_error(out.network, va.inputs, va.labels, ev)
            dominance = dominance and rob[method] >= clean
        wins += rob["robust-amo"] <= rob["madry"]
    _verdict(7, wins >= 3 and dominance,
             f"perturbation-aware robust training wins {wins}/5 seeds, "
             f"robust >= clean everywhere: {dominance}")


# ------------------------------------------------------------- criterion 8

def test_c08_surrogate_loss_curve():
    flat = all(surrogate_loss(m, beta) == 1.0
               for m in (-3.0, -0.7, 0.0) for beta in (0.5, 1.0, 2.0, 4.0))
    oracle = math.erfc(1.0 / math.sqrt(2.0))  # two Gaussian tails past 1
    anchor = abs(surrogate_loss(1.0, 1.0) - oracle)
    grid = np.linspace(-2.0, 6.0, 10_000)
    vals = [surrogate_loss(float(m), 1.0) for m in grid]
    monotone = all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    _verdict(8, flat and anchor <= 1e-6 and monotone,
             f"unit below zero, anchor off by {anchor:.1e}, "
             f"nonincreasing on the grid")


# ------------------------------------------------------------- criterion 9

def test_c09_alpha_energy_bound():
    violations = 0
    rng = rng_for(51, 0)
    for _ in range(1000):
        k = int(rng.integers(1, 7))
        z = rng.uniform(0.05, 3.0, size=k)
        b = rng.uniform(0.05, 3.0, size=k)
        q = int(rng.integers(1, 7))
        _, energy, bound = optimal_alpha(z, b, q)
        if energy > bound * (1 + 1e-12) + 1e-15:
            violations += 1
    alphas, energy, bound = optimal_alpha([1.0], [1.0], 2)
    exact = alphas[0] == 1.0 and energy == 2.0 and bound == 2.0
    _verdict(9, violations == 0 and exact,
             f"{violations} violations in 1000 draws; unit case exact")


# ------------------------------------------------------------ criterion 10

_KAPPA_ARCHS = (
    ([3, 4, 1], "tanh"), ([2, 3, 1], "softplus"), ([4, 5, 1], "tanh"),
    ([2, 4, 4, 1], "softplus"), ([3, 3, 1], "softplus"), ([2, 5, 1], "tanh"),
    ([3, 4, 4, 1], "tanh"), ([4, 3, 1], "softplus"),
)


def test_c10_gradient_norm_kappa_bound():
    worst_ratio = 0.0
    for idx in range(100):
        widths, act = _KAPPA_ARCHS[idx % len(_KAPPA_ARCHS)]
        net, x, y = correctly_classified_instance(widths, act,
                                                  seed=9000 + idx)
        tr = forward_trace(net, x, y)
        pset = PerturbationSet.zeros(net, "linear-only")
        _, _, _, _, gds = perturbed_grads(net, x, y, pset, "pre-scale",
                                          "gap", need_gd=True)
        k = net.layer_count
        for i in range(1, net.r + 1):
            g = gds[2 * i - 2]
            lhs = float(np.sqrt(np.dot(g, g)))
            rhs = interlayer_jacobian_norm(net, x, 2 * i, k) \
                * tr.norms[2 * i - 2]
            assert lhs <= rhs * (1 + 1e-6)
            if rhs > 0:
                worst_ratio = max(worst_ratio, lhs / rhs)
    _verdict(10, worst_ratio <= 1 + 1e-6,
             f"gap gradient under the kappa product on every layer "
             f"(tightest ratio {worst_ratio:.4f})")


# ------------------------------------------------------------ criterion 11

def test_c11_bound_report_behavior(tmp_path):
    rng = rng_for(61, 0)
    m = rng.uniform(0.3, 1.2, size=30)
    c = rng.uniform(0.5, 2.0, size=4)
    strict = True
    for variant, q in (("simple", 2), ("compl", 3)):
        base = bound_report(200, q, 0.01, variant, margins=m, complexities=c)
        for j in range(m.size):
            bumped = m.copy()
            bumped[j] *= 1.3
            strict = strict and bound_report(
                200, q, 0.01, variant, margins=bumped,
                complexities=c).leading < base.leading
    kap = rng.uniform(0.5, 2.0, size=(30, 3))
    a = rng.uniform(1.0, 3.0, size=3)
    base = bound_report(200, 2, 0.01, "nn", kappa=kap, layer_a=a)
    for j in range(30):
        shrunk = kap.copy()
        shrunk[j] /= 1.3  # a grown margin scales its kappa row down
        strict = strict and bound_report(
            200, 2, 0.01, "nn", kappa=shrunk, layer_a=a).leading < base.leading

    config = {
        "seed": 3, "method": "sgd",
        "dataset": {"kind": "two-gaussians", "n": 24, "noise": 0.03,
                    "seed": 1},
        "network": {"widths": [2, 4, 2], "activation": "tanh"},
        "train": {"epochs": 15, "batch_size": 8, "lr": 0.4},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config))
    blobs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert cli.main(["run", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        blobs.append(((out / "bound.json").read_bytes(),
                      (out / "manifest.json").read_bytes()))
    identical = blobs[0] == blobs[1]
    _verdict(11, strict and identical,
             "leading term strictly decreases per margin; "
             f"rerun byte-identical: {identical}")
