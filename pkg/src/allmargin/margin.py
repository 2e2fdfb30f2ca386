"""All-layer margin estimation and certification.

The margin of a correctly classified example is the smallest weighted norm
of a per-layer perturbation that flips the prediction; ties count as
flipped. Nobody gets this exactly for free, so the module offers four
routes with different trust levels:

* a closed form for single-matrix networks (exact),
* projected gradient ascent plus radial bisection plus local refinement
  (an upper estimate with a certifying perturbation),
* an exhaustive grid oracle for perturbation dimension up to six
  (independent of the fast kernels, used to audit the solver),
* the analytic kappa lower bound, which lives in the analytic module.

All solvers are pure functions of (net, x, y, config); randomness comes
only from seeds carried in the config.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._util import as_vector, rng_for
from .network import (
    MODES,
    NormSpec,
    PerturbationSet,
    forward_perturb,
    forward_trace,
    perturbed_grads,
    weighted_p_norm,
)

RESULT_KINDS = (
    "exact-linear",
    "pga-upper-estimate",
    "brute-force",
    "analytic-lower-bound",
    "margin-unbounded-at-budget",
)

_CHUNK = 1 << 18
_GRID_POINT_CAP = 50_000_000


@dataclass
class MarginResult:
    """A margin value plus how much to trust it.

    For pga-upper-estimate and brute-force results the certifying
    perturbation is present, misclassifies, and has gnorm equal to value.
    """

    value: float
    kind: str
    feasible_delta: Optional[PerturbationSet] = None
    iterations: int = 0

    def __post_init__(self):
        if self.kind not in RESULT_KINDS:
            raise ValueError(f"unknown result kind {self.kind!r}")
        if self.value < 0:
            raise ValueError("margin values are nonnegative")


@dataclass
class SolverConfig:
    ascent_steps: int = 200
    ascent_rate: float = 0.05
    bisection_tolerance: float = 1e-4
    max_bisections: int = 60
    restarts: int = 4
    seed: int = 0
    use_exact_linear: bool = True

    def __post_init__(self):
        if self.ascent_steps <= 0 or self.max_bisections <= 0 or self.restarts <= 0:
            raise ValueError("step and restart budgets must be positive")
        if self.ascent_rate <= 0 or self.bisection_tolerance <= 0:
            raise ValueError("rates and tolerances must be positive")


@dataclass
class GridSpec:
    """Per-dimension resolution and radius for the brute-force oracle."""

    resolution: float = 0.1
    radius: float = 1.5

    def __post_init__(self):
        if self.resolution <= 0 or self.radius <= 0:
            raise ValueError("grid resolution and radius must be positive")


class _FreeSlots:
    """Bijection between free perturbation entries and one flat vector."""

    def __init__(self, net, norm_spec):
        self.net = net
        self.template = PerturbationSet.zeros(net, "all-layers", norm_spec)
        free = self.template.free_mask()
        self.layers = [i for i, ok in enumerate(free) if ok]
        self.widths = [self.template.deltas[i].size for i in self.layers]
        self.offsets = np.concatenate([[0], np.cumsum(self.widths)]).astype(int)
        self.dim = int(self.offsets[-1])

    def pset(self, z):
        out = self.template.copy()
        for pos, layer in enumerate(self.layers):
            out.deltas[layer] = np.array(z[self.offsets[pos]:self.offsets[pos + 1]])
        return out

    def flat(self, gds):
        parts = [gds[layer] for layer in self.layers]
        return np.concatenate(parts) if parts else np.zeros(0)

    def layer_norms(self, z):
        return np.array([
            np.sqrt(np.dot(z[self.offsets[i]:self.offsets[i + 1]],
                           z[self.offsets[i]:self.offsets[i + 1]]))
            for i in range(len(self.layers))
        ])

    def gnorm(self, z):
        alphas = self.template.norm_spec.alphas[self.layers]
        return weighted_p_norm(alphas * self.layer_norms(z), self.template.norm_spec.p)


def _clean_zero_result(net, x, y, norm_spec, kind):
    zero = PerturbationSet.zeros(net, "all-layers", norm_spec)
    return MarginResult(value=0.0, kind=kind, feasible_delta=zero, iterations=0)


def _exact_linear(net, x, y, norm_spec, mode, trace):
    """Closed-form margin for r = 1; the certificate is nudged past the tie."""
    alpha = float(norm_spec.alphas[0])
    w = net.weights[0]
    logits = trace.logits
    ref = float(trace.norms[0]) if mode == "pre-scale" else float(
        np.sqrt(np.dot(logits, logits)))
    if ref == 0.0:
        # zero input (or zero map): no perturbation can act, nothing flips
        return MarginResult(value=0.0, kind="margin-unbounded-at-budget", iterations=0)
    slots = _FreeSlots(net, norm_spec)
    if logits.size == 1:
        sign = 1.0 if y > 0 else -1.0
        value = alpha * trace.gamma / ref
        direction = np.array([-sign]) * (trace.gamma / ref)
    else:
        others = np.delete(np.arange(logits.size), y)
        gaps = logits[y] - logits[others]
        c = int(others[int(np.argmin(gaps))])
        g = float(logits[y] - logits[c])
        value = alpha * g / (np.sqrt(2.0) * ref)
        direction = np.zeros(logits.size)
        direction[c] = g / (2.0 * ref)
        direction[y] = -g / (2.0 * ref)
    feasible = slots.pset(direction * (1.0 + 1e-9))
    return MarginResult(value=float(value), kind="exact-linear",
                        feasible_delta=feasible, iterations=1)


def estimate_margin(net, x, y, norm_spec=None, mode="pre-scale", cfg=None):
    """Upper-estimate the all-layer margin with a certifying perturbation.

    Ascends cross-entropy in the free perturbation coordinates until the
    prediction flips, bisects the radial scale down to the boundary, then
    tries a few rounds of norm-shrinking refinement. Single-matrix nets
    take the closed form unless the config disables it.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cfg = cfg or SolverConfig()
    norm_spec = norm_spec or NormSpec.uniform(net.layer_count)
    x = as_vector(x)
    trace = forward_trace(net, x, y)
    if trace.misclassified:
        return _clean_zero_result(net, x, y, norm_spec, "pga-upper-estimate")
    slots = _FreeSlots(net, norm_spec)
    if slots.dim == 0:
        return MarginResult(value=0.0, kind="margin-unbounded-at-budget", iterations=0)
    if cfg.use_exact_linear and net.r == 1 and slots.layers == [0]:
        return _exact_linear(net, x, y, norm_spec, mode, trace)

    evals = 0
    largest_tried = 0.0
    best_z = None
    best_norm = np.inf

    def gap_of(z):
        nonlocal evals, largest_tried
        evals += 1
        largest_tried = max(largest_tried, slots.gnorm(z))
        return forward_perturb(net, x, slots.pset(z), mode, y).gap

    for restart in range(cfg.restarts):
        rng = rng_for(cfg.seed, restart)
        if restart == 0:
            z = np.zeros(slots.dim)
        else:
            v = rng.standard_normal(slots.dim)
            z = (cfg.ascent_rate / np.sqrt(np.dot(v, v))) * v
        rate = cfg.ascent_rate
        flipped = None
        for step in range(cfg.ascent_steps):
            _, gap, _, _, gds = perturbed_grads(
                net, x, y, slots.pset(z), mode, "loss", need_gd=True)
            evals += 1
            largest_tried = max(largest_tried, slots.gnorm(z))
            if gap <= 0.0:
                flipped = z
                break
            g = slots.flat(gds)
            gn = np.sqrt(np.dot(g, g))
            if gn == 0.0:
                g = rng.standard_normal(slots.dim)
                gn = np.sqrt(np.dot(g, g))
            z = z + (rate / gn) * g
            if (step + 1) % 20 == 0:
                rate *= 1.5
        if flipped is None and gap_of(z) <= 0.0:
            flipped = z
        if flipped is None:
            continue
        z, nb = _bisect_radial(gap_of, flipped, cfg)
        z = _refine(net, x, y, slots, z, mode, cfg, gap_of)
        n = slots.gnorm(z)
        if n < best_norm:
            best_norm, best_z = n, z

    if best_z is None:
        return MarginResult(value=float(largest_tried),
                            kind="margin-unbounded-at-budget", iterations=evals)
    feasible = slots.pset(best_z)
    return MarginResult(value=feasible.gnorm(), kind="pga-upper-estimate",
                        feasible_delta=feasible, iterations=evals)


def _bisect_radial(gap_of, z_hi, cfg):
    """Shrink the radial scale of a flipping z; the high end stays flipped."""
    lo, hi = 0.0, 1.0
    its = 0
    while its < cfg.max_bisections and (hi - lo) > cfg.bisection_tolerance * hi:
        mid = 0.5 * (lo + hi)
        if gap_of(mid * z_hi) <= 0.0:
            hi = mid
        else:
            lo = mid
        its += 1
    return hi * z_hi, its


def _norm_descent_direction(slots, z):
    # gradient of the weighted norm, up to a positive factor; None at p = inf
    ns = slots.template.norm_spec
    if np.isinf(ns.p):
        return None
    d = np.zeros_like(z)
    for i, layer in enumerate(slots.layers):
        a, b = slots.offsets[i], slots.offsets[i + 1]
        seg = z[a:b]
        n = np.sqrt(np.dot(seg, seg))
        if n > 0.0:
            d[a:b] = (ns.alphas[layer] ** ns.p) * (n ** (ns.p - 2.0)) * seg
    dn = np.sqrt(np.dot(d, d))
    return d / dn if dn > 0.0 else None


def _refine(net, x, y, slots, z, mode, cfg, gap_of):
    """Local norm reduction around a boundary point, keeping it flipped."""
    for _ in range(15):
        moved = False
        z_try = 0.95 * z
        if gap_of(z_try) <= 0.0:
            z, moved = z_try, True
        else:
            d = _norm_descent_direction(slots, z)
            if d is not None:
                z_try = z - (0.05 * np.sqrt(np.dot(z, z))) * d
                for _ in range(3):
                    _, gap, _, _, gds = perturbed_grads(
                        net, x, y, slots.pset(z_try), mode, "gap", need_gd=True)
                    if gap <= 0.0:
                        break
                    g = slots.flat(gds)
                    gsq = np.dot(g, g)
                    if gsq == 0.0:
                        break
                    z_try = z_try - (1.05 * gap / gsq) * g
                if gap_of(z_try) <= 0.0 and slots.gnorm(z_try) < slots.gnorm(z):
                    z, moved = z_try, True
        if not moved:
            break
    z, _ = _bisect_radial(gap_of, z, cfg)
    return z


def _batch_gaps(net, x, y, slots, Z, mode):
    """Gap of every row of Z, by broadcast numpy independent of the kernels."""
    n = Z.shape[0]
    H = np.broadcast_to(x, (n, x.size)).copy()
    pos = {layer: i for i, layer in enumerate(slots.layers)}
    for j in range(1, net.layer_count + 1):
        prev_norms = np.sqrt(np.sum(H * H, axis=1))
        if j % 2 == 1:
            U = H @ net.weights[(j - 1) // 2].T
        elif net.activation == "tanh":
            U = np.tanh(H)
        elif net.activation == "softplus":
            U = np.logaddexp(0.0, H)
        else:
            U = np.maximum(H, 0.0)
        if (j - 1) in pos:
            i = pos[j - 1]
            S = Z[:, slots.offsets[i]:slots.offsets[i + 1]]
            ref = prev_norms if mode == "pre-scale" else np.sqrt(np.sum(U * U, axis=1))
            U = U + ref[:, None] * S
        H = U
    if H.shape[1] == 1:
        sign = 1.0 if y > 0 else -1.0
        return sign * H[:, 0]
    rival = H.copy()
    rival[:, y] = -np.inf
    return H[:, y] - np.max(rival, axis=1)


def _batch_gnorms(slots, Z):
    ns = slots.template.norm_spec
    cols = []
    for i, layer in enumerate(slots.layers):
        seg = Z[:, slots.offsets[i]:slots.offsets[i + 1]]
        cols.append(ns.alphas[layer] * np.sqrt(np.sum(seg * seg, axis=1)))
    V = np.stack(cols, axis=1)
    m = np.max(V, axis=1)
    if np.isinf(ns.p):
        return m
    safe = np.where(m > 0.0, m, 1.0)[:, None]
    out = safe[:, 0] * np.sum((V / safe) ** ns.p, axis=1) ** (1.0 / ns.p)
    return np.where(m > 0.0, out, 0.0)


def _grid_candidates(net, x, y, slots, coords, mode, center=None):
    """Evaluate the full product grid in chunks; return flipped candidates.

    Yields (gnorm, flat z) for the best few flipped points, plus bookkeeping
    (total points, largest gnorm seen) for unbounded reporting.
    """
    axes = [coords + (0.0 if center is None else center[d]) for d in range(slots.dim)]
    mesh_total = 1
    for a in axes:
        mesh_total *= a.size
    if mesh_total > _GRID_POINT_CAP:
        raise ValueError(
            f"grid of {mesh_total} points exceeds the cap; coarsen the resolution")
    idx = np.arange(mesh_total)
    sizes = np.array([a.size for a in axes])
    best = []
    largest = 0.0
    for start in range(0, mesh_total, _CHUNK):
        sel = idx[start:start + _CHUNK]
        Z = np.empty((sel.size, slots.dim))
        rem = sel
        for d in range(slots.dim - 1, -1, -1):
            Z[:, d] = axes[d][rem % sizes[d]]
            rem = rem // sizes[d]
        gaps = _batch_gaps(net, x, y, slots, Z, mode)
        norms = _batch_gnorms(slots, Z)
        largest = max(largest, float(np.max(norms)))
        flipped = gaps <= 0.0
        if np.any(flipped):
            sub = np.where(flipped)[0]
            j = sub[int(np.argmin(norms[sub]))]
            best.append((float(norms[j]), Z[j].copy()))
    best.sort(key=lambda t: t[0])
    return best[:8], mesh_total, largest


def brute_force_margin(net, x, y, grid=None, norm_spec=None, mode="pre-scale"):
    """Exhaustive grid oracle for the margin, refused above dimension six.

    The grid is searched once at the given resolution, then twice more at
    halved resolution in a shrinking box around the best flipped point.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    grid = grid or GridSpec()
    norm_spec = norm_spec or NormSpec.uniform(net.layer_count)
    x = as_vector(x)
    trace = forward_trace(net, x, y)
    if trace.misclassified:
        return _clean_zero_result(net, x, y, norm_spec, "brute-force")
    slots = _FreeSlots(net, norm_spec)
    if slots.dim == 0:
        return MarginResult(value=0.0, kind="margin-unbounded-at-budget", iterations=0)
    if slots.dim > 6:
        raise ValueError(f"brute force refused: perturbation dimension {slots.dim} > 6")

    m = max(1, int(round(grid.radius / grid.resolution)))
    coords = np.linspace(-m * grid.resolution, m * grid.resolution, 2 * m + 1)
    candidates, total, largest = _grid_candidates(net, x, y, slots, coords, mode)
    if not candidates:
        return MarginResult(value=float(largest),
                            kind="margin-unbounded-at-budget", iterations=total)
    best_norm, best_z = candidates[0]
    res = grid.resolution
    for _ in range(2):
        res *= 0.5
        local = np.linspace(-4 * res, 4 * res, 9)
        cands, n_pts, _ = _grid_candidates(net, x, y, slots, local, mode, center=best_z)
        total += n_pts
        if cands and cands[0][0] < best_norm:
            best_norm, best_z = cands[0]
            candidates = cands + candidates

    # certify under the sequential forward; nudge past ties if rounding differs
    for _, z in candidates:
        for bump in (1.0, 1.0 + 1e-9, 1.0 + 1e-6):
            pset = slots.pset(bump * z)
            if forward_perturb(net, x, pset, mode, y).misclassified:
                return MarginResult(value=pset.gnorm(), kind="brute-force",
                                    feasible_delta=pset, iterations=total)
    raise RuntimeError("grid candidates failed re-verification")


@dataclass
class LipschitzGapReport:
    margins_a: np.ndarray
    margins_b: np.ndarray
    rhs: float

    @property
    def diffs(self):
        return np.abs(self.margins_a - self.margins_b)

    def violation_count(self, slack=0.0):
        return int(np.sum(self.diffs > self.rhs + slack))


def margin_lipschitz_gap(net_a, net_b, dataset, norm_spec=None,
                         margin_method="auto", grid=None, mode="pre-scale"):
    """Per-example margin differences of two nets against the norm bound.

    The right-hand side aggregates per-layer operator-norm gaps between the
    two networks with the same weights and exponent the margin uses.
    Activation layers contribute nothing (the maps are identical).
    """
    if net_a.widths != net_b.widths or net_a.activation != net_b.activation:
        raise ValueError("architecture mismatch")
    norm_spec = norm_spec or NormSpec.uniform(net_a.layer_count)
    inputs = getattr(dataset, "inputs", None)
    labels = getattr(dataset, "labels", None)
    if inputs is None:
        inputs, labels = dataset

    from .network import operator_norm
    gaps = np.zeros(net_a.layer_count)
    for i in range(net_a.r):
        gaps[2 * i] = operator_norm(net_a.weights[i] - net_b.weights[i])
    weighted = []
    for i in range(net_a.layer_count):
        a = norm_spec.alphas[i]
        weighted.append(0.0 if gaps[i] == 0.0 else a * gaps[i])
    rhs = weighted_p_norm(np.asarray(weighted), norm_spec.p)

    use_exact = margin_method == "exact" or (margin_method == "auto" and net_a.r == 1)

    def one(net, x, y):
        if use_exact:
            cfg = SolverConfig(use_exact_linear=True)
            return estimate_margin(net, x, y, norm_spec, mode, cfg).value
        return brute_force_margin(net, x, y, grid, norm_spec, mode).value

    ma = np.array([one(net_a, x, y) for x, y in zip(inputs, labels)])
    mb = np.array([one(net_b, x, y) for x, y in zip(inputs, labels)])
    return LipschitzGapReport(margins_a=ma, margins_b=mb, rhs=float(rhs))


def adversarial_margin(net, x, y, ball, cfg=None, norm_spec=None, mode="pre-scale"):
    """Smallest margin over the attack ball, by alternating descent.

    Runs sign-gradient ascent on the clean loss to move x' inside the
    ell-infinity ball, re-estimating the margin at each iterate; returns
    the smallest estimate found. With radius 0 this is estimate_margin.
    """
    cfg = cfg or SolverConfig()
    norm_spec = norm_spec or NormSpec.uniform(net.layer_count)
    x = as_vector(x)
    if ball.radius < 0:
        raise ValueError("ball radius must be nonnegative")

    best = estimate_margin(net, x, y, norm_spec, mode, cfg)
    estimates = 1 + best.iterations
    if ball.radius == 0:
        return best
    lo = np.maximum(x - ball.radius, ball.box_min)
    hi = np.minimum(x + ball.radius, ball.box_max)
    for restart in range(max(1, ball.restarts)):
        rng = rng_for(ball.seed, restart)
        xp = x if restart == 0 else np.clip(
            x + rng.uniform(-ball.radius, ball.radius, size=x.size), lo, hi)
        for _ in range(ball.steps):
            _, gap, _, gx, _ = perturbed_grads(
                net, xp, y, None, mode, "loss", need_gx=True)
            xp = np.clip(xp + ball.step_size * np.sign(gx), lo, hi)
            r = estimate_margin(net, xp, y, norm_spec, mode, cfg)
            estimates += 1 + r.iterations
            if r.value < best.value:
                best = r
            if best.value == 0.0:
                break
        if best.value == 0.0:
            break
    return MarginResult(value=best.value, kind=best.kind,
                        feasible_delta=best.feasible_delta, iterations=estimates)
