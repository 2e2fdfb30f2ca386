"""Analytic margin lower bounds and generalization-bound arithmetic.

Everything here is closed-form given a network, an example, and the
Jacobian-norm table: the per-matrix kappa quantities, their generalized
per-layer variant, the margin lower bounds they induce, per-layer
complexities, the Gaussian surrogate loss, the closed-form perturbation
weights, and the leading terms of the generalization bounds.

Conventions fixed once and used throughout: kappa_{j<-j+1} = 1 (empty
composition); a ratio with zero denominator is 0 when the numerator is 0
and infinity otherwise; log is the natural log; every suppressed absolute
constant in a bound is set to 1, and reports say so.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._util import as_vector, map_indexed, rng_for
from .margin import MarginResult
from .network import forward_trace, jacobian_norm_table, perturbed_grads

CONSTANTS_POLICY = "all suppressed absolute constants set to 1; log is natural"


class UndefinedAtMisclassified(ValueError):
    """kappa quantities divide by the output margin, so gamma must be positive."""


class RequiresSmoothActivation(ValueError):
    """The kappa-based bounds need a Lipschitz activation derivative."""


@dataclass
class KappaReport:
    """Per-layer kappa values plus the raw ingredients they came from.

    kappa_nn is indexed by linear layer (length r), kappa_star by layer
    (length k); whichever op built the report fills its own field.
    """

    gamma: float
    norms: np.ndarray
    table: dict
    kappa_phi_prime: float
    kappa_nn: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None
    kappa_star: Optional[np.ndarray] = None
    kappa_adv: Optional[np.ndarray] = None

    def s(self, i):
        return float(self.norms[2 * i])


def _ratio(num, den):
    if den > 0.0:
        return num / den
    return 0.0 if num == 0.0 else math.inf


def _smooth_table(net, x, y):
    trace = forward_trace(net, x, y)
    if trace.gamma <= 0.0:
        raise UndefinedAtMisclassified(
            "undefined-at-misclassified: kappa needs gamma > 0")
    return trace, jacobian_norm_table(net, x)


def kappa_nn(net, x, y):
    """Per-matrix local Lipschitz constants of the perturbed network.

    Entry i is s_(i-1) kappa_{2r-1<-2i} / gamma plus the secondary term
    psi_(i), evaluated term by term from the Jacobian-norm table.
    """
    if net.activation == "relu":
        raise RequiresSmoothActivation(
            "requires-smooth-activation: relu has no Lipschitz derivative")
    trace, table = _smooth_table(net, x, y)
    r, k = net.r, net.layer_count
    kp = net.kappa_phi_prime
    gamma = trace.gamma

    def kap(j, i):
        return table[(j, i)]

    def block(i):
        return float(trace.norms[2 * i])

    psi = np.zeros(r)
    lead = np.zeros(r)
    for i in range(1, r + 1):
        s_prev = block(i - 1)
        lead[i - 1] = _ratio(s_prev * kap(2 * r - 1, 2 * i), gamma)
        t1 = 0.0
        for j in range(i, r):
            t1 += _ratio(s_prev * kap(2 * j, 2 * i), block(j))
        t2 = 0.0
        for j in range(1, 2 * i):
            for jp in range(2 * i - 1, k + 1):
                t2 += _ratio(kap(jp, 2 * i) * kap(2 * i - 2, j), kap(jp, j))
        t3 = 0.0
        for j in range(1, k + 1):
            for jp in range(j, k + 1):
                start = max(2 * i, j)
                if start % 2 == 1:
                    start += 1
                for jpp in range(start, jp + 1, 2):
                    num = kp * kap(jp, jpp + 1) * kap(jpp - 1, 2 * i) \
                        * kap(jpp - 1, j) * s_prev
                    t3 += _ratio(num, kap(jp, j))
        psi[i - 1] = t1 + t2 + t3

    return KappaReport(gamma=gamma, norms=trace.norms, table=table,
                       kappa_phi_prime=kp, kappa_nn=lead + psi, psi=psi)


def kappa_star(net, x, y, kappa_primes=None):
    """The generalized per-layer constants with their printed 8/8/16 weights.

    kappa_primes gives the smoothness of each layer's map; by default linear
    layers get 0 and activation layers the activation's constant.
    """
    trace, table = _smooth_table(net, x, y)
    k = net.layer_count
    gamma = trace.gamma
    s = trace.norms
    if kappa_primes is None:
        kappa_primes = [0.0 if j % 2 == 1 else net.kappa_phi_prime
                        for j in range(1, k + 1)]
    kappa_primes = [float(v) for v in kappa_primes]
    if len(kappa_primes) != k:
        raise ValueError("need one smoothness constant per layer")

    def kap(j, i):
        return table[(j, i)]

    out = np.zeros(k)
    for i in range(1, k + 1):
        s_prev = float(s[i - 1])
        b1 = _ratio(8.0 * kap(k, i + 1), gamma)
        for j in range(i, k):
            b1 += _ratio(8.0 * kap(j, i + 1), float(s[j]))
        b1 *= s_prev
        b2 = 0.0
        for j2 in range(1, k + 1):
            for j1 in range(j2, k + 1):
                for jp in range(max(i + 1, j2), j1 + 1):
                    num = 16.0 * kappa_primes[jp - 1] * kap(jp - 1, i + 1) \
                        * kap(j1, jp + 1) * kap(jp - 1, j2)
                    b2 += _ratio(num, kap(j1, j2))
        b2 *= s_prev
        b3 = 0.0
        for j2 in range(1, i + 1):
            for j1 in range(i, k + 1):
                b3 += _ratio(kap(j1, i + 1) * kap(i - 1, j2), kap(j1, j2))
        out[i - 1] = b1 + b2 + 8.0 * b3

    return KappaReport(gamma=gamma, norms=s, table=table,
                       kappa_phi_prime=net.kappa_phi_prime, kappa_star=out)


def _dual_exponent(p):
    if np.isinf(p):
        return 1.0
    if p == 1.0:
        return math.inf
    return p / (p - 1.0)


def margin_lower_bound(net, x, y, norm_spec=None):
    """Analytic lower bound on the all-layer margin.

    Without a norm spec this is 1 over the 2-norm of the kappa_nn vector
    (the bound for perturbations at linear layers only); with one it is the
    dual-norm form over kappa_star weighted by 1/alpha. Misclassified
    points get the trivially correct value 0.
    """
    if net.activation == "relu":
        raise RequiresSmoothActivation(
            "requires-smooth-activation: relu has no Lipschitz derivative")
    trace = forward_trace(net, x, y)
    if trace.gamma <= 0.0:
        return MarginResult(value=0.0, kind="analytic-lower-bound", iterations=0)
    if norm_spec is None:
        rep = kappa_nn(net, x, y)
        denom = float(np.sqrt(np.sum(rep.kappa_nn ** 2)))
    else:
        rep = kappa_star(net, x, y)
        scaled = []
        for i in range(net.layer_count):
            a = norm_spec.alphas[i]
            scaled.append(0.0 if np.isinf(a) else rep.kappa_star[i] / a)
        v = np.asarray(scaled)
        pd = _dual_exponent(norm_spec.p)
        denom = float(np.max(v)) if np.isinf(pd) else float(
            np.sum(v ** pd) ** (1.0 / pd))
    value = 0.0 if denom == math.inf else (math.inf if denom == 0.0 else 1.0 / denom)
    return MarginResult(value=value, kind="analytic-lower-bound", iterations=0)


def layer_complexity(w, a=None, b=None, d=None):
    """min of the scaled Frobenius and entrywise-l1 distances, times sqrt(log d).

    The additive poly(1/n) term is taken as 0.
    """
    w = np.asarray(w, dtype=np.float64)
    a = np.zeros_like(w) if a is None else np.asarray(a, dtype=np.float64)
    b = np.zeros_like(w) if b is None else np.asarray(b, dtype=np.float64)
    if a.shape != w.shape or b.shape != w.shape:
        raise ValueError("reference matrices must match the weight shape")
    if d is None:
        d = max(w.shape)
    if d < 2:
        raise ValueError("d must be at least 2")
    fro = math.sqrt(d) * float(np.linalg.norm(w - a, "fro"))
    l11 = float(np.sum(np.abs(w - b)))
    return min(fro, l11) * math.sqrt(math.log(d))


def composite_complexity(alphas, p, complexities):
    """Aggregate per-layer cover complexities under the weighted norm."""
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    c = np.asarray(complexities, dtype=np.float64).reshape(-1)
    if alphas.size != c.size:
        raise ValueError("alphas and complexities must align")
    if np.any(c < 0) or np.any(alphas < 0):
        raise ValueError("alphas and complexities must be nonnegative")
    if not p >= 1.0:
        raise ValueError("p must be at least 1")
    frozen = np.isinf(alphas)
    if np.any(frozen & (c > 0)):
        raise ValueError("a frozen layer (alpha infinite) must have zero complexity")
    inner = 2.0 / (1.0 + 2.0 / p)  # 2p/(p+2), stable as p -> inf
    live = ~frozen
    terms = np.zeros_like(c)
    # the formula is stated on the product alpha*C; frozen layers carry
    # C = 0 and contribute nothing, sidestepping inf*0
    terms[live] = (alphas[live] * c[live]) ** inner
    return float(np.sum(terms) ** (1.0 / inner))


def surrogate_loss(m, beta):
    """The Gaussian tail surrogate: 1 below the margin 0, else 2 Phi(-m sqrt(beta))."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if m <= 0:
        return 1.0
    return math.erfc(m * math.sqrt(beta) / math.sqrt(2.0))


def optimal_alpha(z, b, q):
    """Closed-form minimizing weights for E(alpha) plus the 2 T^{3q/(q+2)} cap.

    Returns (alpha_star, E(alpha_star), upper_bound) and checks the
    inequality E <= upper_bound before returning.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if z.size != b.size or z.size == 0:
        raise ValueError("z and b must be nonempty and align")
    if np.any(z <= 0) or np.any(b <= 0):
        raise ValueError("degenerate input: z and b must be positive "
                         "(freeze a layer by dropping it, not by zeroing)")
    if q != int(q) or q <= 0:
        raise ValueError("q must be a positive integer")
    q = int(q)
    t = float(np.sum((z * b) ** (2.0 / 3.0)))
    alpha = ((q / 2.0) ** (1.0 / (q + 2.0))
             * z ** ((3.0 * q - 2.0) / (3.0 * q))
             * b ** (-2.0 / (3.0 * q))
             * t ** ((2.0 - 2.0 * q) / (q * (q + 2.0))))
    inner = 2.0 * q / (3.0 * q - 2.0)
    e_value = float(np.sum((z / alpha) ** q)
                    + np.sum((alpha * b) ** inner) ** ((3.0 * q - 2.0) / q))
    upper = 2.0 * t ** (3.0 * q / (q + 2.0))
    if not e_value <= upper * (1.0 + 1e-12):
        raise AssertionError("closed-form alpha exceeded its own upper bound")
    return alpha, e_value, upper


@dataclass
class ComplexityReport:
    """Per-layer complexities and everything derived from them."""

    a: np.ndarray
    complexities: np.ndarray
    c_gnorm: float
    alphas: np.ndarray
    p: float
    z: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    alpha_star: Optional[np.ndarray] = None
    e_value: Optional[float] = None
    e_upper: Optional[float] = None


def complexity_report(net, refs_a=None, refs_b=None, alphas=None, p=2.0, d=None):
    """Layer complexities of a network: a_(i) on matrices, 0 on activations."""
    r, k = net.r, net.layer_count
    if d is None:
        d = max(2, net.max_width)
    a_vals = np.array([
        layer_complexity(net.weights[i],
                         None if refs_a is None else refs_a[i],
                         None if refs_b is None else refs_b[i], d)
        for i in range(r)
    ])
    c = np.zeros(k)
    c[0::2] = a_vals
    if alphas is None:
        alphas = np.ones(k)
    alphas = np.asarray(alphas, dtype=np.float64)
    return ComplexityReport(a=a_vals, complexities=c,
                            c_gnorm=composite_complexity(alphas, p, c),
                            alphas=alphas, p=p)


@dataclass
class BoundReport:
    n: int
    q: int
    delta_c: float
    variant: str
    moment: object
    leading: float
    zeta: float
    beta: Optional[float] = None
    constants_policy: str = CONSTANTS_POLICY

    @property
    def total(self):
        return self.leading + self.zeta

    def to_dict(self):
        moment = self.moment
        if isinstance(moment, np.ndarray):
            moment = moment.tolist()
        return {
            "n": self.n, "q": self.q, "delta_c": self.delta_c,
            "variant": self.variant, "moment": moment,
            "leading": self.leading, "zeta": self.zeta, "total": self.total,
            "beta": self.beta, "constants_policy": self.constants_policy,
        }


BOUND_VARIANTS = ("simple", "compl", "nn", "adv-nn")


def _inverse_moment(margins, q):
    m = np.asarray(margins, dtype=np.float64).reshape(-1)
    if np.any(m <= 0):
        raise ValueError("theorem-precondition-violated: "
                         "a margin is 0 under a training-error-0 theorem")
    inv = 1.0 / m
    return float(np.mean(inv ** q) ** (1.0 / q))


def bound_report(n, q, delta_c, variant="simple", margins=None, complexities=None,
                 alphas=None, p=2.0, kappa=None, layer_a=None, beta=None):
    """Leading term and low-order term of the selected bound, constants at 1.

    simple and compl take per-example margins plus per-layer complexities;
    nn and adv-nn take a per-example-by-linear-layer kappa matrix plus the
    per-matrix a values. The low-order term is (log(1/delta_c) + log n)/n,
    and the nn variants add (r log n + sum log(a+1))/n on top.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if q != int(q) or q < 1:
        raise ValueError("q must be a positive integer")
    q = int(q)
    if not 0.0 < delta_c < 1.0:
        raise ValueError("delta_c must lie in (0, 1)")
    if variant not in BOUND_VARIANTS:
        raise ValueError(f"unknown bound variant {variant!r}")
    logn = math.log(n)
    zeta = (math.log(1.0 / delta_c) + logn) / n

    if variant == "simple":
        c = np.asarray(complexities, dtype=np.float64).reshape(-1)
        moment = _inverse_moment(margins, 2)
        leading = float(np.sum(c)) / math.sqrt(n) * moment * logn ** 2
    elif variant == "compl":
        c = np.asarray(complexities, dtype=np.float64).reshape(-1)
        a = np.ones(c.size) if alphas is None else np.asarray(alphas, dtype=np.float64)
        cg = composite_complexity(a, p, c)
        moment = _inverse_moment(margins, q)
        leading = (moment * cg / math.sqrt(n)) ** (2.0 * q / (q + 2.0)) * logn ** 2
    else:
        k_mat = np.atleast_2d(np.asarray(kappa, dtype=np.float64))
        a = np.asarray(layer_a, dtype=np.float64).reshape(-1)
        if k_mat.shape[1] != a.size:
            raise ValueError("kappa matrix and layer_a must align per linear layer")
        moment = np.mean(np.abs(k_mat) ** q, axis=0) ** (1.0 / q)
        total = float(np.sum(moment ** (2.0 / 3.0) * a ** (2.0 / 3.0)))
        leading = total ** (3.0 * q / (q + 2.0)) * logn ** 2 / n ** (q / (q + 2.0))
        zeta += (a.size * logn + float(np.sum(np.log(a + 1.0)))) / n

    return BoundReport(n=n, q=q, delta_c=delta_c, variant=variant,
                       moment=moment, leading=float(leading), zeta=float(zeta),
                       beta=beta)


def dataset_kappa_nn(net, inputs, labels, threads=None):
    """kappa_nn row per example, order-preserving and thread-parallel."""
    items = list(zip(np.asarray(inputs), np.asarray(labels)))
    rows = map_indexed(lambda _, ex: kappa_nn(net, ex[0], int(ex[1])).kappa_nn,
                       items, threads)
    return np.stack(rows) if rows else np.zeros((0, net.r))


def kappa_adv(net, x, y, ball):
    """Max of kappa_nn over sign-gradient iterates in the attack ball.

    A search under-estimate of the true maximum; any iterate that the net
    misclassifies breaks the robust-margin precondition and raises.
    """
    x = as_vector(x)
    lo = np.maximum(x - ball.radius, ball.box_min)
    hi = np.minimum(x + ball.radius, ball.box_max)
    best = kappa_nn(net, x, y).kappa_nn.copy()
    for restart in range(max(1, ball.restarts)):
        rng = rng_for(ball.seed, restart)
        xp = x if restart == 0 else np.clip(
            x + rng.uniform(-ball.radius, ball.radius, size=x.size), lo, hi)
        for _ in range(ball.steps):
            _, _, _, gx, _ = perturbed_grads(net, xp, y, None, "pre-scale",
                                             "loss", need_gx=True)
            xp = np.clip(xp + ball.step_size * np.sign(gx), lo, hi)
            best = np.maximum(best, kappa_nn(net, xp, y).kappa_nn)
    return best
