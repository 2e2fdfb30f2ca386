"""Feedforward classifiers and their perturbed forward passes.

A network with r weight matrices is viewed as k = 2r-1 alternating layers:
odd layers multiply by a weight matrix, even layers apply the activation
elementwise, and there is no activation after the last matrix. Width-1
output means binary classification by sign (positive class is label 1).

Perturbations attach one vector per layer; layer j's output receives its
vector scaled by a hidden-layer norm, either the norm of the layer's input
(pre-scale) or of its own fresh output (post-scale). The two differ only in
which norm multiplies the perturbation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff, kernels
from ._util import as_vector, rng_for

ACTIVATIONS = ("tanh", "softplus", "relu")
PLACEMENTS = ("all-layers", "linear-only", "post-block")
MODES = ("pre-scale", "post-scale")

_SMOOTHNESS_CACHE = {}


def activation_smoothness(name):
    """Lipschitz constant of the activation's derivative.

    Found by dense grid maximization of |phi''| over [-20, 20] with 1e6
    points rather than a closed form; infinity for relu, whose derivative
    jumps.
    """
    if name in _SMOOTHNESS_CACHE:
        return _SMOOTHNESS_CACHE[name]
    if name == "relu":
        value = np.inf
    else:
        grid = np.linspace(-20.0, 20.0, 10 ** 6)
        if name == "tanh":
            t = np.tanh(grid)
            second = -2.0 * t * (1.0 - t * t)
        elif name == "softplus":
            s = 1.0 / (1.0 + np.exp(-grid))
            second = s * (1.0 - s)
        else:
            raise ValueError(f"unknown activation {name!r}")
        value = float(np.max(np.abs(second)))
    _SMOOTHNESS_CACHE[name] = value
    return value


class Network:
    """Immutable-by-convention stack of weight matrices plus one activation.

    Training mutates `weights` in place under exclusive access; everything
    else treats the network as read-only.
    """

    def __init__(self, weights, activation):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        if not self.weights:
            raise ValueError("a network needs at least one weight matrix")
        for a, b in zip(self.weights, self.weights[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError(f"incompatible consecutive shapes {a.shape} -> {b.shape}")
        self.activation = activation

    @property
    def r(self):
        return len(self.weights)

    @property
    def layer_count(self):
        return 2 * self.r - 1

    @property
    def widths(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def max_width(self):
        return max(self.widths)

    @property
    def kappa_phi_prime(self):
        return activation_smoothness(self.activation)

    def layer_width(self, j):
        """Output width of layer j (1-based); equals widths[(j+1)//2]."""
        return self.widths[(j + 1) // 2]

    def copy(self):
        return Network([w.copy() for w in self.weights], self.activation)

    def __repr__(self):
        return f"Network(widths={self.widths}, activation={self.activation!r})"


def init_network(widths, activation, seed):
    """Scaled uniform fan-in initialization, reproducible per seed (PCG64)."""
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    rng = rng_for(seed)
    weights = []
    for i in range(1, len(widths)):
        bound = 1.0 / np.sqrt(widths[i - 1])
        weights.append(rng.uniform(-bound, bound, size=(widths[i], widths[i - 1])))
    return Network(weights, activation)


def perturbable_layers(placement, r):
    """1-based layer indices that accept a perturbation under a placement."""
    k = 2 * r - 1
    if placement == "all-layers":
        return list(range(1, k + 1))
    if placement == "linear-only":
        return list(range(1, k + 1, 2))
    if placement == "post-block":
        # one slot after each linear+activation block; the final matrix has
        # no following activation, hence no slot at r = 1
        return list(range(2, k, 2))
    raise ValueError(f"unknown placement {placement!r}")


@dataclass
class NormSpec:
    """Weighted aggregate norm over per-layer perturbations.

    The scalar applied to layer i is alphas[i-1]; infinity freezes the
    layer (its perturbation must stay zero and contributes nothing).
    """

    alphas: np.ndarray
    p: float = 2.0

    def __post_init__(self):
        self.alphas = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        if np.any(self.alphas < 0):
            raise ValueError("alphas must be nonnegative")
        if not self.p >= 1.0:
            raise ValueError("p must be at least 1")

    @classmethod
    def uniform(cls, k, p=2.0):
        return cls(np.ones(k), p)

    @classmethod
    def linear_only(cls, k, p=2.0):
        """Weight 1 on linear layers, infinity on activation layers."""
        a = np.ones(k)
        a[1::2] = np.inf
        return cls(a, p)


def weighted_p_norm(values, p):
    """p-norm of a nonnegative vector, scale-exact under doubling.

    Dividing by the max entry keeps the powered sum identical when every
    entry is scaled by a power of two, so the result scales exactly.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        return 0.0
    m = float(np.max(v))
    if m == 0.0 or np.isinf(p):
        return m
    return m * float(np.sum((v / m) ** p) ** (1.0 / p))


@dataclass
class PerturbationSet:
    """Per-layer perturbation vectors plus their weighted-norm specification.

    deltas has one entry per layer; zero-length vectors mark layers the
    placement disallows. Frozen layers (alpha infinite) must hold zeros.
    """

    deltas: list
    placement: str
    norm_spec: NormSpec

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        self.deltas = [as_vector(d) for d in self.deltas]
        k = len(self.deltas)
        if self.norm_spec.alphas.size != k:
            raise ValueError("norm_spec length must match layer count")
        for i, d in enumerate(self.deltas):
            if np.isinf(self.norm_spec.alphas[i]) and d.size and np.any(d):
                raise ValueError(f"layer {i + 1} is frozen (alpha=inf) but has a nonzero delta")

    @classmethod
    def zeros(cls, net, placement="all-layers", norm_spec=None):
        k = net.layer_count
        slots = set(perturbable_layers(placement, net.r))
        deltas = [
            np.zeros(net.layer_width(j)) if j in slots else np.zeros(0)
            for j in range(1, k + 1)
        ]
        if norm_spec is None:
            norm_spec = NormSpec.uniform(k)
        return cls(deltas, placement, norm_spec)

    def kernel_slots(self):
        """deltas in the form the kernels take: None for absent slots."""
        return [d if d.size else None for d in self.deltas]

    def free_mask(self):
        """Per-layer flag: slot exists and is not frozen by an infinite alpha."""
        return [
            d.size > 0 and not np.isinf(self.norm_spec.alphas[i])
            for i, d in enumerate(self.deltas)
        ]

    def gnorm(self):
        """The weighted norm ||(alpha_i ||delta_i||_2)_i||_p; frozen layers add 0.

        Factored through the largest entry so that uniformly rescaling the
        alphas rescales the value exactly, not just to rounding.
        """
        per_layer = []
        for i, d in enumerate(self.deltas):
            a = self.norm_spec.alphas[i]
            n = float(np.sqrt(np.dot(d, d))) if d.size else 0.0
            per_layer.append(0.0 if (np.isinf(a) or n == 0.0) else a * n)
        v = np.asarray(per_layer)
        return weighted_p_norm(v, self.norm_spec.p)

    def scaled(self, c):
        return PerturbationSet([c * d for d in self.deltas], self.placement, self.norm_spec)

    def copy(self):
        return PerturbationSet([d.copy() for d in self.deltas], self.placement, self.norm_spec)


@dataclass
class ForwardTrace:
    """Everything one (possibly perturbed) pass produces."""

    hidden: list
    norms: np.ndarray
    logits: np.ndarray
    label: int
    gamma: float
    gap: float

    @property
    def misclassified(self):
        return self.gamma <= 0.0

    @property
    def predicted(self):
        z = self.logits
        if z.size == 1:
            return 1 if z[0] > 0.0 else 0
        return int(np.argmax(z))

    def s(self, i):
        """Block norm: the input norm for i = 0, else ||h_{2i}||."""
        return float(self.norms[2 * i])


def _trace_from_pass(hs, norms, y):
    logits = hs[-1]
    _, gap = kernels.head_values(logits, int(y))
    return ForwardTrace(
        hidden=hs,
        norms=np.asarray(norms),
        logits=logits,
        label=int(y),
        gamma=max(0.0, float(gap)),
        gap=float(gap),
    )


def forward_trace(net, x, y):
    """Unperturbed pass; gamma is 0 exactly when misclassified or tied."""
    x = as_vector(x)
    if x.size != net.widths[0]:
        raise ValueError(f"input width {x.size} != network input width {net.widths[0]}")
    act = kernels.ACT_IDS[net.activation]
    hs, _, norms = kernels.forward_pass(net.weights, x, None, 0, act)
    return _trace_from_pass(hs, norms, y)


def forward_perturb(net, x, pset, mode="pre-scale", y=0):
    """Perturbed pass; with all-zero deltas this equals forward_trace bit-for-bit."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    x = as_vector(x)
    if x.size != net.widths[0]:
        raise ValueError(f"input width {x.size} != network input width {net.widths[0]}")
    slots = pset.kernel_slots()
    if len(slots) != net.layer_count:
        raise ValueError("perturbation set has the wrong layer count")
    for j, d in enumerate(slots):
        if d is not None and d.size != net.layer_width(j + 1):
            raise ValueError(f"delta {j + 1} has width {d.size}, layer has {net.layer_width(j + 1)}")
    act = kernels.ACT_IDS[net.activation]
    hs, _, norms = kernels.forward_pass(
        net.weights, x, slots, kernels.MODE_IDS[mode], act
    )
    return _trace_from_pass(hs, norms, y)


def perturbed_grads(net, x, y, pset, mode, head, need_gw=False, need_gx=False, need_gd=False):
    """Fused loss/gap plus gradients; the hot path behind training and solvers.

    head is "loss" or "gap". Returns (loss, gap, gws, gx, gds) where gds is
    aligned with layers (None for absent slots).
    """
    act = kernels.ACT_IDS[net.activation]
    slots = pset.kernel_slots() if pset is not None else None
    return kernels.backward_pass(
        net.weights, as_vector(x), int(y), slots, kernels.MODE_IDS[mode], act,
        0 if head == "loss" else 1, need_gw, need_gx, need_gd,
    )


def operator_norm(m, iters=50, tol=1e-8):
    """Spectral norm by power iteration on m^T m.

    Deterministic e_1 start plus one fixed-stream random restart; the larger
    estimate wins. Tolerance is on the relative change of the estimate.
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.size == 0:
        return 0.0

    def run(v):
        sigma = 0.0
        for _ in range(iters):
            w = m @ v
            s = np.sqrt(np.dot(w, w))
            if s == 0.0:
                return 0.0
            u = m.T @ w
            un = np.sqrt(np.dot(u, u))
            if un == 0.0:
                return s
            v_new = u / un
            if sigma > 0.0 and abs(s - sigma) <= tol * s:
                return s
            sigma, v = s, v_new
        return sigma

    e1 = np.zeros(m.shape[1])
    e1[0] = 1.0
    best = run(e1)
    rv = rng_for(0x5EED).standard_normal(m.shape[1])
    rv /= np.sqrt(np.dot(rv, rv))
    return max(best, run(rv))


def layer_jacobians(net, x):
    """Dense Jacobian of each layer at the unperturbed hidden states."""
    trace = forward_trace(net, x, 0)
    jacs = []
    for j in range(1, net.layer_count + 1):
        if j % 2 == 1:
            jacs.append(net.weights[(j - 1) // 2])
        else:
            h = trace.hidden[j - 1]
            jacs.append(np.diag(autodiff._act_grad(net.activation, h)))
    return jacs


def interlayer_jacobian_norm(net, x, i, j):
    """kappa_{j<-i}(x): spectral norm of the layer i..j Jacobian.

    j = i-1 is the empty composition and counts as 1 by convention.
    """
    k = net.layer_count
    if not (1 <= i <= j + 1 <= k + 1):
        raise ValueError(f"indices out of range: i={i}, j={j}, layers={k}")
    if j == i - 1:
        return 1.0
    jacs = layer_jacobians(net, x)
    prod = jacs[i - 1]
    for m in range(i, j):
        prod = jacs[m] @ prod
    return operator_norm(prod)


def jacobian_norm_table(net, x):
    """All kappa_{j<-i} for 1 <= i <= j+1 <= k+1, as a dict keyed (j, i).

    Shares one set of layer Jacobians across the whole table; entries with
    j = i-1 hold the empty-composition value 1.
    """
    k = net.layer_count
    jacs = layer_jacobians(net, x)
    table = {}
    for i in range(1, k + 2):
        table[(i - 1, i)] = 1.0
        prod = None
        for j in range(i, k + 1):
            prod = jacs[j - 1] if prod is None else jacs[j - 1] @ prod
            table[(j, i)] = operator_norm(prod)
    return table


def build_network_graph(net, y, head=None, placement=None, mode="pre-scale"):
    """Autodiff-graph replica of the (perturbed) forward pass.

    Leaves in order: x, W_1..W_r, then one delta per perturbable slot. Used
    to cross-check the fused kernels against the independent graph engine.
    Returns (graph, slot_layers).
    """
    g = autodiff.Graph()
    x_leaf = g.input((net.widths[0],))
    w_leaves = [g.input(w.shape) for w in net.weights]
    slot_layers = perturbable_layers(placement, net.r) if placement else []
    d_leaves = {j: g.input((net.layer_width(j),)) for j in slot_layers}

    h = x_leaf
    for j in range(1, net.layer_count + 1):
        prev = h
        if j % 2 == 1:
            h = g.matvec(w_leaves[(j - 1) // 2], h)
        else:
            h = g.act(net.activation, h)
        if j in d_leaves:
            ref = prev if mode == "pre-scale" else h
            h = g.add(h, g.smul(g.norm2(ref), d_leaves[j]))

    out_width = net.widths[-1]
    if head == "loss":
        if out_width == 1:
            signed = g.scale(h, -(1.0 if y > 0 else -1.0))
            g.act("softplus", signed)
        else:
            g.softmax_xent(h, y)
    elif head == "gap":
        g.margin_gap(h, y)
    elif head is not None:
        raise ValueError(f"unknown head {head!r}")
    return g, slot_layers


NETWORK_SCHEMA = "allmargin/network/v1"


def network_to_dict(net):
    return {
        "schema": NETWORK_SCHEMA,
        "widths": net.widths,
        "activation": net.activation,
        "weights": [w.reshape(-1).tolist() for w in net.weights],
    }


def network_from_dict(doc):
    if doc.get("schema") != NETWORK_SCHEMA:
        raise ValueError(f"not a network document (schema={doc.get('schema')!r})")
    widths = [int(w) for w in doc["widths"]]
    weights = []
    for i, flat in enumerate(doc["weights"]):
        weights.append(np.asarray(flat, dtype=np.float64).reshape(widths[i + 1], widths[i]))
    return Network(weights, doc["activation"])


def save_network(net, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(network_to_dict(net), f, sort_keys=True)
        f.write("\n")


def load_network(path):
    with open(path, "r", encoding="utf-8") as f:
        return network_from_dict(json.load(f))
