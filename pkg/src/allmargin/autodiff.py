"""Reverse-mode differentiation over small dense computation graphs.

A Graph is an append-only tape of primitive nodes; storage order is the
topological order. Graphs are immutable once built and evaluation uses
private workspaces, so one graph may be evaluated concurrently on many
inputs. Everything is float64: the downstream margin and Jacobian-product
computations are too ill-conditioned for single precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    """Shape inconsistency, with the offending node named."""


ACTIVATIONS = ("tanh", "softplus", "relu")


def _act(name, x):
    if name == "tanh":
        return np.tanh(x)
    if name == "softplus":
        # log(1+e^x), stable for large |x|
        return np.logaddexp(0.0, x)
    if name == "relu":
        return np.maximum(x, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, x):
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if name == "softplus":
        return 1.0 / (1.0 + np.exp(-x))
    if name == "relu":
        # subgradient 0 at the kink, a fixed deterministic choice
        return (x > 0.0).astype(np.float64)
    raise ValueError(f"unknown activation {name!r}")


class Tensor:
    """Dense float64 value with row-major storage; the only type graphs exchange."""

    __slots__ = ("array",)

    def __init__(self, values):
        a = np.array(values, dtype=np.float64, order="C")
        if a.ndim == 0:
            a = a.reshape(1)
        if a.ndim > 2:
            raise ShapeMismatch("tensors are vectors or matrices")
        if not np.all(np.isfinite(a)):
            raise ValueError("tensor entries must be finite")
        self.array = a

    @property
    def shape(self):
        return list(self.array.shape)

    @property
    def data(self):
        """Row-major flat view of the entries."""
        return self.array.reshape(-1)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    shape: tuple
    meta: dict = field(default_factory=dict)


class Graph:
    """Tape of primitive ops. Build once with the methods below, then evaluate.

    Node methods return the integer id of the appended node; ids are also
    the topological evaluation order.
    """

    def __init__(self):
        self.nodes = []
        self.input_ids = []

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _shape(self, nid):
        return self.nodes[nid].shape

    def input(self, shape):
        shape = tuple(int(s) for s in (shape if hasattr(shape, "__len__") else (shape,)))
        nid = self._append(Node("input", (), shape))
        self.input_ids.append(nid)
        return nid

    def matvec(self, m, v):
        ms, vs = self._shape(m), self._shape(v)
        if len(ms) != 2 or len(vs) != 1 or ms[1] != vs[0]:
            raise ShapeMismatch(f"matvec node {len(self.nodes)}: {ms} @ {vs}")
        return self._append(Node("matvec", (m, v), (ms[0],)))

    def act(self, name, v):
        if name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        return self._append(Node("act", (v,), self._shape(v), {"name": name}))

    def add(self, a, b):
        if self._shape(a) != self._shape(b):
            raise ShapeMismatch(
                f"add node {len(self.nodes)}: {self._shape(a)} + {self._shape(b)}"
            )
        return self._append(Node("add", (a, b), self._shape(a)))

    def scale(self, v, c):
        """Multiply by a fixed scalar constant."""
        return self._append(Node("scale", (v,), self._shape(v), {"c": float(c)}))

    def smul(self, s, v):
        """Multiply a vector by a scalar node (shape (1,))."""
        if self._shape(s) != (1,):
            raise ShapeMismatch(f"smul node {len(self.nodes)}: scalar input must have shape (1,)")
        return self._append(Node("smul", (s, v), self._shape(v)))

    def norm2(self, v):
        if len(self._shape(v)) != 1:
            raise ShapeMismatch(f"norm2 node {len(self.nodes)}: vector input required")
        return self._append(Node("norm2", (v,), (1,)))

    def softmax_xent(self, logits, label):
        ls = self._shape(logits)
        if len(ls) != 1:
            raise ShapeMismatch(f"softmax_xent node {len(self.nodes)}: vector logits required")
        if ls[0] == 1:
            raise ShapeMismatch(
                "softmax_xent needs >= 2 logits; compose scale + softplus for the binary loss"
            )
        if not 0 <= int(label) < ls[0]:
            raise ValueError(f"label {label} out of range for {ls[0]} logits")
        return self._append(Node("softmax_xent", (logits,), (1,), {"label": int(label)}))

    def margin_gap(self, logits, label):
        """Signed classification gap (not clamped at 0).

        Multiclass: logit of the true label minus the best other logit,
        ties in the max broken toward the lowest index. One logit: the
        signed score, positive class meaning label > 0.
        """
        ls = self._shape(logits)
        if len(ls) != 1:
            raise ShapeMismatch(f"margin_gap node {len(self.nodes)}: vector logits required")
        if ls[0] > 1 and not 0 <= int(label) < ls[0]:
            raise ValueError(f"label {label} out of range for {ls[0]} logits")
        return self._append(Node("margin_gap", (logits,), (1,), {"label": int(label)}))

    def output_shape(self):
        return self.nodes[-1].shape


def _runner_up(z, label):
    # argmax over the other logits, lowest index on ties
    best, best_j = -np.inf, -1
    for j in range(z.size):
        if j == label:
            continue
        if z[j] > best:
            best, best_j = z[j], j
    return best_j


def forward(graph, inputs):
    """Evaluate every node; returns one Tensor per node, in storage order."""
    if len(inputs) != len(graph.input_ids):
        raise ShapeMismatch(
            f"graph declares {len(graph.input_ids)} inputs, got {len(inputs)}"
        )
    values = [None] * len(graph.nodes)
    for k, nid in enumerate(graph.input_ids):
        t = inputs[k] if isinstance(inputs[k], Tensor) else Tensor(inputs[k])
        if tuple(t.array.shape) != graph.nodes[nid].shape:
            raise ShapeMismatch(
                f"input {k} (node {nid}): expected {graph.nodes[nid].shape}, "
                f"got {tuple(t.array.shape)}"
            )
        values[nid] = t.array
    for nid, node in enumerate(graph.nodes):
        if node.op == "input":
            continue
        args = [values[i] for i in node.inputs]
        if node.op == "matvec":
            out = args[0] @ args[1]
        elif node.op == "act":
            out = _act(node.meta["name"], args[0])
        elif node.op == "add":
            out = args[0] + args[1]
        elif node.op == "scale":
            out = node.meta["c"] * args[0]
        elif node.op == "smul":
            out = args[0][0] * args[1]
        elif node.op == "norm2":
            out = np.array([np.sqrt(np.dot(args[0], args[0]))])
        elif node.op == "softmax_xent":
            z = args[0]
            zmax = z.max()
            out = np.array([np.log(np.sum(np.exp(z - zmax))) + zmax - z[node.meta["label"]]])
        elif node.op == "margin_gap":
            z = args[0]
            if z.size == 1:
                sign = 1.0 if node.meta["label"] > 0 else -1.0
                out = np.array([sign * z[0]])
            else:
                y = node.meta["label"]
                out = np.array([z[y] - z[_runner_up(z, y)]])
        else:
            raise ValueError(f"unknown op {node.op!r}")
        values[nid] = out
    return [Tensor(v) for v in values]


def backward(graph, values, seed):
    """Reverse pass from the last node; returns one gradient Tensor per input leaf.

    values must come from forward() on this graph. Nondifferentiable kinks
    (relu at 0, the 2-norm at 0) use subgradient 0.
    """
    seed_a = seed.array if isinstance(seed, Tensor) else np.asarray(seed, dtype=np.float64)
    seed_a = seed_a.reshape(-1) if seed_a.ndim == 0 else seed_a
    out_shape = graph.nodes[-1].shape
    if tuple(seed_a.shape) != out_shape:
        raise ShapeMismatch(f"seed shape {tuple(seed_a.shape)} != output shape {out_shape}")
    vals = [v.array if isinstance(v, Tensor) else v for v in values]
    grads = [None] * len(graph.nodes)
    grads[-1] = np.array(seed_a, dtype=np.float64)

    def accum(nid, g):
        if grads[nid] is None:
            grads[nid] = np.array(g, dtype=np.float64)
        else:
            grads[nid] = grads[nid] + g

    for nid in range(len(graph.nodes) - 1, -1, -1):
        node, g = graph.nodes[nid], grads[nid]
        if g is None or node.op == "input":
            continue
        args = [vals[i] for i in node.inputs]
        if node.op == "matvec":
            accum(node.inputs[0], np.outer(g, args[1]))
            accum(node.inputs[1], args[0].T @ g)
        elif node.op == "act":
            accum(node.inputs[0], g * _act_grad(node.meta["name"], args[0]))
        elif node.op == "add":
            accum(node.inputs[0], g)
            accum(node.inputs[1], g)
        elif node.op == "scale":
            accum(node.inputs[0], node.meta["c"] * g)
        elif node.op == "smul":
            accum(node.inputs[0], np.array([np.dot(g.reshape(-1), args[1].reshape(-1))]))
            accum(node.inputs[1], args[0][0] * g)
        elif node.op == "norm2":
            n = np.sqrt(np.dot(args[0], args[0]))
            accum(node.inputs[0], (g[0] / n) * args[0] if n > 0.0 else np.zeros_like(args[0]))
        elif node.op == "softmax_xent":
            z = args[0]
            p = np.exp(z - z.max())
            p /= p.sum()
            p[node.meta["label"]] -= 1.0
            accum(node.inputs[0], g[0] * p)
        elif node.op == "margin_gap":
            z = args[0]
            gz = np.zeros_like(z)
            if z.size == 1:
                gz[0] = 1.0 if node.meta["label"] > 0 else -1.0
            else:
                y = node.meta["label"]
                gz[y] = 1.0
                gz[_runner_up(z, y)] = -1.0
            accum(node.inputs[0], g[0] * gz)
    out = []
    for nid in graph.input_ids:
        if grads[nid] is None:
            out.append(Tensor(np.zeros(graph.nodes[nid].shape)))
        else:
            out.append(Tensor(grads[nid]))
    return out


def jacobian(graph, leaf, inputs):
    """Jacobian of the graph output with respect to input leaf number `leaf`.

    Row r is the backward pass seeded with the unit vector e_r; exact for
    smooth nodes. The output node must be a vector.
    """
    out_shape = graph.nodes[-1].shape
    if len(out_shape) != 1:
        raise ShapeMismatch("jacobian requires a vector-valued output")
    values = forward(graph, inputs)
    leaf_shape = graph.nodes[graph.input_ids[leaf]].shape
    rows = []
    for r in range(out_shape[0]):
        e = np.zeros(out_shape[0])
        e[r] = 1.0
        rows.append(backward(graph, values, Tensor(e))[leaf].data)
    jac = np.vstack(rows)
    if len(leaf_shape) != 1:
        jac = jac.reshape(out_shape[0], int(np.prod(leaf_shape)))
    return Tensor(jac)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: tuple
    step: float
    nonsmooth_nodes: list = field(default_factory=list)

    @property
    def flagged(self):
        return bool(self.nonsmooth_nodes)


def finite_diff_check(graph, inputs, step=1e-4):
    """Central-difference check of backward() on a scalar-output graph.

    Compares every coordinate of every input leaf; relative error uses the
    denominator max(|a|, |b|, 1e-6). Nodes whose relu input has a coordinate
    within `step` of the kink are flagged: the difference stencil straddles
    the nondifferentiable point there, so the comparison is not meaningful.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if graph.nodes[-1].shape != (1,):
        raise ShapeMismatch("finite_diff_check requires a scalar output")
    base = [np.array(x.array if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    values = forward(graph, [Tensor(b) for b in base])
    analytic = backward(graph, values, Tensor(np.ones(1)))

    nonsmooth = []
    for nid, node in enumerate(graph.nodes):
        if node.op == "act" and node.meta["name"] == "relu":
            x = values[node.inputs[0]].array
            if np.any(np.abs(x) <= step):
                nonsmooth.append(nid)

    worst = (0, 0)
    max_rel = 0.0
    for li, b in enumerate(base):
        flat = b.reshape(-1)
        ga = analytic[li].data
        for ci in range(flat.size):
            keep = flat[ci]
            flat[ci] = keep + step
            up = forward(graph, [Tensor(x) for x in base])[-1].data[0]
            flat[ci] = keep - step
            dn = forward(graph, [Tensor(x) for x in base])[-1].data[0]
            flat[ci] = keep
            fd = (up - dn) / (2.0 * step)
            # floor at 1e-6: below that the difference stencil's own
            # cancellation noise (~1e-12 for unit-scale outputs) dominates
            # and the comparison would report noise, not gradient error
            rel = abs(fd - ga[ci]) / max(abs(fd), abs(ga[ci]), 1e-6)
            if rel > max_rel:
                max_rel, worst = rel, (li, ci)
    return GradCheckReport(max_rel, worst, step, nonsmooth)
