"""Pure-numpy kernel backend.

One fused routine per hot path: the perturbed forward pass of an alternating
linear/activation stack and its reverse pass for the loss or gap heads.
The compiled backend in _core.pyx mirrors these semantics exactly; this
module is the fallback and the readable reference.

Layer indexing is 1-based and odd layers are linear: layer 2i-1 applies
weight matrix i, layer 2i applies the activation elementwise. A deltas list
holds one vector per layer, or None where perturbation is disallowed. A slot
that is present but exactly zero still gets its gradient, but its forward
add is skipped, so the zero-perturbation pass is bit-identical to the plain
forward pass.
"""

import numpy as np

ACT_IDS = {"tanh": 0, "softplus": 1, "relu": 2}
MODE_IDS = {"pre-scale": 0, "post-scale": 1}

BACKEND = "py"


def _apply_act(act, x):
    if act == 0:
        return np.tanh(x)
    if act == 1:
        return np.logaddexp(0.0, x)
    return np.maximum(x, 0.0)


def _act_deriv(act, x):
    if act == 0:
        t = np.tanh(x)
        return 1.0 - t * t
    if act == 1:
        return 1.0 / (1.0 + np.exp(-x))
    return (x > 0.0).astype(np.float64)


def _exists(delta):
    return delta is not None and delta.size > 0


def forward_pass(weights, x, deltas, mode, act):
    """Perturbed forward pass.

    Returns (hs, us, norms): hs[j] is the layer-j output (hs[0] = x), us[j]
    the pre-perturbation value f_j(h_{j-1}), norms[j] = ||hs[j]||_2. With no
    live deltas, us aliases hs and the pass equals the unperturbed network
    bit-for-bit.
    """
    r = len(weights)
    k = 2 * r - 1
    hs = [None] * (k + 1)
    us = [None] * (k + 1)
    norms = np.empty(k + 1)
    h = np.ascontiguousarray(x, dtype=np.float64)
    hs[0] = us[0] = h
    norms[0] = np.sqrt(np.dot(h, h))
    for j in range(1, k + 1):
        prev = hs[j - 1]
        if j % 2 == 1:
            u = weights[(j - 1) // 2] @ prev
        else:
            u = _apply_act(act, prev)
        d = deltas[j - 1] if deltas is not None else None
        if _exists(d) and np.any(d):
            if mode == 0:
                h = u + norms[j - 1] * d
            else:
                h = u + np.sqrt(np.dot(u, u)) * d
        else:
            h = u
        us[j] = u
        hs[j] = h
        norms[j] = np.sqrt(np.dot(h, h))
    return hs, us, norms


def head_values(logits, y):
    """(loss, gap) for the classification head.

    One logit: binary by sign, positive class when y > 0, loss is the
    logistic loss. Otherwise softmax cross-entropy; the gap breaks argmax
    ties toward the lowest index, so an exact tie reads as misclassified.
    """
    z = logits
    if z.size == 1:
        sign = 1.0 if y > 0 else -1.0
        m = sign * z[0]
        return np.logaddexp(0.0, -m), m
    zmax = z.max()
    loss = np.log(np.sum(np.exp(z - zmax))) + zmax - z[y]
    best = -np.inf
    for j in range(z.size):
        if j != y and z[j] > best:
            best = z[j]
    return loss, z[y] - best


def _head_grad(logits, y, head):
    z = logits
    if z.size == 1:
        sign = 1.0 if y > 0 else -1.0
        if head == 0:
            return np.array([-sign / (1.0 + np.exp(sign * z[0]))])
        return np.array([sign])
    if head == 0:
        p = np.exp(z - z.max())
        p /= p.sum()
        p[y] -= 1.0
        return p
    g = np.zeros_like(z)
    best, best_j = -np.inf, -1
    for j in range(z.size):
        if j != y and z[j] > best:
            best, best_j = z[j], j
    g[y] = 1.0
    g[best_j] = -1.0
    return g


def backward_pass(weights, x, y, deltas, mode, act, head,
                  need_gw=False, need_gx=False, need_gd=False):
    """Loss/gap and requested gradients through the perturbed pass.

    head 0 is the training loss, head 1 the signed margin gap. Returns
    (loss, gap, gws, gx, gds); unrequested gradients come back as None, as
    do delta gradients for absent slots. The norm of an exactly-zero vector
    gets subgradient 0.
    """
    r = len(weights)
    k = 2 * r - 1
    hs, us, norms = forward_pass(weights, x, deltas, mode, act)
    loss, gap = head_values(hs[k], y)

    gws = [np.zeros_like(w) for w in weights] if need_gw else None
    gds = [None] * k if need_gd else None

    g = _head_grad(hs[k], y, head)
    for j in range(k, 0, -1):
        d = deltas[j - 1] if deltas is not None else None
        exists = _exists(d)
        live = exists and bool(np.any(d))
        if exists and mode == 1:
            u = us[j]
            un = np.sqrt(np.dot(u, u))
            if need_gd:
                gds[j - 1] = un * g
            if live and un > 0.0:
                gu = g + (np.dot(d, g) / un) * u
            else:
                gu = g
        else:
            if exists and need_gd:
                gds[j - 1] = norms[j - 1] * g
            gu = g
        # pull gu back through f_j
        if j % 2 == 1:
            w = weights[(j - 1) // 2]
            if need_gw:
                gws[(j - 1) // 2] += np.outer(gu, hs[j - 1])
            gprev = w.T @ gu
        else:
            gprev = _act_deriv(act, hs[j - 1]) * gu
        if live and mode == 0 and norms[j - 1] > 0.0:
            # the pre-scale term s_{j-1} * delta also depends on h_{j-1}
            gprev = gprev + (np.dot(d, g) / norms[j - 1]) * hs[j - 1]
        g = gprev
    gx = g if need_gx else None
    return loss, gap, gws, gx, gds
