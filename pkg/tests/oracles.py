"""Independent reference computations used as expected values in tests.

Nothing here imports the package under test: each oracle is written from
the defining formula with plain Python floats or straightforward numpy.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np


def adamw_dsl_scalar_step(w, g, m, v, lr):
    """The nine-statement warm-start program, evaluated line by line."""
    g2 = g * g
    m = 0.1 * g + 0.9 * m
    v = 0.001 * g2 + 0.999 * v
    update = m / math.sqrt(v)
    update = update + w * 0.01
    update = update * (lr * 0.001)
    return update, m, v


def lion_scalar(w, g, m, lr, beta1=0.9, beta2=0.99, wd=0.0):
    """One step of sign momentum with two coefficients; returns (delta_w, m)."""
    c = beta1 * m + (1 - beta1) * g
    s = (c > 0) - (c < 0)
    delta = -lr * (s + wd * w)
    return delta, beta2 * m + (1 - beta2) * g


def naive_adamw(w, grads, lr_seq, beta1, beta2, eps, wd):
    """Bias-corrected AdamW on a list of floats, one coordinate at a time."""
    w = list(map(float, w))
    m = [0.0] * len(w)
    v = [0.0] * len(w)
    traj = []
    for t, (g, lr) in enumerate(zip(grads, lr_seq), 1):
        g = [float(x) for x in g]
        for i in range(len(w)):
            m[i] = beta1 * m[i] + (1 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1 - beta2) * g[i] ** 2
            mh = m[i] / (1 - beta1 ** t)
            vh = v[i] / (1 - beta2 ** t)
            w[i] = w[i] - lr * (mh / (math.sqrt(vh) + eps) + wd * w[i])
        traj.append(list(w))
    return traj


def naive_lion(w, grads, lr_seq, beta1, beta2, wd):
    w = list(map(float, w))
    m = [0.0] * len(w)
    traj = []
    for g, lr in zip(grads, lr_seq):
        g = [float(x) for x in g]
        for i in range(len(w)):
            c = float(beta1 * m[i] + (1 - beta1) * g[i])
            s = (c > 0) - (c < 0)
            w[i] = w[i] - lr * (s + wd * w[i])
            m[i] = beta2 * m[i] + (1 - beta2) * g[i]
        traj.append(list(w))
    return traj


def mlp_loss(params, X, y):
    """Mean softmax cross-entropy of a tanh MLP, written out per example.

    ``params`` is a list ``[W1, b1, W2, b2, ...]``.
    """
    total = 0.0
    n_layers = len(params) // 2
    for x, label in zip(X, y):
        h = np.asarray(x, dtype=float)
        for k in range(n_layers):
            W, b = params[2 * k], params[2 * k + 1]
            z = np.array([sum(h[i] * W[i, j] for i in range(W.shape[0])) + b[j] for j in range(W.shape[1])])
            h = np.tanh(z) if k < n_layers - 1 else z
        top = max(h)
        lse = top + math.log(sum(math.exp(z - top) for z in h))
        total += lse - h[int(label)]
    return total / len(X)


def central_difference(f, x, h=1e-5):
    """Gradient of scalar ``f`` at vector ``x`` by central differences."""
    x = np.array(x, dtype=float)
    grad = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def space_size(n_f, n_v, n_a, l):
    total = 1
    for _ in range(l):
        total *= n_f
    for _ in range(n_a * l):
        total *= n_v
    return total


def quadratic_flatness_gap(curvature, sigma, dim):
    """E[0.5 c |w + e|^2] - 0.5 c |w|^2 for e ~ N(0, sigma^2 I)."""
    return 0.5 * curvature * sigma * sigma * dim


def first_sign_disagreement(beta_ablation=0.9, beta1=0.9, beta2=0.99, max_len=12):
    """Shortest +-1 gradient sequence starting [1, -1] on which sign momentum
    with one coefficient and with two coefficients first step in different
    directions. Breadth first over extensions, lexicographic with +1 first.

    Returns ``(sequence, step_index)``.
    """
    queue = deque([[1.0, -1.0]])
    while queue:
        seq = queue.popleft()
        m_a = 0.0
        m_l = 0.0
        for k, g in enumerate(seq):
            m_a = beta_ablation * m_a + (1 - beta_ablation) * g
            c = beta1 * m_l + (1 - beta1) * g
            if (m_a > 0) - (m_a < 0) != (c > 0) - (c < 0):
                return seq, k
            m_l = beta2 * m_l + (1 - beta2) * g
        if len(seq) < max_len:
            queue.append(seq + [1.0])
            queue.append(seq + [-1.0])
    return None, None


def mlp_loss_vec(params, X, y):
    """Vectorised form of :func:`mlp_loss` (same maths, batched with numpy)."""
    h = np.asarray(X, dtype=float)
    n_layers = len(params) // 2
    for k in range(n_layers):
        z = h.dot(params[2 * k]) + params[2 * k + 1]
        h = np.tanh(z) if k < n_layers - 1 else z
    top = h.max(axis=1)
    lse = top + np.log(np.exp(h - top[:, None]).sum(axis=1))
    picked = h[np.arange(len(h)), np.asarray(y, dtype=int)]
    return float(np.mean(lse - picked))
