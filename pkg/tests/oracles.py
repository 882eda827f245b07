"""Independent reference computations used as test oracles.

Everything here is written with plain loops over Python floats or numpy
scalars and never calls into ``dcin.core``, so agreement with the library is
evidence rather than a tautology.
"""

import math

import numpy as np


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_softmax(s):
    s = [float(v) for v in s]
    top = max(s)
    e = [math.exp(v - top) for v in s]
    z = sum(e)
    return np.array([v / z for v in e])


def naive_mlp(x, layers, relu_last=True):
    """Dense layers as explicit dot products; ``layers`` is [(W, b), ...] with W (in, out)."""
    h = [float(v) for v in x]
    for k, (W, b) in enumerate(layers):
        out = []
        for j in range(W.shape[1]):
            s = float(b[j]) if b is not None else 0.0
            for i in range(W.shape[0]):
                s += h[i] * W[i, j]
            if relu_last or k < len(layers) - 1:
                s = max(s, 0.0)
            out.append(s)
        h = out
    return np.array(h)


def naive_pcam(x_c, x_d, rel, W_Q, W_K, W_V, e_rel=None):
    """Scores, weights, and context vector of one click computed display by display."""
    q = naive_mlp(x_c, [(W_Q, None)], relu_last=False)
    alpha = []
    for j in range(len(x_d)):
        k = naive_mlp(x_d[j], [(W_K, None)], relu_last=False)
        a = sum(float(qi) * float(ki) for qi, ki in zip(q, k))
        if e_rel is not None:
            a += float(e_rel[rel[j]])
        alpha.append(a)
    mu = naive_softmax(alpha)
    v = np.zeros(W_V.shape[1])
    for j in range(len(x_d)):
        v += mu[j] * naive_mlp(x_d[j], [(W_V, None)], relu_last=False)
    return np.array(alpha), mu, v


def naive_imm(interests, e_t):
    scores = [sum(float(a) * float(b) for a, b in zip(I, e_t)) for I in interests]
    w = naive_softmax(scores)
    U = np.zeros(len(e_t))
    for wi, I in zip(w, interests):
        U += wi * np.asarray(I)
    return U, w


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def finite_diff(fn, tensor, step=1e-5):
    """Central differences of scalar ``fn()`` with respect to every entry of ``tensor.data``.

    Entries are perturbed by rebinding ``tensor.data`` to a copy, so the
    caller's arrays are never mutated.
    """
    base = tensor.data
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        tensor.data = plus
        hi = fn()
        tensor.data = minus
        lo = fn()
        grad[idx] = (hi - lo) / (2 * step)
    tensor.data = base
    return grad
