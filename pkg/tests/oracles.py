"""Independent reference implementations used as test oracles.

Everything here is written as plain loops / direct formulas, deliberately
sharing no code with the engine, so agreement is evidence rather than
tautology.
"""

import math

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    """Direct 6-nested-loop cross-correlation."""
    bs, cin, h, wdt = x.shape
    cout, _, k, _ = w.shape
    hp = h + 2 * padding
    wp = wdt + 2 * padding
    xp = np.zeros((bs, cin, hp, wp), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + wdt] = x
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    out = np.zeros((bs, cout, h_out, w_out), dtype=x.dtype)
    for n in range(bs):
        for co in range(cout):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, ci, i * stride + u, j * stride + v] * w[co, ci, u, v]
                    out[n, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def linear_loops(x, w, b):
    bs, f = x.shape
    o = w.shape[0]
    out = np.zeros((bs, o), dtype=x.dtype)
    for n in range(bs):
        for i in range(o):
            acc = 0.0
            for j in range(f):
                acc += x[n, j] * w[i, j]
            out[n, i] = acc + (b[i] if b is not None else 0.0)
    return out


def avgpool_loops(x, k):
    bs, c, h, w = x.shape
    out = np.zeros((bs, c, h // k, w // k), dtype=x.dtype)
    for n in range(bs):
        for ci in range(c):
            for i in range(h // k):
                for j in range(w // k):
                    out[n, ci, i, j] = x[n, ci, i * k : (i + 1) * k, j * k : (j + 1) * k].mean()
    return out


def channel_mean_loops(x):
    bs, c, h, w = x.shape
    out = np.zeros((bs, c), dtype=x.dtype)
    for n in range(bs):
        for ci in range(c):
            acc = 0.0
            for i in range(h):
                for j in range(w):
                    acc += x[n, ci, i, j]
            out[n, ci] = acc / (h * w)
    return out


def surrogate_value(v, v_th, alpha=2.0):
    """The arctan-shaped smooth activation, evaluated directly."""
    return math.atan((math.pi / 2.0) * alpha * (v - v_th)) / math.pi + 0.5


def surrogate_slope(v, v_th, alpha=2.0):
    z = (math.pi / 2.0) * alpha * (v - v_th)
    return (alpha / 2.0) / (1.0 + z * z)


def fd_gradient(loss_fn, array, h=1e-5):
    """Central finite differences of a scalar function w.r.t. every element
    of ``array`` (mutated in place and restored)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1e-6):
    """Elementwise relative error with an absolute floor for near-zero
    gradients (a mathematically zero gradient shows up as rounding noise on
    both sides)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom
