"""Slow, obviously-correct reference implementations used only by the tests."""

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_loops(x, w, stride=1, pad=0):
    """Dense cross-correlation with zero padding, one output value at a time."""
    N, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    groups = C // Cg
    per_group = O // groups
    xp = np.zeros((N, C, H + 2 * pad, W + 2 * pad))
    xp[:, :, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            g = o // per_group
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(Cg):
                        for a in range(kh):
                            for b in range(kw):
                                s += w[o, c, a, b] * xp[n, g * Cg + c, i * stride + a, j * stride + b]
                    out[n, o, i, j] = s
    return out


def finite_difference_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` at every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def relabel_tensor(A, perm):
    """``B[i, j, k] = A[p(i), p(j), p(k)]`` for the permutation ``(T u)_i = u_{p(i)}``."""
    n = A.shape[0]
    B = np.empty_like(A)
    for i in range(n):
        for j in range(n):
            for k in range(n):
                B[i, j, k] = A[perm[i], perm[j], perm[k]]
    return B


def max_relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
