"""Slow reference implementations used to check the fast code paths.

Each oracle is written from the definition, sharing no code with the module
it checks: OBC by re-inverting the Hessian sub-block at every step, AdaRound
by enumerating every up/down rounding pattern, gradients by central finite
differences, and LiRA against the closed-form Gaussian ROC.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def grid_round(w, scale, zero_point, levels):
    """Nearest grid value of scalar or array ``w`` (half away from zero)."""
    u = np.asarray(w, dtype=np.float64) / scale + zero_point
    code = np.clip(np.sign(u) * np.floor(np.abs(u) + 0.5), 0, levels - 1)
    return scale * (code - zero_point)


def obc_row_bruteforce(w, H, scale, zero_point, levels):
    """Greedy OBC on one row, re-inverting ``H`` over the free set each step.

    Returns ``(values, trace)`` with trace a list of (index, row after step).
    """
    w = np.array(w, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    free = list(range(len(w)))
    trace = []
    while free:
        Hinv = np.linalg.inv(H[np.ix_(free, free)])
        q_vals = grid_round(w[free], scale, zero_point, levels)
        cost = (q_vals - w[free]) ** 2 / np.diag(Hinv)
        k = int(np.argmin(cost))
        q = free[k]
        delta = (w[q] - q_vals[k]) / Hinv[k, k]
        w[free] -= delta * Hinv[:, k]
        w[q] = q_vals[k]
        trace.append((q, w.copy()))
        free.pop(k)
    return w, trace


def best_rounding(W, X, scale, zero_point, levels):
    """Exhaustive search over floor/ceil codes minimizing ||X W^T - X Wq^T||^2.

    ``scale`` and ``zero_point`` are per row. Returns ``(codes, loss)``.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    s = np.asarray(scale, dtype=np.float64)[:, None]
    z = np.asarray(zero_point, dtype=np.float64)[:, None]
    base = np.floor(W / s + z)
    target = X @ W.T
    best, best_loss = None, math.inf
    for bits in itertools.product((0, 1), repeat=W.size):
        codes = np.clip(base + np.reshape(bits, W.shape), 0, levels - 1)
        loss = float(((X @ (s * (codes - z)).T - target) ** 2).sum() / len(X))
        if loss < best_loss:
            best, best_loss = codes.astype(np.int64), loss
    return best, best_loss


def rounding_loss(W, X, codes, scale, zero_point):
    s = np.asarray(scale, dtype=np.float64)[:, None]
    z = np.asarray(zero_point, dtype=np.float64)[:, None]
    Wq = s * (np.asarray(codes) - z)
    return float(((np.asarray(X) @ (Wq - np.asarray(W)).T) ** 2).sum() / len(X))


def finite_difference(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        fp = f()
        x[i] = orig - eps
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def gaussian_lr_auroc(mu_in, mu_out, sigma):
    """AUROC of the likelihood-ratio test between two equal-variance Gaussians."""
    from scipy.special import ndtr
    return float(ndtr(abs(mu_in - mu_out) / (sigma * math.sqrt(2.0))))


def relative_error(a, b):
    """||a - b|| / max(||a||, ||b||), zero when both vanish."""
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
