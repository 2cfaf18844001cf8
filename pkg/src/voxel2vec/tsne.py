"""Exact t-SNE for small point sets (tens to a few hundred points)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EXAGGERATION = 12.0


@dataclass
class TSNEResult:
    embedding: np.ndarray
    kl: np.ndarray  # KL divergence after every iteration
    exaggeration_iters: int


def _conditional_p(dist_sq: np.ndarray, perplexity: float, tol: float = 1e-5,
                   max_iter: int = 200) -> np.ndarray:
    """Row-wise Gaussian affinities whose entropy matches ``log(perplexity)``."""
    n = dist_sq.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(dist_sq[i], i)
        d = d - d.min()
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-d * beta)
            sw = w.sum()
            if sw <= 0:
                hi = beta
                beta = (lo + hi) / 2
                continue
            p = w / sw
            H = np.log(sw) + beta * (d * p).sum()
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2 if hi == np.inf else (lo + hi) / 2
            else:
                hi = beta
                beta = (lo + hi) / 2
        P[i, np.arange(n) != i] = p
    return P


def joint_probabilities(dist_sq: np.ndarray, perplexity: float) -> np.ndarray:
    P = _conditional_p(dist_sq, perplexity)
    P = (P + P.T) / (2 * P.shape[0])
    return np.maximum(P, 1e-12)


def _kl_and_grad(Y: np.ndarray, P: np.ndarray, exaggeration: float = 1.0):
    sq = (Y * Y).sum(axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2 * Y @ Y.T, 0.0)
    W = 1.0 / (1.0 + D)
    np.fill_diagonal(W, 0.0)
    Q = np.maximum(W / W.sum(), 1e-12)
    Pe = P * exaggeration
    mask = ~np.eye(len(P), dtype=bool)
    kl = float((P[mask] * np.log(P[mask] / Q[mask])).sum())
    M = (Pe - Q) * W
    grad = 4.0 * (M.sum(axis=1)[:, None] * Y - M @ Y)
    return kl, grad


def effective_perplexity(perplexity: float, n: int) -> float:
    """Clamp so that the perplexity stays feasible for ``n`` points."""
    return float(min(perplexity, max(1.0, (n - 1) / 3.0)))


def tsne(points: np.ndarray | None = None, *, distances: np.ndarray | None = None,
         perplexity: float = 5.0, iterations: int = 1000, seed: int = 0,
         learning_rate: float = 100.0, exaggeration_iters: int = 250) -> TSNEResult:
    """Embed ``points`` (rows) or a precomputed distance matrix into 2D.

    Plain gradient descent with momentum and gains.  After the early
    exaggeration phase a step is accepted only if it does not raise the KL
    divergence; otherwise the step size is halved and momentum reset, so
    the KL trace is non-increasing from there on.
    """
    if (points is None) == (distances is None):
        raise ValueError("pass exactly one of points or distances")
    if distances is not None:
        D = np.asarray(distances, dtype=np.float64)
        if D.ndim != 2 or D.shape[0] != D.shape[1]:
            raise ValueError("distances must be square")
        dist_sq = D * D
    else:
        X = np.asarray(points, dtype=np.float64)
        sq = (X * X).sum(axis=1)
        dist_sq = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    n = dist_sq.shape[0]
    if n == 0:
        raise ValueError("no points")
    if n == 1:
        return TSNEResult(np.zeros((1, 2)), np.zeros(0), 0)
    rng = np.random.default_rng(seed)
    Y = rng.normal(0.0, 1e-4, size=(n, 2))
    if np.allclose(dist_sq, 0.0):
        return TSNEResult(Y, np.zeros(0), 0)
    P = joint_probabilities(dist_sq, effective_perplexity(perplexity, n))
    exaggeration_iters = min(exaggeration_iters, iterations // 2)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl_trace = np.empty(iterations)
    lr = learning_rate
    kl, grad = _kl_and_grad(Y, P, EXAGGERATION)
    for it in range(iterations):
        early = it < exaggeration_iters
        ex = EXAGGERATION if early else 1.0
        if it == exaggeration_iters:
            kl, grad = _kl_and_grad(Y, P, 1.0)
        momentum = 0.5 if it < exaggeration_iters else 0.8
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2).clip(0.01)
        step = momentum * update - lr * gains * grad
        Y_new = Y + step
        kl_new, grad_new = _kl_and_grad(Y_new, P, ex)
        if not early and kl_new > kl:
            # reject; shrink and retry from rest on the next iteration
            lr *= 0.5
            update[:] = 0.0
            gains[:] = 1.0
            kl_trace[it] = kl
            continue
        Y, update, kl, grad = Y_new, step, kl_new, grad_new
        kl_trace[it] = kl
    Y = Y - Y.mean(axis=0)
    return TSNEResult(Y, kl_trace, exaggeration_iters)
