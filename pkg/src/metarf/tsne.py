"""Exact O(N^2) t-SNE.

Gaussian conditional affinities with a per-point bandwidth found by bisection
on the perplexity, symmetrised joint probabilities, a Student-t kernel in the
embedding, and momentum gradient descent on KL(P || Q) with early
exaggeration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from metarf.seeding import make_rng

log = logging.getLogger(__name__)

AFFINITY_FLOOR = 1e-12


@dataclass(frozen=True)
class TsneConfig:
    perplexity: float = 30.0
    n_components: int = 2
    learning_rate: float = 200.0
    iterations: int = 1000
    momentum: tuple[float, float, int] = (0.5, 0.8, 250)
    early_exaggeration: tuple[float, int] = (12.0, 250)
    init_std: float = 1e-4
    seed: int = 0
    trace_kl: bool = True

    def __post_init__(self):
        if self.perplexity < 1:
            raise ValueError("perplexity must be >= 1")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        object.__setattr__(self, "momentum", tuple(self.momentum))
        object.__setattr__(self, "early_exaggeration", tuple(self.early_exaggeration))

    def effective_perplexity(self, n: int) -> float:
        """Perplexity capped at (N - 1) / 3 for small N (never below 1)."""
        return max(1.0, min(self.perplexity, (n - 1) / 3.0))


@dataclass(frozen=True, eq=False)
class Embedding:
    coords: np.ndarray
    kl_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


def squared_distances(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sq = np.einsum("ij,ij->i", X, X)
    D = X @ X.T
    D *= -2.0
    D += sq[:, None]
    D += sq[None, :]
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def _row_affinities(d: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    # shift by the nearest distance so the largest weight is exp(0) = 1
    w = np.exp(-(d - d.min()) * beta)
    s = w.sum()
    if not s > 0.0:
        w = np.full_like(d, AFFINITY_FLOOR)
        s = w.sum()
    p = w / s
    nz = p > 0.0
    entropy = -float(np.sum(p[nz] * np.log2(p[nz])))
    return p, entropy


def conditional_affinities(X: np.ndarray, perplexity: float, tol: float = 1e-5, max_steps: int = 64) -> np.ndarray:
    """Row ``i`` holds ``p_{j|i}``: Gaussian weights around ``x_i`` summing to 1.

    The precision ``beta_i = 1 / (2 sigma_i^2)`` is bisected until
    ``2**H_i`` is within ``tol`` of ``perplexity`` or ``max_steps`` runs out.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 3:
        raise ValueError("need at least 3 points")
    if not 1.0 <= perplexity < n:
        raise ValueError(f"perplexity {perplexity} must lie in [1, N={n})")
    D = squared_distances(X)
    P = np.zeros((n, n))
    target = math.log2(perplexity)
    for i in range(n):
        d = np.delete(D[i], i)
        if not np.any(d > 0.0):
            p = np.full(n - 1, 1.0 / (n - 1))
        else:
            lo, hi = 0.0, math.inf
            beta = 1.0 / np.median(d[d > 0.0])
            for _ in range(max_steps):
                p, h = _row_affinities(d, beta)
                if abs(2.0**h - perplexity) < tol:
                    break
                if h > target:
                    lo = beta
                    beta = beta * 2.0 if hi == math.inf else 0.5 * (beta + hi)
                else:
                    hi = beta
                    beta = 0.5 * (beta + lo)
        P[i, :i] = p[:i]
        P[i, i + 1 :] = p[i:]
    return P


def symmetrize(P_cond: np.ndarray) -> np.ndarray:
    """Joint probabilities ``(p_{j|i} + p_{i|j}) / (2N)``."""
    P_cond = np.asarray(P_cond, dtype=np.float64)
    if P_cond.ndim != 2 or P_cond.shape[0] != P_cond.shape[1]:
        raise ValueError("conditional affinities must be square")
    if np.any(P_cond < 0) or np.any(np.diag(P_cond) != 0):
        raise ValueError("conditional affinities must be non-negative with a zero diagonal")
    n = P_cond.shape[0]
    return (P_cond + P_cond.T) / (2.0 * n)


def _student_kernel(Z: np.ndarray) -> np.ndarray:
    W = 1.0 / (1.0 + squared_distances(Z))
    np.fill_diagonal(W, 0.0)
    return W


def projection_affinities(Z: np.ndarray) -> np.ndarray:
    """Student-t joint probabilities ``q_ij`` over all ordered pairs ``i != j``."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("need an N x d matrix with N >= 2")
    W = _student_kernel(Z)
    return W / W.sum()


def kl_divergence(P: np.ndarray, Q: np.ndarray) -> float:
    """``sum p_ij log(p_ij / q_ij)`` over off-diagonal entries, with ``0 log 0 = 0``."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {Q.shape}")
    off = ~np.eye(P.shape[0], dtype=bool)
    mask = off & (P > 0.0)
    if np.any(Q[mask] <= 0.0):
        raise ValueError("q_ij = 0 where p_ij > 0")
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def kl_gradient(P: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``dKL/dz_i = 4 sum_j (p_ij - q_ij)(1 + |z_i - z_j|^2)^-1 (z_i - z_j)``."""
    return _kl_and_gradient(P, Z)[1]


def _kl_and_gradient(P: np.ndarray, Z: np.ndarray, plogp: float | None = None) -> tuple[float, np.ndarray]:
    D = squared_distances(Z)
    kl = math.nan
    if plogp is not None:
        # KL = sum p log p - sum p log w + log(sum w), using sum p = 1
        kl = plogp + float(np.vdot(P, np.log1p(D)))
    W = D
    W += 1.0
    np.reciprocal(W, out=W)
    np.fill_diagonal(W, 0.0)
    total = W.sum()
    if plogp is not None:
        kl += math.log(total)
    M = W * (-1.0 / total)
    M += P
    M *= W
    grad = 4.0 * (M.sum(axis=1)[:, None] * Z - M @ Z)
    return kl, grad


@njit(cache=True, fastmath=True)
def _kl_grad_kernel(P, Z, exaggeration, with_kl):
    """One pass over pairs: KL cross term, kernel sum and both gradient parts."""
    n, d = Z.shape
    attr = np.zeros((n, d))
    rep = np.zeros((n, d))
    total = 0.0
    cross = 0.0
    diff = np.empty(d)
    for i in range(n):
        for j in range(i + 1, n):
            dist = 0.0
            for k in range(d):
                diff[k] = Z[i, k] - Z[j, k]
                dist += diff[k] * diff[k]
            w = 1.0 / (1.0 + dist)
            total += 2.0 * w
            p = 2.0 * P[i, j]
            if with_kl:
                cross += p * np.log1p(dist)
            a = p * w
            r = w * w
            for k in range(d):
                attr[i, k] += a * diff[k]
                attr[j, k] -= a * diff[k]
                rep[i, k] += r * diff[k]
                rep[j, k] -= r * diff[k]
    grad = np.empty((n, d))
    for i in range(n):
        for k in range(d):
            # attr holds 2 sum_j p_ij w_ij (z_i - z_j) for symmetric P
            grad[i, k] = 2.0 * exaggeration * attr[i, k] - 4.0 * rep[i, k] / total
    return cross + np.log(total), grad


def tsne_embed(X: np.ndarray, config: TsneConfig | None = None) -> Embedding:
    """Embed the rows of ``X`` in ``config.n_components`` dimensions.

    ``kl_trace[t]`` is KL(P || Q) at the start of iteration ``t``, always
    against the un-exaggerated P. The log term dominates the cost of an
    iteration, so ``trace_kl=False`` skips it and leaves the trace empty.
    """
    config = config or TsneConfig()
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n < 3:
        raise ValueError("t-SNE needs at least 3 points")
    P = symmetrize(conditional_affinities(X, config.effective_perplexity(n)))
    rng = make_rng(config.seed)
    Z = rng.normal(0.0, config.init_std, size=(n, config.n_components))
    update = np.zeros_like(Z)
    gains = np.ones_like(Z)
    m0, m1, switch = config.momentum
    exag, exag_iters = config.early_exaggeration
    trace = np.empty(config.iterations if config.trace_kl else 0)
    nz = P > 0.0
    plogp = float(np.sum(P[nz] * np.log(P[nz])))
    for it in range(config.iterations):
        cross, grad = _kl_grad_kernel(P, Z, exag if it < exag_iters else 1.0, config.trace_kl)
        if config.trace_kl:
            trace[it] = plogp + cross
        mom = m0 if it < switch else m1
        # adaptive per-coordinate gains: grow when the step keeps its direction
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = mom * update - config.learning_rate * gains * grad
        Z = Z + update
        Z -= Z.mean(axis=0)
        if not np.all(np.isfinite(Z)):
            raise FloatingPointError(f"t-SNE embedding became non-finite at iteration {it}")
    return Embedding(Z, trace)
