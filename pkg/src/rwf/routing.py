"""Associative routing (Hopfield pooling): L input tokens -> m retrieved prompts.

One closed-form retrieval step::

    K = Z W_K,  V = Z W_V,  Q~ = Q W_Q
    A = softmax_rows(beta * Q~ K^T)          # m x L, row-stochastic
    P = A V                                  # m x d

Each row of ``A`` is the unique minimizer over the probability simplex of the
free energy ``F(p) = -<p, K q~> + (1/beta) * sum_i p_i ln p_i``.
"""

from dataclasses import dataclass

import math

import numpy as np

from . import kernels
from .numerics import RngStream, check_finite, row_softmax

FROZEN_ROUTING_FIELDS = ("W_K", "W_V")
TRAINABLE_ROUTING_FIELDS = ("Q", "W_Q")


@dataclass
class RoutingParams:
    Q: np.ndarray  # m x d, learnable queries
    W_Q: np.ndarray  # d x d, learnable
    W_K: np.ndarray  # d x d, frozen
    W_V: np.ndarray  # d x d, frozen
    beta: float

    def __post_init__(self):
        d = self.W_Q.shape[0]
        for name in ("W_Q", "W_K", "W_V"):
            if getattr(self, name).shape != (d, d):
                raise ValueError(f"{name} must be {d}x{d}")
        if self.Q.ndim != 2 or self.Q.shape[1] != d:
            raise ValueError(f"Q must be m x {d}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @property
    def m(self):
        return self.Q.shape[0]

    @property
    def d(self):
        return self.W_Q.shape[0]


@dataclass
class RoutingOutput:
    A: np.ndarray  # (..., m, L)
    P: np.ndarray  # (..., m, d)
    scores: np.ndarray  # (..., m, L), before the beta scaling


def default_beta(d):
    return 1.0 / math.sqrt(d)


def init_routing_params(d, m, rng: RngStream, beta=None, dtype=np.float64):
    """Gaussian init: queries std 0.02, projections std 1/sqrt(d)."""
    s = 1.0 / np.sqrt(d)
    return RoutingParams(
        Q=rng.child(0).normal((m, d), 0.02).astype(dtype),
        W_Q=rng.child(1).normal((d, d), s).astype(dtype),
        W_K=rng.child(2).normal((d, d), s).astype(dtype),
        W_V=rng.child(3).normal((d, d), s).astype(dtype),
        beta=float(default_beta(d) if beta is None else beta),
    )


def project(Z, params: RoutingParams):
    """Returns (K, V, Q_tilde)."""
    Z = np.asarray(Z)
    if Z.shape[-1] != params.d:
        raise ValueError(f"token width {Z.shape[-1]} != routing width {params.d}")
    K = Z @ params.W_K
    V = Z @ params.W_V
    Q_tilde = params.Q @ params.W_Q
    return K, V, Q_tilde


def routing_matrix(Q_tilde, K, beta):
    if not beta > 0:
        raise ValueError("beta must be positive")
    scores = check_finite(Q_tilde @ np.swapaxes(K, -1, -2), "routing scores")
    return row_softmax(scores, beta)


def retrieve(A, V):
    if A.shape[-1] != V.shape[-2]:
        raise ValueError(f"routing matrix {A.shape} does not match values {V.shape}")
    return A @ V


def route(Z, params: RoutingParams) -> RoutingOutput:
    K, V, Q_tilde = project(Z, params)
    scores = check_finite(Q_tilde @ np.swapaxes(K, -1, -2), "routing scores")
    A = row_softmax(scores, params.beta)
    return RoutingOutput(A=A, P=A @ V, scores=scores)


# ---------------------------------------------------------------------------
# energy view
# ---------------------------------------------------------------------------


def free_energy(p, q_tilde, K, beta, tol=1e-8):
    """F(p) = -sum_i p_i <q~, k_i> + beta^-1 sum_i p_i ln p_i, with 0 ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < -tol) or abs(p.sum() - 1.0) > tol:
        raise ValueError("p is not on the probability simplex")
    if not beta > 0:
        raise ValueError("beta must be positive")
    s = np.asarray(K, dtype=np.float64) @ np.asarray(q_tilde, dtype=np.float64)
    pc = np.clip(p, 0.0, None)
    neg_entropy = float(np.sum(pc[pc > 0] * np.log(pc[pc > 0])))
    return float(-(pc @ s) + neg_entropy / beta)


def energy_minimizer_oracle(q_tilde, K, beta, grid_step=0.005):
    """Brute-force minimizer of :func:`free_energy` on a simplex lattice.

    Exhaustive over all points with coordinates in multiples of ``grid_step``;
    ties go to the lexicographically smallest point. Exponential in L, so only
    L <= 4 is accepted.
    """
    K = np.asarray(K, dtype=np.float64)
    L = K.shape[0]
    if L > 4:
        raise ValueError(f"grid oracle supports L <= 4, got {L}")
    if not 0 < grid_step <= 0.01:
        raise ValueError("grid_step must lie in (0, 0.01]")
    n_div = int(round(1.0 / grid_step))
    if abs(n_div * grid_step - 1.0) > 1e-9:
        raise ValueError("1/grid_step must be an integer")
    scores = K @ np.asarray(q_tilde, dtype=np.float64)
    p, _ = kernels.simplex_grid_argmin(scores, float(beta), n_div)
    return p


def grid_min_energy(q_tilde, K, beta, grid_step=0.005):
    """Lowest free energy over the lattice used by :func:`energy_minimizer_oracle`."""
    K = np.asarray(K, dtype=np.float64)
    n_div = int(round(1.0 / grid_step))
    scores = K @ np.asarray(q_tilde, dtype=np.float64)
    return kernels.simplex_grid_argmin(scores, float(beta), n_div)[1]


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------


def lipschitz_probe(Z, params: RoutingParams, n_samples, delta, rng: RngStream):
    """Empirical ||A(Z + dZ) - A(Z)||_F / ||dZ||_F over random directions.

    Each ``dZ`` is a Gaussian direction rescaled to Frobenius norm ``delta``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    Z = np.asarray(Z, dtype=np.float64)
    K, _, Q_tilde = project(Z, params)
    base = routing_matrix(Q_tilde, K, params.beta)
    dirs = rng.generator.standard_normal((n_samples,) + Z.shape)
    norms = np.sqrt((dirs**2).sum(axis=(1, 2)))
    dZ = dirs * (delta / norms)[:, None, None]
    K_pert = (Z[None] + dZ) @ params.W_K
    A_pert = routing_matrix(Q_tilde, K_pert, params.beta)
    diff = np.sqrt(((A_pert - base[None]) ** 2).sum(axis=(1, 2)))
    ratios = diff / delta
    return {
        "ratios": ratios,
        "max_ratio": float(ratios.max()) if n_samples else 0.0,
        "median_ratio": float(np.median(ratios)) if n_samples else 0.0,
    }
