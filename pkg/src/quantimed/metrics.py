"""Measured run quantities and theoretical rate envelopes.

The measured side: optimality gap, consensus error, average-model
gradient norm, and the penalty-function gradient that makes the
quantized-gossip update an exact SGD step. The theory side: shape-only
evaluations (all O-constants set to 1) of the convex ``T^{-delta}`` /
``T^{-2 delta}`` bound and the nonconvex ``T^{-1/3}`` / ``T^{-2/3}``
bounds, for overlay curves and slope checks only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compute_model import SpeedModel, expected_inverse_speed
from .objectives import DataShards, Objective
from .quantize import QuantizerSpec, variance_bound

__all__ = [
    "TheoryConstants",
    "MetricsRow",
    "consensus_error",
    "optimality_gap",
    "penalty_gradient",
    "matrix_form_update",
    "inverse_effective_batch",
    "gamma1_sq",
    "gamma2_sq",
    "convex_rate_bound",
    "nonconvex_rate_bounds",
    "t_min_convex",
    "t_min_nonconvex",
    "loglog_slope",
    "estimate_gamma_sq",
    "estimate_d_sq",
    "constants_for",
]


@dataclass(frozen=True)
class MetricsRow:
    """One sampled point of a run.

    ``gap`` is None for families without an analytic optimum. ``bytes``
    counts message payloads sent since the previous row.
    """

    iteration: int
    sim_time_s: float
    loss: float
    gap: float | None
    consensus: float
    grad_norm_sq: float
    bytes: int


@dataclass(frozen=True)
class TheoryConstants:
    """Inputs to the rate envelopes.

    gamma_sq is the per-sample gradient variance (estimated), sigma_sq
    the quantizer variance bound, beta the mixing second eigenvalue
    magnitude, D_sq the weighted initial suboptimality
    ``2 K sum_i (f_i(0) - f_i*)``.
    """

    mu: float
    K: float
    gamma_sq: float
    sigma_sq: float
    beta: float
    D_sq: float
    n: int
    m: int
    T_d: float
    E_inv_V: float
    lambda_min: float | None = None
    d_sq_is_estimate: bool = False


def _model_matrix(w) -> np.ndarray:
    return np.asarray(getattr(w, "matrix", w), dtype=float)


def consensus_error(X) -> float:
    """Mean squared deviation of node models from their average."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    centered = X - X.mean(axis=0, keepdims=True)
    return float(np.mean(np.sum(centered * centered, axis=1)))


def optimality_gap(X, x_star) -> float:
    """Average squared distance of node models to the optimum."""
    if x_star is None:
        raise ValueError("optimality gap needs an analytic optimum for this family")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    diff = X - np.asarray(x_star, dtype=float)[None, :]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def penalty_gradient(w, alpha: float, X, grads) -> np.ndarray:
    """Gradient of the consensus penalty ``0.5 x'(I-W)x + alpha n F(x)``.

    Row i of the result is ``x_i - sum_j w_ij x_j + alpha g_i``. With
    exact messages the quantized-gossip step equals
    ``x - eps * penalty_gradient``.
    """
    mat = _model_matrix(w)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    return X - mat @ X + alpha * grads


def matrix_form_update(w, eps: float, alpha: float, X, Z, grads) -> np.ndarray:
    """One step in matrix form: ``W_eps X + eps (W - W_D)(Z - X) - alpha eps G``.

    ``W_eps = (1 - eps) I + eps W`` and ``W_D`` is the diagonal of W.
    Row i equals the per-node update with quantized neighbor values Z.
    """
    mat = _model_matrix(w)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    w_eps = (1.0 - eps) * np.eye(len(mat)) + eps * mat
    off_diag = mat - np.diag(np.diag(mat))
    return w_eps @ X + eps * off_diag @ (Z - X) - alpha * eps * grads


def inverse_effective_batch(c: TheoryConstants) -> float:
    """``max(E[1/V] / T_d, 1/m)``, the inverse variance-equivalent batch."""
    return max(c.E_inv_V / c.T_d, 1.0 / c.m)


def gamma1_sq(c: TheoryConstants) -> float:
    """Bound on node-to-global gradient dispersion: ``gamma^2 (1/m + 1/(nm))``."""
    return c.gamma_sq * (1.0 / c.m + 1.0 / (c.n * c.m))


def gamma2_sq(c: TheoryConstants) -> float:
    """Deadline-gradient variance bound: ``2 gamma^2 max(E[1/V]/T_d, 1/m)``."""
    return 2.0 * c.gamma_sq * inverse_effective_batch(c)


def convex_rate_bound(c: TheoryConstants, T: int, delta: float) -> float:
    """Strongly convex envelope (O-constants 1)::

        (D^2 (K/mu)^2/(1-beta)^2 + sigma^2/mu) / T^delta
          + (gamma^2/mu) max(E[1/V]/T_d, 1/m) / T^(2 delta)
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    lead = (c.D_sq * (c.K / c.mu) ** 2 / (1.0 - c.beta) ** 2 + c.sigma_sq / c.mu)
    tail = (c.gamma_sq / c.mu) * inverse_effective_batch(c)
    return lead / T**delta + tail / T ** (2.0 * delta)


def nonconvex_rate_bounds(c: TheoryConstants, T: int) -> tuple[float, float]:
    """Nonconvex (convergence, consensus) envelopes (O-constants 1)::

        conv = (K^2/(1-beta)^2 gamma^2/m + K sigma^2/n) / T^(1/3)
                 + (K gamma^2/n) max(E[1/V]/T_d, 1/m) / T^(2/3)
        cons = gamma^2 / (m (1-beta)^2) / T^(1/3)
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    gap_sq = (1.0 - c.beta) ** 2
    conv = (
        (c.K**2 / gap_sq * c.gamma_sq / c.m + c.K * c.sigma_sq / c.n) / T ** (1.0 / 3.0)
        + (c.K * c.gamma_sq / c.n) * inverse_effective_batch(c) / T ** (2.0 / 3.0)
    )
    cons = (c.gamma_sq / (c.m * gap_sq)) / T ** (1.0 / 3.0)
    return conv, cons


def t_min_convex(c: TheoryConstants, delta: float) -> float:
    """Informational iteration threshold for the convex guarantee.

    Combines the recursion threshold
    ``max(ceil(((2+K)^2/mu)^(1/delta)), ceil(e^e^(1/(1-2 delta))),
    ceil(mu^(1/(2 delta))))`` with the penalty-alignment threshold
    ``max(ceil((K/(1+lambda_min))^(2/delta)), ceil((mu+K)^(2/delta)))``.
    Reported only; runs are never gated on it (it is astronomically
    large for delta near 1/2).
    """
    pieces = [
        np.ceil(((2.0 + c.K) ** 2 / c.mu) ** (1.0 / delta)),
        np.ceil(np.exp(min(np.exp(1.0 / (1.0 - 2.0 * delta)), 700.0))),
        np.ceil(c.mu ** (1.0 / (2.0 * delta))),
    ]
    if c.lambda_min is not None:
        pieces.append(np.ceil((c.K / (1.0 + c.lambda_min)) ** (2.0 / delta)))
    pieces.append(np.ceil((c.mu + c.K) ** (2.0 / delta)))
    return float(max(pieces))


def t_min_nonconvex(c: TheoryConstants) -> float:
    """Informational iteration threshold for the nonconvex guarantee:
    ``max((1 - lambda_min)^2, K^(3/2), (6 sqrt(2) K / (1-beta))^6)``.
    """
    pieces = [c.K ** 1.5, (6.0 * np.sqrt(2.0) * c.K / (1.0 - c.beta)) ** 6]
    if c.lambda_min is not None:
        pieces.append((1.0 - c.lambda_min) ** 2)
    return float(max(pieces))


def loglog_slope(points) -> float:
    """Least-squares slope of log(value) against log(T)."""
    pts = [(float(t), float(v)) for t, v in points]
    if len(pts) < 2:
        raise ValueError("need at least two points")
    if any(t <= 0 or v <= 0 for t, v in pts):
        raise ValueError("log-log slope needs positive coordinates")
    u = np.log([t for t, _ in pts])
    w = np.log([v for _, v in pts])
    du = u - u.mean()
    return float(du @ (w - w.mean()) / (du @ du))


def estimate_gamma_sq(obj: Objective, shards: DataShards, at=None) -> float:
    """Per-sample gradient variance around the full-data mean gradient.

    Evaluated at the zero model by default, over all N samples; an
    estimate of the variance bound, not a supremum.
    """
    x = np.zeros(obj.p) if at is None else np.asarray(at, dtype=float)
    grads = obj.sample_grads(x, shards.all_samples())
    centered = grads - grads.mean(axis=0, keepdims=True)
    return float(np.mean(np.sum(centered * centered, axis=1)))


def estimate_d_sq(obj: Objective, shards: DataShards, gd_steps: int = 200) -> tuple[float, bool]:
    """``2 K sum_i (f_i(0) - f_i*)``.

    Exact for the quadratic family (per-node optimum is the center
    mean); otherwise each ``f_i*`` comes from ``gd_steps`` gradient
    descent steps with step ``1/K``, so the value is flagged as an
    estimate.
    """
    zero = np.zeros(obj.p)
    total = 0.0
    estimated = False
    for i in range(shards.n):
        block = shards.node(i)
        f0 = float(obj.sample_losses(zero, block).mean())
        if obj.family == "quadratic":
            x_i = block.mean(axis=0)
        else:
            estimated = True
            x_i = zero.copy()
            for _ in range(gd_steps):
                x_i = x_i - obj.batch_grad(x_i, block) / obj.K
        f_i_star = float(obj.sample_losses(x_i, block).mean())
        total += f0 - f_i_star
    return 2.0 * obj.K * max(total, 0.0), estimated


def constants_for(
    obj: Objective,
    shards: DataShards,
    mixing,
    quantizer: QuantizerSpec | None,
    speed_model: SpeedModel,
    t_d: float,
) -> TheoryConstants:
    """Assemble the rate-envelope constants for a configured experiment."""
    d_sq, d_est = estimate_d_sq(obj, shards)
    sigma_sq = 0.0 if quantizer is None else variance_bound(quantizer, obj.p)
    mu = obj.mu if obj.mu is not None else float("nan")
    lam_min = getattr(mixing, "lambda_min", None)
    return TheoryConstants(
        mu=mu,
        K=obj.K,
        gamma_sq=estimate_gamma_sq(obj, shards),
        sigma_sq=sigma_sq,
        beta=float(mixing.beta),
        D_sq=d_sq,
        n=shards.n,
        m=shards.m,
        T_d=t_d,
        E_inv_V=expected_inverse_speed(speed_model),
        lambda_min=lam_min,
        d_sq_is_estimate=d_est,
    )
