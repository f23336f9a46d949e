"""Class-conditional feature models and the learnable feature map.

Two densities are supported: an isotropic Gaussian over raw feature vectors
(normalizer dropped, it cancels inside the assignment softmax) and a
Dirichlet over simplex-valued features. Each model contributes a log-pdf
matrix and a parameter update; the Dirichlet update is a fixed-point
iteration that never decreases the weighted likelihood.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

# Simplex entries are floored here before any logarithm.
SIMPLEX_FLOOR = 1e-12


class DegenerateClassError(ValueError):
    """A parameter update received a responsibility column with no mass."""


@dataclass(frozen=True)
class GaussianParams:
    """Per-class means, K x d."""

    theta: np.ndarray

    def __post_init__(self):
        if self.theta.ndim != 2 or not np.all(np.isfinite(self.theta)):
            raise ValueError("GaussianParams: theta must be a finite K x d matrix")


@dataclass(frozen=True)
class DirichletParams:
    """Per-class concentration vectors, K x K, strictly positive."""

    theta: np.ndarray

    def __post_init__(self):
        if self.theta.ndim != 2 or not np.all(np.isfinite(self.theta)):
            raise ValueError("DirichletParams: theta must be a finite matrix")
        if np.any(self.theta <= 0.0):
            raise ValueError("DirichletParams: concentrations must be positive")


@dataclass(frozen=True)
class FeatureMapConfig:
    """How raw backbone outputs become solver features.

    mode "vision_raw" scales rows by the temperature t_z. mode
    "clip_probability" treats rows as similarity logits and softmaxes them at
    temperature t_z, flooring and renormalizing so rows stay on the simplex.
    """

    mode: str
    t_z: float = 1.0

    def __post_init__(self):
        if self.mode not in ("vision_raw", "clip_probability"):
            raise ValueError(f"FeatureMapConfig: unknown mode {self.mode!r}")
        if not np.isfinite(self.t_z) or self.t_z <= 0.0:
            raise ValueError("FeatureMapConfig: t_z must be positive and finite")


def gaussian_log_pdf(z: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Unnormalized Gaussian log-density -0.5 * ||z_n - theta_k||^2.

    Args:
        z: N x d feature rows.
        theta: K x d class means.

    Returns:
        N x K matrix of log-density values.
    """
    z = np.asarray(z, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(theta))):
        raise ValueError("gaussian_log_pdf: inputs must be finite")
    sq = (
        np.sum(z * z, axis=1)[:, None]
        - 2.0 * z @ theta.T
        + np.sum(theta * theta, axis=1)[None, :]
    )
    return -0.5 * sq


def gaussian_weighted_mean(z: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean of feature rows; the exact minimizer of the weighted
    squared-distance objective for one class.

    Raises:
        DegenerateClassError: the weight column carries no mass.
    """
    z = np.asarray(z, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0.0):
        raise ValueError("gaussian_weighted_mean: weights must be nonnegative")
    total = weights.sum()
    if total <= 0.0:
        raise DegenerateClassError("gaussian_weighted_mean: zero total weight")
    return (weights @ z) / total


def dirichlet_log_pdf(z: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Dirichlet log-density of each simplex row under each class.

    Args:
        z: N x K simplex rows, strictly positive (floor before calling).
        theta: K x K concentration rows, strictly positive.

    Returns:
        N x K matrix; entry (n, k) is ln Dir(z_n | theta_k).
    """
    z = np.asarray(z, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(z <= 0.0):
        raise ValueError("dirichlet_log_pdf: features must be strictly positive")
    if np.any(theta <= 0.0):
        raise ValueError("dirichlet_log_pdf: concentrations must be positive")
    log_norm = kernels.log_gamma(theta.sum(axis=1)) - np.sum(
        kernels.log_gamma(theta), axis=1
    )
    return np.log(z) @ (theta - 1.0).T + log_norm[None, :]


def dirichlet_weighted_loglik(z, weights, theta) -> float:
    """Weighted Dirichlet log-likelihood of one class; the quantity the
    fixed-point update is guaranteed not to decrease."""
    dens = dirichlet_log_pdf(z, np.asarray(theta, dtype=np.float64)[None, :])[:, 0]
    return float(np.dot(weights, dens))


def dirichlet_mm_update(
    z: np.ndarray,
    weights: np.ndarray,
    theta: np.ndarray,
    inner_steps: int = 1,
) -> np.ndarray:
    """Fixed-point concentration update for one class.

    Each inner step maps theta_i to inv_digamma(digamma(sum_j theta_j) +
    mean log feature), where the mean is responsibility-weighted. The step
    maximizes a tight lower bound of the weighted likelihood, so likelihood
    never decreases.

    Args:
        z: N x K simplex rows, strictly positive.
        weights: N nonnegative responsibilities for this class.
        theta: current K-vector of concentrations.
        inner_steps: number of fixed-point applications.

    Returns:
        Updated K-vector of concentrations.
    """
    z = np.asarray(z, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(weights < 0.0):
        raise ValueError("dirichlet_mm_update: weights must be nonnegative")
    total = weights.sum()
    if total <= 0.0:
        raise DegenerateClassError("dirichlet_mm_update: zero total weight")
    mean_log = (weights @ np.log(z)) / total
    out = theta
    for _ in range(inner_steps):
        out = kernels.inv_digamma(kernels.digamma(out.sum()) + mean_log)
    return out


def map_features(raw: np.ndarray, cfg: FeatureMapConfig) -> np.ndarray:
    """Apply the feature map that precedes both solvers.

    vision_raw multiplies rows by t_z. clip_probability softmaxes each row
    of similarity logits at temperature t_z, then floors at SIMPLEX_FLOOR
    and renormalizes so rows remain strictly positive simplex points.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("map_features: input must be finite")
    if cfg.mode == "vision_raw":
        return cfg.t_z * raw
    probs = kernels.softmax(cfg.t_z * raw, axis=1)
    probs = np.maximum(probs, SIMPLEX_FLOOR)
    return probs / probs.sum(axis=1, keepdims=True)
