"""Per-class Gaussian gates over embeddings.

Each known class is modeled by a mean and shrinkage-regularized covariance;
test embeddings are scored by Mahalanobis distance and rejected as unknown
when the nearest class is farther than its calibrated threshold (mean plus
three population standard deviations of the within-class distances).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import (
    ConfigurationError,
    DimensionMismatchError,
    NumericalError,
    UnderSampledClassError,
)

UNKNOWN = -1                 # predicted-class sentinel for rejected samples

DEGENERATE_COV_EPS = 1e-6    # isotropic covariance for zero-dispersion classes
DEGENERATE_TAU = 1e-3        # threshold floor for zero-dispersion classes
_ZERO_DISPERSION_TRACE = 1e-18


@dataclass(frozen=True)
class ClassStatistics:
    """Immutable Gaussian model of one class in embedding space."""

    class_id: int
    mu: np.ndarray               # (D,)
    sigma: np.ndarray            # (D, D), symmetric positive definite
    sigma_inv: np.ndarray        # cached precision
    chol_lower: np.ndarray       # cached lower Cholesky factor of sigma
    tau: float                   # rejection threshold
    n_samples: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class OpenSetDecision:
    predicted: int               # class id, or UNKNOWN
    distances: dict[int, float]  # Mahalanobis distance per known class
    accepted: bool


def calibrate_threshold(within_class_distances: Sequence[float]) -> float:
    """Three-sigma gate: mean + 3 * population std of within-class distances."""
    d = np.asarray(within_class_distances, dtype=np.float64)
    if d.size < 2:
        raise UnderSampledClassError(
            f"need at least 2 distances to calibrate, got {d.size}"
        )
    return float(d.mean() + 3.0 * d.std(ddof=0))


def _build_stats(
    class_id: int, mu: np.ndarray, sigma: np.ndarray, tau: float, n: int
) -> ClassStatistics:
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"class {class_id}: covariance not positive definite"
        ) from exc
    sigma_inv = cho_solve((chol, True), np.eye(sigma.shape[0]))
    return ClassStatistics(
        class_id=class_id,
        mu=mu,
        sigma=sigma,
        sigma_inv=sigma_inv,
        chol_lower=chol,
        tau=tau,
        n_samples=n,
    )


def fit_class_stats(
    embeddings_by_class: Mapping[int, np.ndarray],
    shrinkage: float = 0.1,
) -> dict[int, ClassStatistics]:
    """Fit (mean, covariance, threshold) per class.

    Covariance uses the population convention (divide by n) blended with an
    isotropic target: (1 - shrinkage) * S + shrinkage * (trace(S)/D) * I.
    A zero-dispersion class (all embeddings identical) falls back to a tiny
    isotropic covariance and a floor threshold so its own center is still
    accepted.
    """
    if not 0.0 <= shrinkage <= 1.0:
        raise ConfigurationError(f"shrinkage must be in [0, 1], got {shrinkage}")
    if not embeddings_by_class:
        raise ConfigurationError("no classes to fit")
    out: dict[int, ClassStatistics] = {}
    for class_id in sorted(embeddings_by_class):
        z = np.asarray(embeddings_by_class[class_id], dtype=np.float64)
        if z.ndim != 2:
            raise DimensionMismatchError(f"class {class_id}: expected 2-D array")
        n, dim = z.shape
        if n < 2:
            raise UnderSampledClassError(
                f"class {class_id} has {n} samples; need at least 2"
            )
        mu = z.mean(axis=0)
        centered = z - mu
        cov = centered.T @ centered / n
        trace = float(np.trace(cov))
        if trace / dim <= _ZERO_DISPERSION_TRACE:
            sigma = DEGENERATE_COV_EPS * np.eye(dim)
            out[class_id] = _build_stats(class_id, mu, sigma, DEGENERATE_TAU, n)
            continue
        sigma = (1.0 - shrinkage) * cov + shrinkage * (trace / dim) * np.eye(dim)
        stats = _build_stats(class_id, mu, sigma, tau=0.0, n=n)
        distances = mahalanobis_many(z, stats)
        tau = calibrate_threshold(distances)
        out[class_id] = ClassStatistics(
            class_id=stats.class_id,
            mu=stats.mu,
            sigma=stats.sigma,
            sigma_inv=stats.sigma_inv,
            chol_lower=stats.chol_lower,
            tau=tau,
            n_samples=n,
        )
    return out


def mahalanobis(z: np.ndarray, stats: ClassStatistics) -> float:
    """sqrt((z - mu)^T Sigma^-1 (z - mu)), via the cached Cholesky factor."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != stats.mu.shape:
        raise DimensionMismatchError(
            f"embedding shape {z.shape} != class dim {stats.mu.shape}"
        )
    y = solve_triangular(stats.chol_lower, z - stats.mu, lower=True)
    return float(np.linalg.norm(y))


def mahalanobis_many(z: np.ndarray, stats: ClassStatistics) -> np.ndarray:
    """Vectorized distances for a (n, D) batch."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != stats.dim:
        raise DimensionMismatchError(
            f"batch shape {z.shape} incompatible with class dim {stats.dim}"
        )
    y = solve_triangular(stats.chol_lower, (z - stats.mu).T, lower=True)
    return np.sqrt(np.sum(y**2, axis=0))


def decide(
    z: np.ndarray, all_stats: Mapping[int, ClassStatistics]
) -> OpenSetDecision:
    """Assign to the nearest class if inside its gate, else reject.

    Ties on distance break toward the lowest class id, for determinism.
    """
    if not all_stats:
        raise ConfigurationError("no fitted class statistics")
    distances = {cid: mahalanobis(z, all_stats[cid]) for cid in sorted(all_stats)}
    best_id = min(distances, key=lambda cid: (distances[cid], cid))
    accepted = distances[best_id] < all_stats[best_id].tau
    return OpenSetDecision(
        predicted=best_id if accepted else UNKNOWN,
        distances=distances,
        accepted=accepted,
    )


def decide_many(
    z: np.ndarray, all_stats: Mapping[int, ClassStatistics]
) -> list[OpenSetDecision]:
    """Batch variant of decide; identical results, one factor solve per class."""
    if not all_stats:
        raise ConfigurationError("no fitted class statistics")
    z = np.asarray(z, dtype=np.float64)
    class_ids = sorted(all_stats)
    matrix = np.stack([mahalanobis_many(z, all_stats[cid]) for cid in class_ids])
    best = np.argmin(matrix, axis=0)  # argmin takes the first (lowest id) on ties
    decisions = []
    for i in range(z.shape[0]):
        cid = class_ids[int(best[i])]
        dist = float(matrix[best[i], i])
        accepted = dist < all_stats[cid].tau
        decisions.append(
            OpenSetDecision(
                predicted=cid if accepted else UNKNOWN,
                distances={
                    c: float(matrix[j, i]) for j, c in enumerate(class_ids)
                },
                accepted=accepted,
            )
        )
    return decisions
