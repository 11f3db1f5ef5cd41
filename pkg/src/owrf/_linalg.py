"""Small shared linear-algebra helpers (PCA via eigendecomposition)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError


@dataclass(frozen=True)
class PCAResult:
    mean: np.ndarray                  # (d,)
    components: np.ndarray            # (m, d), rows are principal directions
    scores: np.ndarray                # (n, m), projected coordinates
    explained_variance: np.ndarray    # (m,), eigenvalues, descending
    explained_ratio: np.ndarray       # (m,), fractions of total variance


def pca(x: np.ndarray, n_components: int) -> PCAResult:
    """Principal components of ``x`` (population covariance convention).

    Component signs are fixed so each row's largest-magnitude entry is
    positive (first index wins ties), making the decomposition deterministic.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ConfigurationError("pca needs a 2-D array with at least 2 rows")
    n, d = x.shape
    if not 1 <= n_components <= d:
        raise ConfigurationError(
            f"n_components must be in [1, {d}], got {n_components}"
        )
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / n
    total = float(np.trace(cov))
    if total <= 0.0:
        raise NumericalError("pca on rank-0 data (zero total variance)")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:n_components]
    values = np.maximum(eigvals[order], 0.0)
    components = eigvecs[:, order].T.copy()
    for row in components:
        pivot = int(np.argmax(np.abs(row)))
        if row[pivot] < 0:
            row *= -1.0
    scores = centered @ components.T
    return PCAResult(
        mean=mean,
        components=components,
        scores=scores,
        explained_variance=values,
        explained_ratio=values / total,
    )
