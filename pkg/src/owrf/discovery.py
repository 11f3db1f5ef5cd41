"""Novel-class discovery over rejected embeddings.

Standardize (and PCA-compress when wide), fit K-Means and a full-covariance
Gaussian mixture across a range of cluster counts, score every fit with a
composite validity index, choose the cluster count by an elbow-vs-best-score
rule, then keep only clusters that pass purity and size gates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp
from sklearn.metrics import (
    calinski_harabasz_score,
    davies_bouldin_score,
    silhouette_samples,
    silhouette_score,
)

from ._linalg import pca
from .errors import ConfigurationError, NumericalError
from .seeding import derive_seed

KMEANS = "kmeans"
GMM = "gmm"

# Composite validity score weights; CH is divided by 1000, DB enters as
# 1/(1+DB), V is the explained-variance fraction 1 - inertia/total_ss.
_W_SILHOUETTE = 0.4
_W_CALINSKI = 0.3
_W_DAVIES = 0.2
_W_VARIANCE = 0.1


@dataclass(frozen=True)
class DiscoveryConfig:
    k_max: int = 12
    pca_threshold_dim: int = 64      # PCA applied only when d exceeds this
    elbow_tolerance: float = 0.9     # accept elbow k when Q(elbow) >= tol * Q(best)
    purity_threshold: float = 0.9
    min_cluster_size: int = 5
    max_cluster_size: int = 100_000
    seed: int = 0
    em_max_iters: int = 100
    em_tol: float = 1e-6
    kmeans_restarts: int = 8
    kmeans_max_iters: int = 300
    q_floor: float = 0.05            # below this for every k: report no discovery

    def __post_init__(self) -> None:
        if self.k_max < 2:
            raise ConfigurationError(f"k_max must be >= 2, got {self.k_max}")
        if not 0 < self.purity_threshold <= 1:
            raise ConfigurationError("purity_threshold must be in (0, 1]")
        if not 0 < self.min_cluster_size <= self.max_cluster_size:
            raise ConfigurationError("need 0 < min_cluster_size <= max_cluster_size")


@dataclass(frozen=True)
class ValidityScores:
    k: int
    model: str                       # KMEANS or GMM
    silhouette: float
    calinski_harabasz: float
    davies_bouldin: float
    explained_variance: float
    composite: float
    inertia: float


@dataclass(frozen=True)
class AcceptedCluster:
    cluster_id: int
    member_indices: tuple[int, ...]
    purity: float
    purity_kind: str                 # "truth" or "proxy"


@dataclass(frozen=True)
class ClusterReport:
    k_elbow: int
    k_score: int
    k_star: int                      # 0 means "no novel classes"
    selection_rule: str              # "elbow", "score", or "none"
    chosen_model: str                # KMEANS, GMM, or "" when k_star == 0
    per_k: tuple[ValidityScores, ...]
    labels: tuple[int, ...]
    accepted_clusters: tuple[AcceptedCluster, ...]
    warnings: tuple[str, ...] = ()

    def scores_for(self, k: int, model: str) -> ValidityScores:
        for row in self.per_k:
            if row.k == k and row.model == model:
                return row
        raise KeyError(f"no scores recorded for k={k}, model={model}")


def composite_score(
    silhouette: float,
    calinski_harabasz: float,
    davies_bouldin: float,
    explained_variance: float,
) -> float:
    """Weighted combination of the four validity indices."""
    db_term = 0.0 if math.isinf(davies_bouldin) else 1.0 / (1.0 + davies_bouldin)
    return (
        _W_SILHOUETTE * silhouette
        + _W_CALINSKI * calinski_harabasz / 1000.0
        + _W_DAVIES * db_term
        + _W_VARIANCE * explained_variance
    )


def preprocess(z: np.ndarray, pca_threshold_dim: int = 64) -> np.ndarray:
    """Standardize per dimension; PCA-compress when wider than the threshold.

    Constant dimensions standardize to zero. When the (standardized) data has
    more than ``pca_threshold_dim`` columns it is projected onto the top
    min(pca_threshold_dim, d) principal components.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ConfigurationError("preprocess needs at least 2 samples")
    mean = z.mean(axis=0)
    std = z.std(axis=0)
    scaled = np.where(std > 0, (z - mean) / np.where(std > 0, std, 1.0), 0.0)
    d = scaled.shape[1]
    if d > pca_threshold_dim:
        m = min(pca_threshold_dim, d)
        scaled = pca(scaled, m).scores
    return scaled


# ---------------------------------------------------------------------------
# K-Means (Lloyd iterations, greedy farthest-point seeding, restarts)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _farthest_point_init(x: np.ndarray, k: int, first: int) -> np.ndarray:
    chosen = [first]
    d2 = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))  # argmax keeps the lowest index on ties
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _lloyd(
    x: np.ndarray, centroids: np.ndarray, max_iters: int
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """One Lloyd run; also returns the per-iteration inertia trace, which is
    non-increasing (assignment and update steps each only lower it)."""
    n, k = x.shape[0], centroids.shape[0]
    labels = np.full(n, -1, dtype=np.intp)
    history: list[float] = []
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        new_labels = np.argmin(d2, axis=1)
        # Re-seat empty clusters on the point farthest from its centroid.
        for j in range(k):
            if not np.any(new_labels == j):
                worst = int(np.argmax(d2[np.arange(n), new_labels]))
                centroids[j] = x[worst]
                d2[:, j] = ((x - centroids[j]) ** 2).sum(axis=1)
                new_labels = np.argmin(d2, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            centroids[j] = x[labels == j].mean(axis=0)
        history.append(float(((x - centroids[labels]) ** 2).sum()))
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return labels, centroids, inertia, history


def kmeans_fit(
    x: np.ndarray,
    k: int,
    restarts: int = 8,
    seed: int = 0,
    max_iters: int = 300,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Best-of-restarts Lloyd K-Means; returns (labels, centroids, inertia).

    Each restart seeds greedy farthest-point initialization from a different
    starting point: restart r starts at point (base + r) mod n with base drawn
    from ``seed``, so restarts >= n covers every possible start.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigurationError("kmeans_fit needs a non-empty 2-D array")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ConfigurationError(f"k must be in [1, {n}], got {k}")
    if restarts < 1:
        raise ConfigurationError("restarts must be >= 1")
    base = int(np.random.default_rng(derive_seed(seed, "kmeans", k)).integers(n))
    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for r in range(restarts):
        centroids = _farthest_point_init(x, k, (base + r) % n)
        labels, centroids, inertia, _ = _lloyd(x, centroids, max_iters)
        if best is None or inertia < best[2]:
            best = (labels, centroids, inertia)
    return best


# ---------------------------------------------------------------------------
# Gaussian mixture via EM with full covariances


def _log_gaussian(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("mixture component covariance not SPD") from exc
    solved = solve_triangular(chol, (x - mean).T, lower=True)
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    quad = np.sum(solved**2, axis=0)
    return -0.5 * (d * math.log(2 * math.pi) + log_det + quad)


def gmm_fit(
    x: np.ndarray,
    k: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float, list[float]]:
    """EM for a full-covariance Gaussian mixture.

    Initialized from a K-Means partition. Each M-step adds
    1e-6 * (trace(S)/d) to the covariance diagonal to keep components SPD.
    Returns (responsibilities, means, covariances, weights, final mean
    log-likelihood, per-iteration log-likelihood history). The history is the
    per-sample average and is non-decreasing up to numerical slack.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigurationError("gmm_fit needs a non-empty 2-D array")
    n, d = x.shape
    if not 1 <= k <= n:
        raise ConfigurationError(f"k must be in [1, {n}], got {k}")

    labels, _, _ = kmeans_fit(x, k, restarts=4, seed=derive_seed(seed, "gmm-init", k))
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0

    means = np.zeros((k, d))
    covs = np.zeros((k, d, d))
    weights = np.zeros(k)
    ll_history: list[float] = []
    for _ in range(max_iters):
        # M-step from current responsibilities
        counts = resp.sum(axis=0)
        if np.any(counts <= 0):
            raise NumericalError("mixture component died (zero responsibility)")
        weights = counts / n
        means = (resp.T @ x) / counts[:, None]
        for j in range(k):
            centered = x - means[j]
            cov = (resp[:, j][:, None] * centered).T @ centered / counts[j]
            reg = 1e-6 * float(np.trace(cov)) / d
            covs[j] = cov + reg * np.eye(d)

        # E-step and log-likelihood under the new parameters
        log_prob = np.stack(
            [np.log(weights[j]) + _log_gaussian(x, means[j], covs[j]) for j in range(k)],
            axis=1,
        )
        log_norm = logsumexp(log_prob, axis=1)
        ll = float(np.mean(log_norm))
        log_resp = log_prob - log_norm[:, None]
        resp = np.exp(log_resp)
        ll_history.append(ll)
        if len(ll_history) >= 2 and abs(ll_history[-1] - ll_history[-2]) < tol:
            break
    return resp, means, covs, weights, ll_history[-1], ll_history


# ---------------------------------------------------------------------------
# Validity scoring and model-order selection


def validity_scores(
    x: np.ndarray,
    labels: np.ndarray,
    inertia: float,
    *,
    k: int,
    model: str,
) -> ValidityScores:
    """Silhouette, Calinski-Harabasz, Davies-Bouldin, explained variance and
    their composite for one fitted clustering.

    A degenerate assignment (fewer than 2 non-empty clusters) gets the worst
    defined values: S=0, CH=0, DB=inf, leaving only the variance term.
    """
    labels = np.asarray(labels)
    total_ss = float(((x - x.mean(axis=0)) ** 2).sum())
    if total_ss > 0:
        explained = max(0.0, 1.0 - inertia / total_ss)
    else:
        explained = 0.0
    if np.unique(labels).size < 2:
        sil, ch, db = 0.0, 0.0, math.inf
    else:
        sil = float(silhouette_score(x, labels))
        ch = float(calinski_harabasz_score(x, labels))
        db = float(davies_bouldin_score(x, labels))
    return ValidityScores(
        k=k,
        model=model,
        silhouette=sil,
        calinski_harabasz=ch,
        davies_bouldin=db,
        explained_variance=explained,
        composite=composite_score(sil, ch, db, explained),
        inertia=float(inertia),
    )


def detect_elbow(
    inertias: Sequence[float], ks: Sequence[int] | None = None
) -> tuple[int, bool]:
    """Knee of the inertia curve by maximum chord distance.

    Both axes are min-max normalized, then the point farthest (perpendicular)
    from the chord joining the first and last points wins; ties go to the
    smallest k. Returns (k, degenerate): a flat or exactly linear curve has no
    knee, in which case the smallest k is returned with the flag set.
    """
    inertias = np.asarray(inertias, dtype=np.float64)
    if inertias.size < 3:
        raise ConfigurationError("need at least 3 inertia values")
    if ks is None:
        ks = list(range(1, inertias.size + 1))
    ks_arr = np.asarray(ks, dtype=np.float64)
    if ks_arr.size != inertias.size or np.any(np.diff(ks_arr) != 1):
        raise ConfigurationError("ks must be consecutive and match inertias")

    def norm(v: np.ndarray) -> np.ndarray:
        span = v.max() - v.min()
        return (v - v.min()) / span if span > 0 else np.zeros_like(v)

    xs, ys = norm(ks_arr), norm(inertias)
    x0, y0, x1, y1 = xs[0], ys[0], xs[-1], ys[-1]
    chord = math.hypot(x1 - x0, y1 - y0)
    if chord == 0:
        return int(ks_arr[0]), True
    dist = np.abs((y1 - y0) * xs - (x1 - x0) * ys + x1 * y0 - y1 * x0) / chord
    best = int(np.argmax(dist))  # first index wins ties -> smallest k
    if dist[best] <= 1e-12:
        return int(ks_arr[0]), True
    return int(ks_arr[best]), False


def _q_by_k(per_k: Sequence[ValidityScores]) -> dict[int, float]:
    """Composite score per k, taking the better of the fitted models."""
    out: dict[int, float] = {}
    for row in per_k:
        out[row.k] = max(out.get(row.k, -math.inf), row.composite)
    return out


def _best_score_k(per_k: Sequence[ValidityScores]) -> int:
    q = _q_by_k(per_k)
    return min(q, key=lambda k: (-q[k], k))


def select_k(
    per_k: Sequence[ValidityScores],
    k_elbow: int | None = None,
    elbow_tolerance: float = 0.9,
) -> tuple[int, str]:
    """Pick the cluster count: elbow k wins when its composite score is at
    least ``elbow_tolerance`` times the best composite; otherwise the best-
    scoring k wins. Returns (k_star, rule), rule in {"elbow", "score"}.

    When ``k_elbow`` is not supplied it is derived from the K-Means inertia
    entries in ``per_k``.
    """
    if not per_k:
        raise ConfigurationError("empty score table")
    q_by_k = _q_by_k(per_k)
    k_score = _best_score_k(per_k)
    if k_elbow is None:
        kmeans_rows = sorted((r.k, r.inertia) for r in per_k if r.model == KMEANS)
        if len(kmeans_rows) >= 3:
            k_elbow, _ = detect_elbow(
                [i for _, i in kmeans_rows], [k for k, _ in kmeans_rows]
            )
        else:
            k_elbow = k_score
    if k_elbow not in q_by_k:
        raise ConfigurationError(f"k_elbow={k_elbow} outside the evaluated range")
    if q_by_k[k_elbow] >= elbow_tolerance * q_by_k[k_score]:
        return k_elbow, "elbow"
    return k_score, "score"


def cluster_purity(member_truth: Sequence) -> float:
    """Fraction of members sharing the most common truth label."""
    values, counts = np.unique(np.asarray(member_truth, dtype=object), return_counts=True)
    return float(counts.max()) / len(member_truth)


def filter_clusters(
    labels: np.ndarray,
    truth: Sequence | None,
    cfg: DiscoveryConfig,
    *,
    x: np.ndarray | None = None,
    responsibilities: np.ndarray | None = None,
    model: str = KMEANS,
) -> tuple[AcceptedCluster, ...]:
    """Keep clusters whose purity and size pass the configured gates.

    With ``truth`` given (evaluation mode) purity is the majority-label
    fraction. Without it (deployment mode) a proxy is used: mean of the
    members' max responsibility for GMM fits, or mean per-member silhouette
    mapped to [0, 1] for K-Means fits; proxies are flagged as such.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigurationError("empty label array")
    sil_values = None
    if truth is None and model == KMEANS:
        if x is None:
            raise ConfigurationError("proxy purity for kmeans needs the data matrix")
        if np.unique(labels).size >= 2:
            sil_values = silhouette_samples(x, labels)
        else:
            sil_values = np.zeros(labels.size)
    accepted = []
    for cluster_id in np.unique(labels).tolist():
        members = np.flatnonzero(labels == cluster_id)
        if not cfg.min_cluster_size <= members.size <= cfg.max_cluster_size:
            continue
        if truth is not None:
            purity = cluster_purity([truth[i] for i in members])
            kind = "truth"
        elif model == GMM:
            if responsibilities is None:
                raise ConfigurationError("proxy purity for gmm needs responsibilities")
            purity = float(responsibilities[members].max(axis=1).mean())
            kind = "proxy"
        else:
            purity = float((sil_values[members].mean() + 1.0) / 2.0)
            kind = "proxy"
        if purity >= cfg.purity_threshold:
            accepted.append(
                AcceptedCluster(
                    cluster_id=int(cluster_id),
                    member_indices=tuple(int(i) for i in members),
                    purity=purity,
                    purity_kind=kind,
                )
            )
    return tuple(accepted)


def _empty_report(reason: str, per_k: tuple[ValidityScores, ...] = ()) -> ClusterReport:
    return ClusterReport(
        k_elbow=0,
        k_score=0,
        k_star=0,
        selection_rule="none",
        chosen_model="",
        per_k=per_k,
        labels=(),
        accepted_clusters=(),
        warnings=(reason,),
    )


def discover(
    z: np.ndarray,
    cfg: DiscoveryConfig,
    truth: Sequence | None = None,
) -> ClusterReport:
    """Full discovery pass over rejected embeddings.

    For each k in [2, k_max] both K-Means and a Gaussian mixture are fitted
    with per-k derived seeds (so any evaluation order gives identical
    results) and scored; the elbow of the K-Means inertia curve competes with
    the best composite score to choose k*; the model with the higher
    composite at k* assigns the labels; clusters are then filtered by purity
    and size. k* = 0 encodes "no novel classes": returned when there are too
    few samples to ever pass the size gate or when every candidate's
    composite score is below the configured floor.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ConfigurationError("embeddings must be 2-D")
    n = z.shape[0]
    if n < max(2 * cfg.min_cluster_size, 3):
        return _empty_report(
            f"{n} samples cannot form 2 clusters of size >= {cfg.min_cluster_size}"
        )
    x = preprocess(z, cfg.pca_threshold_dim)

    per_k: list[ValidityScores] = []
    fits: dict[tuple[int, str], dict] = {}
    warnings: list[str] = []
    ks = [k for k in range(2, cfg.k_max + 1) if k <= n]
    for k in ks:
        km_seed = derive_seed(cfg.seed, "k", k, KMEANS)
        labels, centroids, inertia = kmeans_fit(
            x, k, cfg.kmeans_restarts, km_seed, cfg.kmeans_max_iters
        )
        per_k.append(validity_scores(x, labels, inertia, k=k, model=KMEANS))
        fits[(k, KMEANS)] = {"labels": labels}

        gm_seed = derive_seed(cfg.seed, "k", k, GMM)
        try:
            resp, means, covs, weights, ll, ll_hist = gmm_fit(
                x, k, cfg.em_max_iters, cfg.em_tol, gm_seed
            )
        except NumericalError as exc:
            # a collapsed mixture invalidates this k for GMM only
            warnings.append(f"gmm k={k}: {exc}")
            continue
        gm_labels = np.argmax(resp, axis=1)
        gm_inertia = float(((x - means[gm_labels]) ** 2).sum())
        per_k.append(validity_scores(x, gm_labels, gm_inertia, k=k, model=GMM))
        fits[(k, GMM)] = {
            "labels": gm_labels,
            "responsibilities": resp,
            "ll_history": ll_hist,
        }
    kmeans_inertias = [r.inertia for r in per_k if r.model == KMEANS]
    if len(ks) >= 3:
        k_elbow, flat = detect_elbow(kmeans_inertias, ks)
        if flat:
            warnings.append("inertia curve has no knee; elbow defaulted to smallest k")
    else:
        k_elbow = None
    k_star, rule = select_k(per_k, k_elbow, cfg.elbow_tolerance)
    if k_elbow is None:
        k_elbow = k_star

    q_star = {
        m: max(
            (r.composite for r in per_k if r.k == k_star and r.model == m),
            default=-math.inf,
        )
        for m in (KMEANS, GMM)
    }
    if max(q_star.values()) < cfg.q_floor:
        return _empty_report(
            f"best composite score {max(q_star.values()):.4f} below floor "
            f"{cfg.q_floor}",
            per_k=tuple(per_k),
        )
    chosen_model = KMEANS if q_star[KMEANS] >= q_star[GMM] else GMM
    chosen = fits[(k_star, chosen_model)]
    labels = chosen["labels"]
    accepted = filter_clusters(
        labels,
        truth,
        cfg,
        x=x,
        responsibilities=chosen.get("responsibilities"),
        model=chosen_model,
    )
    k_score = _best_score_k(per_k)
    return ClusterReport(
        k_elbow=int(k_elbow),
        k_score=int(k_score),
        k_star=int(k_star),
        selection_rule=rule,
        chosen_model=chosen_model,
        per_k=tuple(per_k),
        labels=tuple(int(v) for v in labels),
        accepted_clusters=accepted,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# Serialization


def _finite_or_none(v: float) -> float | None:
    return v if math.isfinite(v) else None


def report_to_dict(report: ClusterReport) -> dict:
    return {
        "k_elbow": report.k_elbow,
        "k_score": report.k_score,
        "k_star": report.k_star,
        "selection_rule": report.selection_rule,
        "chosen_model": report.chosen_model,
        "per_k": [
            {
                "k": r.k,
                "model": r.model,
                "silhouette": r.silhouette,
                "calinski_harabasz": r.calinski_harabasz,
                "davies_bouldin": _finite_or_none(r.davies_bouldin),
                "explained_variance": r.explained_variance,
                "composite": r.composite,
                "inertia": r.inertia,
            }
            for r in report.per_k
        ],
        "labels": list(report.labels),
        "accepted_clusters": [
            {
                "cluster_id": c.cluster_id,
                "member_indices": list(c.member_indices),
                "purity": c.purity,
                "purity_kind": c.purity_kind,
            }
            for c in report.accepted_clusters
        ],
        "warnings": list(report.warnings),
    }


def write_report_json(report: ClusterReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n"
    )


def write_score_csv(report: ClusterReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "k",
                "model",
                "silhouette",
                "calinski_harabasz",
                "davies_bouldin",
                "explained_variance",
                "composite",
                "inertia",
            ]
        )
        for r in report.per_k:
            writer.writerow(
                [
                    r.k,
                    r.model,
                    repr(r.silhouette),
                    repr(r.calinski_harabasz),
                    "" if math.isinf(r.davies_bouldin) else repr(r.davies_bouldin),
                    repr(r.explained_variance),
                    repr(r.composite),
                    repr(r.inertia),
                ]
            )
