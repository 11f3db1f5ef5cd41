from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owrf._linalg import pca
from owrf.discovery import (
    GMM,
    KMEANS,
    DiscoveryConfig,
    ValidityScores,
    _farthest_point_init,
    _lloyd,
    composite_score,
    detect_elbow,
    discover,
    filter_clusters,
    gmm_fit,
    kmeans_fit,
    preprocess,
    report_to_dict,
    select_k,
    validity_scores,
)
from owrf.errors import ConfigurationError


def blobs(rng, centers, n_per, scale=0.5):
    points = [rng.normal(size=(n_per, len(c))) * scale + np.asarray(c)
              for c in centers]
    labels = np.repeat(np.arange(len(centers)), n_per)
    return np.vstack(points), labels


def brute_force_optimal_inertia(x: np.ndarray, k: int) -> float:
    """Exhaustive minimum within-cluster sum of squares over all partitions."""
    best = math.inf
    for assignment in itertools.product(range(k), repeat=len(x)):
        labels = np.asarray(assignment)
        total = 0.0
        for j in range(k):
            members = x[labels == j]
            if len(members):
                total += float(((members - members.mean(axis=0)) ** 2).sum())
        best = min(best, total)
    return best


# ---------------------------------------------------------------------------
# preprocess / PCA


def test_preprocess_standardizes_without_pca_below_threshold(rng):
    z = rng.normal(size=(50, 32)) * 7.0 + 3.0
    out = preprocess(z)
    assert out.shape == (50, 32)
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-12)


def test_preprocess_leaves_constant_dimensions_at_zero(rng):
    z = rng.normal(size=(20, 4))
    z[:, 2] = 5.0
    out = preprocess(z)
    assert np.all(out[:, 2] == 0.0)


def test_collinear_data_has_single_explaining_component(rng):
    direction = rng.normal(size=100)
    direction /= np.linalg.norm(direction)
    offsets = rng.normal(size=(40, 1))
    z = offsets * direction  # exact line in d=100
    result = pca(preprocess(z, pca_threshold_dim=64), 1)
    assert result.explained_ratio[0] == pytest.approx(1.0, abs=1e-9)


def test_preprocess_projects_wide_data_and_matches_eigen_oracle(rng):
    z = rng.normal(size=(200, 128))
    out = preprocess(z, pca_threshold_dim=64)
    assert out.shape == (200, 64)

    standardized = (z - z.mean(axis=0)) / z.std(axis=0)
    cov = standardized.T @ standardized / len(z)
    eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
    # variance captured along each projected axis matches the top eigenvalues
    projected_var = out.var(axis=0)
    np.testing.assert_allclose(projected_var, eigvals[:64], rtol=1e-8)
    assert np.all(np.diff(projected_var) <= 1e-9)  # descending order


# ---------------------------------------------------------------------------
# K-Means


def test_two_point_masses_recovered_exactly(rng):
    x = np.vstack([np.tile([0.0, 0.0], (5, 1)), np.tile([10.0, 10.0], (5, 1))])
    labels, centroids, inertia = kmeans_fit(x, 2, restarts=3, seed=0)
    assert inertia == 0.0
    assert {tuple(c) for c in centroids} == {(0.0, 0.0), (10.0, 10.0)}
    assert len(set(labels[:5])) == 1 and len(set(labels[5:])) == 1


def test_k1_gives_global_mean_and_total_variance(rng):
    x = rng.normal(size=(30, 3))
    labels, centroids, inertia = kmeans_fit(x, 1, restarts=2, seed=1)
    np.testing.assert_allclose(centroids[0], x.mean(axis=0), atol=1e-12)
    assert inertia == pytest.approx(x.var(axis=0).sum() * len(x), rel=1e-12)
    assert np.all(labels == 0)


def test_kmeans_matches_brute_force_on_tiny_instances():
    # the N<=10 2-D corpus: seeds x sizes x k, restarts = n covers every start
    mismatches = []
    for seed, n, k in [
        (0, 8, 2), (1, 8, 2), (2, 9, 2), (3, 10, 2), (4, 7, 2), (5, 10, 2),
        (6, 8, 3), (7, 9, 3), (8, 9, 3), (9, 7, 3), (10, 8, 3), (11, 9, 3),
    ]:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 2)) * rng.uniform(0.5, 2.0) + rng.normal(size=2)
        _, _, inertia = kmeans_fit(x, k, restarts=n, seed=seed)
        optimal = brute_force_optimal_inertia(x, k)
        if not math.isclose(inertia, optimal, rel_tol=1e-9, abs_tol=1e-12):
            mismatches.append((seed, n, k, inertia, optimal))
    assert mismatches == []


def test_lloyd_inertia_non_increasing(rng):
    x = rng.normal(size=(60, 4))
    centroids = _farthest_point_init(x, 4, first=0)
    _, _, _, history = _lloyd(x, centroids, max_iters=100)
    for earlier, later in zip(history, history[1:]):
        assert later <= earlier + 1e-12


def test_best_of_restarts_never_worse_than_single(rng):
    x = rng.normal(size=(40, 3))
    x[:20] += 4.0
    _, _, best = kmeans_fit(x, 3, restarts=8, seed=5)
    for r in (1, 2, 3):
        _, _, single = kmeans_fit(x, 3, restarts=r, seed=5)
        assert best <= single + 1e-12


def test_kmeans_argument_errors(rng):
    x = rng.normal(size=(5, 2))
    with pytest.raises(ConfigurationError):
        kmeans_fit(x, 6)
    with pytest.raises(ConfigurationError):
        kmeans_fit(np.zeros((0, 2)), 1)
    with pytest.raises(ConfigurationError):
        kmeans_fit(x, 0)


# ---------------------------------------------------------------------------
# GMM


def test_gmm_k1_closed_form(rng):
    x = rng.normal(size=(50, 3)) * np.array([2.0, 1.0, 0.5])
    resp, means, covs, weights, ll, history = gmm_fit(x, 1, seed=0)
    np.testing.assert_allclose(means[0], x.mean(axis=0), atol=1e-12)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / len(x)
    reg = 1e-6 * np.trace(cov) / 3
    np.testing.assert_allclose(covs[0], cov + reg * np.eye(3), atol=1e-12)
    assert weights[0] == pytest.approx(1.0)
    assert np.all(resp == 1.0)


def test_gmm_recovers_separated_blob_means():
    true_centers = np.array([[0.0, 0.0], [10.0, 10.0]])
    failures = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        x, _ = blobs(rng, true_centers, n_per=100, scale=0.25)
        _, means, _, _, _, _ = gmm_fit(x, 2, seed=seed)
        # match components to truth by nearest assignment
        order = np.argsort(means[:, 0])
        err = np.abs(means[order] - true_centers).max()
        failures += err > 0.1
    assert failures == 0


def test_gmm_log_likelihood_non_decreasing(rng):
    for seed in range(5):
        gen = np.random.default_rng(seed)
        x, _ = blobs(gen, [[0, 0], [4, 1], [-3, 5]], n_per=40, scale=1.0)
        _, _, _, _, _, history = gmm_fit(x, 3, seed=seed)
        for earlier, later in zip(history, history[1:]):
            assert later >= earlier - 1e-9


def test_gmm_argument_errors(rng):
    with pytest.raises(ConfigurationError):
        gmm_fit(rng.normal(size=(4, 2)), 5)


# ---------------------------------------------------------------------------
# validity scores


def test_composite_score_formula_cases():
    # two fixed reference points pinning the index weighting
    assert composite_score(0.444, 1399.6, 0.947, 0.698) == pytest.approx(
        0.770, abs=1e-3
    )
    assert composite_score(0.388, 1222.7, 1.234, 0.702) == pytest.approx(
        0.682, abs=1e-3
    )
    assert composite_score(0.0, 0.0, 0.0, 0.0) == pytest.approx(0.2, abs=1e-12)
    assert composite_score(0.0, 0.0, math.inf, 0.0) == 0.0


def test_collinear_four_point_silhouette_matches_hand_oracle():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    labels = np.array([0, 0, 1, 1])

    # hand oracle: a(i) = distance to own mate, b(i) = mean distance to others
    expected = []
    for i in range(4):
        own = [j for j in range(4) if labels[j] == labels[i] and j != i]
        other = [j for j in range(4) if labels[j] != labels[i]]
        a = float(np.mean([abs(x[i, 0] - x[j, 0]) for j in own]))
        b = float(np.mean([abs(x[i, 0] - x[j, 0]) for j in other]))
        expected.append((b - a) / max(a, b))
    hand_mean = float(np.mean(expected))

    inertia = 2 * (0.05**2) * 2
    scores = validity_scores(x, labels, inertia, k=2, model=KMEANS)
    assert scores.silhouette == pytest.approx(hand_mean, abs=1e-6)
    assert scores.silhouette == pytest.approx(0.990, abs=1e-3)


def test_validity_scores_explained_variance(rng):
    x, labels = blobs(rng, [[0, 0], [8, 8]], n_per=30)
    labels_fit, centroids, inertia = kmeans_fit(x, 2, restarts=2, seed=0)
    scores = validity_scores(x, labels_fit, inertia, k=2, model=KMEANS)
    total_ss = ((x - x.mean(axis=0)) ** 2).sum()
    assert scores.explained_variance == pytest.approx(1 - inertia / total_ss)
    assert -1 <= scores.silhouette <= 1
    assert scores.calinski_harabasz >= 0
    assert scores.davies_bouldin >= 0


def test_validity_scores_degenerate_single_cluster(rng):
    x = rng.normal(size=(10, 2))
    scores = validity_scores(x, np.zeros(10, dtype=int), inertia=5.0, k=2,
                             model=KMEANS)
    assert scores.silhouette == 0.0
    assert scores.calinski_harabasz == 0.0
    assert math.isinf(scores.davies_bouldin)


@settings(max_examples=50, deadline=None)
@given(
    s=st.floats(-1, 1),
    ch=st.floats(0, 5000),
    db=st.floats(0, 50),
    v=st.floats(0, 1),
)
def test_composite_recomputation_identity(s, ch, db, v):
    row = ValidityScores(
        k=3, model=KMEANS, silhouette=s, calinski_harabasz=ch, davies_bouldin=db,
        explained_variance=v, composite=composite_score(s, ch, db, v), inertia=1.0,
    )
    assert abs(row.composite - composite_score(
        row.silhouette, row.calinski_harabasz, row.davies_bouldin,
        row.explained_variance,
    )) <= 1e-9


# ---------------------------------------------------------------------------
# elbow and k selection


def chord_distance_oracle(ks, inertias):
    ks = np.asarray(ks, float)
    ys = np.asarray(inertias, float)
    xs = (ks - ks.min()) / (ks.max() - ks.min())
    ys = (ys - ys.min()) / (ys.max() - ys.min()) if ys.max() > ys.min() else ys * 0
    p0 = np.array([xs[0], ys[0]])
    p1 = np.array([xs[-1], ys[-1]])
    dists = []
    for xi, yi in zip(xs, ys):
        p = np.array([xi, yi])
        t = np.dot(p - p0, p1 - p0) / np.dot(p1 - p0, p1 - p0)
        dists.append(float(np.linalg.norm(p - (p0 + t * (p1 - p0)))))
    return dists


def test_elbow_hand_oracle_cases():
    inertias = [100.0, 50.0, 25.0, 24.0, 23.0, 22.0]
    k, flat = detect_elbow(inertias, ks=[1, 2, 3, 4, 5, 6])
    assert (k, flat) == (3, False)
    oracle = chord_distance_oracle([1, 2, 3, 4, 5, 6], inertias)
    assert int(np.argmax(oracle)) + 1 == 3

    inertias = [90.0, 30.0, 28.0, 27.0]
    k, flat = detect_elbow(inertias, ks=[1, 2, 3, 4])
    assert (k, flat) == (2, False)
    oracle = chord_distance_oracle([1, 2, 3, 4], inertias)
    assert int(np.argmax(oracle)) + 1 == 2


def test_elbow_degenerate_curves():
    assert detect_elbow([50.0, 40.0, 30.0, 20.0], ks=[2, 3, 4, 5]) == (2, True)
    assert detect_elbow([7.0, 7.0, 7.0], ks=[1, 2, 3]) == (1, True)
    with pytest.raises(ConfigurationError):
        detect_elbow([3.0, 2.0])
    with pytest.raises(ConfigurationError):
        detect_elbow([3.0, 2.0, 1.0], ks=[1, 3, 5])


def row(k, q, model=KMEANS, inertia=1.0):
    return ValidityScores(
        k=k, model=model, silhouette=0.0, calinski_harabasz=0.0,
        davies_bouldin=0.0, explained_variance=0.0, composite=q, inertia=inertia,
    )


def test_select_k_rule_arithmetic():
    per_k = [row(2, 0.72), row(3, 0.77), row(4, 0.70)]
    assert select_k(per_k, k_elbow=2) == (2, "elbow")   # 0.72 >= 0.9 * 0.77

    per_k = [row(2, 0.60), row(3, 0.77), row(4, 0.70)]
    assert select_k(per_k, k_elbow=2) == (3, "score")   # 0.60 < 0.693

    per_k = [row(2, 0.1), row(3, 0.77), row(4, 0.70)]
    assert select_k(per_k, k_elbow=3) == (3, "elbow")   # coincident candidates


def test_select_k_uses_better_model_per_k():
    per_k = [row(2, 0.5, KMEANS), row(2, 0.9, GMM), row(3, 0.6, KMEANS),
             row(3, 0.3, GMM)]
    k_star, rule = select_k(per_k, k_elbow=3)
    assert (k_star, rule) == (2, "score")  # Q(3)=0.6 < 0.9*Q(2)=0.81


def test_select_k_derives_elbow_from_kmeans_inertias():
    per_k = [
        row(2, 0.50, inertia=100.0),
        row(3, 0.52, inertia=30.0),
        row(4, 0.55, inertia=28.0),
        row(5, 0.56, inertia=27.0),
    ]
    # elbow at k=3; Q(3)=0.52 >= 0.9*0.56
    assert select_k(per_k) == (3, "elbow")


# ---------------------------------------------------------------------------
# filter_clusters


def make_cfg(**kwargs):
    defaults = dict(k_max=6, purity_threshold=0.7, min_cluster_size=1,
                    max_cluster_size=1000, seed=0)
    defaults.update(kwargs)
    return DiscoveryConfig(**defaults)


def test_purity_filter_rejects_mixed_cluster():
    labels = np.array([0, 0, 0])
    truth = ["A", "A", "B"]
    accepted = filter_clusters(labels, truth, make_cfg(purity_threshold=0.7))
    assert accepted == ()

    accepted = filter_clusters(labels, truth, make_cfg(purity_threshold=0.6))
    assert len(accepted) == 1
    assert accepted[0].purity == pytest.approx(2 / 3)
    assert accepted[0].purity_kind == "truth"


def test_size_bounds_reject_small_and_large():
    labels = np.array([0, 0, 0, 1, 1, 1, 1, 1])
    truth = ["A"] * 3 + ["B"] * 5
    cfg = make_cfg(min_cluster_size=5, max_cluster_size=5, purity_threshold=0.5)
    accepted = filter_clusters(labels, truth, cfg)
    assert [c.cluster_id for c in accepted] == [1]

    cfg = make_cfg(min_cluster_size=1, max_cluster_size=4, purity_threshold=0.5)
    accepted = filter_clusters(labels, truth, cfg)
    assert [c.cluster_id for c in accepted] == [0]


def test_gmm_proxy_purity_uses_responsibilities(rng):
    labels = np.array([0] * 6 + [1] * 6)
    resp = np.zeros((12, 2))
    resp[:6, 0] = 0.995
    resp[:6, 1] = 0.005
    resp[6:, 1] = 0.995
    resp[6:, 0] = 0.005
    cfg = make_cfg(purity_threshold=0.9, min_cluster_size=2)
    accepted = filter_clusters(labels, None, cfg, responsibilities=resp, model=GMM)
    assert len(accepted) == 2
    for cluster in accepted:
        assert cluster.purity >= 0.99
        assert cluster.purity_kind == "proxy"


def test_kmeans_proxy_purity_uses_silhouette(rng):
    x, labels = blobs(rng, [[0, 0], [20, 20]], n_per=10, scale=0.1)
    cfg = make_cfg(purity_threshold=0.9, min_cluster_size=2)
    accepted = filter_clusters(labels, None, cfg, x=x, model=KMEANS)
    assert len(accepted) == 2
    assert all(c.purity_kind == "proxy" for c in accepted)


# ---------------------------------------------------------------------------
# discover end to end


def test_discover_three_blobs(rng):
    # centers spread in every dimension so per-dim standardization keeps
    # the blob geometry intact
    x, truth = blobs(rng, [[0, 0, 0], [12, 2, 6], [3, 12, -5]], n_per=40)
    cfg = DiscoveryConfig(k_max=6, purity_threshold=0.8, min_cluster_size=10,
                          max_cluster_size=500, seed=3)
    report = discover(x, cfg, truth=truth)
    assert report.k_star == 3
    assert report.k_star in (report.k_elbow, report.k_score)
    assert len(report.accepted_clusters) == 3
    for cluster in report.accepted_clusters:
        assert cluster.purity == 1.0
    assert len(report.labels) == len(x)

    # deployment mode (no truth): proxies should accept the same clusters
    deployed = discover(x, cfg)
    assert deployed.k_star == 3
    assert len(deployed.accepted_clusters) == 3


def test_discover_is_deterministic(rng):
    x, _ = blobs(rng, [[0, 0], [6, 6], [-6, 6]], n_per=30)
    cfg = DiscoveryConfig(k_max=5, min_cluster_size=5, seed=11)
    a = discover(x, cfg)
    b = discover(x, cfg)
    assert report_to_dict(a) == report_to_dict(b)


def test_discover_no_discovery_outcomes(rng):
    cfg = DiscoveryConfig(k_max=4, min_cluster_size=10, seed=0)
    report = discover(rng.normal(size=(8, 3)), cfg)  # too few samples
    assert report.k_star == 0
    assert report.accepted_clusters == ()
    assert report.selection_rule == "none"

    # every candidate scores below the floor: uniform noise, high floor
    cfg = DiscoveryConfig(k_max=4, min_cluster_size=2, seed=0, q_floor=0.99)
    report = discover(rng.normal(size=(60, 4)), cfg)
    assert report.k_star == 0
    assert len(report.per_k) > 0


def test_discover_report_scores_consistent(rng):
    x, _ = blobs(rng, [[0, 0], [7, 7]], n_per=25)
    cfg = DiscoveryConfig(k_max=4, min_cluster_size=5, seed=2)
    report = discover(x, cfg)
    for scores in report.per_k:
        assert abs(
            scores.composite
            - composite_score(
                scores.silhouette,
                scores.calinski_harabasz,
                scores.davies_bouldin,
                scores.explained_variance,
            )
        ) <= 1e-9
