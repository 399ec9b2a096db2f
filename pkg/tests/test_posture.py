import json
from itertools import combinations

import numpy as np
import pytest

from bmicurate.ingest import parse_record
from bmicurate.posture import (
    ClusterModel,
    PostureConfig,
    PostureError,
    ZeroVarianceError,
    decide_clusters,
    elbow_select,
    fit_kmeans,
    fit_pca,
    fit_posture_model,
    normalize_keypoints,
    cluster_report,
)

from .conftest import make_keypoints, make_record
from .corpus import generate_corpus


# --- oracles -----------------------------------------------------------------

def svd_pca_oracle(X: np.ndarray):
    """Independent PCA route: SVD of the centered data matrix."""
    Xc = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    eigenvalues = (s ** 2) / (X.shape[0] - 1)
    total = np.trace((Xc.T @ Xc) / (X.shape[0] - 1))
    return eigenvalues, vt, eigenvalues / total


def lloyd_oracle(X: np.ndarray, init: np.ndarray, max_iter=300, tol=1e-4) -> float:
    """Plain Lloyd from a fixed init; returns final inertia."""
    C = init.copy()
    prev = None
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        inertia = d2[np.arange(len(X)), labels].sum()
        for j in range(C.shape[0]):
            members = X[labels == j]
            if len(members):
                C[j] = members.mean(axis=0)
        if prev is not None and prev - inertia < tol * max(prev, 1e-12):
            break
        prev = inertia
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return float(d2[np.arange(len(X)), labels].sum())


def exhaustive_kmeans_oracle(X: np.ndarray, k: int) -> float:
    """Best inertia over Lloyd runs from every distinct-point initialization."""
    return min(
        lloyd_oracle(X, X[list(idx)].copy()) for idx in combinations(range(len(X)), k)
    )


# --- normalize ---------------------------------------------------------------

class TestNormalizeKeypoints:
    def test_exact_arithmetic(self):
        pts = [(320, 240)] + [(0, 0)] * 16
        record = make_record(keypoints=make_keypoints(pts), image_width=640, image_height=480)
        vec = normalize_keypoints(record)
        assert vec[0] == 0.5 and vec[1] == 0.5

    def test_all_center_gives_all_halves(self):
        record = make_record(
            keypoints=make_keypoints([(320, 240)] * 17), image_width=640, image_height=480
        )
        assert np.all(normalize_keypoints(record) == 0.5)

    def test_length_is_34(self):
        record = make_record(keypoints=make_keypoints([(i, 2 * i) for i in range(17)]))
        assert normalize_keypoints(record).shape == (34,)

    def test_missing_keypoints_raises(self):
        with pytest.raises(PostureError, match="missing_annotation"):
            normalize_keypoints(make_record())

    def test_out_of_frame_components_allowed(self):
        record = make_record(keypoints=make_keypoints([(-10, 500)] * 17),
                             image_width=640, image_height=480)
        vec = normalize_keypoints(record)
        assert vec[0] < 0 and vec[1] > 1


# --- PCA ----------------------------------------------------------------------

class TestFitPca:
    def test_rank_one_data(self):
        rng = np.random.default_rng(0)
        X = np.zeros((50, 34))
        X[:, 3] = rng.normal(size=50)
        model = fit_pca(X, 0.95)
        assert model.n_components == 1
        assert abs(model.components[0, 3]) == pytest.approx(1.0, abs=1e-12)

    def test_two_equal_directions_need_two_components(self):
        X = np.zeros((100, 34))
        X[:50, 0] = np.linspace(-1, 1, 50)
        X[50:, 1] = np.linspace(-1, 1, 50)
        assert fit_pca(X, 0.95).n_components == 2

    def test_against_svd_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            X = rng.uniform(size=(20, 34))
            model = fit_pca(X, 0.95)
            eig, _, ratios = svd_pca_oracle(X)
            p = model.n_components
            assert np.allclose(model.explained_variance, eig[:p], atol=1e-8)
            # minimal retained count for the threshold
            cum = np.cumsum(ratios)
            assert cum[p - 1] >= 0.95 - 1e-9
            if p > 1:
                assert cum[p - 2] < 0.95

    def test_subspace_matches_oracle(self):
        rng = np.random.default_rng(11)
        X = rng.uniform(size=(20, 34))
        model = fit_pca(X, 0.95)
        _, vt, _ = svd_pca_oracle(X)
        p = model.n_components
        mine = model.components.T @ model.components
        oracle = vt[:p].T @ vt[:p]
        assert np.allclose(mine, oracle, atol=1e-8)

    def test_projection_centered_with_eigen_variances(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(200, 34)) * rng.uniform(0.1, 2.0, size=34)
        model = fit_pca(X, 0.95)
        proj = model.transform(X)
        assert np.all(np.abs(proj.mean(axis=0)) < 1e-8)
        variances = proj.var(axis=0, ddof=1)
        assert np.allclose(variances, model.explained_variance, rtol=1e-6)

    def test_sign_normalization_deterministic(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(40, 34))
        a = fit_pca(X, 0.95)
        b = fit_pca(X.copy(), 0.95)
        assert np.array_equal(a.components, b.components)
        for row in a.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_components_pairwise_orthonormal(self):
        rng = np.random.default_rng(15)
        X = rng.uniform(size=(60, 34))
        model = fit_pca(X, 0.95)
        gram = model.components @ model.components.T
        assert np.abs(gram - np.eye(model.n_components)).max() < 1e-8

    def test_too_few_samples(self):
        with pytest.raises(PostureError):
            fit_pca(np.zeros((1, 34)), 0.95)

    def test_zero_variance(self):
        X = np.tile(np.full(34, 0.3), (10, 1))
        with pytest.raises(ZeroVarianceError):
            fit_pca(X, 0.95)


# --- k-means -------------------------------------------------------------------

class TestFitKmeans:
    def test_k1_closed_form(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(40, 5))
        model = fit_kmeans(X, 1, seed=1, restarts=2)
        assert np.allclose(model.centroids[0], X.mean(axis=0))
        assert model.inertia == pytest.approx(((X - X.mean(0)) ** 2).sum(), rel=1e-12)

    def test_separated_blobs_exact_partition(self):
        rng = np.random.default_rng(4)
        A = rng.normal(size=(30, 2)) * 0.1
        B = rng.normal(size=(30, 2)) * 0.1 + 10.0
        X = np.vstack([A, B])
        model = fit_kmeans(X, 2, seed=3)
        labels = model.predict(X)
        assert len(set(labels[:30])) == 1
        assert len(set(labels[30:])) == 1
        assert labels[0] != labels[30]

    def test_exhaustive_oracle_small_instances(self):
        for seed in (100, 101):
            rng = np.random.default_rng(seed)
            X = rng.uniform(size=(30, 2))
            oracle = exhaustive_kmeans_oracle(X, 3)
            model = fit_kmeans(X, 3, seed=seed, restarts=30)
            assert model.inertia <= oracle + 1e-6

    def test_inertia_history_non_increasing(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            X = rng.normal(size=(60, 4))
            model = fit_kmeans(X, 4, seed=0, restarts=1)
            hist = model.inertia_history
            assert all(hist[i + 1] <= hist[i] * (1 + 1e-12) for i in range(len(hist) - 1))

    def test_best_of_restarts_not_worse_than_each(self):
        rng = np.random.default_rng(8)
        X = rng.uniform(size=(50, 3))
        best = fit_kmeans(X, 4, seed=10, restarts=6)
        singles = [fit_kmeans(X, 4, seed=10 + i, restarts=1).inertia for i in range(6)]
        assert best.inertia <= min(singles) + 1e-12
        # derived-seed contract: best-of-restarts equals the min over the
        # individual restart runs
        assert best.inertia == pytest.approx(min(singles), rel=1e-12)

    def test_bad_k(self):
        X = np.zeros((5, 2))
        with pytest.raises(PostureError):
            fit_kmeans(X, 0)
        with pytest.raises(PostureError):
            fit_kmeans(X, 6)

    def test_determinism(self):
        rng = np.random.default_rng(12)
        X = rng.normal(size=(80, 6))
        a = fit_kmeans(X, 3, seed=5)
        b = fit_kmeans(X, 3, seed=5)
        assert np.array_equal(a.centroids, b.centroids)
        assert a.inertia == b.inertia


# --- elbow ----------------------------------------------------------------------

class TestElbowSelect:
    def test_sharp_knee(self):
        inertias = {1: 100.0, 2: 10.0, 3: 9.0, 4: 8.5, 5: 8.4,
                    6: 8.3, 7: 8.2, 8: 8.1, 9: 8.05, 10: 8.0}
        # hand-checked chord distances peak at k=2 (0.613 vs 0.542 at k=3)
        assert elbow_select(inertias) == 2

    def test_linear_decay_returns_k_min(self):
        assert elbow_select({k: 100.0 - 10.0 * (k - 1) for k in range(1, 11)}) == 1

    def test_all_equal_returns_k_min(self):
        assert elbow_select({k: 5.0 for k in range(1, 6)}) == 1

    def test_non_contiguous_keys_rejected(self):
        with pytest.raises(PostureError):
            elbow_select({1: 10.0, 3: 5.0})

    def test_single_k_rejected(self):
        with pytest.raises(PostureError):
            elbow_select({2: 1.0})


# --- decisions -------------------------------------------------------------------

def _labels_from_counts(counts):
    return np.repeat(np.arange(len(counts)), counts)


class TestDecideClusters:
    def _model(self, k):
        from bmicurate.posture import KmeansModel
        return KmeansModel(k=k, centroids=np.zeros((k, 2)), inertia=0.0, seed=0)

    def test_explicit_config_is_authoritative(self):
        labels = _labels_from_counts([10, 10, 5, 1])
        decision = decide_clusters(
            self._model(4), labels,
            explicit={0: "keep", 1: "keep", 2: "discard", 3: "discard"},
        )
        assert decision.discarded_ids() == {2, 3}
        assert decision.member_counts == {0: 10, 1: 10, 2: 5, 3: 1}

    def test_auto_policy_on_published_cluster_sizes(self):
        # fractions 0.508 / 0.467 / 0.0241 / 1.2e-5: the last two fall
        # below the 0.05 default and are discarded
        labels = _labels_from_counts([43192, 39719, 2051, 1])
        decision = decide_clusters(self._model(4), labels)
        assert decision.discarded_ids() == {2, 3}
        discarded_members = sum(decision.member_counts[c] for c in decision.discarded_ids())
        assert discarded_members == 2052

    def test_auto_policy_keeps_two_equal_halves(self):
        labels = _labels_from_counts([50, 50])
        assert decide_clusters(self._model(2), labels).discarded_ids() == set()

    def test_unknown_cluster_id_rejected(self):
        with pytest.raises(PostureError):
            decide_clusters(self._model(2), _labels_from_counts([5, 5]), explicit={7: "keep"})

    def test_unlisted_clusters_default_to_keep(self):
        decision = decide_clusters(
            self._model(3), _labels_from_counts([5, 5, 5]), explicit={2: "discard"}
        )
        assert decision.decisions == {0: "keep", 1: "keep", 2: "discard"}


# --- full posture filter -----------------------------------------------------------

@pytest.fixture(scope="module")
def corpus_records():
    rows, planted = generate_corpus(n_records=400, n_subjects=80, seed=21,
                                    tiny_bbox=0, low_confidence=0, outlier_pose=12,
                                    tiny_and_lowconf_overlap=0, tiny_and_pose_overlap=0)
    return [parse_record(obj) for obj in rows], planted


class TestFitPostureModel:

    def test_outliers_flagged(self, corpus_records):
        records, planted = corpus_records
        model, verdicts = fit_posture_model(records, PostureConfig())
        flagged = {v.image_id for v in verdicts if "outlier_pose" in v.reasons}
        assert flagged == planted["outlier_pose"]

    def test_low_visibility_excluded_before_clustering(self):
        rows, _ = generate_corpus(n_records=60, n_subjects=12, seed=31, tiny_bbox=0,
                                  low_confidence=0, outlier_pose=0,
                                  tiny_and_lowconf_overlap=0, tiny_and_pose_overlap=0)
        records = [parse_record(obj) for obj in rows]
        blind = make_record(
            image_id="blind", keypoints=make_keypoints([(1, 1)] * 17, visibility=0.05)
        )
        model, verdicts = fit_posture_model(records + [blind], PostureConfig(k_max=3))
        by_id = {v.image_id: v for v in verdicts}
        assert by_id["blind"].reasons == {"missing_annotation"}

    def test_discarded_count_equals_sum_of_discarded_clusters(self, corpus_records):
        records, _ = corpus_records
        model, verdicts = fit_posture_model(records, PostureConfig())
        flagged = sum(1 for v in verdicts if "outlier_pose" in v.reasons)
        by_decision = sum(
            model.decision.member_counts[c] for c in model.decision.discarded_ids()
        )
        assert flagged == by_decision

    def test_bit_deterministic_for_fixed_seed(self, tmp_path, corpus_records):
        records, _ = corpus_records
        paths = []
        for name in ("a.json", "b.json"):
            model, _ = fit_posture_model(records, PostureConfig(seed=42))
            p = tmp_path / name
            model.save(p)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_model_roundtrip_and_reapply(self, tmp_path, corpus_records):
        records, _ = corpus_records
        model, verdicts = fit_posture_model(records, PostureConfig())
        path = tmp_path / "model.json"
        model.save(path)
        loaded = ClusterModel.load(path)
        for record, fit_verdict in zip(records[:50], verdicts[:50]):
            assert loaded.verdict_for(record).reasons == fit_verdict.reasons

    def test_explicit_decisions_flow_through(self, corpus_records):
        records, _ = corpus_records
        base, _ = fit_posture_model(records, PostureConfig())
        keep_all = {cid: "keep" for cid in range(base.kmeans.k)}
        model, verdicts = fit_posture_model(
            records, PostureConfig(decisions=keep_all)
        )
        assert all("outlier_pose" not in v.reasons for v in verdicts)

    def test_report_structure(self, corpus_records):
        records, _ = corpus_records
        model, _ = fit_posture_model(records, PostureConfig())
        report = cluster_report(model, records)
        assert len(report["clusters"]) == model.kmeans.k
        assert sum(c["count"] for c in report["clusters"]) == len(report["projection"])
        for cluster in report["clusters"]:
            if cluster["count"]:
                assert len(cluster["mean_pose"]) == 34
                assert len(cluster["keypoint_variance"]) == 17
        assert all(len(p["coords"]) == 2 for p in report["projection"])
