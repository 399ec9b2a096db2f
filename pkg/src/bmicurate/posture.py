"""Pose-based outlier filtering: normalize, PCA, k-means, elbow, decisions.

Keypoints are normalized by image size into 34-vectors, reduced with PCA to
the minimal component count preserving the configured variance fraction, and
clustered with k-means over a k sweep. The elbow of the inertia curve picks k,
and whole clusters are kept or discarded; members of discarded clusters get
the ``outlier_pose`` reason.

All randomness flows from a single seed through numpy's PCG64 generator, with
per-restart derived seeds so serial and parallel restart execution select the
identical best model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import ImageRecord, NUM_KEYPOINTS
from .person_filter import (
    REASON_MISSING_ANNOTATION,
    REASON_OUTLIER_POSE,
    FilterVerdict,
)

POSE_DIM = 2 * NUM_KEYPOINTS

KEEP = "keep"
DISCARD = "discard"

# Poses whose mean keypoint visibility falls below this are treated as
# unusable annotations and never enter the clustering.
MIN_MEAN_VISIBILITY = 0.3

_ZERO_VARIANCE_EPS = 1e-18


class PostureError(ValueError):
    pass


class ZeroVarianceError(PostureError):
    reason = "zero_variance"


def normalize_keypoints(record: ImageRecord) -> np.ndarray:
    """34-vector of (x/width, y/height) pairs in COCO keypoint order.

    Components may fall outside [0, 1] for keypoints predicted out of frame;
    that is allowed and carries pose information.
    """
    if record.keypoints is None:
        raise PostureError(REASON_MISSING_ANNOTATION)
    pts = record.keypoints.as_array()
    vec = np.empty(POSE_DIM, dtype=np.float64)
    vec[0::2] = pts[:, 0] / record.image_width
    vec[1::2] = pts[:, 1] / record.image_height
    return vec


@dataclass
class PcaModel:
    """Mean-centered PCA basis retaining a variance fraction."""

    mean: np.ndarray                      # (d,)
    components: np.ndarray                # (p, d), orthonormal rows
    explained_variance: np.ndarray        # (p,) retained eigenvalues
    explained_variance_ratio: np.ndarray  # (p,)
    variance_threshold: float

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T


def fit_pca(vectors: np.ndarray, variance_threshold: float = 0.95) -> PcaModel:
    """Covariance-eigendecomposition PCA keeping the minimal component count
    whose cumulative explained variance reaches the threshold.

    Component signs are normalized (largest-magnitude entry positive) so
    repeated fits are bit-identical.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise PostureError("expected a 2-D data matrix")
    n = X.shape[0]
    if n < 2:
        raise PostureError("PCA needs at least 2 samples")
    if not (0.0 < variance_threshold <= 1.0):
        raise PostureError("variance_threshold must lie in (0, 1]")

    mean = X.mean(axis=0)
    centered = X - mean
    cov = (centered.T @ centered) / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = eigenvectors[:, order].T  # rows are components

    total = float(eigenvalues.sum())
    if total < _ZERO_VARIANCE_EPS:
        raise ZeroVarianceError("zero_variance: all input vectors are identical")

    ratios = eigenvalues / total
    cumulative = np.cumsum(ratios)
    p = int(np.searchsorted(cumulative, variance_threshold - 1e-12) + 1)
    p = min(p, len(eigenvalues))

    components = eigenvectors[:p].copy()
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0

    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=eigenvalues[:p].copy(),
        explained_variance_ratio=ratios[:p].copy(),
        variance_threshold=variance_threshold,
    )


@dataclass
class KmeansModel:
    """Fitted k-means centroids plus the training-run audit trail."""

    k: int
    centroids: np.ndarray         # (k, p)
    inertia: float
    seed: int
    n_iter: int = 0
    restarts: int = 1
    inertia_history: list[float] = field(default_factory=list)  # best run, per Lloyd iteration

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _assign(np.asarray(X, dtype=np.float64), self.centroids)[0]


def _assign(X: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float]:
    """Nearest-centroid labels and the resulting inertia."""
    d2 = _sq_distances(X, centroids)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(X.shape[0]), labels].sum())
    return labels, inertia


def _sq_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # ||x - c||^2 computed directly; numerically safer than the expanded form.
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D²-weighted sampling of existing data points."""
    n = X.shape[0]
    centroids = np.empty((k, X.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = X[first]
    closest_d2 = _sq_distances(X, centroids[0:1])[:, 0]
    for i in range(1, k):
        total = closest_d2.sum()
        if total <= 0.0:
            # All remaining mass is on already-chosen points; fall back to uniform.
            idx = int(rng.integers(n))
        else:
            probs = closest_d2 / total
            idx = int(rng.choice(n, p=probs))
        centroids[i] = X[idx]
        d2_new = _sq_distances(X, centroids[i : i + 1])[:, 0]
        closest_d2 = np.minimum(closest_d2, d2_new)
    return centroids


def _lloyd(
    X: np.ndarray,
    init: np.ndarray,
    max_iter: int,
    tol: float,
) -> tuple[np.ndarray, np.ndarray, float, list[float]]:
    """Lloyd iterations from a fixed initialization.

    Returns (centroids, labels, inertia, inertia history). The history holds
    the inertia after each assignment step and is non-increasing.
    """
    centroids = init.copy()
    k = centroids.shape[0]
    history: list[float] = []
    labels, inertia = _assign(X, centroids)
    history.append(inertia)
    for _ in range(max_iter):
        new_centroids = centroids.copy()
        for j in range(k):
            members = X[labels == j]
            if members.shape[0] > 0:
                new_centroids[j] = members.mean(axis=0)
        # Re-seed empty clusters at the point farthest from its assigned
        # centroid; deterministic and strictly reduces inertia.
        empty = [j for j in range(k) if not np.any(labels == j)]
        if empty:
            d2 = _sq_distances(X, new_centroids)
            point_d2 = d2[np.arange(X.shape[0]), np.argmin(d2, axis=1)]
            farthest = np.argsort(point_d2)[::-1]
            for slot, j in enumerate(empty):
                new_centroids[j] = X[farthest[slot]]
        centroids = new_centroids
        labels, new_inertia = _assign(X, centroids)
        history.append(new_inertia)
        if inertia - new_inertia < tol * max(inertia, 1e-12):
            inertia = new_inertia
            break
        inertia = new_inertia
    return centroids, labels, inertia, history


def fit_kmeans(
    data: np.ndarray,
    k: int,
    seed: int = 42,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-4,
) -> KmeansModel:
    """Best-of-restarts Lloyd's k-means with k-means++ initialization.

    Restart i uses the derived seed ``seed + i``, and ties on inertia resolve
    to the lowest restart index, so the selected model does not depend on
    whether restarts ran serially or in parallel.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2:
        raise PostureError("expected a 2-D data matrix")
    n = X.shape[0]
    if k < 1:
        raise PostureError("k must be at least 1")
    if k > n:
        raise PostureError(f"k={k} exceeds the number of points n={n}")
    if restarts < 1:
        raise PostureError("restarts must be at least 1")

    best: tuple[float, int] | None = None
    best_result: tuple[np.ndarray, np.ndarray, float, list[float]] | None = None
    for i in range(restarts):
        rng = np.random.default_rng(seed + i)
        init = _kmeanspp_init(X, k, rng)
        result = _lloyd(X, init, max_iter=max_iter, tol=tol)
        key = (result[2], i)
        if best is None or key < best:
            best = key
            best_result = result

    assert best_result is not None
    centroids, _, inertia, history = best_result
    return KmeansModel(
        k=k,
        centroids=centroids,
        inertia=inertia,
        seed=seed,
        n_iter=len(history) - 1,
        restarts=restarts,
        inertia_history=history,
    )


def elbow_select(inertias: dict[int, float]) -> int:
    """Knee of the inertia-vs-k curve by max perpendicular distance to the
    chord between the first and last point, after rescaling both axes to the
    unit square. Ties (within float noise) break toward smaller k.
    """
    if len(inertias) < 2:
        raise PostureError("elbow selection needs at least two k values")
    ks = sorted(inertias)
    if ks != list(range(ks[0], ks[-1] + 1)):
        raise PostureError("k keys must form a contiguous increasing range")

    k_arr = np.asarray(ks, dtype=np.float64)
    inert = np.asarray([inertias[k] for k in ks], dtype=np.float64)

    x = (k_arr - k_arr[0]) / (k_arr[-1] - k_arr[0])
    span = inert.max() - inert.min()
    y = np.zeros_like(inert) if span == 0.0 else (inert - inert.min()) / span

    # Perpendicular distance from each point to the chord (x0,y0)-(x1,y1).
    dx, dy = x[-1] - x[0], y[-1] - y[0]
    norm = np.hypot(dx, dy)
    dist = np.abs(dy * (x - x[0]) - dx * (y - y[0])) / norm

    best = dist.max()
    for idx, d in enumerate(dist):
        if d >= best - 1e-12:
            return ks[idx]
    return ks[0]  # unreachable


@dataclass
class ClusterDecision:
    """Keep/discard decision and member count for every cluster id."""

    decisions: dict[int, str]
    member_counts: dict[int, int]
    source: str = "auto"  # "explicit" when decisions came from config

    def discarded_ids(self) -> set[int]:
        return {cid for cid, d in self.decisions.items() if d == DISCARD}


def decide_clusters(
    model: KmeansModel,
    labels: np.ndarray,
    explicit: dict[int, str] | None = None,
    auto_discard_fraction: float = 0.05,
) -> ClusterDecision:
    """Explicit keep/discard config wins; otherwise discard clusters whose
    member fraction falls below ``auto_discard_fraction``.
    """
    labels = np.asarray(labels)
    counts = {cid: int(np.sum(labels == cid)) for cid in range(model.k)}
    total = int(labels.shape[0])

    if explicit is not None:
        unknown = set(explicit) - set(range(model.k))
        if unknown:
            raise PostureError(f"decisions reference nonexistent cluster ids: {sorted(unknown)}")
        bad = {v for v in explicit.values() if v not in (KEEP, DISCARD)}
        if bad:
            raise PostureError(f"decisions must be '{KEEP}' or '{DISCARD}', got {sorted(bad)}")
        decisions = {cid: explicit.get(cid, KEEP) for cid in range(model.k)}
        return ClusterDecision(decisions=decisions, member_counts=counts, source="explicit")

    decisions = {}
    for cid in range(model.k):
        fraction = counts[cid] / total if total else 0.0
        decisions[cid] = DISCARD if fraction < auto_discard_fraction else KEEP
    return ClusterDecision(decisions=decisions, member_counts=counts, source="auto")


@dataclass(frozen=True)
class PostureConfig:
    variance_threshold: float = 0.95
    k_min: int = 1
    k_max: int = 10
    seed: int = 42
    restarts: int = 10
    auto_discard_fraction: float = 0.05
    decisions: dict[int, str] | None = None
    min_mean_visibility: float = MIN_MEAN_VISIBILITY


@dataclass
class ClusterModel:
    """Fitted pose filter: PCA basis, k-means centroids and cluster decisions.

    Persisted as one JSON artifact so the filter can be re-applied to new
    images without refitting.
    """

    pca: PcaModel
    kmeans: KmeansModel
    decision: ClusterDecision
    config: PostureConfig
    inertia_by_k: dict[int, float]

    def assign_vector(self, vec: np.ndarray) -> int:
        projected = self.pca.transform(vec.reshape(1, -1))
        return int(self.kmeans.predict(projected)[0])

    def verdict_for(self, record: ImageRecord) -> FilterVerdict:
        """Filter verdict for a single record against the fitted model."""
        kp = record.keypoints
        if kp is None or kp.mean_visibility() < self.config.min_mean_visibility:
            return FilterVerdict(record.image_id, frozenset({REASON_MISSING_ANNOTATION}))
        cluster = self.assign_vector(normalize_keypoints(record))
        if cluster in self.decision.discarded_ids():
            return FilterVerdict(record.image_id, frozenset({REASON_OUTLIER_POSE}))
        return FilterVerdict(record.image_id)

    def save(self, path: str | Path) -> None:
        payload = {
            "schema": "bmicurate/cluster-model/v1",
            "config": {
                "variance_threshold": self.config.variance_threshold,
                "k_min": self.config.k_min,
                "k_max": self.config.k_max,
                "seed": self.config.seed,
                "restarts": self.config.restarts,
                "auto_discard_fraction": self.config.auto_discard_fraction,
                "min_mean_visibility": self.config.min_mean_visibility,
            },
            "pca": {
                "mean": self.pca.mean.tolist(),
                "components": self.pca.components.tolist(),
                "explained_variance": self.pca.explained_variance.tolist(),
                "explained_variance_ratio": self.pca.explained_variance_ratio.tolist(),
                "variance_threshold": self.pca.variance_threshold,
            },
            "kmeans": {
                "k": self.kmeans.k,
                "centroids": self.kmeans.centroids.tolist(),
                "inertia": self.kmeans.inertia,
                "seed": self.kmeans.seed,
                "restarts": self.kmeans.restarts,
            },
            "decision": {
                "decisions": {str(cid): d for cid, d in self.decision.decisions.items()},
                "member_counts": {str(cid): c for cid, c in self.decision.member_counts.items()},
                "source": self.decision.source,
            },
            "inertia_by_k": {str(k): v for k, v in self.inertia_by_k.items()},
        }
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClusterModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("schema") != "bmicurate/cluster-model/v1":
            raise PostureError(f"unrecognized cluster model schema in {path}")
        cfg = payload["config"]
        pca = PcaModel(
            mean=np.asarray(payload["pca"]["mean"], dtype=np.float64),
            components=np.asarray(payload["pca"]["components"], dtype=np.float64),
            explained_variance=np.asarray(payload["pca"]["explained_variance"], dtype=np.float64),
            explained_variance_ratio=np.asarray(
                payload["pca"]["explained_variance_ratio"], dtype=np.float64
            ),
            variance_threshold=float(payload["pca"]["variance_threshold"]),
        )
        kmeans = KmeansModel(
            k=int(payload["kmeans"]["k"]),
            centroids=np.asarray(payload["kmeans"]["centroids"], dtype=np.float64),
            inertia=float(payload["kmeans"]["inertia"]),
            seed=int(payload["kmeans"]["seed"]),
            restarts=int(payload["kmeans"]["restarts"]),
        )
        decision = ClusterDecision(
            decisions={int(cid): d for cid, d in payload["decision"]["decisions"].items()},
            member_counts={
                int(cid): c for cid, c in payload["decision"]["member_counts"].items()
            },
            source=payload["decision"]["source"],
        )
        config = PostureConfig(
            variance_threshold=float(cfg["variance_threshold"]),
            k_min=int(cfg["k_min"]),
            k_max=int(cfg["k_max"]),
            seed=int(cfg["seed"]),
            restarts=int(cfg["restarts"]),
            auto_discard_fraction=float(cfg["auto_discard_fraction"]),
            min_mean_visibility=float(cfg["min_mean_visibility"]),
        )
        inertia_by_k = {int(k): float(v) for k, v in payload["inertia_by_k"].items()}
        return cls(pca=pca, kmeans=kmeans, decision=decision, config=config,
                   inertia_by_k=inertia_by_k)


def fit_posture_model(
    records: list[ImageRecord], cfg: PostureConfig | None = None
) -> tuple[ClusterModel, list[FilterVerdict]]:
    """Fit the full pose filter on all records with usable keypoints and
    return it together with one verdict per input record.

    Records without keypoints, or with mean visibility below the configured
    floor, receive ``missing_annotation`` and never enter the fit.
    """
    cfg = cfg or PostureConfig()
    if cfg.k_min < 1 or cfg.k_max < cfg.k_min:
        raise PostureError("invalid k range")

    usable: list[int] = []
    vectors: list[np.ndarray] = []
    for idx, record in enumerate(records):
        kp = record.keypoints
        if kp is None or kp.mean_visibility() < cfg.min_mean_visibility:
            continue
        usable.append(idx)
        vectors.append(normalize_keypoints(record))

    if len(vectors) < 2:
        raise PostureError("posture clustering needs at least 2 records with usable keypoints")

    X = np.vstack(vectors)
    pca = fit_pca(X, cfg.variance_threshold)
    projected = pca.transform(X)

    k_max = min(cfg.k_max, projected.shape[0])
    if k_max < cfg.k_min:
        raise PostureError(
            f"k_min={cfg.k_min} exceeds the {projected.shape[0]} clusterable records"
        )
    models: dict[int, KmeansModel] = {}
    inertia_by_k: dict[int, float] = {}
    for k in range(cfg.k_min, k_max + 1):
        model_k = fit_kmeans(projected, k, seed=cfg.seed, restarts=cfg.restarts)
        models[k] = model_k
        inertia_by_k[k] = model_k.inertia

    chosen_k = elbow_select(inertia_by_k) if len(inertia_by_k) > 1 else k_max
    kmeans = models[chosen_k]
    labels = kmeans.predict(projected)
    decision = decide_clusters(
        kmeans,
        labels,
        explicit=cfg.decisions,
        auto_discard_fraction=cfg.auto_discard_fraction,
    )
    model = ClusterModel(
        pca=pca, kmeans=kmeans, decision=decision, config=cfg, inertia_by_k=inertia_by_k
    )

    discarded = decision.discarded_ids()
    verdicts: list[FilterVerdict] = []
    usable_pos = {record_idx: pos for pos, record_idx in enumerate(usable)}
    for idx, record in enumerate(records):
        if idx not in usable_pos:
            verdicts.append(
                FilterVerdict(record.image_id, frozenset({REASON_MISSING_ANNOTATION}))
            )
        elif int(labels[usable_pos[idx]]) in discarded:
            verdicts.append(FilterVerdict(record.image_id, frozenset({REASON_OUTLIER_POSE})))
        else:
            verdicts.append(FilterVerdict(record.image_id))
    return model, verdicts


def cluster_report(
    model: ClusterModel, records: list[ImageRecord]
) -> dict:
    """Diagnostic report: per-cluster counts, mean pose, per-keypoint variance
    and 2-D PCA projection coordinates for external plotting.
    """
    rows = []
    vectors = []
    ids = []
    for record in records:
        kp = record.keypoints
        if kp is None or kp.mean_visibility() < model.config.min_mean_visibility:
            continue
        vectors.append(normalize_keypoints(record))
        ids.append(record.image_id)
    if not vectors:
        return {"clusters": [], "projection": []}

    X = np.vstack(vectors)
    projected = model.pca.transform(X)
    labels = model.kmeans.predict(projected)

    clusters = []
    for cid in range(model.kmeans.k):
        members = X[labels == cid]
        entry: dict = {
            "cluster_id": cid,
            "count": int(members.shape[0]),
            "decision": model.decision.decisions.get(cid, KEEP),
        }
        if members.shape[0] > 0:
            mean_pose = members.mean(axis=0)
            var_pose = members.var(axis=0)
            entry["mean_pose"] = mean_pose.tolist()
            entry["keypoint_variance"] = [
                {"x_var": float(var_pose[2 * i]), "y_var": float(var_pose[2 * i + 1])}
                for i in range(NUM_KEYPOINTS)
            ]
        clusters.append(entry)

    # First two PCA components as plot-ready coordinates.
    proj2d = projected[:, : min(2, projected.shape[1])]
    projection = [
        {
            "image_id": image_id,
            "cluster": int(label),
            "coords": [float(c) for c in coords],
        }
        for image_id, label, coords in zip(ids, labels, proj2d)
    ]
    return {"clusters": clusters, "projection": projection}
