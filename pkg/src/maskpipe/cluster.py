"""K-means pseudo-labeling of class-agnostic mask candidates.

Masked-image embeddings are clustered with Lloyd's algorithm using
k-means++ seeding; the best of several restarts by inertia wins. All
randomness flows through one legacy ``RandomState`` stream so a fixed
seed reproduces the same model across platforms and numpy versions.

Cluster labels on manifests are 1-based: label 0 is reserved for the
background in segmentation maps.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .errors import EmbeddingLookupError, ParameterError, ValidationError
from .formats import ObjectCandidate


@dataclass(frozen=True)
class KMeansModel:
    k: int
    centroids: np.ndarray
    inertia: float
    seed: int
    iterations_run: int


def l2_normalize(points: np.ndarray) -> np.ndarray:
    """Row-normalize, leaving zero rows untouched."""
    points = np.asarray(points, dtype=np.float64)
    norms = np.linalg.norm(points, axis=1, keepdims=True)
    return np.where(norms > 0.0, points / np.where(norms == 0.0, 1.0, norms), points)


_DISTANCE_BLOCK = 256


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # exact (x - c)^2 sums, chunked so the broadcast temporary stays small;
    # chunking over points does not change any per-pair reduction order
    n = points.shape[0]
    out = np.empty((n, centers.shape[0]), dtype=np.float64)
    for start in range(0, n, _DISTANCE_BLOCK):
        block = points[start:start + _DISTANCE_BLOCK]
        diff = block[:, None, :] - centers[None, :, :]
        out[start:start + _DISTANCE_BLOCK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.RandomState) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.randint(n)]
    closest = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0.0:
            idx = rng.choice(n, p=closest / total)
        else:  # all points coincide with chosen centers
            idx = rng.randint(n)
        centers[j] = points[idx]
        closest = np.minimum(closest, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(points: np.ndarray, centers: np.ndarray, max_iter: int):
    """Lloyd iterations until the assignment stabilizes.

    Returns (centers, labels, inertia, iterations_run, inertia_history).
    Empty clusters are re-seeded with the point farthest from its
    current centroid, each empty cluster claiming a distinct point.
    """
    n = points.shape[0]
    k = centers.shape[0]
    prev_labels = None
    history: list[float] = []
    labels = np.zeros(n, dtype=np.intp)
    inertia = 0.0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = _squared_distances(points, centers)
        labels = np.argmin(d2, axis=1)
        point_d2 = d2[np.arange(n), labels]
        inertia = float(point_d2.sum())
        history.append(inertia)
        if prev_labels is not None and np.array_equal(labels, prev_labels):
            break
        new_centers = np.empty_like(centers)
        empty: list[int] = []
        for j in range(k):
            members = labels == j
            if members.any():
                new_centers[j] = points[members].mean(axis=0)
            else:
                empty.append(j)
        if empty:
            claim = point_d2.copy()
            for j in empty:
                idx = int(np.argmax(claim))
                new_centers[j] = points[idx]
                claim[idx] = -1.0
        centers = new_centers
        prev_labels = labels
    return centers, labels, inertia, iterations, history


def kmeans_fit(points, k: int, seed: int = 0, max_iter: int = 300,
               restarts: int = 10) -> KMeansModel:
    """Best of ``restarts`` k-means++ / Lloyd runs by inertia.

    Ties keep the earlier restart, so results are reproducible.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError(f"points must be [n, d], got {points.ndim}-D")
    if not np.all(np.isfinite(points)):
        raise ValidationError("points contain non-finite values")
    n = points.shape[0]
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if n < k:
        raise ParameterError(f"need at least k={k} points, got {n}")
    if max_iter < 1 or restarts < 1:
        raise ParameterError("max_iter and restarts must be >= 1")
    rng = np.random.RandomState(seed)
    best = None
    for _ in range(restarts):
        centers = _kmeans_pp_init(points, k, rng)
        centers, _, inertia, iterations, _ = _lloyd(points, centers, max_iter)
        if best is None or inertia < best[0]:
            best = (inertia, centers, iterations)
    inertia, centers, iterations = best
    return KMeansModel(k=k, centroids=centers, inertia=inertia,
                       seed=seed, iterations_run=iterations)


def kmeans_assign(model: KMeansModel, points) -> np.ndarray:
    """Nearest centroid by squared distance; ties go to the lower index."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != model.centroids.shape[1]:
        raise ValidationError(
            f"points must be [n, {model.centroids.shape[1]}], got {points.shape}"
        )
    return np.argmin(_squared_distances(points, model.centroids), axis=1)


def embedding_key(image_id: str, ordinal: int) -> str:
    """Lookup key of the masked-image embedding for one candidate.

    Multi-candidate images store one embedding per candidate under
    ``"<image_id>#<ordinal>"`` (ordinal = position of the record within
    its image, in manifest order); a bare ``image_id`` entry serves as
    the whole-image fallback for single-candidate stages.
    """
    return f"{image_id}#{ordinal}"


def label_candidates(records: Sequence[ObjectCandidate],
                     embeddings: Mapping[str, np.ndarray],
                     model: KMeansModel,
                     normalize: bool = False) -> list[ObjectCandidate]:
    """Attach 1-based cluster labels looked up per candidate."""
    seen: dict[str, int] = {}
    vectors = []
    for record in records:
        ordinal = seen.get(record.image_id, 0)
        seen[record.image_id] = ordinal + 1
        key = embedding_key(record.image_id, ordinal)
        vector = embeddings.get(key)
        if vector is None:
            vector = embeddings.get(record.image_id)
        if vector is None:
            raise EmbeddingLookupError(record.image_id)
        vectors.append(np.asarray(vector, dtype=np.float64))
    if not records:
        return []
    points = np.stack(vectors)
    if normalize:
        points = l2_normalize(points)
    labels = kmeans_assign(model, points)
    return [replace(record, label=int(lbl) + 1) for record, lbl in zip(records, labels)]


class EmbeddingKMeans(BaseEstimator, ClusterMixin):
    """sklearn-style wrapper around :func:`kmeans_fit` / :func:`kmeans_assign`.

    Attributes after ``fit``: ``cluster_centers_``, ``inertia_``,
    ``labels_``, ``n_iter_`` and the raw ``model_``.
    """

    def __init__(self, n_clusters: int = 20, seed: int = 0, restarts: int = 10,
                 max_iter: int = 300, normalize: bool = False):
        self.n_clusters = n_clusters
        self.seed = seed
        self.restarts = restarts
        self.max_iter = max_iter
        self.normalize = normalize

    def _prepare(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return l2_normalize(X) if self.normalize else X

    def fit(self, X, y=None):
        X = self._prepare(X)
        self.model_ = kmeans_fit(X, self.n_clusters, seed=self.seed,
                                 max_iter=self.max_iter, restarts=self.restarts)
        self.cluster_centers_ = self.model_.centroids
        self.inertia_ = self.model_.inertia
        self.n_iter_ = self.model_.iterations_run
        self.labels_ = kmeans_assign(self.model_, X)
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ValidationError("EmbeddingKMeans.predict called before fit")
        return kmeans_assign(self.model_, self._prepare(X))
