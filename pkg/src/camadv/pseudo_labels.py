"""Per-epoch clustering of target features into pseudo-identities."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import pdist
from sklearn.cluster import DBSCAN, KMeans

from .data import SealedIds

logger = logging.getLogger(__name__)

OUTLIER = -1


class ClusteringFailed(RuntimeError):
    """No cluster was found even after relaxing eps; the epoch's fine-tuning is skipped."""


@dataclass(frozen=True, eq=False)
class PseudoLabeling:
    """Cluster assignments (``-1`` = outlier) and per-cluster mean features."""

    assignments: np.ndarray
    centroids: np.ndarray
    epoch: int = 0
    branch: str = "F"
    normalized: bool = True
    eps: Optional[float] = None

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=np.int64)
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError("centroids must be a cluster_count x d matrix")
        if len(a) and (a.max(initial=OUTLIER) >= len(c) or a.min(initial=0) < OUTLIER):
            raise ValueError("assignment indexes a missing centroid")
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "centroids", c)

    def __len__(self) -> int:
        return len(self.assignments)

    @property
    def num_clusters(self) -> int:
        return len(self.centroids)

    @property
    def outlier_mask(self) -> np.ndarray:
        return self.assignments == OUTLIER

    def sample_centroids(self) -> np.ndarray:
        """Per-sample centroid rows; NaN rows for outliers."""
        out = np.full((len(self.assignments), self.centroids.shape[1]), np.nan)
        inlier = ~self.outlier_mask
        out[inlier] = self.centroids[self.assignments[inlier]]
        return out

    def summary(self) -> dict:
        sizes = np.bincount(self.assignments[~self.outlier_mask], minlength=self.num_clusters)
        return {
            "epoch": self.epoch,
            "branch": self.branch,
            "num_clusters": self.num_clusters,
            "num_outliers": int(self.outlier_mask.sum()),
            "mean_cluster_size": float(sizes.mean()) if len(sizes) else 0.0,
            "eps": self.eps,
        }

    def to_dict(self) -> dict:
        return {
            "assignments": self.assignments.tolist(),
            "centroids": self.centroids.tolist(),
            "epoch": self.epoch,
            "branch": self.branch,
            "normalized": self.normalized,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PseudoLabeling":
        centroids = np.asarray(d["centroids"], dtype=np.float64)
        if centroids.size == 0:
            centroids = centroids.reshape(0, 0)
        return cls(np.asarray(d["assignments"]), centroids, d["epoch"], d["branch"], d["normalized"], d["eps"])


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def compute_centroids(features: np.ndarray, assignments: np.ndarray, num_clusters: int) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    centroids = np.zeros((num_clusters, features.shape[1]))
    for k in range(num_clusters):
        centroids[k] = features[assignments == k].mean(axis=0)
    return centroids


def percentile_eps(features: np.ndarray, percentile: float, subsample: int, seed: int) -> float:
    """The ``percentile``-th (in percent) pairwise Euclidean distance over a subsample."""
    rng = np.random.default_rng(seed)
    x = features
    if len(x) > subsample:
        x = x[np.sort(rng.choice(len(x), size=subsample, replace=False))]
    return float(np.percentile(pdist(x), percentile))


def cluster_epoch(
    features: np.ndarray,
    algorithm: str = "dbscan",
    *,
    eps: Optional[float] = None,
    eps_percentile: float = 0.16,
    min_samples: int = 4,
    k: Optional[int] = None,
    normalize: bool = True,
    subsample: int = 2000,
    eps_growth: float = 1.5,
    max_retries: int = 3,
    seed: int = 0,
    epoch: int = 0,
    branch: str = "F",
) -> PseudoLabeling:
    """Cluster an ``N x d`` feature snapshot.

    DBSCAN runs on L2-normalised features with Euclidean distance; unless
    ``eps`` is given it is the ``eps_percentile``-th percent of pairwise
    distances. When no cluster is found eps is multiplied by
    ``eps_growth`` up to ``max_retries`` times before giving up.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be an N x d matrix")
    if normalize:
        x = l2_normalize(x)

    if algorithm == "kmeans":
        if k is None or not 1 <= k <= len(x):
            raise ValueError(f"k-means needs 1 <= k <= N, got k={k}, N={len(x)}")
        labels = KMeans(n_clusters=k, n_init=4, random_state=seed).fit_predict(x)
        labels = _compact(labels)
        return PseudoLabeling(labels, compute_centroids(x, labels, labels.max() + 1), epoch, branch, normalize)

    if algorithm != "dbscan":
        raise ValueError(f"unknown clustering algorithm {algorithm!r}")
    if len(x) < min_samples:
        raise ValueError(f"DBSCAN needs at least min_samples={min_samples} points, got {len(x)}")
    if eps is None:
        eps = percentile_eps(x, eps_percentile, subsample, seed)
    eps = max(float(eps), 1e-12)
    for attempt in range(max_retries + 1):
        labels = DBSCAN(eps=eps, min_samples=min_samples, metric="euclidean").fit_predict(x)
        labels = _compact(labels)
        count = labels.max() + 1
        if count > 0:
            return PseudoLabeling(labels, compute_centroids(x, labels, count), epoch, branch, normalize, eps)
        if attempt < max_retries:
            logger.warning("epoch %d branch %s: DBSCAN found no cluster at eps=%.4g, relaxing", epoch, branch, eps)
            eps *= eps_growth
    raise ClusteringFailed(f"epoch {epoch} branch {branch}: no cluster after {max_retries} eps relaxations")


def _compact(labels: np.ndarray) -> np.ndarray:
    """Renumber non-negative labels to 0..C-1 in order of first appearance."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, OUTLIER)
    mapping: dict = {}
    for i, lab in enumerate(labels):
        if lab >= 0:
            out[i] = mapping.setdefault(int(lab), len(mapping))
    return out


def centroid_of(labeling: PseudoLabeling, sample_index: int) -> Optional[np.ndarray]:
    if not 0 <= sample_index < len(labeling):
        raise IndexError(f"sample index {sample_index} outside labeling of size {len(labeling)}")
    cluster = labeling.assignments[sample_index]
    return None if cluster == OUTLIER else labeling.centroids[cluster]


def _ids(true_ids: Union[SealedIds, Sequence]) -> list:
    return list(true_ids._ids) if isinstance(true_ids, SealedIds) else list(true_ids)


def lost_ids(labeling: PseudoLabeling, true_ids: Union[SealedIds, Sequence]) -> int:
    """Number of ground-truth identities whose samples are all outliers."""
    ids = _ids(true_ids)
    if len(ids) != len(labeling):
        raise ValueError("labeling and ids differ in length")
    present = {pid for pid, a in zip(ids, labeling.assignments) if a != OUTLIER}
    return len({pid for pid in ids if pid is not None} - present)


def canonicalize(labeling: PseudoLabeling) -> PseudoLabeling:
    """Reindex clusters by lexicographic order of their centroids.

    Ties (identical centroids) are broken by the smallest member index.
    """
    c = labeling.num_clusters
    if c == 0:
        return labeling
    first_member = np.full(c, len(labeling))
    for i, a in enumerate(labeling.assignments):
        if a != OUTLIER and i < first_member[a]:
            first_member[a] = i
    keys = [first_member] + [labeling.centroids[:, j] for j in reversed(range(labeling.centroids.shape[1]))]
    order = np.lexsort(keys)
    new_index = np.empty(c, dtype=np.int64)
    new_index[order] = np.arange(c)
    assignments = np.where(labeling.outlier_mask, OUTLIER, new_index[np.maximum(labeling.assignments, 0)])
    return replace(labeling, assignments=assignments, centroids=labeling.centroids[order])


def equivalent(a: PseudoLabeling, b: PseudoLabeling) -> bool:
    """True when both labelings agree up to a permutation of cluster indices."""
    ca, cb = canonicalize(a), canonicalize(b)
    return (
        ca.centroids.shape == cb.centroids.shape
        and np.array_equal(ca.assignments, cb.assignments)
        and np.array_equal(ca.centroids, cb.centroids)
    )


def permute(labeling: PseudoLabeling, permutation: Sequence[int]) -> PseudoLabeling:
    """Relabel cluster ``k`` as ``permutation[k]`` (centroids move along)."""
    perm = np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(labeling.num_clusters)):
        raise ValueError("not a permutation of the cluster indices")
    centroids = np.empty_like(labeling.centroids)
    centroids[perm] = labeling.centroids
    assignments = np.where(labeling.outlier_mask, OUTLIER, perm[np.maximum(labeling.assignments, 0)])
    return replace(labeling, assignments=assignments, centroids=centroids)
