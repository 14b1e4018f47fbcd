"""Retrieval metrics and clustering diagnostics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.cluster import KMeans

from .data import DatasetSplit, SealedIds
from .pseudo_labels import OUTLIER, PseudoLabeling


def unseal(sealed: SealedIds) -> list:
    """Read the ground-truth ids held back from training."""
    if not isinstance(sealed, SealedIds):
        raise TypeError("expected a SealedIds diagnostic channel")
    return list(sealed._ids)


@dataclass
class RetrievalResult:
    rank1: float
    mAP: float
    per_query_ap: list
    num_queries: int
    num_excluded: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_query_ap")
        return d


def cosine_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return 1.0 - an @ bn.T


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision@k over the ranks k of the true matches."""
    matches = np.asarray(matches, dtype=bool)
    ranks = np.flatnonzero(matches) + 1
    if len(ranks) == 0:
        return 0.0
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def retrieve_and_score(
    query: DatasetSplit,
    gallery: DatasetSplit,
    query_features: np.ndarray,
    gallery_features: np.ndarray,
) -> RetrievalResult:
    """Rank-1 and mAP under cosine distance.

    Gallery entries from the query's camera are dropped; distractors never
    match. Queries left without any true match are excluded and counted in
    ``num_excluded``.
    """
    if len(query_features) != len(query) or len(gallery_features) != len(gallery):
        raise ValueError("one feature vector per query and gallery sample is required")
    dist = cosine_distance(query_features, gallery_features)
    g_ids = np.array([-1 if p is None else p for p in gallery.person_ids])
    g_cams = gallery.cameras
    g_distractor = gallery.distractor_mask
    aps, hits, excluded = [], [], 0
    for qi, sample in enumerate(query.samples):
        if sample.person_id is None:
            raise ValueError(f"query {qi} has no person id")
        keep = g_cams != sample.camera
        order = np.argsort(dist[qi, keep], kind="stable")
        matches = ((g_ids[keep] == sample.person_id) & ~g_distractor[keep])[order]
        if not matches.any():
            excluded += 1
            continue
        aps.append(average_precision(matches))
        hits.append(bool(matches[0]))
    n = len(aps)
    return RetrievalResult(
        rank1=float(np.mean(hits)) if n else 0.0,
        mAP=float(np.mean(aps)) if n else 0.0,
        per_query_ap=aps,
        num_queries=n,
        num_excluded=excluded,
    )


def _clean_pairs(a: Sequence, b: Sequence) -> list:
    if len(a) != len(b):
        raise ValueError("label sequences differ in length")
    pairs = [
        (int(x), int(y))
        for x, y in zip(a, b)
        if x is not None and y is not None and x != OUTLIER and y != OUTLIER
    ]
    if not pairs:
        raise ValueError("no labelled pairs to measure")
    return pairs


def entropy(labels: Sequence) -> float:
    counts = Counter(int(x) for x in labels if x is not None and x != OUTLIER)
    n = sum(counts.values())
    if n == 0:
        raise ValueError("empty label sequence")
    return max(0.0, -math.fsum(c / n * math.log(c / n) for c in counts.values()))


def mutual_information(labels_a: Sequence, labels_b: Sequence) -> float:
    """Plug-in mutual information (nats) of two discrete labelings.

    Pairs where either label is missing (``None`` or ``-1``) are dropped.
    The sum is evaluated with ``math.fsum`` so the result does not depend on
    argument order.
    """
    pairs = _clean_pairs(labels_a, labels_b)
    n = len(pairs)
    joint = Counter(pairs)
    ca = Counter(x for x, _ in pairs)
    cb = Counter(y for _, y in pairs)
    terms = [c / n * math.log(c * n / (ca[x] * cb[y])) for (x, y), c in joint.items()]
    return max(0.0, math.fsum(terms))


def jsd_multi(distributions: Sequence[Sequence[float]]) -> float:
    """Equal-weight Jensen-Shannon divergence of several distributions (nats)."""
    dists = [np.asarray(d, dtype=np.float64) for d in distributions]
    if not dists:
        raise ValueError("no distributions given")
    size = len(dists[0])
    for d in dists:
        if len(d) != size:
            raise ValueError("distributions must share one support")
        if (d < 0).any() or abs(d.sum() - 1.0) > 1e-9:
            raise ValueError("each distribution must be normalised")

    def h(p):
        return -math.fsum(float(v) * math.log(v) for v in p if v > 0)

    mixture = np.mean(dists, axis=0)
    value = h(mixture) - math.fsum(h(d) for d in dists) / len(dists)
    return max(0.0, value)


def feature_jsd(features: np.ndarray, cameras: Sequence[int], k: int = 16, seed: int = 0) -> float:
    """JSD between per-camera histograms of k-means-quantised features."""
    features = np.asarray(features, dtype=np.float64)
    cameras = np.asarray(cameras)
    k = min(k, len(features))
    codes = KMeans(n_clusters=k, n_init=4, random_state=seed).fit_predict(features)
    hists = []
    for cam in np.unique(cameras):
        counts = np.bincount(codes[cameras == cam], minlength=k).astype(np.float64)
        hists.append(counts / counts.sum())
    return jsd_multi(hists)


def cluster_quality(pseudo: Union[PseudoLabeling, Sequence[int]], true_ids) -> dict:
    """Purity and NMI (arithmetic-mean normalisation) against ground truth, outliers excluded."""
    assignments = pseudo.assignments if isinstance(pseudo, PseudoLabeling) else np.asarray(pseudo)
    ids = unseal(true_ids) if isinstance(true_ids, SealedIds) else list(true_ids)
    try:
        pairs = _clean_pairs(list(assignments), ids)
    except ValueError:
        raise ValueError("every sample is an outlier; cluster quality is undefined") from None
    a = [x for x, _ in pairs]
    b = [y for _, y in pairs]
    by_cluster: dict = {}
    for x, y in pairs:
        by_cluster.setdefault(x, Counter())[y] += 1
    purity = sum(max(c.values()) for c in by_cluster.values()) / len(pairs)
    ha, hb = entropy(a), entropy(b)
    denom = (ha + hb) / 2
    nmi = 1.0 if denom == 0 else mutual_information(a, b) / denom
    return {"purity": float(purity), "nmi": float(min(1.0, nmi))}


def pca_projection(features: np.ndarray, labels: Optional[Sequence[int]] = None, dims: int = 2):
    """Mean-centred PCA.

    Returns ``(points, explained_variance_ratio, labels)``; each component's
    largest-magnitude loading is made positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) <= dims:
        raise ValueError(f"need an N x d matrix with N > {dims}")
    centred = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    total = float((s**2).sum())
    comps = np.zeros((dims, x.shape[1]))
    ratio = np.zeros(dims)
    r = min(dims, len(s))
    if total > 0:
        comps[:r] = vt[:r]
        ratio[:r] = s[:r] ** 2 / total
        for i in range(r):
            j = np.argmax(np.abs(comps[i]))
            if comps[i, j] < 0:
                comps[i] = -comps[i]
    points = centred @ comps.T
    return points, ratio, None if labels is None else np.asarray(labels)


@dataclass
class DiagnosticSeries:
    """Per-epoch clustering diagnostics."""

    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        epoch = record["epoch"]
        if self.records and epoch <= self.records[-1]["epoch"]:
            raise ValueError("epoch indices must increase")
        for key, value in record.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise ValueError(f"non-finite diagnostic {key}={value}")
        self.records.append(dict(record))

    def column(self, key: str) -> list:
        return [r.get(key) for r in self.records]

    def __len__(self) -> int:
        return len(self.records)
