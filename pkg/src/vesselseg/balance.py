"""Similarity-driven dataset balancing.

Vessel masks are clustered by pairwise Jaccard distance with medoid (PAM)
clustering; the cluster count is picked by silhouette score; minority
clusters are topped up to the majority size with photometric synthetics
whose label masks are copied bit-exactly from their sources.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import FundusSample, ValidationError, jaccard_distance
from .invariant import InvariantConfig, local_average

log = logging.getLogger(__name__)

MAX_PAM_ITERS = 100


@dataclass
class DistanceMatrix:
    entries: np.ndarray          # (N, N) float64 in [0, 1]
    sample_ids: list[str]

    @property
    def n(self) -> int:
        return len(self.sample_ids)


@dataclass
class ClusterModel:
    k_star: int
    labels: np.ndarray
    silhouette_by_k: dict[int, float]
    medoid_ids: list[str] = field(default_factory=list)
    target_size: int = 0
    deficits: list[int] = field(default_factory=list)


def pairwise_distance(masks: list[np.ndarray], ids: list[str] | None = None) -> DistanceMatrix:
    """Symmetric zero-diagonal Jaccard distance matrix over binary masks."""
    if len(masks) < 2:
        raise ValidationError("need at least 2 masks")
    shape = masks[0].shape
    for m in masks:
        if m.shape != shape:
            raise ValidationError(f"mask shapes differ: {m.shape} vs {shape}")
    n = len(masks)
    d = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = jaccard_distance(masks[i], masks[j])
    if ids is None:
        ids = [str(i) for i in range(n)]
    return DistanceMatrix(entries=d, sample_ids=list(ids))


def silhouette_score(dist: DistanceMatrix, labels: np.ndarray) -> float:
    """Mean of per-sample (b - a) / max(a, b); singleton clusters score 0."""
    labels = np.asarray(labels)
    clusters = np.unique(labels)
    if len(clusters) < 2:
        raise ValidationError("silhouette needs at least 2 clusters")
    d = dist.entries
    scores = np.zeros(dist.n)
    for i in range(dist.n):
        own = labels == labels[i]
        own_size = int(own.sum())
        if own_size == 1:
            scores[i] = 0.0
            continue
        a = d[i, own].sum() / (own_size - 1)
        b = min(d[i, labels == c].mean() for c in clusters if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def cluster_medoids(dist: DistanceMatrix, k: int, seed: int) -> np.ndarray:
    """PAM-style clustering over a precomputed distance matrix.

    Medoids are initialized farthest-first from a seeded random start, then
    assignment and medoid update alternate until the labels stabilize.
    """
    n = dist.n
    if not 2 <= k <= n - 1:
        raise ValidationError(f"k={k} out of range [2, {n - 1}]")
    d = dist.entries
    rng = np.random.default_rng(seed)
    medoids = [int(rng.integers(n))]
    while len(medoids) < k:
        min_d = d[:, medoids].min(axis=1)
        min_d[medoids] = -1.0
        medoids.append(int(min_d.argmax()))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(MAX_PAM_ITERS):
        new_labels = d[:, medoids].argmin(axis=1)
        for c in range(k):
            members = np.flatnonzero(new_labels == c)
            if members.size == 0:
                continue
            within = d[np.ix_(members, members)].sum(axis=1)
            medoids[c] = int(members[within.argmin()])
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def select_k(dist: DistanceMatrix, k_max: int, seed: int = 0) -> ClusterModel:
    """Score candidate cluster counts and keep the smallest argmax."""
    if k_max < 2:
        raise ValidationError(f"k_max must be >= 2, got {k_max}")
    if dist.n < 4:
        raise ValidationError("need at least 4 samples to select a cluster count")
    scores: dict[int, float] = {}
    labels_by_k: dict[int, np.ndarray] = {}
    for k in range(2, min(k_max, dist.n - 1) + 1):
        labels = cluster_medoids(dist, k, seed)
        if len(np.unique(labels)) < 2:
            continue
        labels_by_k[k] = labels
        scores[k] = silhouette_score(dist, labels)
    if not scores:
        # fully degenerate matrix: keep k=2 with score 0
        labels = cluster_medoids(dist, 2, seed)
        labels_by_k[2] = labels
        scores[2] = 0.0
    best = max(scores.values())
    k_star = min(k for k, s in scores.items() if s == best)
    labels = labels_by_k[k_star]
    medoid_ids = []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        within = dist.entries[np.ix_(members, members)].sum(axis=1)
        medoid_ids.append(dist.sample_ids[members[within.argmin()]])
    return ClusterModel(k_star=k_star, labels=labels, silhouette_by_k=scores,
                        medoid_ids=medoid_ids)


def _unsharp(image: np.ndarray, amount: float) -> np.ndarray:
    cfg = InvariantConfig(window_size=5)
    blurred = np.stack([local_average(image[:, :, c], cfg) for c in range(3)], axis=-1)
    return image + amount * (image - blurred)


def synthesize_variant(sample: FundusSample, seed: int) -> FundusSample:
    """Seeded photometric-only variant; both masks are copied unchanged."""
    rng = np.random.default_rng(seed)
    img = sample.image.astype(np.float64)
    gain = rng.uniform(0.9, 1.1, size=3)
    offset = rng.uniform(-0.05, 0.05, size=3)
    img = img * gain + offset
    img = _unsharp(img, rng.uniform(0.5, 1.5))
    contrast = rng.uniform(0.8, 1.2)
    img = img.mean() + contrast * (img - img.mean())
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return replace(
        sample, id=f"{sample.id}__syn{seed}", image=img,
        vessel_mask=sample.vessel_mask.copy(), fov_mask=sample.fov_mask.copy(),
        synthetic=True,
    )


def balance_dataset(samples: list[FundusSample], k_max: int | None = None,
                    seed: int = 0) -> tuple[list[FundusSample], ClusterModel | None]:
    """Top every cluster up to the majority-cluster size with synthetics."""
    n = len(samples)
    if n < 4:
        log.info("only %d samples; balancing skipped", n)
        return list(samples), None
    if k_max is None:
        k_max = min(10, n - 1)
    dist = pairwise_distance([s.vessel_mask for s in samples], [s.id for s in samples])
    model = select_k(dist, k_max, seed)
    labels = model.labels
    sizes = np.bincount(labels, minlength=model.k_star)
    target = int(sizes.max())
    model.target_size = target
    model.deficits = [int(target - sz) for sz in sizes]

    out = list(samples)
    rng = np.random.default_rng(seed)
    for c, deficit in enumerate(model.deficits):
        members = np.flatnonzero(labels == c)
        for _ in range(deficit):
            src = samples[int(rng.choice(members))]
            out.append(synthesize_variant(src, int(rng.integers(2**31 - 1))))
    return out, model
