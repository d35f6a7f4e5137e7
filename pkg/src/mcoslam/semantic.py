"""Segment-level open-vocabulary feature fusion and label selection."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

NOISE = -1


class ZeroVector(ValueError):
    pass


class EmptyInput(ValueError):
    pass


def normalize(v, tol: float = 1e-9) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n < tol:
        raise ZeroVector("vector norm below tolerance")
    return v / n


def cosine(a, b) -> float:
    """Cosine similarity as ``1 - |a_hat - b_hat|^2 / 2``: exactly 1 for equal inputs and exactly symmetric."""
    d = normalize(a) - normalize(b)
    return float(1.0 - 0.5 * (d @ d))


@dataclass(frozen=True)
class SemanticConfig:
    fusion_weights: tuple[float, float, float] = (0.25, 0.25, 0.5)
    eps: float = 0.2
    min_pts: int = 3

    def __post_init__(self):
        w = np.asarray(self.fusion_weights, dtype=float)
        if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("fusion weights must be three non-negative numbers summing to 1")
        if self.eps <= 0 or self.min_pts < 1:
            raise ValueError("eps must be > 0 and min_pts >= 1")


@dataclass
class SegmentFeatureSet:
    segment_id: int
    features: list[np.ndarray] = field(default_factory=list)
    selected: np.ndarray | None = None


def fuse_view_features(f_full, f_mask_bg, f_mask_nobg, weights=(0.25, 0.25, 0.5)) -> np.ndarray:
    """Weighted sum of the three crop encodings, renormalized to unit length."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    fused = w[0] * np.asarray(f_full) + w[1] * np.asarray(f_mask_bg) + w[2] * np.asarray(f_mask_nobg)
    return normalize(fused)


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; labels 0..k-1, noise = -1.

    Clusters are seeded from core points in index order and expanded
    breadth-first, so border points go to the first cluster that reaches them.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError("eps must be > 0 and min_pts >= 1")
    X = np.asarray(points, dtype=float)
    n = len(X)
    if n == 0:
        return np.zeros(0, dtype=int)
    X = X.reshape(n, -1)
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0.0)
    adj = d2 <= eps * eps
    np.fill_diagonal(adj, True)
    neighbors = [np.flatnonzero(row) for row in adj]
    core = np.array([len(nb) >= min_pts for nb in neighbors])

    labels = np.full(n, NOISE, dtype=int)
    visited = np.zeros(n, dtype=bool)
    cluster = 0
    for i in range(n):
        if visited[i] or not core[i]:
            continue
        visited[i] = True
        labels[i] = cluster
        queue = deque(neighbors[i])
        while queue:
            j = queue.popleft()
            if labels[j] == NOISE:
                labels[j] = cluster
            if visited[j]:
                continue
            visited[j] = True
            if core[j]:
                queue.extend(neighbors[j])
        cluster += 1
    return labels


def select_segment_feature(features, eps: float = 0.2, min_pts: int = 3,
                           return_flag: bool = False):
    """Pick the input feature closest to the centroid of the dominant cluster.

    Falls back to the feature nearest the global centroid when every point is
    noise; ``return_flag=True`` additionally returns whether that happened.
    """
    if len(features) == 0:
        raise EmptyInput("no features to select from")
    F = np.asarray(features, dtype=float).reshape(len(features), -1)
    labels = dbscan(F, eps, min_pts)
    clustered = labels[labels >= 0]
    if clustered.size == 0:
        centroid = F.mean(axis=0)
        members = np.arange(len(F))
        fallback = True
        log.debug("all %d segment features are noise; using global centroid", len(F))
    else:
        counts = np.bincount(clustered)
        dominant = int(np.argmax(counts))  # ties -> lowest label
        members = np.flatnonzero(labels == dominant)
        centroid = F[members].mean(axis=0)
        fallback = False
    best = members[int(np.argmin(np.linalg.norm(F[members] - centroid, axis=1)))]
    out = np.asarray(features[best], dtype=float)
    return (out, fallback) if return_flag else out
