"""K-means unit discovery and run-length deduplication of unit sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # [k, d_f], float64

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError(f"codebook centroids must be [k, d_f], got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("codebook has non-finite centroids")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _as_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"features must be a non-empty [n, d_f] array, got shape {x.shape}")
    return x


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # Exact differences rather than the |x|^2 - 2xc + |c|^2 expansion, so that
    # ties and zero distances are resolved without cancellation error.
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_fit(features, k: int, max_iters: int = 100, seed: int = 0,
               history: list | None = None) -> Codebook:
    """Lloyd's algorithm with ``k`` distinct data points as the initial centroids.

    If ``history`` is given, the inertia after each assignment step is
    appended to it.
    """
    x = _as_features(features)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < k:
        raise ValueError(f"need at least {k} distinct feature vectors, got {distinct.shape[0]}")

    rng = np.random.default_rng(seed)
    centroids = distinct[np.sort(rng.choice(distinct.shape[0], size=k, replace=False))].copy()
    assign = None
    for _ in range(max(1, max_iters)):
        d2 = _sq_dists(x, centroids)
        new_assign = d2.argmin(axis=1)
        if history is not None:
            history.append(float(d2[np.arange(len(x)), new_assign].sum()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        point_err = d2[np.arange(len(x)), assign]
        taken = np.zeros(len(x), dtype=bool)
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster with the worst-served point
                order = np.argsort(-point_err, kind="stable")
                far = next(i for i in order if not taken[i])
                taken[far] = True
                centroids[j] = x[far]
                point_err[far] = 0.0
    return Codebook(centroids)


def inertia(features, codebook: Codebook) -> float:
    x = _as_features(features)
    return float(_sq_dists(x, codebook.centroids).min(axis=1).sum())


def quantize(features, codebook: Codebook) -> list[int]:
    """Nearest-centroid unit per frame; ties go to the lowest centroid index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be [n, d_f], got shape {x.shape}")
    if x.shape[0] == 0:
        return []
    if x.shape[1] != codebook.dim:
        raise ValueError(f"feature dim {x.shape[1]} != codebook dim {codebook.dim}")
    return [int(u) for u in _sq_dists(x, codebook.centroids).argmin(axis=1)]


def deduplicate(units: Sequence[int]) -> list[int]:
    """Collapse each run of equal adjacent units to a single unit."""
    out: list[int] = []
    for u in units:
        if not out or out[-1] != u:
            out.append(int(u))
    return out
