"""Per-modality affinity matrices and the crossmodal similarity target.

Pixel distances inside a patch are turned into Gaussian affinities whose
width is self-tuned from the k-th nearest-neighbour distance. Rows of the
two affinity matrices live in the same space, which is what makes the
crossmodal distance between a pixel of one image and a pixel of the other
meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

_TINY = np.finfo(np.float64).tiny


class DegenerateDataError(ValueError):
    """The patch has no spread, so no kernel width can be derived."""


@dataclass
class AffinityMatrix:
    entries: np.ndarray
    sigma: float

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass
class CrossmodalSimilarity:
    distances: np.ndarray
    similarities: np.ndarray
    stretch_min: float
    stretch_max: float

    @property
    def n(self) -> int:
        return self.distances.shape[-1]


def pairwise_distances(patch: np.ndarray) -> np.ndarray:
    """Euclidean distances between the rows of an (n, c) feature matrix."""
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if p.ndim != 2:
        raise ValueError(f"expected an (n, c) matrix, got shape {p.shape}")
    if p.shape[0] < 2:
        raise ValueError("need at least two pixels")
    if not np.all(np.isfinite(p)):
        raise ValueError("patch contains non-finite values")
    return cdist(p, p, metric="euclidean")


def default_k(n: int) -> int:
    return min(n - 1, max(1, math.ceil(0.75 * n)))


def kernel_width(dists: np.ndarray, k: Optional[int] = None) -> float:
    """Mean over pixels of the distance to their k-th nearest neighbour (self excluded)."""
    d = np.asarray(dists, dtype=np.float64)
    n = d.shape[0]
    if d.shape != (n, n) or n < 2:
        raise ValueError(f"expected a square matrix with n >= 2, got {d.shape}")
    if k is None:
        k = default_k(n)
    if not 1 <= k <= n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}], got {k}")
    off = d[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    kth = np.partition(off, k - 1, axis=1)[:, k - 1]
    sigma = math.fsum(kth.tolist()) / n
    if not sigma > 0:
        raise DegenerateDataError("kernel width is zero: the patch pixels coincide")
    return sigma


def affinity_matrix(dists: np.ndarray, sigma: float) -> AffinityMatrix:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = np.asarray(dists, dtype=np.float64)
    a = np.exp(-(d * d) / (sigma * sigma))
    # keep entries strictly positive when the exponent underflows
    np.maximum(a, _TINY, out=a)
    return AffinityMatrix(entries=a, sigma=float(sigma))


def patch_affinity(patch: np.ndarray, k: Optional[int] = None) -> AffinityMatrix:
    """Distances, self-tuned width and affinities for one (n, c) patch."""
    d = pairwise_distances(patch)
    return affinity_matrix(d, kernel_width(d, k))


def crossmodal_distance(ax: AffinityMatrix, ay: AffinityMatrix) -> np.ndarray:
    """D[i, j] = ||row_i(A_X) - row_j(A_Y)|| / sqrt(n), in [0, 1]."""
    if ax.n != ay.n:
        raise ValueError(f"affinity sizes differ: {ax.n} vs {ay.n}")
    d = cdist(ax.entries, ay.entries, metric="euclidean") / math.sqrt(ax.n)
    return np.clip(d, 0.0, 1.0)


def similarity_target(d: np.ndarray, stretch: bool = True) -> CrossmodalSimilarity:
    """S = 1 - D', with D' contrast-stretched over the whole array (the batch).

    A batch with max == min stretches to all zeros, i.e. S == 1.
    """
    d = np.asarray(d, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    if stretch:
        stretched = (d - lo) / (hi - lo) if hi > lo else np.zeros_like(d)
    else:
        stretched = d
    return CrossmodalSimilarity(distances=d, similarities=1.0 - stretched,
                                stretch_min=lo, stretch_max=hi)
