"""Embedding-space primitives shared by every loss.

All arithmetic is float64: the finite-difference gradient checks need the
headroom.  Distances are the Euclidean proxy for cosine similarity on
unit vectors, ``d = 2 * (1 - s)``, clamped below at ``EPS_DIST`` so that
log-ratio terms never see log(0).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatchError, ZeroVectorError

# Modality tags for rows of an EmbeddingBatch.
IMAGE = 0
TEXT = 1
AUGMENTED_IMAGE = 2

# Lower clamp applied to distances before any logarithm.
EPS_DIST = 1e-6


@dataclass
class EmbeddingBatch:
    """Rows of unit-norm vectors plus per-row modality and pair-group tags."""

    vectors: np.ndarray                      # (count, dim) float64
    modality: np.ndarray = field(default=None)   # (count,) int
    group_id: np.ndarray = field(default=None)   # (count,) int

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise DimMismatchError("embedding batch must be a (count, dim) matrix with count >= 1")
        n = self.vectors.shape[0]
        if self.modality is None:
            self.modality = np.full(n, IMAGE, dtype=np.int64)
        else:
            self.modality = np.asarray(self.modality, dtype=np.int64)
        if self.group_id is None:
            self.group_id = np.arange(n, dtype=np.int64)
        else:
            self.group_id = np.asarray(self.group_id, dtype=np.int64)
        if self.modality.shape != (n,) or self.group_id.shape != (n,):
            raise DimMismatchError("modality/group_id must have one entry per row")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class SimilarityMatrix:
    """Cosine similarities; entry (i, j) pairs row i of the first batch with row j of the second."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class DistanceMatrix:
    """Squared-Euclidean distances between unit vectors, 2*(1 - s), in [eps, 4]."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


def l2_normalize(raw, modality=None, group_id=None) -> EmbeddingBatch:
    """Divide every row by its Euclidean norm.

    Raises ZeroVectorError if any row norm is <= 1e-12.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise DimMismatchError("expected a (count, dim) matrix")
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms <= 1e-12):
        bad = int(np.argmin(norms))
        raise ZeroVectorError(f"row {bad} has norm {norms[bad]:.3e}")
    return EmbeddingBatch(raw / norms[:, None], modality=modality, group_id=group_id)


def similarity_matrix(a: EmbeddingBatch, b: EmbeddingBatch) -> SimilarityMatrix:
    """Pairwise dot products: entry (i, j) = a.vectors[i] . b.vectors[j].

    For the canonical text-image matrix, pass texts as ``a`` and images
    as ``b``.  Both batches must live in the same space.
    """
    if a.dim != b.dim:
        raise DimMismatchError(f"dim {a.dim} vs {b.dim}")
    return SimilarityMatrix(a.vectors @ b.vectors.T)


def distance_from_similarity(s: SimilarityMatrix, eps_dist: float = EPS_DIST) -> DistanceMatrix:
    """Elementwise 2*(1 - s), clamped below at eps_dist.

    The clamp keeps log-ratio terms finite when a pair is (numerically)
    perfectly aligned.
    """
    values = s.values if isinstance(s, SimilarityMatrix) else np.asarray(s, dtype=np.float64)
    return DistanceMatrix(np.maximum(2.0 * (1.0 - values), eps_dist))
