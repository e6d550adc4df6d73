"""Multi-label pseudo-labels from zero-shot similarity to concept prototypes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .types import NORM_ATOL, ZERO_NORM, ConceptLabelMatrix


@dataclass(frozen=True)
class ConceptPrototypes:
    """One unit-norm text embedding per concept, as columns of a ``d x S`` matrix."""

    vectors: np.ndarray
    concept_names: tuple = ()

    def __post_init__(self):
        W = np.array(self.vectors, dtype=np.float64)
        if W.ndim != 2:
            raise DimensionMismatch(f"prototypes must be d x S, got shape {W.shape}")
        norms = np.linalg.norm(W, axis=0)
        if np.any(np.abs(norms - 1.0) > NORM_ATOL):
            raise ValueError("prototype vectors must be unit norm")
        names = tuple(self.concept_names) or tuple(f"concept_{j}" for j in range(W.shape[1]))
        if len(names) != W.shape[1]:
            raise DimensionMismatch(f"{len(names)} names for {W.shape[1]} prototypes")
        W.setflags(write=False)
        object.__setattr__(self, "vectors", W)
        object.__setattr__(self, "concept_names", names)

    @classmethod
    def from_raw(cls, vectors, concept_names=()):
        W = np.asarray(vectors, dtype=np.float64)
        return cls(W / np.linalg.norm(W, axis=0), concept_names)

    @property
    def n_concepts(self) -> int:
        return self.vectors.shape[1]


def zero_shot_multilabel(X_raw, prototypes: ConceptPrototypes, s_tilde: int) -> ConceptLabelMatrix:
    """Mark the ``s_tilde`` concepts most cosine-similar to each item as active.

    ``X_raw`` should hold the encoder's original (uncentered) embeddings.
    Equal similarities are broken toward the lower concept index.
    """
    X = np.asarray(X_raw, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    W = prototypes.vectors
    if X.shape[0] != W.shape[0]:
        raise DimensionMismatch(f"items have dimension {X.shape[0]}, prototypes {W.shape[0]}")
    S = W.shape[1]
    if not 1 <= s_tilde <= S:
        raise ValueError(f"s_tilde must lie in 1..{S}")
    norms = np.linalg.norm(X, axis=0)
    if np.any(norms < ZERO_NORM):
        raise ValueError("cannot score a zero embedding")
    sims = (W.T @ X) / norms  # S x N
    order = np.argsort(-sims, axis=0, kind="stable")[:s_tilde]
    Y = np.zeros((X.shape[1], S), dtype=np.uint8)
    Y[np.arange(X.shape[1])[None, :].repeat(s_tilde, axis=0), order] = 1
    return ConceptLabelMatrix(Y, prototypes.concept_names)


def estimate_s_tilde(labels) -> int:
    """Average number of active concepts per item, rounded half away from zero.

    This reads ground-truth labels, so it is a supervised helper.
    """
    Y = np.asarray(labels)
    mean = float(Y.sum(axis=1).mean())
    return int(math.floor(mean + 0.5))
