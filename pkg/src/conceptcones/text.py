"""Word captions for concept cones and orthogonal alignment of embedding spaces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCrossCovariance, DimensionMismatch
from .nnls import solve_nnls
from .types import NORM_ATOL, normalize_clip_style


@dataclass(frozen=True)
class Vocabulary:
    words: tuple
    embeddings: np.ndarray  # d x V, unit-norm columns

    def __post_init__(self):
        E = np.array(self.embeddings, dtype=np.float64)
        words = tuple(str(w) for w in self.words)
        if E.ndim != 2 or E.shape[1] != len(words):
            raise DimensionMismatch(f"{len(words)} words for embeddings of shape {E.shape}")
        if not words:
            raise ValueError("vocabulary is empty")
        if np.any(np.abs(np.linalg.norm(E, axis=0) - 1.0) > NORM_ATOL):
            raise ValueError("vocabulary embeddings must be unit norm")
        E.setflags(write=False)
        object.__setattr__(self, "embeddings", E)
        object.__setattr__(self, "words", words)

    @classmethod
    def prepare(cls, words, raw_embeddings, mean=None) -> "Vocabulary":
        """Normalize, center and re-normalize raw word embeddings.

        Without ``mean`` the centering vector is the average of the
        unit-normalized vocabulary itself.
        """
        E = np.asarray(raw_embeddings, dtype=np.float64)
        unit = E / np.linalg.norm(E, axis=0)
        if mean is None:
            mean = unit.mean(axis=1)
        return cls(tuple(words), normalize_clip_style(E, mean).data)


def word_captions(atoms, vocab: Vocabulary, top_n: int = 5) -> list:
    """Words best reconstructed by non-negative combinations of ``atoms``.

    Returns ``[(word, error), ...]`` for the ``top_n`` words with the smallest
    ``min_{a >= 0} ||w - atoms @ a||``, ascending; equal errors are ordered
    by the word string.
    """
    Bj = np.asarray(atoms, dtype=np.float64)
    if Bj.ndim == 1:
        Bj = Bj[:, None]
    if Bj.shape[0] != vocab.embeddings.shape[0]:
        raise DimensionMismatch(f"atoms have dimension {Bj.shape[0]}, vocabulary "
                                f"{vocab.embeddings.shape[0]}")
    errors = [solve_nnls(Bj, w).residual_norm for w in vocab.embeddings.T]
    order = sorted(range(len(errors)), key=lambda i: (errors[i], vocab.words[i]))
    return [(vocab.words[i], float(errors[i])) for i in order[:top_n]]


@dataclass(frozen=True)
class AlignmentMap:
    """Orthogonal ``R`` minimizing ``||R X - Y||_F``; apply with ``R @ x``."""

    matrix: np.ndarray

    def __post_init__(self):
        R = np.array(self.matrix, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise DimensionMismatch(f"alignment must be square, got {R.shape}")
        if np.linalg.norm(R.T @ R - np.eye(R.shape[0])) >= 1e-8:
            raise ValueError("alignment matrix is not orthogonal")
        R.setflags(write=False)
        object.__setattr__(self, "matrix", R)

    def __call__(self, x):
        return self.matrix @ np.asarray(x, dtype=np.float64)


def procrustes_align(X, Y) -> AlignmentMap:
    """Closed-form orthogonal Procrustes: ``R = U V^T`` from ``svd(Y X^T)``."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        raise DimensionMismatch(f"shapes {X.shape} and {Y.shape} differ")
    M = Y @ X.T
    U, s, Vt = np.linalg.svd(M)
    if s.size == 0 or s[0] <= np.finfo(float).eps * max(M.shape) * max(1.0, np.abs(M).max()):
        raise DegenerateCrossCovariance("cross-covariance has numerical rank 0")
    return AlignmentMap(U @ Vt)
