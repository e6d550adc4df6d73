"""Planted group-sparse data for tests and benchmarks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .types import GroupDictionary


@dataclass(frozen=True)
class PlantedData:
    X: np.ndarray  # d x N, possibly noisy
    labels: np.ndarray  # N x S
    dictionary: GroupDictionary
    A: np.ndarray  # M x N planted coefficients
    sublabels: np.ndarray  # N x S, index of the dominant atom in each active group, -1 if inactive

    @property
    def planted_objective(self) -> float:
        R = self.X - self.dictionary.atoms @ self.A
        return float(np.sum(R * R) / self.X.shape[1])


def planted_dataset(n_concepts=5, dim=64, d0=4, n_items=2000, concepts_per_item=(1, 3),
                    noise=0.0, seed=0, atoms_per_concept=1, coefficient_scale=(0.2, 1.0),
                    unit_norm=True):
    """Draw ``X = B A (+ noise)`` from random unit atoms and group-sparse ``A >= 0``.

    Each item activates a uniform number of concepts in
    ``concepts_per_item`` (inclusive). Within an active group,
    ``atoms_per_concept`` atoms (``None`` for all of them) get a uniform
    coefficient from ``coefficient_scale``. Dense within-group codes put the
    data near the cone centers, where the rank-1 refits recover the planted
    cones only slowly; sparse codes keep the cones identifiable. With ``unit_norm`` the
    noiseless columns are scaled to unit length (the scale is folded into
    ``A``) before Gaussian noise of standard deviation ``noise`` is added.

    ``sublabels`` records, per active concept, which atom carries the
    largest weight; it serves as a finer-grained label for retrieval tests.
    """
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((dim, n_concepts * d0))
    B /= np.linalg.norm(B, axis=0)
    dictionary = GroupDictionary(B, (d0,) * n_concepts)

    lo, hi = concepts_per_item
    hi = min(hi, n_concepts)
    counts = rng.integers(lo, hi + 1, size=n_items)
    labels = np.zeros((n_items, n_concepts), dtype=np.uint8)
    A = np.zeros((n_concepts * d0, n_items))
    sub = -np.ones((n_items, n_concepts), dtype=int)
    for i in range(n_items):
        active = rng.choice(n_concepts, size=counts[i], replace=False)
        labels[i, active] = 1
        for j in active:
            block = slice(j * d0, (j + 1) * d0)
            a = rng.uniform(*coefficient_scale, size=d0)
            if atoms_per_concept is not None and atoms_per_concept < d0:
                off = rng.choice(d0, size=d0 - atoms_per_concept, replace=False)
                a[off] = 0.0
            A[block, i] = a
            sub[i, j] = int(np.argmax(a))
    clean = B @ A
    if unit_norm:
        norms = np.linalg.norm(clean, axis=0)
        A = A / norms
        clean = clean / norms
    X = clean + noise * rng.standard_normal(clean.shape) if noise else clean
    return PlantedData(X, labels, dictionary, A, sub)
