"""Splitting embeddings into per-concept components.

A component for concept ``j`` is a non-negative combination of the atoms
of group ``j``, i.e. a point of the cone spanned by that group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch
from .nnls import solve_group_masked, solve_nnls
from .types import Decomposition, GroupDictionary

ACTIVE_THRESHOLD = 1e-8
_TINY = 1e-15


def _vector(x, dictionary):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != dictionary.dim:
        raise DimensionMismatch(f"x has dimension {x.shape[0]}, dictionary {dictionary.dim}")
    return x


def decompose_full(dictionary: GroupDictionary, x, active, ridge_lambda: float = 0.0) -> Decomposition:
    """Jointly code ``x`` on all ``active`` groups and split the result by group."""
    x = _vector(x, dictionary)
    active = sorted(set(int(j) for j in active))
    if not active:
        return Decomposition(x, [], x.copy())
    alpha = solve_group_masked(dictionary, x, active, ridge_lambda=ridge_lambda)
    components = []
    for j in active:
        a = alpha[dictionary.block(j)]
        components.append((j, dictionary.group(j) @ a, a))
    recon = dictionary.atoms @ alpha
    return Decomposition(x, components, x - recon)


def project_concept(dictionary: GroupDictionary, x, j: int) -> np.ndarray:
    """Closest point to ``x`` in the cone of group ``j``."""
    x = _vector(x, dictionary)
    if not 0 <= j < dictionary.n_groups:
        raise ValueError(f"concept {j} out of range")
    Bj = dictionary.group(j)
    return Bj @ solve_nnls(Bj, x).coefficients


def project_all(dictionary: GroupDictionary, x) -> np.ndarray:
    """``d x S`` matrix of the projections of ``x`` onto every concept cone."""
    return np.column_stack([project_concept(dictionary, x, j) for j in range(dictionary.n_groups)])


@dataclass
class SparseCode:
    """Result of a greedy non-negative pursuit.

    ``selected`` lists atoms (or groups, for the group variant) in the order
    they were chosen; ``residual_norms[0]`` is ``||x||`` and entry ``k`` the
    residual after ``k`` selections.
    """

    coefficients: np.ndarray
    selected: list = field(default_factory=list)
    residual_norms: list = field(default_factory=list)

    @property
    def active_atoms(self) -> np.ndarray:
        return np.flatnonzero(self.coefficients > ACTIVE_THRESHOLD)


def sparse_code_nn_omp(dictionary: GroupDictionary, x, max_atoms: int | None = None,
                       residual_tol: float | None = None) -> SparseCode:
    """Non-negative orthogonal matching pursuit.

    Each step adds the unselected atom with the largest positive correlation
    with the current residual, then re-solves NNLS on all selected atoms.
    Stops after ``max_atoms`` selections, once the residual norm drops to
    ``residual_tol``, or when no atom correlates positively.
    """
    x = _vector(x, dictionary)
    if max_atoms is None and residual_tol is None:
        raise ValueError("give max_atoms or residual_tol")
    limit = dictionary.n_atoms if max_atoms is None else min(max_atoms, dictionary.n_atoms)
    if limit < 1:
        raise ValueError("max_atoms must be >= 1")
    B = dictionary.atoms
    coef = np.zeros(dictionary.n_atoms)
    residual = x.copy()
    code = SparseCode(coef, [], [float(np.linalg.norm(x))])
    chosen = np.zeros(dictionary.n_atoms, dtype=bool)
    while len(code.selected) < limit:
        if residual_tol is not None and code.residual_norms[-1] <= residual_tol:
            break
        corr = np.where(chosen, -np.inf, B.T @ residual)
        m = int(np.argmax(corr))
        if not corr[m] > _TINY * max(1.0, code.residual_norms[0]):
            break
        chosen[m] = True
        code.selected.append(m)
        idx = np.flatnonzero(chosen)
        sol = solve_nnls(B[:, idx], x)
        coef[:] = 0.0
        coef[idx] = sol.coefficients
        residual = x - B[:, idx] @ sol.coefficients
        code.residual_norms.append(float(np.linalg.norm(residual)))
    return code


def sparse_code_group_omp(dictionary: GroupDictionary, x, max_groups: int) -> SparseCode:
    """Group-structured non-negative pursuit.

    Each step picks the unselected group whose cone projection of the
    current residual removes the most energy, then re-solves NNLS over the
    union of the selected groups. Stops early when no group reduces the
    residual.
    """
    x = _vector(x, dictionary)
    if max_groups < 1:
        raise ValueError("max_groups must be >= 1")
    coef = np.zeros(dictionary.n_atoms)
    residual = x.copy()
    code = SparseCode(coef, [], [float(np.linalg.norm(x))])
    remaining = list(range(dictionary.n_groups))
    while remaining and len(code.selected) < max_groups:
        gains = []
        for j in remaining:
            v = project_concept(dictionary, residual, j)
            gains.append(float(residual @ residual - np.sum((residual - v) ** 2)))
        k = int(np.argmax(gains))
        if not gains[k] > _TINY * max(1.0, code.residual_norms[0] ** 2):
            break
        code.selected.append(remaining.pop(k))
        coef[:] = solve_group_masked(dictionary, x, code.selected)
        residual = x - dictionary.atoms @ coef
        code.residual_norms.append(float(np.linalg.norm(residual)))
    return code


def cooccurrence_matrix(codes, threshold: float = ACTIVE_THRESHOLD, return_inactive: bool = False):
    """Row-normalized co-occurrence of active atoms across a set of codes.

    ``codes`` is a sequence of :class:`SparseCode` or an ``M x N`` coefficient
    matrix. Entry ``(m, k)`` counts codes where both atoms exceed
    ``threshold``, divided by the count for atom ``m`` so the diagonal is 1.
    Atoms that are never active get an all-zero row with a unit diagonal;
    pass ``return_inactive=True`` to also receive their boolean mask.
    """
    if isinstance(codes, np.ndarray):
        C = codes
    else:
        codes = list(codes)
        if not codes:
            raise ValueError("need at least one code")
        C = np.column_stack([c.coefficients for c in codes])
    if C.size == 0:
        raise ValueError("need at least one code")
    active = (C > threshold).astype(np.float64)
    counts = active @ active.T
    diag = np.diag(counts).copy()
    inactive = diag == 0
    out = counts / np.where(inactive, 1.0, diag)[:, None]
    out[inactive] = 0.0
    out[inactive, inactive] = 1.0
    if return_inactive:
        return out, inactive
    return out
