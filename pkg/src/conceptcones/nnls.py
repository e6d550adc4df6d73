"""Active-set non-negative least squares.

The solver follows Lawson & Hanson: grow a passive set one column at a time
by the most negative gradient entry, re-solve the unconstrained problem on
the passive set, and step back toward feasibility whenever a passive
coefficient turns non-positive. Passive-set solves use minimum-norm least
squares so rank-deficient dictionaries do not break the iteration.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyActiveSetWarning, NoConvergence
from .types import GroupDictionary

RELATIVE_TOL = 1e-10


@dataclass(frozen=True)
class NnlsSolution:
    coefficients: np.ndarray
    residual_norm: float
    active_set: np.ndarray
    iterations: int


def default_tolerance(design, target) -> float:
    scale = float(np.max(np.abs(design.T @ target), initial=0.0))
    return RELATIVE_TOL * max(scale, np.finfo(float).tiny)


def _augment(design, target, ridge_lambda):
    if ridge_lambda == 0:
        return design, target
    k = design.shape[1]
    return (
        np.vstack([design, np.sqrt(ridge_lambda) * np.eye(k)]),
        np.concatenate([target, np.zeros(k)]),
    )


def solve_nnls(design, target, ridge_lambda: float = 0.0, tol: float | None = None,
               max_iter: int | None = None) -> NnlsSolution:
    """Solve ``min_{c >= 0} ||design @ c - target||^2 + ridge_lambda * ||c||^2``.

    Parameters
    ----------
    design : array_like, shape (d, k)
    target : array_like, shape (d,)
    ridge_lambda : float
        Ridge penalty; 0 gives plain NNLS, any positive value makes the
        problem strictly convex.
    tol : float, optional
        KKT tolerance on the gradient. Defaults to
        ``1e-10 * ||design.T @ target||_inf``.
    max_iter : int, optional
        Cap on active-set pivots (default ``10 * k``).

    Returns
    -------
    NnlsSolution
        ``residual_norm`` is the data-fit term ``||design @ c - target||``
        (without the ridge penalty).
    """
    D = np.asarray(design, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64).reshape(-1)
    if D.ndim != 2:
        raise DimensionMismatch(f"design must be 2-D, got shape {D.shape}")
    if D.shape[0] != t.shape[0]:
        raise DimensionMismatch(f"design has {D.shape[0]} rows, target has {t.shape[0]}")
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be non-negative")
    if not (np.all(np.isfinite(D)) and np.all(np.isfinite(t))):
        raise ValueError("non-finite values in NNLS problem")
    k = D.shape[1]
    if k == 0:
        return NnlsSolution(np.zeros(0), float(np.linalg.norm(t)), np.zeros(0, dtype=int), 0)
    if tol is None:
        tol = default_tolerance(D, t)
    elif tol <= 0:
        raise ValueError("tolerance must be positive")
    if max_iter is None:
        max_iter = 10 * k

    Da, ta = _augment(D, t, ridge_lambda)
    G = Da.T @ Da
    h = Da.T @ ta
    x = np.zeros(k)
    passive = np.zeros(k, dtype=bool)
    blocked = np.zeros(k, dtype=bool)
    w = h.copy()
    pivots = 0

    while True:
        score = np.where(passive | blocked, -np.inf, w)
        j = int(np.argmax(score))
        if not score[j] > tol:
            break
        passive[j] = True
        first = True
        stalled = False
        while True:
            pivots += 1
            if pivots > max_iter:
                raise NoConvergence(f"NNLS did not converge within {max_iter} pivots")
            idx = np.flatnonzero(passive)
            zp = np.linalg.lstsq(Da[:, idx], ta, rcond=None)[0]
            if zp.min() > 0:
                x = np.zeros(k)
                x[idx] = zp
                break
            if first and zp[idx.searchsorted(j)] <= 0:
                # Roundoff made the entering column useless; skip it until x moves.
                passive[j] = False
                blocked[j] = True
                stalled = True
                break
            first = False
            xp = x[idx]
            neg = zp <= 0
            steps = xp[neg] / (xp[neg] - zp[neg])
            s = int(np.argmin(steps))
            xp = xp + steps[s] * (zp - xp)
            xp[np.flatnonzero(neg)[s]] = 0.0
            xp[xp < 0] = 0.0
            x = np.zeros(k)
            x[idx] = xp
            passive[idx[xp <= 0]] = False
        if not stalled:
            blocked[:] = False
        w = h - G @ x

    x = np.maximum(x, 0.0)
    return NnlsSolution(
        coefficients=x,
        residual_norm=float(np.linalg.norm(D @ x - t)),
        active_set=np.flatnonzero(x > 0),
        iterations=pivots,
    )


def kkt_residual(design, target, coefficients, ridge_lambda: float = 0.0) -> float:
    """Largest KKT violation of a candidate NNLS solution.

    Uses ``g = design.T (design c - target) + ridge_lambda c``; zero entries
    may have ``g >= 0`` and positive entries need ``g == 0``.
    """
    D = np.asarray(design, dtype=np.float64)
    c = np.asarray(coefficients, dtype=np.float64)
    g = D.T @ (D @ c - np.asarray(target, dtype=np.float64)) + ridge_lambda * c
    pos = c > 0
    viol = np.concatenate([np.abs(g[pos]), np.maximum(0.0, -g[~pos])])
    if np.any(c < 0):
        return float("inf")
    return float(viol.max(initial=0.0))


def solve_group_masked(dictionary: GroupDictionary, x, active, ridge_lambda: float = 0.0,
                       tol: float | None = None) -> np.ndarray:
    """NNLS of ``x`` on the atoms of the ``active`` concept groups only.

    Returns a full-length coefficient vector with exact zeros on every
    inactive block. An empty ``active`` set is a valid all-background item:
    the zero vector is returned and an :class:`EmptyActiveSetWarning` issued.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != dictionary.dim:
        raise DimensionMismatch(f"x has dimension {x.shape[0]}, dictionary {dictionary.dim}")
    active = list(active)
    if any(j < 0 or j >= dictionary.n_groups for j in active):
        raise ValueError(f"active concepts {active} out of range 0..{dictionary.n_groups - 1}")
    alpha = np.zeros(dictionary.n_atoms)
    if not active:
        warnings.warn("empty active concept set; returning zero coefficients",
                      EmptyActiveSetWarning, stacklevel=2)
        return alpha
    cols = dictionary.columns(active)
    sol = solve_nnls(dictionary.atoms[:, cols], x, ridge_lambda=ridge_lambda, tol=tol)
    alpha[cols] = sol.coefficients
    return alpha
