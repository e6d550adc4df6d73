"""Supervised dictionary learning with group-masked non-negative coefficients.

Training alternates two stages, K-SVD style:

1. coefficient stage: every item is coded by NNLS restricted to the atom
   groups of its labeled concepts;
2. atom stage: each atom in turn is refit to the residual of the items that
   use it, by a rank-1 approximation whose polarity is chosen so that the
   thresholded coefficients keep as much energy as possible.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    EmptySupport,
    InsufficientSamples,
    InvalidLabels,
    ItemError,
    OvercompleteWarning,
    RankDeficientWarning,
    ZeroDirection,
)
from .nnls import solve_nnls
from .types import GroupDictionary, ZERO_NORM

SIMULTANEOUS = "simultaneous_svd"
ALTERNATING = "alternating_bcd"

POWER_MAX_ITER = 200
POWER_TOL = 1e-10
PERTURBATION = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for :func:`train` and :func:`train_minibatch`.

    ``group_sizes`` overrides ``d0`` when given. ``batch_size = 0`` means
    full-batch training.
    """

    d0: int = 5
    group_sizes: tuple | None = None
    iterations: int = 10
    batch_size: int = 0
    update_mode: str = SIMULTANEOUS
    power_iterations: int = 1
    monotone_check: bool = False
    shuffle_seed: int = 0
    ridge_lambda: float = 0.0
    init: str = "svd"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.update_mode not in (SIMULTANEOUS, ALTERNATING):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")
        if self.power_iterations < 1:
            raise ValueError("power_iterations must be >= 1")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be >= 0")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if self.init not in ("svd", "random_samples"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.group_sizes is not None:
            object.__setattr__(self, "group_sizes", tuple(int(m) for m in self.group_sizes))

    def sizes(self, n_concepts: int) -> tuple:
        if self.group_sizes is not None:
            if len(self.group_sizes) != n_concepts:
                raise ValueError(
                    f"{len(self.group_sizes)} group sizes for {n_concepts} concepts"
                )
            return self.group_sizes
        return (self.d0,) * n_concepts

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["group_sizes"] is not None:
            d["group_sizes"] = list(d["group_sizes"])
        return d


@dataclass(frozen=True)
class ResidualWorkspace:
    """Residual of the items using one atom, with that atom's contribution added back.

    ``support`` holds item indices, ``residual`` is ``d x len(support)``;
    ``atom`` and ``coefficients`` are the current values being replaced.
    """

    support: np.ndarray
    residual: np.ndarray
    atom: np.ndarray | None = None
    coefficients: np.ndarray | None = None


@dataclass(frozen=True)
class AtomUpdateResult:
    new_atom: np.ndarray
    new_coefficients: np.ndarray
    sign: int
    error_before: float
    error_after: float
    beta: np.ndarray  # unthresholded least-squares coefficients for new_atom / sign
    status: str = "ok"


@dataclass
class TrainReport:
    stages: list = field(default_factory=list)
    skipped: int = 0
    reinitialized: int = 0
    batch_skipped: int = 0
    wall_time: float = 0.0

    def record(self, stage, iteration, batch, objective, skipped=0, reinit=0):
        self.stages.append(
            {
                "stage": stage,
                "iteration": iteration,
                "batch": batch,
                "objective": float(objective),
                "skipped": skipped,
                "reinit": reinit,
            }
        )

    @property
    def objectives(self) -> list:
        return [s["objective"] for s in self.stages]

    @property
    def final_objective(self) -> float:
        return self.stages[-1]["objective"]

    def to_csv(self, path) -> None:
        fields = ["stage", "iteration", "batch", "objective", "skipped", "reinit"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields)
            w.writeheader()
            for s in self.stages:
                w.writerow({**s, "objective": repr(s["objective"])})


def optimal_sign(beta) -> int:
    """Polarity that keeps the most energy after thresholding at zero.

    Returns +1 when ``||max(0, beta)|| >= ||max(0, -beta)||`` (ties go to +1).
    """
    beta = np.asarray(beta, dtype=np.float64)
    pos = np.sum(np.maximum(beta, 0.0) ** 2)
    neg = np.sum(np.maximum(-beta, 0.0) ** 2)
    return 1 if pos >= neg else -1


def objective(X, dictionary, A) -> float:
    """Mean squared reconstruction error ``||X - B A||_F^2 / N``."""
    X = np.asarray(X, dtype=np.float64)
    B = dictionary.atoms if isinstance(dictionary, GroupDictionary) else dictionary
    R = X - B @ A
    return float(np.sum(R * R) / X.shape[1])


def _philox(seed):
    return np.random.Generator(np.random.Philox(seed))


def rank1(E, start=None):
    """Leading singular triplet of ``E`` as ``(u, beta, converged)``.

    Power iteration on ``E.T @ E``, seeded from ``start`` when it is a usable
    direction. ``beta`` is returned as ``u.T @ E`` so that it is exactly the
    least-squares coefficient row for the unit vector ``u``. Falls back to a
    dense SVD for fewer than three columns or when the iteration stalls.
    """
    E = np.asarray(E, dtype=np.float64)
    n = E.shape[1]
    converged = True
    if n < 3:
        u = np.linalg.svd(E, full_matrices=False)[0][:, 0]
    else:
        v = None
        if start is not None:
            v = np.asarray(start, dtype=np.float64).copy()
            if np.linalg.norm(E @ v) < ZERO_NORM:
                v = None
        if v is None:
            v = E.T @ E[:, int(np.argmax(np.sum(E * E, axis=0)))]
        v /= np.linalg.norm(v)
        converged = False
        for _ in range(POWER_MAX_ITER):
            w = E.T @ (E @ v)
            w /= np.linalg.norm(w)
            delta = np.linalg.norm(w - v)
            v = w
            if delta < POWER_TOL:
                converged = True
                break
        if converged:
            u = E @ v
            u /= np.linalg.norm(u)
        else:
            u = np.linalg.svd(E, full_matrices=False)[0][:, 0]
    return u, u @ E, converged


def update_atom_simultaneous(ws: ResidualWorkspace) -> AtomUpdateResult:
    """Rank-1 refit of one atom and its active coefficients.

    The atom becomes ``p * u`` for the leading left singular vector ``u`` of
    the residual and the coefficients ``max(0, p * beta)``, with ``p`` from
    :func:`optimal_sign`.
    """
    E = np.asarray(ws.residual, dtype=np.float64)
    if E.shape[1] == 0:
        raise EmptySupport("atom has no active items")
    energy = float(np.sum(E * E))
    before = _error(E, ws.atom, ws.coefficients)
    if np.sqrt(energy) < ZERO_NORM:
        zeros = np.zeros(E.shape[1])
        return AtomUpdateResult(ws.atom, zeros, 1, before, energy, zeros, status="zero_residual")
    u, beta, converged = rank1(E, start=ws.coefficients)
    p = optimal_sign(beta)
    atom = p * u
    coefs = np.maximum(p * beta, 0.0)
    return AtomUpdateResult(atom, coefs, p, before, _error(E, atom, coefs), beta,
                            status="ok" if converged else "dense_svd_fallback")


def update_atom_alternating(ws: ResidualWorkspace, prev_coeffs=None, power_iterations: int = 1,
                            fallback: bool = True) -> AtomUpdateResult:
    """Block-coordinate alternative to the rank-1 refit.

    Starting from the previous coefficient row ``beta0`` the atom is the
    normalized least-squares direction ``E @ beta0``, and the coefficients
    are the thresholded projections of ``E`` onto it. Extra
    ``power_iterations`` repeat this pair of solves (a power method with
    thresholding). ``beta`` on the result is the unthresholded first-step
    projection.
    """
    E = np.asarray(ws.residual, dtype=np.float64)
    if E.shape[1] == 0:
        raise EmptySupport("atom has no active items")
    beta0 = ws.coefficients if prev_coeffs is None else prev_coeffs
    beta0 = np.asarray(beta0, dtype=np.float64)
    before = _error(E, ws.atom, ws.coefficients)
    g = E @ beta0
    if np.linalg.norm(g) < ZERO_NORM:
        if not fallback:
            raise ZeroDirection("E @ beta0 vanishes")
        res = update_atom_simultaneous(ws)
        return AtomUpdateResult(res.new_atom, res.new_coefficients, res.sign, res.error_before,
                                res.error_after, res.beta, status="zero_direction_fallback")
    atom = g / np.linalg.norm(g)
    raw = atom @ E
    coefs = np.maximum(raw, 0.0)
    for _ in range(power_iterations - 1):
        g = E @ coefs
        norm = np.linalg.norm(g)
        if norm < ZERO_NORM:
            break
        atom = g / norm
        coefs = np.maximum(atom @ E, 0.0)
    return AtomUpdateResult(atom, coefs, 1, before, _error(E, atom, coefs), raw)


def _error(E, atom, coefs):
    if atom is None or coefs is None:
        return float("nan")
    R = E - np.outer(atom, coefs)
    return float(np.sum(R * R))


def _check_labels(labels, n_items):
    Y = np.asarray(labels)
    if Y.ndim != 2 or Y.shape[0] != n_items:
        raise InvalidLabels(f"labels have shape {Y.shape}, expected ({n_items}, S)")
    Y = (Y != 0).astype(np.uint8)
    empty = np.flatnonzero(Y.sum(axis=1) == 0)
    if empty.size:
        raise InvalidLabels(f"item {int(empty[0])} has no active concept")
    return Y


def svd_init(X, labels, group_sizes: Sequence[int], seed: int = 0,
             method: str = "svd") -> GroupDictionary:
    """Initial dictionary: per concept, the top left singular vectors of its items.

    Each singular vector is flipped by :func:`optimal_sign` applied to its
    right singular vector. Atoms beyond the numerical rank of a concept's
    data are filled with slightly perturbed copies of the leading ones and a
    :class:`RankDeficientWarning` is issued.

    ``method="random_samples"`` instead draws normalized items of the
    concept (k-means style); it is kept for comparison only.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = _check_labels(labels, X.shape[1])
    sizes = tuple(int(m) for m in group_sizes)
    if len(sizes) != Y.shape[1]:
        raise ValueError(f"{len(sizes)} group sizes for {Y.shape[1]} concepts")
    if sum(sizes) > X.shape[0]:
        warnings.warn(f"{sum(sizes)} atoms exceed embedding dimension {X.shape[0]}",
                      OvercompleteWarning, stacklevel=2)
    rng = _philox(seed)
    blocks = []
    for j, m in enumerate(sizes):
        items = np.flatnonzero(Y[:, j])
        if items.size < m:
            raise InsufficientSamples(j, items.size, m)
        Xj = X[:, items]
        if method == "random_samples":
            pick = np.sort(rng.choice(items.size, size=m, replace=False))
            cols = Xj[:, pick]
            norms = np.linalg.norm(cols, axis=0)
            blocks.append(cols / np.where(norms < ZERO_NORM, 1.0, norms))
            continue
        U, s, Vt = np.linalg.svd(Xj, full_matrices=False)
        rank = int(np.sum(s > ZERO_NORM * max(1.0, s[0] if s.size else 0.0)))
        keep = min(rank, m)
        atoms = np.empty((X.shape[0], m))
        for k in range(keep):
            atoms[:, k] = optimal_sign(Vt[k]) * U[:, k]
        if keep < m:
            if keep == 0:
                raise InsufficientSamples(j, 0, m)
            warnings.warn(
                f"concept {j}: data rank {keep} < {m} atoms; filling with perturbed copies",
                RankDeficientWarning, stacklevel=2)
            for k in range(keep, m):
                a = atoms[:, k % keep] + PERTURBATION * rng.standard_normal(X.shape[0])
                atoms[:, k] = a / np.linalg.norm(a)
        blocks.append(atoms)
    return GroupDictionary(np.hstack(blocks), sizes)


def coefficient_stage(X, labels, dictionary: GroupDictionary,
                      ridge_lambda: float = 0.0) -> np.ndarray:
    """Code every item by NNLS on the atom groups of its labeled concepts."""
    X = np.asarray(X, dtype=np.float64)
    Y = _check_labels(labels, X.shape[1])
    A = np.zeros((dictionary.n_atoms, X.shape[1]))
    patterns, inverse = np.unique(Y, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    for p, pattern in enumerate(patterns):
        cols = dictionary.columns(np.flatnonzero(pattern))
        D = dictionary.atoms[:, cols]
        for i in np.flatnonzero(inverse == p):
            try:
                A[cols, i] = solve_nnls(D, X[:, i], ridge_lambda=ridge_lambda).coefficients
            except Exception as exc:  # noqa: BLE001 - re-raised with the item index
                raise ItemError(int(i), exc) from exc
    return A


def _batches(n_items, batch_size, rng):
    if batch_size == 0 or batch_size >= n_items:
        return [np.arange(n_items)]
    perm = rng.permutation(n_items)
    return [np.sort(perm[s:s + batch_size]) for s in range(0, n_items, batch_size)]


def _reinit_atom(X, Y, R, batch, group, used):
    """Normalized worst-reconstructed item of ``group`` in the batch, or None."""
    members = np.flatnonzero(Y[batch, group])
    members = np.array([k for k in members if batch[k] not in used], dtype=int)
    if members.size == 0:
        return None, None
    err = np.sum(R[:, members] ** 2, axis=0)
    k = members[int(np.argmax(err))]
    item = batch[k]
    x = X[:, item]
    norm = np.linalg.norm(x)
    if norm < ZERO_NORM:
        return None, None
    return x / norm, item


def _fit(X, labels, cfg: TrainConfig, checkpoint=None, callback=None):
    start = time.perf_counter()
    X = np.asarray(X, dtype=np.float64)
    Y = _check_labels(labels, X.shape[1])
    n_items = X.shape[1]
    report = TrainReport()

    if checkpoint is not None:
        dictionary, A = checkpoint
        sizes = dictionary.group_sizes
        A = np.array(A, dtype=np.float64)
    else:
        sizes = cfg.sizes(Y.shape[1])
        dictionary = svd_init(X, Y, sizes, seed=cfg.shuffle_seed, method=cfg.init)
        A = None

    if cfg.iterations == 0:
        A = coefficient_stage(X, Y, dictionary, cfg.ridge_lambda)
        report.record("coefficients", 0, 0, objective(X, dictionary, A))
        report.wall_time = time.perf_counter() - start
        return dictionary, A, report
    if A is None:
        A = np.zeros((dictionary.n_atoms, n_items))

    B = np.array(dictionary.atoms)
    group_of_atom = dictionary.group_of_atom
    rng = _philox(cfg.shuffle_seed)

    for t in range(cfg.iterations):
        batches = _batches(n_items, cfg.batch_size, rng)
        used_in_epoch = np.zeros(B.shape[1], dtype=bool)
        for b, idx in enumerate(batches):
            last = b == len(batches) - 1
            current = GroupDictionary(B, sizes)
            A[:, idx] = coefficient_stage(X[:, idx], Y[idx], current, cfg.ridge_lambda)
            report.record("coefficients", t, b, objective(X, B, A))

            R = X[:, idx] - B @ A[:, idx]
            skipped = reinit = 0
            reinit_items = set()
            for m in range(B.shape[1]):
                sub = np.flatnonzero(A[m, idx] != 0)
                if sub.size == 0:
                    if last and not used_in_epoch[m]:
                        atom, item = _reinit_atom(X, Y, R, idx, group_of_atom[m], reinit_items)
                        if atom is not None:
                            B[:, m] = atom
                            reinit_items.add(item)
                            reinit += 1
                    else:
                        report.batch_skipped += 1
                    continue
                used_in_epoch[m] = True
                cols = idx[sub]
                E = R[:, sub] + np.outer(B[:, m], A[m, cols])
                ws = ResidualWorkspace(cols, E, B[:, m].copy(), A[m, cols].copy())
                if cfg.update_mode == ALTERNATING:
                    res = update_atom_alternating(ws, power_iterations=cfg.power_iterations)
                else:
                    res = update_atom_simultaneous(ws)
                if cfg.monotone_check and res.error_after > res.error_before:
                    skipped += 1
                    continue
                B[:, m] = res.new_atom
                A[m, cols] = res.new_coefficients
                R[:, sub] = E - np.outer(res.new_atom, res.new_coefficients)
            report.skipped += skipped
            report.reinitialized += reinit
            report.record("atoms", t, b, objective(X, B, A), skipped, reinit)
        if callback is not None and callback(t, GroupDictionary(B, sizes), A):
            break

    report.wall_time = time.perf_counter() - start
    return GroupDictionary(B, sizes), A, report


def train(X, labels, cfg: TrainConfig = TrainConfig(), checkpoint=None,
          callback: Callable | None = None):
    """Full-batch training; returns ``(dictionary, A, report)``.

    With ``cfg.iterations == 0`` this is the SVD-initialized dictionary with
    one coefficient stage applied. ``checkpoint=(dictionary, A)`` resumes from
    a saved state instead of initializing. ``callback(t, dictionary, A)`` runs
    after every iteration and may return True to stop early.
    """
    if cfg.batch_size:
        cfg = TrainConfig(**{**cfg.to_dict(), "batch_size": 0})
    return _fit(X, labels, cfg, checkpoint, callback)


def train_minibatch(X, labels, cfg: TrainConfig, checkpoint=None,
                    callback: Callable | None = None):
    """Epoch-wise training over disjoint shuffled mini-batches.

    Each epoch draws a fresh permutation from a Philox generator seeded with
    ``cfg.shuffle_seed``; coefficients are re-estimated for the batch and
    every atom active on it is refit. An atom with no active item in a
    batch is skipped there; one unused across a whole epoch is reinitialized
    in the epoch's last batch. A single batch (``batch_size >= N``) reproduces
    :func:`train` exactly.
    """
    return _fit(X, labels, cfg, checkpoint, callback)


def refit_objective(X, labels, dictionary: GroupDictionary, ridge_lambda: float = 0.0) -> float:
    """Objective after a fresh coefficient stage against ``dictionary``."""
    return objective(X, dictionary, coefficient_stage(X, labels, dictionary, ridge_lambda))
