"""Core numeric containers and the embedding normalization pipeline.

Embeddings are stored column-per-item, ``d x N``, matching the synthesis
model ``x ~= B @ alpha`` used everywhere else in the package.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidLabels, ZeroVector

NORM_ATOL = 1e-9
RECON_ATOL = 1e-10
ZERO_NORM = 1e-12


class NormalizationState(str, enum.Enum):
    RAW = "raw"
    UNIT = "unit"
    UNIT_CENTERED_UNIT = "unit_centered_unit"
    TOKENWISE_UNIT = "tokenwise_unit"


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EmbeddingMatrix:
    """A ``d x N`` matrix of embeddings plus the normalization applied to it.

    ``token_dim`` is only meaningful for tokenized embeddings, where each
    column is the concatenation of ``d // token_dim`` tokens.
    """

    data: np.ndarray
    state: NormalizationState = NormalizationState.RAW
    token_dim: int | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise DimensionMismatch(f"expected a d x N matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("embedding matrix contains NaN or Inf")
        if self.token_dim is not None and data.shape[0] % self.token_dim:
            raise DimensionMismatch(
                f"dimension {data.shape[0]} is not a multiple of token_dim {self.token_dim}"
            )
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "state", NormalizationState(self.state))

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def n_items(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def tokens(self) -> np.ndarray:
        """Return an ``(N, T, d_T)`` view of a tokenized matrix."""
        if self.token_dim is None:
            raise ValueError("matrix is not tokenized")
        n_tok = self.dim // self.token_dim
        return self.data.T.reshape(self.n_items, n_tok, self.token_dim)

    def subset(self, index) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.data[:, index], self.state, self.token_dim)

    def check_state(self, atol: float = NORM_ATOL) -> bool:
        """Re-derive the normalization claim from the data itself."""
        if self.state is NormalizationState.RAW:
            return True
        if self.state is NormalizationState.TOKENWISE_UNIT:
            norms = np.linalg.norm(self.tokens(), axis=2)
        else:
            norms = np.linalg.norm(self.data, axis=0)
        return bool(np.all(np.abs(norms - 1.0) <= atol))


@dataclass(frozen=True)
class ConceptLabelMatrix:
    """Binary ``N x S`` multi-label matrix; every item carries at least one concept."""

    values: np.ndarray
    concept_names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DimensionMismatch(f"labels must be N x S, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise InvalidLabels("label entries must be 0 or 1")
        v = v.astype(np.uint8)
        empty = np.flatnonzero(v.sum(axis=1) == 0)
        if empty.size:
            raise InvalidLabels(
                f"{empty.size} item(s) have no active concept (first: {int(empty[0])})"
            )
        names = tuple(self.concept_names) or tuple(f"concept_{j}" for j in range(v.shape[1]))
        if len(names) != v.shape[1]:
            raise DimensionMismatch(f"{len(names)} concept names for {v.shape[1]} columns")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "concept_names", names)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    @property
    def n_items(self) -> int:
        return self.values.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.values.shape[1]

    def active(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.values[i])

    def items_with(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.values[:, j])

    def subset(self, index) -> "ConceptLabelMatrix":
        return ConceptLabelMatrix(self.values[index], self.concept_names)


class GroupDictionary:
    """Unit-norm atoms ``B = [B_1 ... B_S]`` partitioned into concept groups.

    Parameters
    ----------
    atoms : array_like, shape (d, M)
    group_sizes : sequence of int
        ``M_1 ... M_S``; must sum to ``M``.
    atol : float
        Tolerance for the unit-norm check.
    """

    def __init__(self, atoms, group_sizes: Sequence[int], atol: float = NORM_ATOL):
        atoms = np.asarray(atoms, dtype=np.float64)
        if atoms.ndim != 2:
            raise DimensionMismatch(f"atoms must be d x M, got shape {atoms.shape}")
        sizes = tuple(int(m) for m in group_sizes)
        if any(m < 1 for m in sizes):
            raise ValueError(f"group sizes must be positive, got {sizes}")
        if sum(sizes) != atoms.shape[1]:
            raise DimensionMismatch(
                f"group sizes sum to {sum(sizes)} but there are {atoms.shape[1]} atoms"
            )
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms contain NaN or Inf")
        norms = np.linalg.norm(atoms, axis=0)
        bad = np.flatnonzero(np.abs(norms - 1.0) > atol)
        if bad.size:
            raise ValueError(f"atom {int(bad[0])} has norm {norms[bad[0]]!r}, expected 1")
        self.atoms = _frozen(atoms)
        self.group_sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.group_of_atom = np.repeat(np.arange(len(sizes)), sizes)
        self.group_of_atom.setflags(write=False)

    def __repr__(self):
        return f"GroupDictionary(dim={self.dim}, group_sizes={list(self.group_sizes)})"

    def __eq__(self, other):
        if not isinstance(other, GroupDictionary):
            return NotImplemented
        return self.group_sizes == other.group_sizes and np.array_equal(self.atoms, other.atoms)

    @property
    def dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)

    def block(self, j: int) -> slice:
        return slice(self.offsets[j], self.offsets[j + 1])

    def group(self, j: int) -> np.ndarray:
        return self.atoms[:, self.block(j)]

    def columns(self, groups) -> np.ndarray:
        """Atom indices belonging to ``groups``, in dictionary order."""
        groups = sorted(set(int(j) for j in groups))
        if not groups:
            return np.zeros(0, dtype=int)
        return np.concatenate([np.arange(self.offsets[j], self.offsets[j + 1]) for j in groups])

    def label_mask(self, labels) -> np.ndarray:
        """``M x N`` boolean mask of coefficients allowed to be nonzero."""
        y = np.asarray(labels, dtype=bool)
        return y[:, self.group_of_atom].T


@dataclass(frozen=True)
class Decomposition:
    """Per-concept components of one embedding and the unexplained residual."""

    x: np.ndarray
    components: list = field(default_factory=list)  # (concept, vector, coefficients)
    residual: np.ndarray | None = None

    def component(self, j: int) -> np.ndarray:
        for k, v, _ in self.components:
            if k == j:
                return v
        return np.zeros_like(self.x)

    def coefficient_vector(self, dictionary: GroupDictionary) -> np.ndarray:
        alpha = np.zeros(dictionary.n_atoms)
        for j, _, a in self.components:
            alpha[dictionary.block(j)] = a
        return alpha

    def reconstruction_error(self) -> float:
        total = self.residual.copy()
        for _, v, _ in self.components:
            total = total + v
        return float(np.linalg.norm(total - self.x))

    def to_dict(self, concept_names=None) -> dict:
        out = []
        for j, v, a in self.components:
            name = concept_names[j] if concept_names is not None else j
            out.append(
                {
                    "concept": name,
                    "coefficients": [float(c) for c in a],
                    "component_norm": float(np.linalg.norm(v)),
                }
            )
        return {"components": out, "residual_norm": float(np.linalg.norm(self.residual))}


def _unit_columns(X, what="column"):
    norms = np.linalg.norm(X, axis=0)
    bad = np.flatnonzero(norms < ZERO_NORM)
    if bad.size:
        raise ZeroVector(f"{what} {int(bad[0])} has zero norm", index=int(bad[0]))
    return X / norms


def normalize_unit(X) -> EmbeddingMatrix:
    """Scale every column to unit length without centering (DINO-style)."""
    X = np.asarray(X, dtype=np.float64)
    return EmbeddingMatrix(_unit_columns(X), NormalizationState.UNIT)


def normalize_clip_style(X, mean) -> EmbeddingMatrix:
    """Unit-normalize columns, subtract ``mean``, then unit-normalize again.

    ``mean`` is an externally supplied vector (it is not estimated from X).
    Raises :class:`ZeroVector` if a column vanishes before or after centering.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    mean = np.asarray(mean, dtype=np.float64).reshape(-1)
    if mean.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"mean has dimension {mean.shape[0]}, embeddings {X.shape[0]}")
    Y = _unit_columns(X) - mean[:, None]
    Y = _unit_columns(Y, what="centered column")
    return EmbeddingMatrix(Y, NormalizationState.UNIT_CENTERED_UNIT)


def normalize_tokenwise(tokens, token_dim: int | None = None) -> EmbeddingMatrix:
    """Unit-normalize each token separately and concatenate tokens per item.

    ``tokens`` is either an ``(N, T, d_T)`` array or a ``d x N`` matrix whose
    columns are concatenated tokens of length ``token_dim``. No mean is removed.
    """
    t = np.asarray(tokens, dtype=np.float64)
    if t.ndim == 2:
        if token_dim is None:
            raise ValueError("token_dim is required for a d x N input")
        if t.shape[0] % token_dim:
            raise DimensionMismatch(f"dimension {t.shape[0]} not divisible by {token_dim}")
        t = t.T.reshape(t.shape[1], -1, token_dim)
    elif t.ndim != 3:
        raise DimensionMismatch(f"expected (N, T, d_T) tokens, got shape {t.shape}")
    norms = np.linalg.norm(t, axis=2, keepdims=True)
    bad = np.argwhere(norms[..., 0] < ZERO_NORM)
    if bad.size:
        i, k = (int(v) for v in bad[0])
        raise ZeroVector(f"token {k} of item {i} has zero norm", index=i)
    t = t / norms
    n, n_tok, d_tok = t.shape
    return EmbeddingMatrix(
        t.reshape(n, n_tok * d_tok).T, NormalizationState.TOKENWISE_UNIT, token_dim=d_tok
    )


def corpus_mean(X) -> np.ndarray:
    """Mean of the unit-normalized columns of ``X``.

    Non-canonical: the reference pipeline uses a precomputed mean shipped with
    the embeddings. Use this only when no such file exists for your encoder.
    """
    X = np.asarray(X, dtype=np.float64)
    return _unit_columns(X).mean(axis=1)


def reconstruct(dictionary: GroupDictionary, alpha) -> np.ndarray:
    """Synthesize ``B @ alpha`` (alpha may be a vector or an ``M x N`` matrix)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape[0] != dictionary.n_atoms:
        raise DimensionMismatch(
            f"coefficients have length {alpha.shape[0]}, dictionary has {dictionary.n_atoms} atoms"
        )
    return dictionary.atoms @ alpha


def check_coefficients(A, labels, dictionary: GroupDictionary) -> None:
    """Assert non-negativity and exact zeros on blocks of inactive concepts."""
    A = np.asarray(A)
    if A.shape[0] != dictionary.n_atoms:
        raise DimensionMismatch(f"A has {A.shape[0]} rows for {dictionary.n_atoms} atoms")
    if np.any(A < 0):
        raise ValueError("coefficient matrix has negative entries")
    forbidden = ~dictionary.label_mask(labels)
    if np.any(A[forbidden] != 0):
        raise ValueError("coefficient matrix is nonzero on an inactive concept block")
