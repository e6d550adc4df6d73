"""Concept-filtered retrieval, mAP@k evaluation and quantized-pool scoring."""

from __future__ import annotations

import hashlib
import struct
from collections import defaultdict
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .disentangle import project_concept
from .errors import ContainerFormatError, DimensionMismatch, EmptyQuerySet
from .types import NORM_ATOL, ZERO_NORM, GroupDictionary

GENERAL = "general"
SUB_LABEL = "sub_label"
UNFILTERED = "unfiltered"


@dataclass(frozen=True)
class RankedList:
    indices: np.ndarray
    scores: np.ndarray


@dataclass(frozen=True)
class RetrievalQuery:
    """A query embedding, optionally filtered to one concept.

    For a filtered query give either a precomputed ``component`` or pass a
    dictionary to :func:`retrieve` so the projection can be computed.
    """

    embedding: np.ndarray
    concept: int | None = None
    component: np.ndarray | None = None

    def vector(self, dictionary: GroupDictionary | None = None) -> np.ndarray:
        if self.concept is None:
            return np.asarray(self.embedding, dtype=np.float64)
        if self.component is not None:
            return np.asarray(self.component, dtype=np.float64)
        if dictionary is None:
            raise ValueError("a filtered query needs a dictionary or a precomputed component")
        return project_concept(dictionary, self.embedding, self.concept)


def score_filtered(component, candidate) -> float:
    """Cosine similarity; a zero component scores 0."""
    v = np.asarray(component, dtype=np.float64)
    x = np.asarray(candidate, dtype=np.float64)
    nv, nx = np.linalg.norm(v), np.linalg.norm(x)
    if nv < ZERO_NORM or nx < ZERO_NORM:
        return 0.0
    return float(v @ x / (nv * nx))


def _unit_pool(pool):
    P = np.asarray(pool, dtype=np.float64)
    norms = np.linalg.norm(P, axis=0)
    return P / np.where(norms < ZERO_NORM, 1.0, norms)


def cosine_scores(vectors, pool) -> np.ndarray:
    """Cosine of each column of ``vectors`` (``d`` or ``d x Q``) against every pool item.

    Returns ``(P,)`` or ``(Q, P)``; zero query vectors score 0 everywhere.
    """
    V = np.asarray(vectors, dtype=np.float64)
    single = V.ndim == 1
    if single:
        V = V[:, None]
    P = _unit_pool(pool)
    if V.shape[0] != P.shape[0]:
        raise DimensionMismatch(f"query dimension {V.shape[0]} vs pool {P.shape[0]}")
    S = _unit_pool(V).T @ P
    return S[0] if single else S


def top_k(scores, k: int, exclude=None) -> np.ndarray:
    """Indices of the ``k`` highest scores, ties broken by lower index."""
    s = np.asarray(scores, dtype=np.float64).copy()
    if exclude is not None:
        s[np.asarray(exclude, dtype=int)] = -np.inf
        n = s.size - np.unique(np.asarray(exclude, dtype=int)).size
    else:
        n = s.size
    k = min(k, n)
    if k <= 0:
        return np.zeros(0, dtype=int)
    neg = -s
    if k < s.size:
        kth = np.partition(neg, k - 1)[k - 1]
        cand = np.flatnonzero(neg <= kth)
    else:
        cand = np.arange(s.size)
    return cand[np.argsort(neg[cand], kind="stable")][:k]


def retrieve(query: RetrievalQuery, pool, top: int, dictionary: GroupDictionary | None = None,
             exclude=None) -> RankedList:
    """Rank pool columns by cosine with the (possibly filtered) query vector."""
    P = np.asarray(pool, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] == 0:
        raise ValueError("pool must be a non-empty d x N matrix")
    scores = cosine_scores(query.vector(dictionary), P)
    idx = top_k(scores, top, exclude)
    return RankedList(idx, scores[idx])


def ap_at_k(relevance, k: int, n_relevant: int | None = None) -> float:
    """Average precision over the first ``k`` ranks.

    ``AP@k = sum_{r<=k} P(r) rel(r) / min(k, R)`` where ``R`` is the number of
    relevant candidates in the whole pool (``n_relevant``; defaults to the
    relevant count in ``relevance``). Returns 0 when ``R == 0``.
    """
    rel = np.asarray(relevance, dtype=np.float64).reshape(-1)[:k]
    if rel.size < k:
        rel = np.concatenate([rel, np.zeros(k - rel.size)])
    if n_relevant is None:
        n_relevant = int(np.sum(np.asarray(relevance) != 0))
    if n_relevant <= 0:
        return 0.0
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, k + 1)
    return float(np.sum(precision * rel) / min(k, n_relevant))


class SubLabels:
    """Fine-grained labels: for each (item, parent concept) a set of sub-label names."""

    def __init__(self, entries=()):
        self._table = defaultdict(dict)
        for item, concept, sub in entries:
            self._table[int(concept)].setdefault(int(item), set()).add(str(sub))

    @classmethod
    def from_array(cls, sub, missing: int = -1) -> "SubLabels":
        """Build from an ``N x S`` integer array (``missing`` marks no sub-label)."""
        sub = np.asarray(sub)
        items, concepts = np.nonzero(sub != missing)
        return cls((i, j, sub[i, j]) for i, j in zip(items, concepts))

    def of(self, item: int, concept: int) -> frozenset:
        return frozenset(self._table.get(concept, {}).get(int(item), ()))

    def concepts(self) -> list:
        return sorted(self._table)

    def entries(self):
        for concept in sorted(self._table):
            for item in sorted(self._table[concept]):
                for sub in sorted(self._table[concept][item]):
                    yield item, concept, sub

    def subset(self, index) -> "SubLabels":
        remap = {int(old): new for new, old in enumerate(np.asarray(index).reshape(-1))}
        return SubLabels((remap[i], j, s) for i, j, s in self.entries() if i in remap)


def _sub_masks(sublabels, pool_idx, concept):
    masks = {}
    for pos, c in enumerate(pool_idx):
        for sub in sublabels.of(c, concept):
            masks.setdefault(sub, np.zeros(pool_idx.size, dtype=bool))[pos] = True
    return masks


def _relevance(labels, query, pool_idx, concept, protocol, sublabels, masks):
    has = labels[pool_idx, concept] != 0
    if protocol == GENERAL:
        return has
    rel = np.zeros(pool_idx.size, dtype=bool)
    for sub in sublabels.of(query, concept):
        if sub in masks:
            rel |= masks[sub]
    return rel & has


def map_experiment(X, labels, query_idx, pool_idx, dictionaries: Mapping[str, GroupDictionary] | None = None,
                   k: int = 20, protocol: str = GENERAL, sublabels: SubLabels | None = None,
                   concepts=None, concept_names=None, quantized=None, include_unfiltered: bool = True,
                   chunk: int = 256) -> list:
    """mAP@k of unfiltered and concept-filtered retrieval.

    For each concept ``j`` every query carrying ``j`` retrieves from the pool;
    filtered methods query with the projection onto cone ``j`` of each named
    dictionary. Under ``general`` a candidate is relevant if it carries ``j``;
    under ``sub_label`` it must also share a sub-label of ``j`` with the query
    (queries without a sub-label under ``j`` are skipped).

    ``quantized=(codebook, indices)`` scores the pool through lookup tables,
    with ``indices`` the ``T x P`` codeword ids of the pool items.

    Returns rows ``{"method", "protocol", "concept", "map", "n_queries",
    "zero_components"}``, one per (method, concept) plus an ``"all"`` row per
    method averaging over every (query, concept) pair.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(labels)
    query_idx = np.asarray(query_idx, dtype=int)
    pool_idx = np.asarray(pool_idx, dtype=int)
    if np.intersect1d(query_idx, pool_idx).size:
        raise ValueError("query and pool sets must be disjoint")
    if protocol not in (GENERAL, SUB_LABEL):
        raise ValueError(f"unknown protocol {protocol!r}")
    if protocol == SUB_LABEL and sublabels is None:
        raise ValueError("sub_label protocol needs sublabels")
    dictionaries = dict(dictionaries or {})
    if concepts is None:
        concepts = range(Y.shape[1]) if protocol == GENERAL else sublabels.concepts()
        explicit = False
    else:
        explicit = True
    names = list(concept_names) if concept_names is not None else list(range(Y.shape[1]))

    methods = ([UNFILTERED] if include_unfiltered else []) + list(dictionaries)
    pool = X[:, pool_idx]
    per_method = {m: [] for m in methods}
    zero_count = {m: 0 for m in methods}
    rows = []
    for j in concepts:
        queries = query_idx[Y[query_idx, j] != 0]
        if protocol == SUB_LABEL:
            queries = np.array([q for q in queries if sublabels.of(q, j)], dtype=int)
        if queries.size == 0:
            if explicit or protocol == GENERAL:
                raise EmptyQuerySet(j)
            continue
        masks = _sub_masks(sublabels, pool_idx, j) if protocol == SUB_LABEL else None
        rels = [_relevance(Y, q, pool_idx, j, protocol, sublabels, masks) for q in queries]
        for method in methods:
            if method == UNFILTERED:
                V = X[:, queries]
            else:
                D = dictionaries[method]
                V = np.column_stack([project_concept(D, X[:, q], j) for q in queries])
            zeros = int(np.sum(np.linalg.norm(V, axis=0) < ZERO_NORM))
            aps = []
            for s in range(0, queries.size, chunk):
                block = V[:, s:s + chunk]
                if quantized is not None:
                    codebook, indices = quantized
                    scores = np.stack([lut_score(v, codebook, indices) for v in block.T])
                else:
                    scores = cosine_scores(block, pool)
                for r, row in enumerate(scores):
                    rel = rels[s + r]
                    ranked = top_k(row, k)
                    aps.append(ap_at_k(rel[ranked], k, int(rel.sum())))
            per_method[method].extend(aps)
            zero_count[method] += zeros
            rows.append({"method": method, "protocol": protocol, "concept": names[j],
                         "map": float(np.mean(aps)), "n_queries": int(queries.size),
                         "zero_components": zeros})
    for method in methods:
        if per_method[method]:
            rows.append({"method": method, "protocol": protocol, "concept": "all",
                         "map": float(np.mean(per_method[method])),
                         "n_queries": len(per_method[method]),
                         "zero_components": zero_count[method]})
    return rows


@dataclass(frozen=True)
class Codebook:
    """``K`` unit-norm codewords stored as rows of a ``K x d_T`` matrix."""

    vectors: np.ndarray

    def __post_init__(self):
        C = np.array(self.vectors, dtype=np.float64)
        if C.ndim != 2:
            raise DimensionMismatch(f"codebook must be K x d_T, got shape {C.shape}")
        if np.any(np.abs(np.linalg.norm(C, axis=1) - 1.0) > NORM_ATOL):
            raise ValueError("codewords must be unit norm")
        C.setflags(write=False)
        object.__setattr__(self, "vectors", C)

    @property
    def size(self) -> int:
        return self.vectors.shape[0]

    @property
    def token_dim(self) -> int:
        return self.vectors.shape[1]

    def digest(self) -> bytes:
        return hashlib.sha256(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes()).digest()


def _as_tokens(x, token_dim):
    """``(N, T, d_T)`` view of a tokenized pool given as array or d x N matrix."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 3:
        return a
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] % token_dim:
        raise DimensionMismatch(f"dimension {a.shape[0]} not a multiple of {token_dim}")
    return a.T.reshape(a.shape[1], -1, token_dim)


def quantize_pool(pool, codebook: Codebook, chunk: int = 1024) -> np.ndarray:
    """Nearest-codeword id (Euclidean, ties to the lower id) for every token.

    ``pool`` is a tokenwise-normalized ``d x N`` matrix or ``(N, T, d_T)``
    array. Returns a ``T x N`` array (``uint16`` when ``K <= 65536``).
    """
    tokens = _as_tokens(pool, codebook.token_dim)
    C = codebook.vectors
    c2 = np.sum(C * C, axis=1)
    n, n_tok, _ = tokens.shape
    dtype = np.uint16 if codebook.size <= 65536 else np.int64
    out = np.empty((n_tok, n), dtype=dtype)
    for s in range(0, n, chunk):
        t = tokens[s:s + chunk]
        d2 = np.sum(t * t, axis=2)[..., None] - 2.0 * (t @ C.T) + c2
        out[:, s:s + chunk] = np.argmin(d2, axis=2).T
    return out


def dequantize(indices, codebook: Codebook) -> np.ndarray:
    """Concatenated codewords, ``d x N`` with ``d = T * d_T``."""
    idx = np.asarray(indices, dtype=np.int64)
    n_tok, n = idx.shape
    return codebook.vectors[idx.T].reshape(n, n_tok * codebook.token_dim).T


def build_lut(vector, codebook: Codebook) -> np.ndarray:
    """``T x K`` table of token-codeword inner products of ``vector / ||vector||``.

    A zero vector yields an all-zero table.
    """
    v = np.asarray(vector, dtype=np.float64)
    tokens = v.reshape(-1, codebook.token_dim) if v.ndim == 1 else v
    norm = np.linalg.norm(tokens)
    if norm < ZERO_NORM:
        return np.zeros((tokens.shape[0], codebook.size))
    return (tokens / norm) @ codebook.vectors.T


def lut_score(vector, codebook: Codebook, indices) -> np.ndarray:
    """Scores ``sum_t G[t, k_t]`` of every quantized candidate.

    Equal to ``(v / ||v||) . x_q`` for the dequantized candidate ``x_q``;
    since every ``x_q`` has norm ``sqrt(T)`` this is ``sqrt(T)`` times the
    cosine, so rankings match quantized-cosine rankings.
    """
    G = build_lut(vector, codebook)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.shape[0] != G.shape[0]:
        raise DimensionMismatch(f"{idx.shape[0]} index rows for {G.shape[0]} tokens")
    return G[np.arange(G.shape[0])[:, None], idx].sum(axis=0)


_QMAGIC = b"SLCQ"


def save_quantized(path, indices, codebook: Codebook) -> None:
    """Write a ``T x N`` u16 index matrix tagged with the codebook's SHA-256."""
    idx = np.asarray(indices)
    if idx.max(initial=0) > 65535:
        raise ValueError("indices do not fit in u16")
    n_tok, n = idx.shape
    header = _QMAGIC + struct.pack("<BIQ", 1, n_tok, n) + codebook.digest()
    payload = np.asarray(idx, dtype="<u2").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(header + payload)


def load_quantized(path, codebook: Codebook | None = None) -> np.ndarray:
    """Read an index matrix; if ``codebook`` is given its hash must match."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _QMAGIC:
        raise ContainerFormatError(f"{path}: not a quantized pool file")
    version, n_tok, n = struct.unpack_from("<BIQ", raw, 4)
    if version != 1:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<BIQ")
    digest = raw[off:off + 32]
    if codebook is not None and digest != codebook.digest():
        raise ContainerFormatError(f"{path}: codebook hash mismatch")
    data = np.frombuffer(raw, dtype="<u2", offset=off + 32, count=n_tok * n)
    return data.reshape((n_tok, n), order="F").astype(np.uint16)
