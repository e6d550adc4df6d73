"""File formats: matrix containers, labels, sub-labels, manifests and checkpoints.

Matrix container layout (all integers little-endian)::

    b"SLCS" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u32 d | u64 N | payload

The payload is the ``d x N`` matrix in column-major order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError, InvalidLabels, ManifestError
from .retrieval import SubLabels
from .types import (
    ConceptLabelMatrix,
    EmbeddingMatrix,
    GroupDictionary,
    NormalizationState,
    normalize_clip_style,
    normalize_tokenwise,
    normalize_unit,
)

MAGIC = b"SLCS"
VERSION = 1
_HEADER = struct.Struct("<BBIQ")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to a temporary sibling and rename into place on success."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"newline": ""})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, matrix, dtype="f64") -> None:
    M = np.asarray(matrix)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2:
        raise ValueError(f"container holds a d x N matrix, got shape {M.shape}")
    code = {"f32": 0, "f64": 1}[dtype]
    data = np.asarray(M, dtype=_DTYPES[code])
    header = MAGIC + _HEADER.pack(VERSION, code, M.shape[0], M.shape[1])
    with atomic_write(path) as fh:
        fh.write(header)
        fh.write(data.tobytes(order="F"))


def read_container(path) -> np.ndarray:
    """Read a container; the array keeps its stored precision."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ContainerFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 4 + _HEADER.size:
        raise ContainerFormatError(f"{path}: truncated header")
    version, code, d, n = _HEADER.unpack_from(raw, 4)
    if version != VERSION:
        raise ContainerFormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise ContainerFormatError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    expected = 4 + _HEADER.size + d * n * dt.itemsize
    if len(raw) != expected:
        raise ContainerFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dt, offset=4 + _HEADER.size, count=d * n)
    return data.reshape((d, n), order="F").astype(dt.newbyteorder("="))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_labels(path):
    """Load a 0/1 label table from CSV (header = concept names) or JSON.

    JSON layout: ``{"concepts": [...], "labels": [[0, 1, ...], ...]}``.
    Returns ``(values, names)`` without rejecting unlabeled rows.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    if path.suffix.lower() == ".json":
        obj = json.loads(path.read_text())
        names = list(obj["concepts"])
        values = np.asarray(obj["labels"], dtype=np.int64)
    else:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise InvalidLabels(f"{path}: empty label file")
        names = [n.strip() for n in rows[0]]
        values = np.asarray([[int(v) for v in r] for r in rows[1:] if r], dtype=np.int64)
    values = values.reshape(-1, len(names))
    if not np.all((values == 0) | (values == 1)):
        raise InvalidLabels(f"{path}: labels must be 0 or 1")
    return values.astype(np.uint8), names


def write_labels(path, labels: ConceptLabelMatrix) -> None:
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(labels.concept_names)
        w.writerows(labels.values.tolist())


def read_sublabels(path, concept_names) -> SubLabels:
    """CSV with columns ``item, parent_concept, sub_label``.

    ``parent_concept`` may be a concept name or an integer index.
    """
    lookup = {name: j for j, name in enumerate(concept_names)}
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parent = row["parent_concept"].strip()
            j = lookup[parent] if parent in lookup else int(parent)
            entries.append((int(row["item"]), j, row["sub_label"].strip()))
    return SubLabels(entries)


def write_sublabels(path, sublabels: SubLabels, concept_names=None) -> None:
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(["item", "parent_concept", "sub_label"])
        for item, j, sub in sublabels.entries():
            w.writerow([item, concept_names[j] if concept_names is not None else j, sub])


def read_words(path) -> list:
    return [w.strip() for w in Path(path).read_text().splitlines() if w.strip()]


@dataclass
class DatasetManifest:
    """Resolved manifest: absolute paths, normalization recipe and split indices."""

    root: Path
    embeddings: Path
    labels: Path
    sublabels: Path | None = None
    prototypes: Path | None = None
    vocabulary: Path | None = None
    words: Path | None = None
    mean: Path | None = None
    normalization: str = "clip"
    token_dim: int | None = None
    splits: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    name: str = "dataset"
    embedding_name: str = "embedding"


_PATH_KEYS = ("embeddings", "labels", "sublabels", "prototypes", "vocabulary", "words", "mean")


def load_manifest(path) -> DatasetManifest:
    """Parse a JSON manifest, resolving paths against its directory.

    Every referenced file must exist and match its entry in ``hashes``
    (SHA-256 hex) when one is given.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    obj = json.loads(path.read_text())
    root = path.parent.resolve()
    for key in ("embeddings", "labels"):
        if key not in obj:
            raise ManifestError(f"manifest lacks required key {key!r}")
    kwargs = {}
    for key in _PATH_KEYS:
        if obj.get(key):
            p = (root / obj[key]).resolve()
            if not p.exists():
                raise FileNotFoundError(f"{key} file not found: {p}")
            kwargs[key] = p
    hashes = dict(obj.get("hashes", {}))
    for key, digest in hashes.items():
        if key not in kwargs:
            raise ManifestError(f"hash given for unknown entry {key!r}")
        actual = sha256_file(kwargs[key])
        if actual != digest:
            raise ManifestError(f"{key}: hash mismatch ({actual} != {digest})")
    norm = obj.get("normalization", "clip")
    if norm not in ("clip", "tokenwise", "unit", "none"):
        raise ManifestError(f"unknown normalization {norm!r}")
    if norm == "clip" and "mean" not in kwargs:
        raise ManifestError("clip normalization needs a 'mean' container")
    if norm == "tokenwise" and not obj.get("token_dim"):
        raise ManifestError("tokenwise normalization needs 'token_dim'")
    return DatasetManifest(
        root=root,
        normalization=norm,
        token_dim=obj.get("token_dim"),
        splits=dict(obj.get("splits", {})),
        hashes=hashes,
        name=obj.get("name", path.stem),
        embedding_name=obj.get("embedding_name", "embedding"),
        **kwargs,
    )


@dataclass
class Dataset:
    X: EmbeddingMatrix  # preprocessed
    X_raw: np.ndarray
    labels: ConceptLabelMatrix
    splits: dict
    sublabels: SubLabels | None
    kept: np.ndarray  # original item index of every retained item
    manifest: DatasetManifest


def _must_be_disjoint(a, b):
    # the retrieval pool is a database and may coincide with the training items
    return {a, b} != {"train", "pool"}


def _split_indices(spec, root):
    if isinstance(spec, str):
        return np.asarray(json.loads((root / spec).read_text()), dtype=int)
    return np.asarray(spec, dtype=int)


def load_dataset(manifest: DatasetManifest) -> Dataset:
    """Load, drop unlabeled items, normalize and remap split indices.

    Items whose label row is all zero are removed together with their
    embedding column, and split lists are remapped to the new positions.
    Splits must be pairwise disjoint, except that ``pool`` may share items
    with ``train``. A split given as ``"rest"`` receives every retained item
    not in a split it must be disjoint from.
    """
    X_raw = np.asarray(read_container(manifest.embeddings), dtype=np.float64)
    values, names = read_labels(manifest.labels)
    if values.shape[0] != X_raw.shape[1]:
        raise ManifestError(
            f"{values.shape[0]} label rows for {X_raw.shape[1]} embeddings")
    kept = np.flatnonzero(values.sum(axis=1) > 0)
    position = -np.ones(values.shape[0], dtype=int)
    position[kept] = np.arange(kept.size)
    X_raw = X_raw[:, kept]
    labels = ConceptLabelMatrix(values[kept], names)

    if manifest.normalization == "clip":
        mean = np.asarray(read_container(manifest.mean), dtype=np.float64).reshape(-1)
        X = normalize_clip_style(X_raw, mean)
    elif manifest.normalization == "tokenwise":
        X = normalize_tokenwise(X_raw, manifest.token_dim)
    elif manifest.normalization == "unit":
        X = normalize_unit(X_raw)
    else:
        X = EmbeddingMatrix(X_raw, NormalizationState.RAW)

    raw_splits = {}
    for key, spec in manifest.splits.items():
        if spec == "rest":
            continue
        idx = _split_indices(spec, manifest.root)
        if idx.size and (idx.min() < 0 or idx.max() >= values.shape[0]):
            raise ManifestError(f"split {key!r} has out-of-range indices")
        raw_splits[key] = idx
    names_seen = list(raw_splits)
    for a in range(len(names_seen)):
        for b in range(a + 1, len(names_seen)):
            if not _must_be_disjoint(names_seen[a], names_seen[b]):
                continue
            if np.intersect1d(raw_splits[names_seen[a]], raw_splits[names_seen[b]]).size:
                raise ManifestError(f"splits {names_seen[a]!r} and {names_seen[b]!r} overlap")
    splits = {k: position[v][position[v] >= 0] for k, v in raw_splits.items()}
    rest = [k for k, spec in manifest.splits.items() if spec == "rest"]
    if len(rest) > 1:
        raise ManifestError("only one split may be 'rest'")
    if rest:
        used = [v for k, v in splits.items() if _must_be_disjoint(k, rest[0])]
        used = np.concatenate(used or [np.zeros(0, dtype=int)])
        splits[rest[0]] = np.setdiff1d(np.arange(kept.size), used)

    sub = None
    if manifest.sublabels is not None:
        sub = read_sublabels(manifest.sublabels, names)
        sub = SubLabels((position[i], j, s) for i, j, s in sub.entries()
                        if i < position.size and position[i] >= 0)
    return Dataset(X, X_raw, labels, splits, sub, kept, manifest)


def save_checkpoint(directory, dictionary: GroupDictionary, A, meta: dict | None = None) -> dict:
    """Write ``dictionary.slcs``, ``coefficients.slcs`` and ``checkpoint.json``.

    Each file is written atomically; the JSON sidecar (written last) records
    group sizes, any caller metadata and the SHA-256 of both containers.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_container(directory / "dictionary.slcs", dictionary.atoms)
    write_container(directory / "coefficients.slcs", A)
    sidecar = {
        "group_sizes": list(dictionary.group_sizes),
        **(meta or {}),
        "sha256": {
            "dictionary": sha256_file(directory / "dictionary.slcs"),
            "coefficients": sha256_file(directory / "coefficients.slcs"),
        },
    }
    with atomic_write(directory / "checkpoint.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return sidecar


def load_checkpoint(directory):
    """Return ``(dictionary, A, meta)`` from a checkpoint directory."""
    directory = Path(directory)
    meta = json.loads((directory / "checkpoint.json").read_text())
    atoms = read_container(directory / "dictionary.slcs")
    A = read_container(directory / "coefficients.slcs")
    return GroupDictionary(atoms, meta["group_sizes"]), np.asarray(A, dtype=np.float64), meta


def write_named_matrix(path, matrix, names) -> None:
    """Container plus a ``.json`` sidecar (same stem) holding column names."""
    path = Path(path)
    write_container(path, matrix)
    with atomic_write(path.with_suffix(".json"), "w") as fh:
        json.dump({"names": list(names)}, fh)


def read_named_matrix(path):
    """Return ``(matrix, names)``; names default to ``col_<i>`` without a sidecar."""
    path = Path(path)
    M = np.asarray(read_container(path), dtype=np.float64)
    side = path.with_suffix(".json")
    if side.exists():
        names = json.loads(side.read_text())["names"]
        if len(names) != M.shape[1]:
            raise ManifestError(f"{side}: {len(names)} names for {M.shape[1]} columns")
    else:
        names = [f"col_{i}" for i in range(M.shape[1])]
    return M, list(names)
