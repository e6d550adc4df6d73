"""On-disk synthetic datasets for io and CLI tests."""

import csv
import json

import numpy as np

from conceptcones import planted_dataset
from conceptcones.io import sha256_file, write_container


def write_dataset(root, n_items=160, n_concepts=3, dim=16, d0=2, seed=0, unlabeled=(),
                  sublabels=True, hashes=True, normalization="clip"):
    """Planted data written as a manifest directory; returns (manifest path, planted data)."""
    data = planted_dataset(n_concepts=n_concepts, dim=dim, d0=d0, n_items=n_items, noise=0.01,
                           seed=seed)
    root.mkdir(parents=True, exist_ok=True)
    labels = data.labels.copy()
    for i in unlabeled:
        labels[i] = 0
    write_container(root / "emb.slcs", data.X)
    write_container(root / "mean.slcs", np.zeros(dim))
    names = [f"c{j}" for j in range(n_concepts)]
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        w.writerows(labels.tolist())
    manifest = {
        "name": "planted",
        "embedding_name": "synthetic",
        "embeddings": "emb.slcs",
        "labels": "labels.csv",
        "normalization": normalization,
        "splits": {
            "validation": list(range(0, 20)),
            "query": list(range(20, 40)),
            "train": list(range(40, n_items)),
            "pool": "rest",
        },
    }
    if normalization == "clip":
        manifest["mean"] = "mean.slcs"
    if sublabels:
        with open(root / "sub.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["item", "parent_concept", "sub_label"])
            for i, j in zip(*np.nonzero(data.sublabels >= 0)):
                w.writerow([i, names[j], f"s{data.sublabels[i, j]}"])
        manifest["sublabels"] = "sub.csv"
    if hashes:
        manifest["hashes"] = {"embeddings": sha256_file(root / "emb.slcs"),
                              "labels": sha256_file(root / "labels.csv")}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path, data
