"""Command-line interface.

Every subcommand writes a table (``--format csv`` or ``json``) to stdout or
``--output``; each row carries the config hash and seed. Errors go to
stderr as one JSON object and map to exit codes: 2 for missing files and
usage errors, 3 for malformed inputs, 4 for numerical failures, 1 otherwise.

The ``CONCEPTCONES_THREADS`` environment variable caps BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import io as _io
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .dictionary import ALTERNATING, SIMULTANEOUS, train, train_minibatch
from .disentangle import cooccurrence_matrix, decompose_full, project_concept, sparse_code_nn_omp
from .nnls import solve_nnls
from .errors import ConceptConesError, ContainerFormatError, InvalidLabels, ManifestError
from .pseudolabel import ConceptPrototypes, zero_shot_multilabel
from .retrieval import (
    GENERAL,
    SUB_LABEL,
    Codebook,
    cosine_scores,
    load_quantized,
    map_experiment,
    quantize_pool,
    save_quantized,
    top_k,
)
from .synthetic import planted_dataset
from .text import Vocabulary, procrustes_align, word_captions

THREADS_ENV = "CONCEPTCONES_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {
        "iterations": getattr(args, "iterations", None),
        "d0": getattr(args, "d0", None),
        "batch_size": getattr(args, "batch_size", None),
        "update_mode": getattr(args, "update_mode", None),
        "power_iterations": getattr(args, "power_iterations", None),
        "ridge_lambda": getattr(args, "ridge", None),
        "seed": args.seed,
        "k": getattr(args, "k", None),
        "init": getattr(args, "init", None),
    }
    if getattr(args, "monotone_check", False):
        overrides["monotone_check"] = True
    if getattr(args, "d0_range", None):
        overrides["d0_range"] = tuple(int(v) for v in args.d0_range.split(":"))
    return cfg.with_overrides(**overrides)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def _emit(rows, args, cfg: ExperimentConfig, columns=None) -> None:
    rows = [{**{k: _fmt(v) for k, v in r.items()}, "config_hash": cfg.hash, "seed": cfg.seed}
            for r in rows]
    if columns is None:
        columns = list(rows[0]) if rows else ["config_hash", "seed"]
    else:
        columns = list(columns) + ["config_hash", "seed"]
    if args.format == "json":
        text = json.dumps({"config_hash": cfg.hash, "seed": cfg.seed, "rows": rows},
                          indent=2) + "\n"
    else:
        buf = _io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue()
    if args.output:
        with io.atomic_write(args.output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dataset(args):
    return io.load_dataset(io.load_manifest(args.manifest))


def _split(ds, name, fallback=None):
    if name in ds.splits:
        return ds.splits[name]
    if fallback is not None:
        return fallback
    raise ManifestError(f"manifest defines no {name!r} split")


def _train_items(ds):
    return _split(ds, "train", np.arange(ds.X.n_items))


def _fit_dictionary(X, Y, tcfg, checkpoint=None):
    fn = train_minibatch if tcfg.batch_size else train
    return fn(X, Y, tcfg, checkpoint=checkpoint)


def _checkpoints(specs):
    """``name=DIR`` or ``DIR`` (named after the directory) to a dict of dictionaries."""
    out = {}
    for spec in specs or []:
        name, _, path = spec.rpartition("=")
        name = name or Path(path).name
        out[name] = io.load_checkpoint(path)[0]
    return out


def _items(spec, n):
    if not spec:
        return np.arange(n)
    idx = np.asarray([int(s) for s in spec.split(",")], dtype=int)
    if idx.min() < 0 or idx.max() >= n:
        raise UsageError(f"item indices must lie in 0..{n - 1}")
    return idx


def _concept_index(spec, names):
    if spec in names:
        return names.index(spec)
    try:
        j = int(spec)
    except ValueError:
        raise UsageError(f"unknown concept {spec!r}") from None
    if not 0 <= j < len(names):
        raise UsageError(f"concept index {j} out of range")
    return j


def _sub_protocol_usable(ds, queries, pool):
    if ds.sublabels is None:
        return False
    qs = set(int(q) for q in queries)
    return any(i in qs for i, _, _ in ds.sublabels.entries())


# ------------------------------------------------------------ subcommands

def cmd_fit(args):
    cfg = _config(args)
    ds = _dataset(args)
    items = _train_items(ds)
    X = ds.X.data[:, items]
    Y = ds.labels.values[items]
    tcfg = cfg.train_config()
    resume = None
    out = Path(args.out)
    if args.resume and (out / "checkpoint.json").exists():
        D, A, _ = io.load_checkpoint(out)
        resume = (D, A)
    D, A, report = _fit_dictionary(X, Y, tcfg, resume)
    meta = {"config_hash": cfg.hash, "seed": cfg.seed, "config": cfg.to_dict(),
            "concept_names": list(ds.labels.concept_names),
            "method": "s-svd" if cfg.iterations == 0 else "supervised-cones"}
    side = io.save_checkpoint(out, D, A, meta)
    rep = out / "report.csv"
    with io.atomic_write(rep, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "iteration", "batch", "objective", "skipped", "reinit",
                    "config_hash", "seed"])
        for s in report.stages:
            w.writerow([s["stage"], s["iteration"], s["batch"], repr(s["objective"]),
                        s["skipped"], s["reinit"], cfg.hash, cfg.seed])
    _emit([{"checkpoint": str(out), "method": meta["method"], "n_items": X.shape[1],
            "n_atoms": D.n_atoms, "final_objective": report.final_objective,
            "skipped": report.skipped, "reinitialized": report.reinitialized,
            "dictionary_sha256": side["sha256"]["dictionary"]}], args, cfg)
    return 0


def _present(Y, queries, protocol):
    # general protocol: evaluate only concepts that have at least one query
    if protocol != GENERAL:
        return None
    return [j for j in range(Y.shape[1]) if Y[queries, j].any()]


def _evaluate(X, Y, queries, pool, dictionaries, k, protocol, sublabels, names, quantized=None):
    return map_experiment(X, Y, queries, pool, dictionaries, k=k, protocol=protocol,
                          sublabels=sublabels, concepts=_present(Y, queries, protocol),
                          concept_names=names, quantized=quantized)


def choose_d0(scores) -> int:
    """Position of the best score; ties go to the earliest (smallest d0)."""
    best = 0
    for i, v in enumerate(scores):
        if v > scores[best]:
            best = i
    return best


def cmd_sweep_d0(args):
    cfg = _config(args)
    ds = _dataset(args)
    items = _train_items(ds)
    val = _split(ds, "validation")
    pool = _split(ds, "pool", items)
    if np.intersect1d(val, pool).size:
        pool = np.setdiff1d(pool, val)
    use_sub = _sub_protocol_usable(ds, val, pool)
    protocol = SUB_LABEL if use_sub else GENERAL
    rows = []
    for d0 in cfg.d0_values():
        tcfg = cfg.train_config(d0=d0, group_sizes=None)
        D, _, _ = _fit_dictionary(ds.X.data[:, items], ds.labels.values[items], tcfg)
        res = _evaluate(ds.X.data, ds.labels.values, val, pool, {"filtered": D}, cfg.k,
                        protocol, ds.sublabels, list(ds.labels.concept_names))
        overall = next(r for r in res if r["method"] == "filtered" and r["concept"] == "all")
        rows.append({"d0": d0, "protocol": protocol, "fallback": int(not use_sub),
                     f"map@{cfg.k}": overall["map"]})
    best = choose_d0([r[f"map@{cfg.k}"] for r in rows])
    for i, r in enumerate(rows):
        r["chosen"] = int(i == best)
    _emit(rows, args, cfg)
    return 0


def cmd_decompose(args):
    cfg = _config(args)
    ds = _dataset(args)
    D = io.load_checkpoint(args.checkpoint)[0]
    names = list(ds.labels.concept_names)
    items = _items(args.items, ds.X.n_items)
    comps = np.zeros((D.n_groups, D.dim, items.size))
    rows = []

    def coef_field(a):
        vals = [float(c) for c in a]
        return vals if args.format == "json" else " ".join(repr(c) for c in vals)

    for col, i in enumerate(items):
        x = ds.X.data[:, i]
        active = ds.labels.active(i)
        if args.mode == "project":
            parts = []
            for j in active:
                Bj = D.group(j)
                a = solve_nnls(Bj, x).coefficients
                v = Bj @ a
                parts.append((j, v, a, float(np.linalg.norm(x - v))))
        else:
            dec = decompose_full(D, x, active, cfg.ridge_lambda)
            res = float(np.linalg.norm(dec.residual))
            parts = [(j, v, a, res) for j, v, a in dec.components]
        for j, v, a, res in parts:
            comps[j, :, col] = v
            rows.append({"item": int(i), "concept": names[j],
                         "component_norm": float(np.linalg.norm(v)), "residual_norm": res,
                         "coefficients": coef_field(a)})
    if args.save_components:
        out = Path(args.save_components)
        out.mkdir(parents=True, exist_ok=True)
        for j in range(D.n_groups):
            io.write_container(out / f"component_{j}.slcs", comps[j])
    _emit(rows, args, cfg, ["item", "concept", "component_norm", "residual_norm", "coefficients"])
    return 0


def cmd_retrieve(args):
    cfg = _config(args)
    ds = _dataset(args)
    names = list(ds.labels.concept_names)
    pool = _split(ds, "pool", np.arange(ds.X.n_items))
    q = int(args.query)
    if not 0 <= q < ds.X.n_items:
        raise UsageError(f"query index must lie in 0..{ds.X.n_items - 1}")
    v = ds.X.data[:, q]
    if args.concept is not None:
        if not args.checkpoint:
            raise UsageError("--concept needs --checkpoint")
        D = io.load_checkpoint(args.checkpoint)[0]
        v = project_concept(D, v, _concept_index(args.concept, names))
    scores = cosine_scores(v[:, None], ds.X.data[:, pool])[0]
    exclude = np.flatnonzero(pool == q)
    ranked = top_k(scores, args.top, exclude=exclude)
    rows = [{"rank": r + 1, "item": int(pool[p]), "score": float(scores[p])}
            for r, p in enumerate(ranked)]
    _emit(rows, args, cfg, ["rank", "item", "score"])
    return 0


def cmd_eval(args):
    cfg = _config(args)
    ds = _dataset(args)
    queries = _split(ds, "query")
    pool = _split(ds, "pool")
    dictionaries = _checkpoints(args.checkpoint)
    quantized = None
    if args.quantized:
        if not args.codebook:
            raise UsageError("--quantized needs --codebook")
        cb = Codebook(io.read_container(args.codebook).T)
        quantized = (cb, load_quantized(args.quantized, cb))
    protocols = [args.protocol] if args.protocol else list(cfg.protocols)
    m = io.load_manifest(args.manifest)
    rows = []
    for protocol in protocols:
        if protocol == SUB_LABEL and ds.sublabels is None:
            continue
        res = _evaluate(ds.X.data, ds.labels.values, queries, pool, dictionaries, cfg.k,
                        protocol, ds.sublabels, list(ds.labels.concept_names), quantized)
        for r in res:
            rows.append({"dataset": m.name, "embedding": m.embedding_name, "method": r["method"],
                         "protocol": r["protocol"], "concept": r["concept"],
                         f"map@{cfg.k}": r["map"], "n_queries": r["n_queries"]})
    _emit(rows, args, cfg, ["dataset", "embedding", "method", "protocol", "concept",
                            f"map@{cfg.k}", "n_queries"])
    return 0


def cmd_caption(args):
    cfg = _config(args)
    D, _, meta = io.load_checkpoint(args.checkpoint)
    names = meta.get("concept_names") or [str(j) for j in range(D.n_groups)]
    raw = np.asarray(io.read_container(args.vocab), dtype=np.float64)
    words = io.read_words(args.words)
    mean = None
    if args.mean:
        mean = np.asarray(io.read_container(args.mean), dtype=np.float64).reshape(-1)
    vocab = Vocabulary.prepare(words, raw, mean)
    rows = []
    for j in range(D.n_groups):
        for r, (w, e) in enumerate(word_captions(D.group(j), vocab, args.top_n)):
            rows.append({"concept": names[j], "rank": r + 1, "word": w, "error": e})
    _emit(rows, args, cfg, ["concept", "rank", "word", "error"])
    return 0


def cmd_quantize(args):
    cfg = _config(args)
    pool = np.asarray(io.read_container(args.embeddings), dtype=np.float64)
    cb = Codebook(io.read_container(args.codebook).T)
    idx = quantize_pool(pool, cb)
    save_quantized(args.out, idx, cb)
    _emit([{"output": args.out, "n_tokens": idx.shape[0], "n_items": idx.shape[1],
            "codebook_size": cb.size, "sha256": io.sha256_file(args.out)}], args, cfg)
    return 0


def cmd_cooccur(args):
    cfg = _config(args)
    D, A, _ = io.load_checkpoint(args.checkpoint)
    if args.manifest:
        ds = _dataset(args)
        items = _items(args.items, ds.X.n_items)
        codes = [sparse_code_nn_omp(D, ds.X.data[:, i], max_atoms=args.max_atoms) for i in items]
        C = cooccurrence_matrix(codes)
    else:
        C = cooccurrence_matrix(A)
    cols = [f"atom_{k}" for k in range(C.shape[1])]
    rows = [{"atom": m, **{c: float(v) for c, v in zip(cols, C[m])}} for m in range(C.shape[0])]
    _emit(rows, args, cfg, ["atom"] + cols)
    return 0


def cmd_pseudolabel(args):
    cfg = _config(args)
    X = np.asarray(io.read_container(args.embeddings), dtype=np.float64)
    W, names = io.read_named_matrix(args.prototypes)
    protos = ConceptPrototypes.from_raw(W, names)
    L = zero_shot_multilabel(X, protos, args.s_tilde)
    rows = [{"item": i, **{n: int(v) for n, v in zip(protos.concept_names, L.values[i])}}
            for i in range(L.n_items)]
    _emit(rows, args, cfg, ["item"] + list(protos.concept_names))
    return 0


def cmd_align(args):
    cfg = _config(args)
    Xs = np.asarray(io.read_container(args.source), dtype=np.float64)
    Yt = np.asarray(io.read_container(args.target), dtype=np.float64)
    R = procrustes_align(Xs, Yt)
    if args.out:
        io.write_container(args.out, R.matrix)
    _emit([{"dim": R.matrix.shape[0],
            "residual_before": float(np.linalg.norm(Xs - Yt)),
            "residual_after": float(np.linalg.norm(R.matrix @ Xs - Yt))}], args, cfg)
    return 0


def cmd_bench(args):
    cfg = _config(args)
    data = planted_dataset(n_concepts=args.concepts, dim=args.dim, d0=cfg.d0, n_items=args.n_items,
                           noise=args.noise, seed=cfg.seed)
    t0 = time.perf_counter()
    D, A, report = _fit_dictionary(data.X, data.labels, cfg.train_config())
    fit_time = time.perf_counter() - t0
    n = data.X.shape[1]
    queries = np.arange(min(args.queries, n // 4))
    pool = np.arange(queries.size, n)
    res = _evaluate(data.X, data.labels, queries, pool, {"filtered": D}, cfg.k, GENERAL,
                    None, None)
    overall = {r["method"]: r["map"] for r in res if r["concept"] == "all"}
    rows = [{"n_items": n, "dim": args.dim, "concepts": args.concepts, "d0": cfg.d0,
             "iterations": cfg.iterations, "fit_seconds": fit_time,
             "final_objective": report.final_objective,
             "planted_objective": data.planted_objective,
             "map_unfiltered": overall.get("unfiltered"), "map_filtered": overall.get("filtered")}]
    _emit(rows, args, cfg)
    return 0


# ----------------------------------------------------------------- parser

def _common(p, training=False):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--output", "-o", help="write the table here instead of stdout")
    p.add_argument("--k", type=int, help="cutoff for mAP@k")
    if training:
        p.add_argument("--iterations", type=int)
        p.add_argument("--d0", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--update-mode", choices=(SIMULTANEOUS, ALTERNATING))
        p.add_argument("--power-iterations", type=int)
        p.add_argument("--ridge", type=float)
        p.add_argument("--init", choices=("svd", "random_samples"))
        p.add_argument("--monotone-check", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptcones", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="learn a dictionary on the train split")
    _common(p, training=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sweep-d0", help="pick d0 by validation mAP")
    _common(p, training=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--d0-range", help="start:stop:step, inclusive")
    p.set_defaults(func=cmd_sweep_d0)

    p = sub.add_parser("decompose", help="per-concept components of items")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--items", help="comma-separated item indices")
    p.add_argument("--mode", choices=("full", "project"), default="full")
    p.add_argument("--save-components", metavar="DIR",
                   help="write one d x n container of components per concept")
    p.add_argument("--ridge", type=float)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("retrieve", help="top matches for one query")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--query", type=int, required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--concept", help="filter by this concept's cone (name or index)")
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("eval", help="mAP@k table for query/pool splits")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", action="append", help="[name=]DIR, repeatable")
    p.add_argument("--protocol", choices=(GENERAL, SUB_LABEL))
    p.add_argument("--quantized", help="quantized pool file")
    p.add_argument("--codebook", help="codebook container (d_T x K)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="words best explained by each concept cone")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True, help="raw word embeddings container")
    p.add_argument("--words", required=True, help="newline-separated words")
    p.add_argument("--mean", help="centering vector container")
    p.add_argument("--top-n", type=int, default=5)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("quantize", help="map token embeddings to codeword ids")
    _common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--codebook", required=True, help="codebook container (d_T x K)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("cooccur", help="atom co-occurrence matrix")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="recode these items with non-negative OMP")
    p.add_argument("--items")
    p.add_argument("--max-atoms", type=int, default=10)
    p.set_defaults(func=cmd_cooccur)

    p = sub.add_parser("pseudolabel", help="zero-shot multi-labels from prototypes")
    _common(p)
    p.add_argument("--embeddings", required=True, help="raw embeddings container")
    p.add_argument("--prototypes", required=True, help="prototype container with names sidecar")
    p.add_argument("--s-tilde", type=int, required=True)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("align", help="orthogonal map between paired embeddings")
    _common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", help="write the rotation container here")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("bench", help="fit and evaluate on planted synthetic data")
    _common(p, training=True)
    p.add_argument("--n-items", type=int, default=2000)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--concepts", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--queries", type=int, default=200)
    p.set_defaults(func=cmd_bench)
    return parser


def _fail(code, exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    threads = os.environ.get(THREADS_ENV)
    try:
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=int(threads)):
                return args.func(args)
        return args.func(args)
    except FileNotFoundError as e:
        return _fail(2, e)
    except UsageError as e:
        return _fail(2, e)
    except (ManifestError, ContainerFormatError, InvalidLabels, json.JSONDecodeError) as e:
        return _fail(3, e)
    except (ConceptConesError, np.linalg.LinAlgError) as e:
        return _fail(4, e)
    except (ValueError, KeyError) as e:
        return _fail(3, e)


if __name__ == "__main__":
    sys.exit(main())


def main_exit() -> None:
    sys.exit(main())
