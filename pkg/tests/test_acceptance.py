"""Acceptance criteria 1-10.

Each test prints one ``[C<n>] PASS|FAIL`` line (also collected into the
pytest terminal summary) and then asserts. Criterion 10 needs real
CLIP ViT-B/32 MIRFlickr-25K assets and is skipped without them; point
``CONCEPTCONES_MIRFLICKR_MANIFEST`` at a dataset manifest to run it.
"""

import itertools
import os
import time

import numpy as np
import pytest

from conceptcones import (
    Codebook,
    ExperimentConfig,
    ResidualWorkspace,
    SubLabels,
    TrainConfig,
    ap_at_k,
    cosine_scores,
    dequantize,
    lut_score,
    map_experiment,
    planted_dataset,
    quantize_pool,
    solve_nnls,
    top_k,
    train,
    train_minibatch,
    update_atom_alternating,
    update_atom_simultaneous,
)
from conceptcones.io import load_dataset, load_manifest, save_checkpoint, sha256_file

from oracles import ap_reference, leading_singular, nnls_brute_force

VERDICTS = []

# Fixed from a one-time oracle run (planted seeds 0-4, S=5, d=64, d0=4,
# N=2000, sigma=0.01, T=10, 200 queries): the filtered-minus-unfiltered
# mAP@20 gap was 0.334-0.377 (general) and 0.319-0.378 (sub-label).
RETRIEVAL_MARGIN = 0.25


def verdict(n, ok, detail):
    line = f"[C{n}] {'PASS' if ok else 'FAIL'}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def _workspaces(n=1000, d=20, size=30, seed=2024):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        E = rng.standard_normal((d, size))
        atom = rng.standard_normal(d)
        atom /= np.linalg.norm(atom)
        out.append(ResidualWorkspace(np.arange(size), E, atom, np.abs(rng.standard_normal(size))))
    return out


def test_c1_nnls_matches_enumeration():
    rng = np.random.default_rng(1)
    problems = []
    for _ in range(200):
        k = int(rng.integers(1, 9))
        problems.append((rng.standard_normal((10, k)), rng.standard_normal(10)))
    t0 = time.perf_counter()
    sols = [solve_nnls(D, t).coefficients for D, t in problems]
    elapsed = time.perf_counter() - t0
    worst = 0.0
    for (D, t), c in zip(problems, sols):
        _, best = nnls_brute_force(D, t)
        worst = max(worst, abs(float(np.sum((D @ c - t) ** 2)) - best))
    verdict(1, worst <= 1e-8 and elapsed < 5.0,
            f"max |objective - oracle| = {worst:.2e} (tol 1e-8), solver time {elapsed:.2f}s (< 5s)")


def test_c2_sign_rule_optimal():
    wss = _workspaces()
    t0 = time.perf_counter()
    results = [update_atom_simultaneous(ws) for ws in wss]
    elapsed = time.perf_counter() - t0
    wins = 0
    worst_rel = 0.0
    for ws, res in zip(wss, results):
        E = ws.residual
        u = res.sign * res.new_atom  # unit vector with beta = u^T E
        beta = u @ E
        energy = float(np.sum(E * E))
        errs = {}
        for p in (res.sign, -res.sign):
            c = np.maximum(p * beta, 0.0)
            direct = float(np.sum((E - np.outer(p * u, c)) ** 2))
            identity = energy - float(np.sum(c * c))
            worst_rel = max(worst_rel, abs(direct - identity) / energy)
            errs[p] = direct
        wins += errs[res.sign] <= errs[-res.sign]
    verdict(2, wins == 1000 and worst_rel <= 1e-6 and elapsed < 10.0,
            f"optimal sign in {wins}/1000, identity rel err {worst_rel:.1e} (tol 1e-6), "
            f"{elapsed:.2f}s (< 10s)")


def test_c3_alternating_bound_and_rank_one():
    worst = -np.inf
    for ws in _workspaces():
        res = update_atom_alternating(ws)
        s1 = leading_singular(ws.residual)[0]
        worst = max(worst, float(np.sum(np.maximum(res.beta, 0) ** 2)) - s1 ** 2)
    rng = np.random.default_rng(3)
    agree = 0.0
    for _ in range(200):
        u = rng.standard_normal(20)
        u /= np.linalg.norm(u)
        v = np.abs(rng.standard_normal(30))
        ws = ResidualWorkspace(np.arange(30), np.outer(u, v), None, np.abs(rng.standard_normal(30)))
        a, s = update_atom_alternating(ws), update_atom_simultaneous(ws)
        agree = max(agree, np.max(np.abs(a.new_atom - s.new_atom)),
                    np.max(np.abs(a.new_coefficients - s.new_coefficients)))
    verdict(3, worst <= 1e-8 and agree <= 1e-8,
            f"max(||beta+||^2 - sigma1^2) = {worst:.2e} (<= 1e-8), rank-1 disagreement {agree:.1e}")


def test_c4_monotone_convergence():
    data = planted_dataset(n_concepts=5, dim=64, d0=4, n_items=2000, noise=0.01, seed=0)
    t0 = time.perf_counter()
    _, _, rep = train(data.X, data.labels, TrainConfig(d0=4, iterations=10, monotone_check=True))
    elapsed = time.perf_counter() - t0
    obj = np.array(rep.objectives)
    rel = np.max(np.diff(obj) / obj[:-1])
    verdict(4, len(obj) == 20 and rel <= 1e-10 and elapsed < 60.0,
            f"{len(obj)} stage objectives, max relative increase {rel:.2e} (<= 1e-10), "
            f"{elapsed:.1f}s (< 60s)")


def test_c5_planted_fit():
    clean = planted_dataset(n_concepts=5, dim=64, d0=4, n_items=2000, noise=0.0, seed=0)
    _, _, rep0 = train(clean.X, clean.labels, TrainConfig(d0=4, iterations=30))
    noisy = planted_dataset(n_concepts=5, dim=64, d0=4, n_items=2000, noise=0.01, seed=0)
    _, _, rep1 = train(noisy.X, noisy.labels, TrainConfig(d0=4, iterations=10))
    planted = noisy.planted_objective
    verdict(5, rep0.final_objective <= 1e-6 and rep1.final_objective <= 2 * planted,
            f"noiseless {rep0.final_objective:.2e} (<= 1e-6); noisy {rep1.final_objective:.5f} "
            f"vs planted {planted:.5f} (<= 2x)")


def test_c6_filtered_retrieval_beats_unfiltered():
    data = planted_dataset(n_concepts=5, dim=64, d0=4, n_items=2000, noise=0.01, seed=0)
    q, p = np.arange(200), np.arange(200, 2000)
    D, _, _ = train(data.X[:, p], data.labels[p], TrainConfig(d0=4, iterations=10))
    gaps = {}
    for protocol, extra in (("general", {}),
                            ("sub_label", {"sublabels": SubLabels.from_array(data.sublabels)})):
        rows = map_experiment(data.X, data.labels, q, p, {"cones": D}, k=20, protocol=protocol,
                              **extra)
        overall = {r["method"]: r["map"] for r in rows if r["concept"] == "all"}
        gaps[protocol] = (overall["cones"], overall["unfiltered"])
    ok = all(f - u > RETRIEVAL_MARGIN for f, u in gaps.values())
    detail = "; ".join(f"{k}: filtered {f:.3f} vs unfiltered {u:.3f}" for k, (f, u) in gaps.items())
    verdict(6, ok, f"{detail} (margin > {RETRIEVAL_MARGIN})")


def test_c7_lut_exactness():
    rng = np.random.default_rng(7)
    T, dT, K, N = 32, 12, 64, 500
    C = rng.standard_normal((K, dT))
    cb = Codebook(C / np.linalg.norm(C, axis=1, keepdims=True))
    tok = rng.standard_normal((N, T, dT))
    tok /= np.linalg.norm(tok, axis=2, keepdims=True)
    idx = quantize_pool(tok, cb)
    Xq = dequantize(idx, cb)
    same = True
    worst = 0.0
    for _ in range(20):
        v = rng.standard_normal(T * dT)
        lut = lut_score(v, cb, idx) / np.sqrt(T)
        direct = cosine_scores(v, Xq)
        worst = max(worst, float(np.max(np.abs(lut - direct))))
        same &= np.array_equal(top_k(lut, N), top_k(direct, N))
    verdict(7, same and worst < 1e-6,
            f"rankings identical: {bool(same)}, max score difference {worst:.1e} (< 1e-6)")


def test_c8_ap_exhaustive():
    checked = mismatches = 0
    for n in range(1, 7):
        for rel in itertools.product([0, 1], repeat=n):
            for k in range(1, n + 1):
                for extra in range(3):
                    R = sum(rel) + extra
                    checked += 1
                    mismatches += ap_at_k(rel, k, R) != ap_reference(rel, k, R)
    verdict(8, mismatches == 0, f"{checked - mismatches}/{checked} exact matches")


def test_c9_minibatch_consistency(tmp_path):
    data = planted_dataset(n_concepts=5, dim=64, d0=4, n_items=600, noise=0.01, seed=9)
    n = data.X.shape[1]
    D1, A1, _ = train(data.X, data.labels, TrainConfig(d0=4, iterations=3))
    D2, A2, _ = train_minibatch(data.X, data.labels, TrainConfig(d0=4, iterations=3, batch_size=n))
    bitwise = (D1.atoms.tobytes() == D2.atoms.tobytes()) and A1.tobytes() == A2.tobytes()
    cfg = ExperimentConfig(d0=4, iterations=3, batch_size=128, seed=17)
    digests = []
    for run in ("a", "b"):
        D, A, _ = train_minibatch(data.X, data.labels, cfg.train_config())
        save_checkpoint(tmp_path / run, D, A, {"config_hash": cfg.hash, "seed": cfg.seed})
        digests.append([sha256_file(tmp_path / run / f)
                        for f in ("dictionary.slcs", "coefficients.slcs", "checkpoint.json")])
    verdict(9, bitwise and digests[0] == digests[1],
            f"batch_size=N bitwise equal: {bitwise}; seeded checkpoints identical: "
            f"{digests[0] == digests[1]}")


PAPER_TARGETS = {("cones", "general"): 0.895, ("cones", "sub_label"): 0.756,
                 ("unfiltered", "general"): 0.728, ("unfiltered", "sub_label"): 0.700}


def test_c10_mirflickr_vit_reproduction():
    if not os.environ.get("CONCEPTCONES_MIRFLICKR_MANIFEST"):
        line = "[C10] SKIP: MIRFlickr-25K CLIP ViT-B/32 assets not supplied"
        VERDICTS.append(line)
        pytest.skip(line)
    ds = load_dataset(load_manifest(os.environ["CONCEPTCONES_MIRFLICKR_MANIFEST"]))
    cfg_path = os.environ.get("CONCEPTCONES_MIRFLICKR_CONFIG")
    cfg = ExperimentConfig.load(cfg_path) if cfg_path else ExperimentConfig()
    train_idx = ds.splits["train"]
    X, Y = ds.X.data, ds.labels.values
    D, _, _ = train(X[:, train_idx], Y[train_idx], cfg.train_config())
    got = {}
    for protocol in ("general", "sub_label"):
        rows = map_experiment(X, Y, ds.splits["query"], ds.splits["pool"], {"cones": D}, k=20,
                              protocol=protocol, sublabels=ds.sublabels,
                              concepts=None if protocol == "sub_label" else
                              [j for j in range(Y.shape[1]) if Y[ds.splits["query"], j].any()])
        for r in rows:
            if r["concept"] == "all":
                got[(r["method"], protocol)] = r["map"]
    diffs = {key: abs(got[key] - target) for key, target in PAPER_TARGETS.items()}
    detail = ", ".join(f"{m}/{p} {got[(m, p)]:.3f} vs {PAPER_TARGETS[(m, p)]:.3f}"
                       for m, p in PAPER_TARGETS)
    verdict(10, max(diffs.values()) <= 0.03, f"{detail} (tol 0.03)")
