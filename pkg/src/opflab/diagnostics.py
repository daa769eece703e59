"""Post-hoc analyses of trained checkpoints.

Each analysis has a pure core working on arrays (``stratify``,
``pearson_r``, ``pca``, ``linear_probe``) and a checkpoint-level wrapper
that gathers predictions from a dataset split.  :func:`write_outputs`
stores a CSV table plus a JSON summary named ``diag_<analysis>_<timestamp>``.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .gnn.model import TopologyContext
from .trainer import Checkpoint, _split, _targets, evaluate, predict, resolve_stats


def _predict_split(checkpoint: Checkpoint, dataset: Dataset, split, zero_shot=False):
    stats = resolve_stats(checkpoint, dataset, zero_shot)
    ctx = TopologyContext(dataset.case, stats)
    arr = dataset.arrays(_split(dataset, split))
    pred = predict(checkpoint.config.model, checkpoint.params, ctx, arr["loads"], checkpoint.config.precision)
    return pred, arr, stats


# ---------------------------------------------------------------------------
# transfer matrix


@dataclass(frozen=True)
class TransferCell:
    model: str
    train_set: str
    eval_topology: str
    opf_sol_err: float
    viol: float
    zero_shot: bool
    best_err: bool = False
    best_viol: bool = False

    def as_row(self):
        return {
            "model": self.model,
            "train_set": self.train_set,
            "eval_topology": self.eval_topology,
            "opf_sol_err": self.opf_sol_err,
            "viol": self.viol,
            "zero_shot": int(self.zero_shot),
            "best_err": int(self.best_err),
            "best_viol": int(self.best_viol),
        }


def transfer_matrix(checkpoints: dict, datasets: dict, topologies=None, split="test") -> list:
    """Evaluate every checkpoint on every topology.

    ``checkpoints`` maps a model label to a Checkpoint.  A row is a
    (train set, eval topology) pair; ``best_err``/``best_viol`` flag the
    minimum across the models sharing that row.  Topologies unknown to a
    checkpoint are evaluated zero-shot.
    """
    topologies = list(topologies or datasets)
    cells = []
    for label, ck in checkpoints.items():
        train_set = "+".join(ck.config.topologies)
        for t in topologies:
            zero = t not in ck.stats
            m = evaluate(ck, datasets[t], split=split, zero_shot=zero)
            cells.append(TransferCell(label, train_set, t, m["opf_sol_err"], m["viol"], zero))
    out = []
    for c in cells:
        peers = [p for p in cells if p.train_set == c.train_set and p.eval_topology == c.eval_topology]
        out.append(TransferCell(
            c.model, c.train_set, c.eval_topology, c.opf_sol_err, c.viol, c.zero_shot,
            c.opf_sol_err == min(p.opf_sol_err for p in peers),
            c.viol == min(p.viol for p in peers),
        ))
    return out


# ---------------------------------------------------------------------------
# load-stratified error


def stratify(total_load, errors, n_bins: int) -> list:
    """Mean error per equal-width bin of ``total_load``; empty bins are omitted."""
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    x = np.asarray(total_load, dtype=float)
    e = np.asarray(errors, dtype=float)
    if x.shape != e.shape or x.ndim != 1 or x.size == 0:
        raise ValueError("total_load and errors must be equal-length non-empty vectors")
    edges = np.linspace(x.min(), x.max(), n_bins + 1)
    which = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    rows = []
    for k in range(n_bins):
        sel = which == k
        if sel.any():
            rows.append({"bin": k, "lo": float(edges[k]), "hi": float(edges[k + 1]),
                         "count": int(sel.sum()), "mean_error": float(e[sel].mean())})
    return rows


def per_instance_error(pred, arr, stats) -> np.ndarray:
    """Normalised squared error averaged over every output component, per instance."""
    y_bus, y_gen = _targets(arr, stats)
    B = y_bus.shape[0]
    zb = pred.z_bus.data.astype(float)
    zg = pred.z_gen.data.astype(float)
    sq = np.concatenate([((zb - y_bus) ** 2).reshape(B, -1), ((zg - y_gen) ** 2).reshape(B, -1)], axis=1)
    return sq.mean(axis=1)


def load_stratified_error(checkpoint: Checkpoint, dataset: Dataset, n_bins: int = 10, split="test",
                          zero_shot=False) -> list:
    pred, arr, stats = _predict_split(checkpoint, dataset, split, zero_shot)
    return stratify(arr["total_load"], per_instance_error(pred, arr, stats), n_bins)


# ---------------------------------------------------------------------------
# degree-error correlation


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson_r needs two equal-length series of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise ValueError("undefined correlation: a series has zero variance")
    return float(np.sum(dx * dy) / (sx * sy))


def bus_degrees(case) -> tuple:
    """Number of branches incident to each bus, and that count over its maximum."""
    a = case.arrays
    deg = np.bincount(np.concatenate([a.f_bus, a.t_bus]), minlength=case.n_bus)
    if deg.max() == 0:
        raise ValueError("bus_degrees: case has no branches")
    return deg, deg / deg.max()


def degree_error_correlation(checkpoint: Checkpoint, dataset: Dataset, split="test", zero_shot=False) -> dict:
    """Per-bus mean squared (vm, va) error against normalised bus degree.

    Errors are in normalised target space and averaged over instances and
    both bus outputs.  ``gen_error`` adds each generator's mean (pg, qg)
    error onto its bus; it is reported but not part of the correlation.
    """
    pred, arr, stats = _predict_split(checkpoint, dataset, split, zero_shot)
    y_bus, y_gen = _targets(arr, stats)
    err = ((pred.z_bus.data.astype(float) - y_bus) ** 2).mean(axis=(0, 2))
    gen_err = ((pred.z_gen.data.astype(float) - y_gen) ** 2).mean(axis=(0, 2))
    case = dataset.case
    by_bus = np.bincount(case.arrays.gen_bus, weights=gen_err, minlength=case.n_bus)
    _, deg = bus_degrees(case)
    if len(np.unique(deg)) < 2:
        raise ValueError("undefined correlation: all buses have the same degree")
    return {"node_error": err, "gen_error": by_bus, "degree": deg, "pearson_r": pearson_r(deg, err)}


# ---------------------------------------------------------------------------
# activation PCA and linear probing


def collect_activations(checkpoint: Checkpoint, dataset: Dataset, split="test", zero_shot=False):
    """Per-layer mean-pooled activations (list of (B, hidden)) and total load per instance."""
    pred, arr, _ = _predict_split(checkpoint, dataset, split, zero_shot)
    return [np.asarray(a, dtype=float) for a in pred.activations], arr["total_load"]


def pca(activations, k: int = 2) -> dict:
    """Top-``k`` principal components from the eigendecomposition of the covariance.

    Returns components (k, d) as orthonormal rows, their variances, the
    explained-variance ratios and the centred projections (n, k).
    """
    X = np.asarray(activations, dtype=float)
    n = X.shape[0]
    if n < k or n < 2:
        raise ValueError(f"pca: need at least max(k, 2) = {max(k, 2)} instances, got {n}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (n - 1)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w = np.clip(w[order], 0.0, None)
    V = V[:, order]
    comps = V[:, :k].T
    total = w.sum()
    ratio = w[:k] / total if total > 0 else np.zeros(k)
    return {"components": comps, "explained_variance": w[:k], "explained_ratio": ratio, "projections": Xc @ comps.T}


def activation_pca(checkpoint: Checkpoint, dataset: Dataset, layer_index: int = -1, k: int = 2, split="test",
                   zero_shot=False) -> dict:
    acts, total_load = collect_activations(checkpoint, dataset, split, zero_shot)
    if not -len(acts) <= layer_index < len(acts):
        raise IndexError(f"layer {layer_index} does not exist (model has {len(acts)} layers)")
    out = pca(acts[layer_index], k)
    out["total_load"] = total_load
    return out


RIDGE = 1e-6


def _ols(X, y):
    A = np.column_stack([np.ones(len(X)), X])
    G = A.T @ A
    if np.linalg.matrix_rank(G) < G.shape[0]:
        G = G + RIDGE * np.eye(G.shape[0])
    return np.linalg.solve(G, A.T @ y)


def linear_probe(activations_by_layer, target, holdout: float = 0.2, seed: int = 0) -> list:
    """Held-out R^2 of an OLS probe (with intercept) for every layer.

    The same random split is used for every layer; singular normal equations
    fall back to a ridge penalty of 1e-6.
    """
    y = np.asarray(target, dtype=float)
    n = y.size
    if n < 10:
        raise ValueError(f"linear_probe: need at least 10 instances, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(holdout * n)))
    test, train = perm[:n_test], perm[n_test:]
    out = []
    for X in activations_by_layer:
        X = np.asarray(X, dtype=float).reshape(n, -1)
        coef = _ols(X[train], y[train])
        pred = coef[0] + X[test] @ coef[1:]
        ss_res = np.sum((y[test] - pred) ** 2)
        ss_tot = np.sum((y[test] - y[test].mean()) ** 2)
        out.append(float(1.0 - ss_res / ss_tot) if ss_tot > 0 else float("nan"))
    return out


# ---------------------------------------------------------------------------
# output


def timestamp() -> str:
    return time.strftime("%Y%m%dT%H%M%S")


def write_outputs(run_dir, analysis: str, rows: list, summary: dict, stamp: str | None = None) -> tuple:
    """Write ``diag_<analysis>_<stamp>.csv`` and ``.json``; returns both paths."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    base = f"diag_{analysis}_{stamp or timestamp()}"
    csv_path = run_dir / f"{base}.csv"
    json_path = run_dir / f"{base}.json"
    fields = list(rows[0]) if rows else []
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=2, default=_jsonable)
    return csv_path, json_path


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serialisable: {type(x)}")
