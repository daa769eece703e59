"""Command-line entry point: ``opflab <command> [options]``.

Every command writes ``config_resolved.json``, ``run.log`` and its outputs
into a fresh run directory under ``$LUMINA_RUN_DIR`` (default ``./runs``)
unless ``--run-dir`` is given.  ``--config FILE`` supplies flat JSON keys
named like the long options (dashes as underscores); explicit flags win.
Passing a run's ``config_resolved.json`` back as ``--config`` repeats it.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag, missing
file, invalid configuration), 3 training aborted on a non-finite loss.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .dataset import Dataset, fixture_path, load_case
from .gnn.model import ARCHITECTURES
from .objectives import OBJECTIVES
from .powerflow import build_dataset
from .trainer import (
    PRECISIONS,
    Checkpoint,
    TrainConfig,
    TrainingAborted,
    check_compatible,
    evaluate,
    finetune,
    predict,
    resolve_stats,
    train,
)
from . import diagnostics as diag

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3
log = logging.getLogger("opflab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


MODEL_KEYS = ("architecture", "layers", "hidden", "heads", "leaky_slope", "epsilon_learnable", "residual")
TRAIN_DEFAULTS = {
    "objective": "mse", "steps": 1000, "batch_size": 32, "lr": 1e-3, "seed": 0, "precision": "double",
    "eval_every": 100, "threshold_tau": None, "rho": 1.0, "update_period": 200, "rho_growth": 1.0,
    "clip_quadratic": False, "eval_split": "val",
    "architecture": "hgt", "layers": 4, "hidden": 128, "heads": 4, "leaky_slope": 0.2,
    "epsilon_learnable": True, "residual": True,
}
DEFAULTS = {
    "gen-data": {"seed": 0, "count": 100, "perturb_lo": 0.8, "perturb_hi": 1.2, "limit_policy": "strict",
                 "ratios": [0.9, 0.05, 0.05]},
    "train": dict(TRAIN_DEFAULTS, data=[]),
    "finetune": {k: None for k in TRAIN_DEFAULTS},
    "eval": {"split": "test", "precision": None, "zero_shot": False},
    "transfer": {"split": "test"},
    "stress": {"split": "test", "bins": 10, "zero_shot": False},
    "probe": {"split": "test", "layer": -1, "k": 2, "zero_shot": False, "holdout": 0.2, "seed": 0},
}


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _train_flags(p):
    p.add_argument("--objective", choices=OBJECTIVES)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=tuple(PRECISIONS))
    p.add_argument("--eval-every", type=int)
    p.add_argument("--threshold-tau", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--update-period", type=int)
    p.add_argument("--rho-growth", type=float, help="multiply rho by this after every dual update")
    p.add_argument("--clip-quadratic", type=_bool, metavar="BOOL")
    p.add_argument("--eval-split", choices=("train", "val", "test"))
    p.add_argument("--architecture", choices=ARCHITECTURES)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--leaky-slope", type=float)
    p.add_argument("--epsilon-learnable", type=_bool, metavar="BOOL")
    p.add_argument("--residual", type=_bool, metavar="BOOL")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="opflab", description="Train and stress-test graph surrogates of AC optimal power flow.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_, description=help_)
        s.add_argument("--config", help="JSON file of flat option keys (flags override)")
        s.add_argument("--run-dir", help="output directory (default: fresh directory under $LUMINA_RUN_DIR or ./runs)")
        return s

    s = cmd("gen-data", "Generate labeled instances of one case into a dataset directory.")
    s.add_argument("--case", help="case file (.json or MATPOWER .m) or a bundled fixture name such as case3")
    s.add_argument("--seed", type=int)
    s.add_argument("--count", type=int)
    s.add_argument("--perturb-lo", type=float)
    s.add_argument("--perturb-hi", type=float)
    s.add_argument("--limit-policy", choices=("strict", "relaxed"))
    s.add_argument("--out", help="dataset directory (default: <run-dir>/data)")

    s = cmd("train", "Train a model on one or more dataset directories.")
    s.add_argument("--data", nargs="+", help="dataset directories, one per topology")
    _train_flags(s)

    s = cmd("finetune", "Continue training a checkpoint on a target dataset.")
    s.add_argument("--checkpoint")
    s.add_argument("--data", help="target dataset directory")
    _train_flags(s)

    s = cmd("eval", "Evaluate a checkpoint on a dataset split.")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--precision", choices=tuple(PRECISIONS))
    s.add_argument("--zero-shot", type=_bool, metavar="BOOL")

    s = cmd("transfer", "Zero-shot transfer matrix of checkpoints over datasets.")
    s.add_argument("--checkpoint", nargs="+", help="LABEL=PATH or PATH (label defaults to the file stem)")
    s.add_argument("--data", nargs="+")
    s.add_argument("--split", choices=("train", "val", "test"))

    s = cmd("stress", "Load-stratified error and degree-error correlation.")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--bins", type=int)
    s.add_argument("--zero-shot", type=_bool, metavar="BOOL")

    s = cmd("probe", "Activation PCA and per-layer linear probes of total load.")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--layer", type=int, help="layer for PCA (default: last)")
    s.add_argument("--k", type=int, help="number of principal components")
    s.add_argument("--holdout", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--zero-shot", type=_bool, metavar="BOOL")
    return p


# ---------------------------------------------------------------------------
# helpers


def _resolve(args) -> dict:
    """Merge defaults < config file < explicit flags into a flat dict."""
    explicit = {k: v for k, v in vars(args).items() if v is not None}
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"{path}: expected a JSON object")
    known = set(vars(args)) - {"config", "command"}
    unknown = sorted(set(cfg) - known - {"command", "run_dir"})
    if unknown:
        raise UsageError(f"unknown configuration keys: {', '.join(unknown)}")
    out = dict(DEFAULTS[args.command])
    out.update({k: v for k, v in cfg.items() if k in known})
    out.update({k: v for k, v in explicit.items() if k not in ("config", "command")})
    out["command"] = args.command
    return out


def _need(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"{cfg['command']}: missing required option(s): {flags}")


def _existing(path, what="file"):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _run_dir(cfg) -> Path:
    if cfg.get("run_dir"):
        d = Path(cfg["run_dir"])
    else:
        root = Path(os.environ.get("LUMINA_RUN_DIR", "runs"))
        stem = f"{cfg['command']}-{time.strftime('%Y%m%dT%H%M%S')}"
        d = root / stem
        k = 1
        while d.exists():
            d = root / f"{stem}-{k}"
            k += 1
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=diag._jsonable)
        fh.write("\n")


def _load_dataset(path) -> Dataset:
    p = _existing(path, "dataset directory")
    if not (p / "manifest.json").is_file():
        raise UsageError(f"not a dataset directory (no manifest.json): {p}")
    return Dataset.load(p)


def _load_checkpoint(path) -> Checkpoint:
    return Checkpoint.load(_existing(path, "checkpoint"))


def _train_config(cfg, topologies, base: TrainConfig | None = None) -> TrainConfig:
    d = base.to_dict() if base else {}
    model = dict(d.get("model", {}))
    for k in MODEL_KEYS:
        if cfg.get(k) is not None:
            model[k] = cfg[k]
    for k in TRAIN_DEFAULTS:
        if k not in MODEL_KEYS and cfg.get(k) is not None:
            d[k] = cfg[k]
    d["model"] = model
    d["topologies"] = list(topologies)
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


def _final_metrics(ck, datasets):
    return {t: evaluate(ck, ds, split="test") for t, ds in datasets.items()}


def _progress(step, records):
    for r in records:
        log.info("step %d %s loss=%.6g opf_sol_err=%.6g viol=%.6g", step, r["topology"], r["loss"],
                 r["opf_sol_err"], r["viol_total"])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg, run_dir):
    _need(cfg, "case")
    src = cfg["case"]
    path = Path(src)
    if not path.exists():
        try:
            path = fixture_path(src if Path(src).suffix else src + ".json")
        except FileNotFoundError:
            raise UsageError(f"case file not found: {src}") from None
    case = load_case(path)
    cfg["case"] = str(path.resolve())
    ds = build_dataset(case, int(cfg["count"]), int(cfg["seed"]), (cfg["perturb_lo"], cfg["perturb_hi"]),
                       cfg["limit_policy"], tuple(cfg["ratios"]))
    out = Path(cfg.get("out") or run_dir / "data")
    ds.save(out)
    cfg["out"] = str(out.resolve())
    log.info("wrote %d instances of %s to %s", len(ds), ds.case_id, out)
    return {"dataset": str(out), "generation": ds.generation}


def cmd_train(cfg, run_dir):
    _need(cfg, "data")
    datasets = {}
    for p in cfg["data"]:
        ds = _load_dataset(p)
        datasets[ds.case_id] = ds
    cfg["data"] = [str(Path(p).resolve()) for p in cfg["data"]]
    tc = _train_config(cfg, list(datasets))
    ck, tlog = train(tc, datasets, progress=_progress)
    ck.save(run_dir / "checkpoint.npz")
    tlog.write_csv(run_dir / "train_log.csv")
    metrics = _final_metrics(ck, datasets)
    _write_json(run_dir / "metrics.json", metrics)
    return metrics


def cmd_finetune(cfg, run_dir):
    _need(cfg, "checkpoint", "data")
    ck = _load_checkpoint(cfg["checkpoint"])
    ds = _load_dataset(cfg["data"])
    cfg["checkpoint"] = str(Path(cfg["checkpoint"]).resolve())
    cfg["data"] = str(Path(cfg["data"]).resolve())
    tc = _train_config(cfg, [ds.case_id], base=ck.config)
    try:
        check_compatible(ck, tc.model)
    except ValueError as e:
        raise UsageError(str(e)) from None
    new, tlog = finetune(ck, ds, tc, progress=_progress)
    new.save(run_dir / "checkpoint.npz")
    tlog.write_csv(run_dir / "train_log.csv")
    metrics = _final_metrics(new, {ds.case_id: ds})
    _write_json(run_dir / "metrics.json", metrics)
    return metrics


def cmd_eval(cfg, run_dir):
    _need(cfg, "checkpoint", "data")
    ck = _load_checkpoint(cfg["checkpoint"])
    ds = _load_dataset(cfg["data"])
    try:
        m = evaluate(ck, ds, cfg["split"], cfg["precision"], bool(cfg["zero_shot"]))
        stats = resolve_stats(ck, ds, bool(cfg["zero_shot"]))
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    from .gnn.model import TopologyContext

    split = getattr(ds.splits, cfg["split"])
    arr = ds.arrays(split)
    pred = predict(ck.config.model, ck.params, TopologyContext(ds.case, stats), arr["loads"],
                   m["precision"])
    np.savez(run_dir / "predictions.npz", indices=np.asarray(split), loads=arr["loads"],
             **{k: getattr(pred, k).data.astype(np.float64) for k in ("vm", "va", "pg", "qg")})
    _write_json(run_dir / "metrics.json", m)
    return m


def _checkpoint_map(specs):
    out = {}
    for s in specs:
        label, _, path = s.rpartition("=")
        label = label or Path(path).stem
        out[label] = _load_checkpoint(path)
    return out


def cmd_transfer(cfg, run_dir):
    _need(cfg, "checkpoint", "data")
    cks = _checkpoint_map(cfg["checkpoint"])
    datasets = {}
    for p in cfg["data"]:
        ds = _load_dataset(p)
        datasets[ds.case_id] = ds
    cells = diag.transfer_matrix(cks, datasets, split=cfg["split"])
    rows = [c.as_row() for c in cells]
    summary = {"cells": rows, "models": list(cks), "topologies": list(datasets)}
    diag.write_outputs(run_dir, "transfer", rows, summary)
    return summary


def cmd_stress(cfg, run_dir):
    _need(cfg, "checkpoint", "data")
    ck = _load_checkpoint(cfg["checkpoint"])
    ds = _load_dataset(cfg["data"])
    zs = bool(cfg["zero_shot"])
    stamp = diag.timestamp()
    bins = diag.load_stratified_error(ck, ds, int(cfg["bins"]), cfg["split"], zs)
    diag.write_outputs(run_dir, "load_stratified", bins, {"topology": ds.case_id, "bins": bins}, stamp)
    dc = diag.degree_error_correlation(ck, ds, cfg["split"], zs)
    rows = [{"bus": i, "degree": float(d), "error": float(e), "gen_error": float(g)}
            for i, (d, e, g) in enumerate(zip(dc["degree"], dc["node_error"], dc["gen_error"]))]
    diag.write_outputs(run_dir, "degree_error", rows, {"topology": ds.case_id, "pearson_r": dc["pearson_r"]}, stamp)
    return {"bins": bins, "pearson_r": dc["pearson_r"]}


def cmd_probe(cfg, run_dir):
    _need(cfg, "checkpoint", "data")
    ck = _load_checkpoint(cfg["checkpoint"])
    ds = _load_dataset(cfg["data"])
    zs = bool(cfg["zero_shot"])
    stamp = diag.timestamp()
    acts, total = diag.collect_activations(ck, ds, cfg["split"], zs)
    res = diag.activation_pca(ck, ds, int(cfg["layer"]), int(cfg["k"]), cfg["split"], zs)
    rows = [dict({f"pc{j + 1}": float(v) for j, v in enumerate(p)}, total_load=float(t))
            for p, t in zip(res["projections"], res["total_load"])]
    diag.write_outputs(run_dir, "pca", rows, {
        "topology": ds.case_id, "layer": int(cfg["layer"]),
        "explained_variance": res["explained_variance"], "explained_ratio": res["explained_ratio"],
    }, stamp)
    r2 = diag.linear_probe(acts, total, float(cfg["holdout"]), int(cfg["seed"]))
    diag.write_outputs(run_dir, "linear_probe", [{"layer": i, "r2": v} for i, v in enumerate(r2)],
                       {"topology": ds.case_id, "r2": r2}, stamp)
    return {"r2": r2, "explained_ratio": res["explained_ratio"]}


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval,
    "transfer": cmd_transfer, "stress": cmd_stress, "probe": cmd_probe,
}


def run(argv=None) -> int:
    parser = build_parser()
    handler = None
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = _resolve(args)
        run_dir = _run_dir(cfg)
        cfg["run_dir"] = str(run_dir.resolve())
        handler = logging.FileHandler(run_dir / "run.log")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root = logging.getLogger()
        root.addHandler(handler)
        root.setLevel(logging.INFO)
        _write_json(run_dir / "config_resolved.json", cfg)
        result = COMMANDS[args.command](cfg, run_dir)
        _write_json(run_dir / "config_resolved.json", cfg)
        print(json.dumps({"run_dir": cfg["run_dir"], "result": result}, default=diag._jsonable, sort_keys=True))
        return EXIT_OK
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        if handler is not None:
            _write_json(run_dir / "abort_snapshot.json", e.snapshot)
        return EXIT_NAN
    except Exception as e:  # noqa: BLE001 - report and map to a failure code
        log.exception("command failed")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
