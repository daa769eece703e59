"""Optimisation loop, checkpoints, evaluation and convergence logs."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataset import Dataset, NormStats, normalize
from .gnn.model import ModelConfig, TopologyContext, cast_params, init_params, model_forward
from .objectives import OBJECTIVES, DualState, dual_update_al, dual_update_vbl, objective_loss
from .residuals import FAMILIES, family_norms, report_arrays

log = logging.getLogger(__name__)

PRECISIONS = {"double": np.float64, "single": np.float32}


class TrainingAborted(RuntimeError):
    """Raised when the loss turns non-finite; ``snapshot`` holds the diagnostic state."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    topologies: tuple = ("case3",)
    objective: str = "mse"
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    precision: str = "double"
    eval_every: int = 100
    threshold_tau: float | None = None
    rho: float = 1.0
    update_period: int = 200
    rho_growth: float = 1.0
    clip_quadratic: bool = False
    eval_split: str = "val"

    def __post_init__(self):
        object.__setattr__(self, "topologies", tuple(self.topologies))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if self.steps <= 0:
            raise ValueError(f"steps must be > 0, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"unknown precision {self.precision!r}; choose from {tuple(PRECISIONS)}")
        if self.eval_split not in ("train", "val", "test"):
            raise ValueError(f"unknown eval_split {self.eval_split!r}")
        if not self.topologies:
            raise ValueError("at least one topology is required")

    def to_dict(self):
        d = asdict(self)
        d["topologies"] = list(self.topologies)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment optimizer over a dict of named tensors (updated in place)."""

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items() if v.requires_grad}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items() if v.requires_grad}

    def step(self, grads: dict):
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p = self.params[k]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints and logs


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict  # name -> ad.Tensor
    stats: dict  # case_id -> NormStats
    duals: DualState
    step: int = 0

    def param_arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def save(self, path) -> Path:
        path = Path(path)
        tensors = {f"params/{k}": v for k, v in self.param_arrays().items()}
        tensors.update(self.duals.to_arrays())
        meta = {
            "config": self.config.to_dict(),
            "stats": {k: s.to_dict() for k, s in self.stats.items()},
            "step": int(self.step),
            "trainable": sorted(k for k, v in self.params.items() if v.requires_grad),
            "duals": {"update_period": self.duals.update_period, "gamma": self.duals.gamma},
        }
        ad.save_archive(path, tensors, meta)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = ad.load_archive(path)
        config = TrainConfig.from_dict(meta["config"])
        trainable = set(meta["trainable"])
        params = {}
        for key, arr in tensors.items():
            if key.startswith("params/"):
                name = key[len("params/"):]
                params[name] = ad.Tensor(arr.copy(), requires_grad=name in trainable, name=name)
        duals = DualState.from_arrays(
            {k: v for k, v in tensors.items() if k.startswith("duals/")}, **meta["duals"]
        )
        stats = {k: NormStats.from_dict(v) for k, v in meta["stats"].items()}
        return cls(config, params, stats, duals, int(meta["step"]))


LOG_COLUMNS = ["step", "topology", "loss", "opf_sol_err", "viol_total"] + [f"viol_{f}" for f in FAMILIES] + ["wall_ms"]


@dataclass
class TrainLog:
    """Evaluation records, one row per (eval step, topology).

    ``loss`` is the mean training objective over the optimizer steps since the
    previous record (for step 0: the objective on the first minibatch before
    any update).  ``wall_ms`` is the mean wall-clock time per optimizer step
    over the same window.  ``step_ms`` keeps every step's time.
    """

    records: list = field(default_factory=list)
    step_ms: list = field(default_factory=list)

    def steps(self) -> list:
        out = []
        for r in self.records:
            if not out or out[-1] != r["step"]:
                out.append(r["step"])
        return out

    def for_topology(self, case_id) -> list:
        return [r for r in self.records if r["topology"] == case_id]

    def comparable(self) -> list:
        """Records without wall-clock fields (for determinism checks)."""
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in self.records]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.records:
                w.writerow({k: r[k] for k in LOG_COLUMNS})
        return path

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        records = []
        for row in rows:
            rec = {k: float(v) for k, v in row.items() if k not in ("step", "topology")}
            rec["step"] = int(row["step"])
            rec["topology"] = row["topology"]
            records.append(rec)
        return cls(records)


def steps_to_threshold(log, tau, topology=None):
    """First logged step whose violation total is <= ``tau``, else ``"never"``.

    ``log`` is a TrainLog or a sequence of records.  With several topologies
    per step the step qualifies once every (selected) topology is <= tau.
    """
    records = log.records if isinstance(log, TrainLog) else list(log)
    if not records:
        raise ValueError("steps_to_threshold: empty log")
    by_step = {}
    for r in records:
        if topology is None or r["topology"] == topology:
            by_step.setdefault(r["step"], []).append(r["viol_total"])
    for step, vals in by_step.items():
        if max(vals) <= tau:
            return step
    return "never"


# ---------------------------------------------------------------------------
# evaluation


def _targets(arr, stats: NormStats):
    y_bus = normalize(np.stack([arr["vm"], arr["va"]], axis=-1), stats.bus_target)
    y_gen = normalize(np.stack([arr["pg"], arr["qg"]], axis=-1), stats.gen_target)
    return y_bus, y_gen


def predict(config: ModelConfig, params, ctx: TopologyContext, loads, precision="double"):
    """Forward pass without recording; returns the Prediction."""
    dtype = PRECISIONS[precision]
    if dtype != np.float64:
        params = cast_params(params, dtype)
    view = "hetero" if config.hetero else "homo"
    return model_forward(config, params, ctx.batch(loads, view, dtype), ctx.stats)


def evaluate_params(model: ModelConfig, params, ctx: TopologyContext, dataset: Dataset, indices,
                    precision="double") -> dict:
    arr = dataset.arrays(indices)
    pred = predict(model, params, ctx, arr["loads"], precision)
    y_bus, y_gen = _targets(arr, ctx.stats)
    zb = pred.z_bus.data.astype(np.float64)
    zg = pred.z_gen.data.astype(np.float64)
    B = zb.shape[0]
    sq = np.concatenate([((zb - y_bus) ** 2).reshape(B, -1), ((zg - y_gen) ** 2).reshape(B, -1)], axis=1)
    per_inst = sq.mean(axis=1)
    vm, va, pg, qg = (getattr(pred, k).data.astype(np.float64) for k in ("vm", "va", "pg", "qg"))
    loads = arr["loads"]
    norms = family_norms(report_arrays(ctx.case, vm, va, pg, qg, loads[:, :, 0], loads[:, :, 1]), ctx.case.n_bus)
    totals = sum(norms[f] for f in FAMILIES)
    fams = {f: float(np.mean(norms[f])) for f in FAMILIES}
    return {
        "opf_sol_err": float(per_inst.mean()),
        "viol": float(totals.mean()),
        "families": fams,
        "n": int(B),
        "per_instance_err": per_inst,
        "per_instance_viol": totals,
    }


def _split(dataset: Dataset, name):
    return {"train": dataset.splits.train, "val": dataset.splits.val, "test": dataset.splits.test}[name]


def resolve_stats(checkpoint: Checkpoint, dataset: Dataset, zero_shot=False) -> NormStats:
    if dataset.case_id in checkpoint.stats:
        return checkpoint.stats[dataset.case_id]
    if not zero_shot:
        raise KeyError(
            f"checkpoint has no normalisation stats for {dataset.case_id!r}; pass zero_shot=True "
            "to fit them on the target's training split"
        )
    return dataset.fit_stats()


def evaluate(checkpoint: Checkpoint, dataset: Dataset, split="test", precision=None, zero_shot=False) -> dict:
    """Mean normalised MSE (``opf_sol_err``) and mean total violation (``viol``) on a split.

    With ``zero_shot`` a topology unknown to the checkpoint is normalised
    with statistics fitted on its own training split.
    """
    stats = resolve_stats(checkpoint, dataset, zero_shot)
    ctx = TopologyContext(dataset.case, stats)
    precision = precision or checkpoint.config.precision
    out = evaluate_params(checkpoint.config.model, checkpoint.params, ctx, dataset, _split(dataset, split), precision)
    return {
        "topology": dataset.case_id,
        "split": split,
        "precision": precision,
        "opf_sol_err": out["opf_sol_err"],
        "viol": out["viol"],
        "families": out["families"],
        "n": out["n"],
    }


# ---------------------------------------------------------------------------
# training


def _run(config: TrainConfig, datasets: dict, params: dict, stats: dict, duals: DualState,
         progress=None):
    missing = [t for t in config.topologies if t not in datasets]
    if missing:
        raise KeyError(f"no dataset for topologies {missing}")
    dtype = PRECISIONS[config.precision]
    if dtype != np.float64:
        params = {k: ad.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k) for k, v in params.items()}
    ctxs = {t: TopologyContext(datasets[t].case, stats[t]) for t in config.topologies}
    for t in config.topologies:
        duals.ensure(datasets[t].case)
    view = "hetero" if config.model.hetero else "homo"
    trainable = {k: v for k, v in params.items() if v.requires_grad}
    opt = Adam(params, config.lr)
    rng = np.random.default_rng(config.seed)
    log_ = TrainLog()
    window = {t: None for t in config.topologies}
    loss_window, ms_window = [], []

    def record(step, loss_value, ms):
        for t in config.topologies:
            ds = datasets[t]
            m = evaluate_params(config.model, params, ctxs[t], ds, _split(ds, config.eval_split), config.precision)
            rec = {"step": step, "topology": t, "loss": loss_value, "opf_sol_err": m["opf_sol_err"],
                   "viol_total": m["viol"]}
            rec.update({f"viol_{f}": m["families"][f] for f in FAMILIES})
            rec["wall_ms"] = ms
            log_.records.append(rec)
        if progress:
            progress(step, log_.records[-len(config.topologies):])

    pending0 = True
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        cid = config.topologies[int(rng.integers(len(config.topologies)))]
        ds = datasets[cid]
        train_idx = np.asarray(ds.splits.train)
        idx = rng.choice(train_idx, size=min(config.batch_size, len(train_idx)), replace=False)
        arr = ds.arrays(idx)
        ctx = ctxs[cid]
        batch = ctx.batch(arr["loads"], view, dtype)
        target = _targets(arr, ctx.stats)
        with ad.Tape() as tape:
            pred = model_forward(config.model, params, batch, ctx.stats)
            loss, parts = objective_loss(
                config.objective, pred, target, ctx.case, duals, batch.pd, batch.qd, config.clip_quadratic
            )
        lv = float(loss.data)
        if not np.isfinite(lv):
            snapshot = {
                "step": step,
                "topology": cid,
                "batch_indices": idx.tolist(),
                "loss": lv,
                "param_norms": {k: float(np.linalg.norm(v.data)) for k, v in params.items()},
            }
            raise TrainingAborted(f"non-finite loss {lv} at step {step} on {cid}", snapshot)
        if pending0:
            te = time.perf_counter()
            record(0, lv, 0.0)
            t0 += time.perf_counter() - te
            pending0 = False
        grads = ad.backward(tape, loss, list(trainable.values()))
        opt.step({k: grads[v] for k, v in trainable.items()})

        if parts:
            r = parts["r"].data.astype(np.float64)
            hp = np.maximum(parts["h"].data.astype(np.float64), 0.0)
            rr = np.abs(r) if config.objective == "vbl" else r
            acc = window[cid]
            add = (rr.sum(axis=0), hp.sum(axis=0), r.shape[0])
            window[cid] = add if acc is None else (acc[0] + add[0], acc[1] + add[1], acc[2] + add[2])
            if step % duals.update_period == 0:
                means = {t: (w[0] / w[2], w[1] / w[2]) for t, w in window.items() if w is not None}
                update = dual_update_vbl if config.objective == "vbl" else dual_update_al
                new = update(duals, means)
                duals.lam, duals.mu, duals.rho = new.lam, new.mu, new.rho
                window = {t: None for t in config.topologies}

        ms = (time.perf_counter() - t0) * 1000.0
        log_.step_ms.append(ms)
        loss_window.append(lv)
        ms_window.append(ms)
        if step % config.eval_every == 0 or step == config.steps:
            record(step, float(np.mean(loss_window)), float(np.mean(ms_window)))
            loss_window, ms_window = [], []

    if dtype != np.float64:
        params = {k: ad.Tensor(v.data.astype(np.float64), requires_grad=v.requires_grad, name=k)
                  for k, v in params.items()}
    return params, log_


def train(config: TrainConfig, datasets: dict, progress=None):
    """Train from fresh parameters; returns ``(Checkpoint, TrainLog)``.

    Each step samples a topology uniformly, then a minibatch of its training
    instances.  Deterministic given ``config.seed`` at double precision.
    """
    params = init_params(config.model, config.seed)
    stats = {t: datasets[t].fit_stats() for t in config.topologies if t in datasets}
    duals = DualState(config.rho, config.update_period, config.rho_growth)
    params, log_ = _run(config, datasets, params, stats, duals, progress)
    return Checkpoint(config, params, stats, duals, config.steps), log_


def check_compatible(checkpoint: Checkpoint, model: ModelConfig):
    """Raise ValueError unless ``checkpoint`` parameters fit ``model``."""
    ck = checkpoint.config.model
    if ck != model:
        raise ValueError(f"checkpoint model {ck} is incompatible with requested model {model}")
    for k, v in init_params(model, 0).items():
        if k not in checkpoint.params or checkpoint.params[k].shape != v.shape:
            raise ValueError(f"parameter {k!r} has incompatible shape for this model")


def finetune(checkpoint: Checkpoint, target: Dataset, config: TrainConfig | None = None, progress=None):
    """Warm-start from ``checkpoint`` and train on ``target`` alone.

    Multipliers stored in the checkpoint are resumed and a topology without
    any starts at zero; ``rho`` and the update cadence come from ``config``.
    A topology the checkpoint already knows keeps its normalisation stats,
    otherwise they are fitted on the target's training split.  Optimizer
    moments start fresh.
    """
    base = checkpoint.config
    config = config or replace(base, topologies=(target.case_id,))
    if config.topologies != (target.case_id,):
        config = replace(config, topologies=(target.case_id,))
    check_compatible(checkpoint, config.model)
    params = {k: ad.Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in checkpoint.params.items()}
    stats = dict(checkpoint.stats)
    if target.case_id not in stats:
        stats[target.case_id] = target.fit_stats()
    duals = checkpoint.duals.copy()
    duals.rho, duals.update_period, duals.gamma = config.rho, config.update_period, config.rho_growth
    params, log_ = _run(config, {target.case_id: target}, params, {target.case_id: stats[target.case_id]}, duals,
                        progress)
    return Checkpoint(config, params, stats, duals, checkpoint.step + config.steps), log_
