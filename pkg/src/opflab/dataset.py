"""Case/instance file formats, load perturbation, splits and feature statistics.

Case and instance JSON documents follow a subset of the OPFData layout::

    {
      "case_id": "case3", "base_mva": 100.0,
      "grid": {
        "nodes": {"bus": [[vmin, vmax, is_reference, base_kv], ...],
                  "generator": [[pmin, pmax, qmin, qmax], ...],
                  "load": [[pd, qd], ...], "shunt": [[gs, bs], ...]},
        "edges": {"ac_line": {"senders": [...], "receivers": [...],
                              "features": [[r, x, b_charging, tap, shift, s_max], ...]},
                  "transformer": {...},
                  "gen_link": {"senders": [gen, ...], "receivers": [bus, ...]},
                  "load_link": {...}, "shunt_link": {...}},
        "setpoints": {"generator_vg": [...]}
      },
      "solution": {"bus": {"vm": [...], "va": [...]},
                   "generator": {"pg": [...], "qg": [...]}}
    }

All quantities are per-unit on ``base_mva``; angles in radians. ``solution``
and ``setpoints`` are optional.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import (
    BRANCH_FEATURES,
    FEATURE_LAYOUT,
    Branch,
    Bus,
    CaseError,
    Generator,
    GridCase,
    Load,
    OperatingPoint,
    Shunt,
)

FIXTURE_DIR = Path(__file__).parent / "fixtures"


class CaseFormatError(CaseError):
    """A case file does not follow the expected schema."""


def fixture_path(name: str) -> Path:
    return FIXTURE_DIR / name


# ---------------------------------------------------------------------------
# case files


def load_case(path) -> GridCase:
    """Read a case from a JSON document or a MATPOWER ``.m`` file."""
    path = Path(path)
    if path.suffix == ".m":
        return load_matpower(path)
    with open(path) as fh:
        doc = json.load(fh)
    return case_from_dict(doc, default_id=path.stem)


def _rows(table, where, width):
    if not isinstance(table, list):
        raise CaseFormatError(f"{where}: expected a list of records")
    out = []
    for k, row in enumerate(table):
        if not isinstance(row, (list, tuple)) or len(row) != width:
            raise CaseFormatError(f"{where}[{k}]: expected {width} fields, got {row!r}")
        try:
            out.append([float(v) for v in row])
        except (TypeError, ValueError):
            raise CaseFormatError(f"{where}[{k}]: non-numeric field in {row!r}") from None
    return out


def _links(edges, rel, n_items):
    where = f"grid.edges.{rel}"
    tab = edges.get(rel, {"senders": [], "receivers": []})
    try:
        snd, rcv = list(tab["senders"]), list(tab["receivers"])
    except KeyError as e:
        raise CaseFormatError(f"{where}: missing field {e.args[0]!r}") from None
    if len(snd) != len(rcv):
        raise CaseFormatError(f"{where}: senders/receivers length mismatch")
    bus_of = {}
    for k, (s, r) in enumerate(zip(snd, rcv)):
        if not (0 <= int(s) < n_items):
            raise CaseFormatError(f"{where}.senders[{k}]: unknown component {s}")
        bus_of[int(s)] = int(r)
    if len(bus_of) != n_items:
        missing = sorted(set(range(n_items)) - set(bus_of))
        raise CaseFormatError(f"{where}: components {missing} are not linked to a bus")
    return bus_of


def case_from_dict(doc: dict, default_id: str = "case") -> GridCase:
    try:
        grid = doc["grid"]
        nodes = grid["nodes"]
    except KeyError as e:
        raise CaseFormatError(f"missing top-level field {e.args[0]!r}") from None
    edges = grid.get("edges", {})
    case_id = str(doc.get("case_id", default_id))
    base_mva = float(doc.get("base_mva", 100.0))

    bus_rows = _rows(nodes.get("bus", []), "grid.nodes.bus", len(FEATURE_LAYOUT["bus"]))
    gen_rows = _rows(nodes.get("generator", []), "grid.nodes.generator", len(FEATURE_LAYOUT["generator"]))
    load_rows = _rows(nodes.get("load", []), "grid.nodes.load", len(FEATURE_LAYOUT["load"]))
    shunt_rows = _rows(nodes.get("shunt", []), "grid.nodes.shunt", len(FEATURE_LAYOUT["shunt"]))

    buses = [Bus(k, r[0], r[1], bool(r[2]), r[3]) for k, r in enumerate(bus_rows)]
    vg = grid.get("setpoints", {}).get("generator_vg", [1.0] * len(gen_rows))
    if len(vg) != len(gen_rows):
        raise CaseFormatError("grid.setpoints.generator_vg: length does not match generator count")
    gbus = _links(edges, "gen_link", len(gen_rows))
    lbus = _links(edges, "load_link", len(load_rows))
    sbus = _links(edges, "shunt_link", len(shunt_rows))
    gens = [Generator(k, gbus[k], r[0], r[1], r[2], r[3], float(vg[k])) for k, r in enumerate(gen_rows)]
    loads = [Load(k, lbus[k], r[0], r[1]) for k, r in enumerate(load_rows)]
    shunts = [Shunt(k, sbus[k], r[0], r[1]) for k, r in enumerate(shunt_rows)]

    tagged = []
    for rel in ("ac_line", "transformer"):
        if rel not in edges:
            continue
        tab = edges[rel]
        where = f"grid.edges.{rel}"
        feats = _rows(tab.get("features", []), f"{where}.features", len(BRANCH_FEATURES))
        snd, rcv = tab.get("senders", []), tab.get("receivers", [])
        if not (len(snd) == len(rcv) == len(feats)):
            raise CaseFormatError(f"{where}: senders/receivers/features length mismatch")
        order = tab.get("branch_index", [None] * len(feats))
        for k, (s, r, f, o) in enumerate(zip(snd, rcv, feats, order)):
            if not (0 <= int(s) < len(buses) and 0 <= int(r) < len(buses)):
                raise CaseFormatError(f"{where}[{k}]: unknown bus in ({s}, {r})")
            key = (o if o is not None else len(tagged))
            tagged.append((key, int(s), int(r), f, rel == "transformer"))
    tagged.sort(key=lambda t: t[0])
    branches = [
        Branch(k, s, r, f[0], f[1], f[2], f[3], f[4], f[5], tr) for k, (_, s, r, f, tr) in enumerate(tagged)
    ]
    return GridCase(case_id, base_mva, buses, gens, loads, shunts, branches)


def case_to_dict(case: GridCase) -> dict:
    nodes = {
        "bus": [[b.vmin, b.vmax, int(b.is_reference), b.base_kv] for b in case.buses],
        "generator": [[g.pmin, g.pmax, g.qmin, g.qmax] for g in case.generators],
        "load": [[ld.pd, ld.qd] for ld in case.loads],
        "shunt": [[s.gs, s.bs] for s in case.shunts],
    }
    edges = {}
    for rel, tr in (("ac_line", False), ("transformer", True)):
        brs = [b for b in case.branches if b.is_transformer == tr]
        edges[rel] = {
            "senders": [b.from_bus for b in brs],
            "receivers": [b.to_bus for b in brs],
            "features": [[getattr(b, n) for n in BRANCH_FEATURES] for b in brs],
            "branch_index": [b.index for b in brs],
        }
    for rel, items in (("gen_link", case.generators), ("load_link", case.loads), ("shunt_link", case.shunts)):
        edges[rel] = {"senders": [i.index for i in items], "receivers": [i.bus for i in items]}
    return {
        "case_id": case.case_id,
        "base_mva": case.base_mva,
        "grid": {"nodes": nodes, "edges": edges, "setpoints": {"generator_vg": [g.vg for g in case.generators]}},
    }


def save_case(case: GridCase, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(case_to_dict(case), fh, indent=1)
    return path


_MATRIX_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.S)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;")


def parse_matpower(text: str) -> dict:
    """Numeric tables (``bus``, ``gen``, ``branch``, ...) and ``baseMVA`` from MATPOWER text."""
    text = "\n".join(line.split("%", 1)[0] for line in text.splitlines())
    out = {}
    m = _SCALAR_RE.search(text)
    if not m:
        raise CaseFormatError("mpc.baseMVA not found")
    out["baseMVA"] = float(m.group(1))
    for name, body in _MATRIX_RE.findall(text):
        rows = [r.split() for r in re.split(r"[;\n]", body) if r.strip()]
        if not rows:
            out[name] = np.zeros((0, 0))
            continue
        width = len(rows[0])
        for k, r in enumerate(rows):
            if len(r) != width:
                raise CaseFormatError(f"mpc.{name}[{k}]: expected {width} columns, got {len(r)}")
        out[name] = np.array(rows, dtype=float)
    for name in ("bus", "gen", "branch"):
        if name not in out:
            raise CaseFormatError(f"mpc.{name} table not found")
    return out


def load_matpower(path) -> GridCase:
    """Translate a MATPOWER/pglib case (MW, MVAr, degrees) to a per-unit GridCase.

    Out-of-service generators and branches are dropped; every bus with
    nonzero Pd/Qd becomes one load and every bus with nonzero Gs/Bs one shunt.
    """
    path = Path(path)
    mpc = parse_matpower(path.read_text())
    base = mpc["baseMVA"]
    bus, gen, branch = mpc["bus"], mpc["gen"], mpc["branch"]
    number = {int(n): k for k, n in enumerate(bus[:, 0])}

    def idx(n, where):
        try:
            return number[int(n)]
        except KeyError:
            raise CaseFormatError(f"{where}: unknown bus {int(n)}") from None

    buses = [
        Bus(k, float(row[12]), float(row[11]), int(row[1]) == 3, float(row[9]))
        for k, row in enumerate(bus)
    ]
    loads, shunts = [], []
    for k, row in enumerate(bus):
        if row[2] != 0 or row[3] != 0:
            loads.append(Load(len(loads), k, row[2] / base, row[3] / base))
        if row[4] != 0 or row[5] != 0:
            shunts.append(Shunt(len(shunts), k, row[4] / base, row[5] / base))
    gens = []
    for k, row in enumerate(gen):
        if row[7] <= 0:
            continue
        gens.append(
            Generator(len(gens), idx(row[0], f"mpc.gen[{k}]"), row[9] / base, row[8] / base,
                      row[4] / base, row[3] / base, float(row[5]))
        )
    branches = []
    for k, row in enumerate(branch):
        if row[10] <= 0:
            continue
        ratio, angle = float(row[8]), float(row[9])
        branches.append(
            Branch(
                len(branches), idx(row[0], f"mpc.branch[{k}]"), idx(row[1], f"mpc.branch[{k}]"),
                float(row[2]), float(row[3]), float(row[4]),
                ratio if ratio != 0 else 1.0, np.deg2rad(angle), row[5] / base,
                ratio != 0 or angle != 0,
            )
        )
    return GridCase(path.stem, base, buses, gens, loads, shunts, branches)


# ---------------------------------------------------------------------------
# instances


@dataclass(frozen=True)
class Instance:
    case_id: str
    load_profile: np.ndarray  # (n_load, 2) per-unit (pd, qd)
    label: OperatingPoint
    seed: object = None

    @property
    def total_load(self) -> float:
        return float(np.sum(self.load_profile[:, 0]))


def instance_to_dict(case: GridCase, inst: Instance) -> dict:
    doc = case_to_dict(case.with_loads(inst.load_profile))
    doc["solution"] = {
        "bus": {"vm": inst.label.vm.tolist(), "va": inst.label.va.tolist()},
        "generator": {"pg": inst.label.pg.tolist(), "qg": inst.label.qg.tolist()},
    }
    doc["metadata"] = {"total_load": inst.total_load, "seed": inst.seed}
    return doc


def instance_from_dict(doc: dict) -> tuple[GridCase, Instance]:
    case = case_from_dict(doc)
    try:
        sol = doc["solution"]
        label = OperatingPoint(sol["bus"]["vm"], sol["bus"]["va"], sol["generator"]["pg"], sol["generator"]["qg"])
    except KeyError as e:
        raise CaseFormatError(f"solution: missing field {e.args[0]!r}") from None
    label.check(case)
    profile = np.array([[ld.pd, ld.qd] for ld in case.loads]).reshape(case.n_load, 2)
    seed = doc.get("metadata", {}).get("seed")
    return case, Instance(case.case_id, profile, label, seed)


def perturb_loads(case: GridCase, rng_seed, lo: float = 0.8, hi: float = 1.2) -> np.ndarray:
    """Scale each load's (pd, qd) by an independent factor drawn uniformly in [lo, hi].

    The same factor multiplies pd and qd so the power factor is preserved.
    """
    if not (0 < lo <= hi):
        raise ValueError(f"perturbation range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
    nominal = np.array([[ld.pd, ld.qd] for ld in case.loads], dtype=float).reshape(case.n_load, 2)
    rng = np.random.default_rng(rng_seed)
    factors = rng.uniform(lo, hi, size=case.n_load)
    return nominal * factors[:, None]


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitManifest:
    train: tuple
    val: tuple
    test: tuple
    seed: int

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("split index lists overlap")

    @property
    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test), "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["train"]), tuple(d["val"]), tuple(d["test"]), int(d["seed"]))


def make_splits(n_instances: int, ratios=(0.9, 0.05, 0.05), seed: int = 0) -> SplitManifest:
    """Deterministic shuffled train/val/test split of ``range(n_instances)``."""
    if n_instances < 3:
        raise ValueError(f"need at least 3 instances to split, got {n_instances}")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n_instances)
    n_val = max(1, int(round(n_instances * ratios[1])))
    n_test = max(1, int(round(n_instances * ratios[2])))
    n_train = n_instances - n_val - n_test
    return SplitManifest(
        tuple(int(i) for i in perm[:n_train]),
        tuple(int(i) for i in perm[n_train:n_train + n_val]),
        tuple(int(i) for i in perm[n_train + n_val:]),
        seed,
    )


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x) -> "FeatureStats":
        x = np.asarray(x, dtype=float)
        width = x.shape[-1]
        x = x.reshape(-1, width)
        if x.shape[0] == 0:
            return cls(np.zeros(width), np.ones(width))
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def _check_width(x, stats):
    if np.shape(x)[-1] != stats.mean.shape[0]:
        raise ValueError(f"feature width {np.shape(x)[-1]} does not match statistics width {stats.mean.shape[0]}")


def normalize(x, stats: FeatureStats):
    _check_width(x, stats)
    return (np.asarray(x) - stats.mean) / stats.std


def denormalize(z, stats: FeatureStats):
    _check_width(z, stats)
    return np.asarray(z) * stats.std + stats.mean


@dataclass(frozen=True)
class NormStats:
    """Per-topology statistics, fitted on the training split only.

    ``nodes`` and ``edges`` are keyed by node type / relation name; ``bus_target``
    covers (vm, va) and ``gen_target`` covers (pg, qg).
    """

    nodes: dict
    edges: dict
    bus_target: FeatureStats
    gen_target: FeatureStats

    def to_dict(self):
        return {
            "nodes": {k: v.to_dict() for k, v in self.nodes.items()},
            "edges": {k: v.to_dict() for k, v in self.edges.items()},
            "bus_target": self.bus_target.to_dict(),
            "gen_target": self.gen_target.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            {k: FeatureStats.from_dict(v) for k, v in d["nodes"].items()},
            {k: FeatureStats.from_dict(v) for k, v in d["edges"].items()},
            FeatureStats.from_dict(d["bus_target"]),
            FeatureStats.from_dict(d["gen_target"]),
        )


# ---------------------------------------------------------------------------
# dataset container and persistence


@dataclass
class Dataset:
    """Labeled instances of one topology plus its split manifest."""

    case: GridCase
    instances: list
    splits: SplitManifest
    generation: dict = field(default_factory=dict)

    @property
    def case_id(self) -> str:
        return self.case.case_id

    def __len__(self):
        return len(self.instances)

    def arrays(self, indices=None) -> dict:
        """Stacked loads/targets for ``indices`` (all instances by default)."""
        cached = self.__dict__.get("_arrays")
        if cached is None:
            insts = self.instances
            cached = {
                "loads": np.stack([i.load_profile for i in insts]).reshape(len(insts), self.case.n_load, 2),
                "vm": np.stack([i.label.vm for i in insts]),
                "va": np.stack([i.label.va for i in insts]),
                "pg": np.stack([i.label.pg for i in insts]).reshape(len(insts), self.case.n_gen),
                "qg": np.stack([i.label.qg for i in insts]).reshape(len(insts), self.case.n_gen),
            }
            cached["total_load"] = cached["loads"][:, :, 0].sum(axis=1)
            self.__dict__["_arrays"] = cached
        if indices is None:
            return cached
        idx = np.asarray(indices, dtype=int)
        return {k: v[idx] for k, v in cached.items()}

    def fit_stats(self) -> NormStats:
        """Normalization statistics from the training split."""
        from .grid import build_hetero_graph

        g = build_hetero_graph(self.case)
        tr = self.arrays(self.splits.train)
        n_tr = len(self.splits.train)
        nodes = {}
        for t, feats in g.nodes.items():
            if t == "load":
                nodes[t] = FeatureStats.fit(tr["loads"])
            else:
                nodes[t] = FeatureStats.fit(np.broadcast_to(feats, (max(n_tr, 1),) + feats.shape))
        edges = {}
        for rel in ("ac_line", "transformer"):
            edges[rel] = FeatureStats.fit(g.edges[("bus", rel, "bus")].features)
        bus_t = np.stack([tr["vm"], tr["va"]], axis=-1)
        gen_t = np.stack([tr["pg"], tr["qg"]], axis=-1)
        return NormStats(nodes, edges, FeatureStats.fit(bus_t), FeatureStats.fit(gen_t))

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for k, inst in enumerate(self.instances):
            name = f"instance_{k:06d}.json"
            with open(directory / name, "w") as fh:
                json.dump(instance_to_dict(self.case, inst), fh, indent=1)
            files.append(name)
        manifest = {
            "case_id": self.case_id,
            "base_case": case_to_dict(self.case),
            "seed": self.splits.seed,
            "splits": self.splits.to_dict(),
            "generation": self.generation,
            "files": files,
        }
        with open(directory / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1)
        return directory

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        with open(directory / "manifest.json") as fh:
            manifest = json.load(fh)
        case = case_from_dict(manifest["base_case"])
        instances = []
        for name in manifest["files"]:
            with open(directory / name) as fh:
                _, inst = instance_from_dict(json.load(fh))
            instances.append(inst)
        return cls(case, instances, SplitManifest.from_dict(manifest["splits"]), manifest.get("generation", {}))
