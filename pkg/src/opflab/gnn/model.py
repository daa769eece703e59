"""Encoder -> message passing -> per-type decoder models.

A minibatch of instances from one topology is laid out as a single disjoint
graph (instance-major rows), so every layer runs once per batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..dataset import NormStats, normalize
from ..grid import (
    EDGE_FEATURE_WIDTH,
    FEATURE_LAYOUT,
    HOMO_FEATURE_WIDTH,
    NODE_TYPES,
    RELATIONS,
    GridCase,
    build_hetero_graph,
    to_homogeneous,
)
from . import layers as L

ARCHITECTURES = ("gcn", "gat", "gin", "graph_transformer", "heterognn", "hgt")
HETERO_ARCHS = ("heterognn", "hgt")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "hgt"
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    leaky_slope: float = 0.2
    epsilon_learnable: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be >= 1")
        if self.heads < 1 or self.hidden % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide hidden ({self.hidden})")

    @property
    def hetero(self) -> bool:
        return self.architecture in HETERO_ARCHS

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def rel_name(key) -> str:
    return ".".join(key)


def _glorot(rng, fan_in, fan_out, shape=None):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Fresh parameters named ``<arch>/<layer>/<role>[/<type-or-relation>]``."""
    rng = np.random.default_rng(seed)
    arch, d, H = config.architecture, config.hidden, config.heads
    p = {}

    def add(name, arr):
        p[f"{arch}/{name}"] = np.asarray(arr, dtype=float)

    if config.hetero:
        for t in NODE_TYPES:
            f = len(FEATURE_LAYOUT[t])
            add(f"in/W/{t}", _glorot(rng, f, d))
            add(f"in/b/{t}", np.zeros(d))
    else:
        add("in/W", _glorot(rng, HOMO_FEATURE_WIDTH, d))
        add("in/b", np.zeros(d))

    for l in range(config.layers):
        if arch == "gcn":
            add(f"{l}/W", _glorot(rng, d, d))
            add(f"{l}/b", np.zeros(d))
        elif arch == "gat":
            add(f"{l}/W", _glorot(rng, d, d))
            add(f"{l}/a_src", _glorot(rng, d // H, 1, (H, d // H)))
            add(f"{l}/a_dst", _glorot(rng, d // H, 1, (H, d // H)))
        elif arch == "gin":
            add(f"{l}/W1", _glorot(rng, d, d))
            add(f"{l}/b1", np.zeros(d))
            add(f"{l}/W2", _glorot(rng, d, d))
            add(f"{l}/b2", np.zeros(d))
            add(f"{l}/eps", np.zeros(()))
        elif arch == "graph_transformer":
            for role in ("WQ", "WK", "WV"):
                add(f"{l}/{role}", _glorot(rng, d, d))
        elif arch == "heterognn":
            for t in NODE_TYPES:
                add(f"{l}/W_type/{t}", _glorot(rng, d, d))
            for key in RELATIONS:
                w = d + EDGE_FEATURE_WIDTH[key[1]]
                add(f"{l}/W_rel/{rel_name(key)}", _glorot(rng, w, d))
        elif arch == "hgt":
            for t in NODE_TYPES:
                for role in ("WQ", "WK", "WV", "WO"):
                    add(f"{l}/{role}/{t}", _glorot(rng, d, d))
            for key in RELATIONS:
                add(f"{l}/WA/{rel_name(key)}", np.stack([np.eye(d // H)] * H))

    for head in ("bus", "generator"):
        add(f"out/W/{head}", _glorot(rng, d, 2))
        add(f"out/b/{head}", np.zeros(2))

    out = {}
    for name, arr in p.items():
        trainable = not (name.endswith("/eps") and not config.epsilon_learnable)
        out[name] = ad.Tensor(arr.astype(dtype), requires_grad=trainable, name=name)
    return out


def cast_params(params: dict, dtype) -> dict:
    """Copies of ``params`` in ``dtype`` (untracked); used for reduced-precision evaluation."""
    return {k: ad.Tensor(v.data.astype(dtype), name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    case: GridCase
    size: int
    view: str  # "hetero" | "homo"
    pd: np.ndarray  # (B, n_load)
    qd: np.ndarray
    dtype: object = np.float64
    # hetero view
    x: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)
    # homo view
    xh: np.ndarray | None = None
    src: np.ndarray | None = None
    dst: np.ndarray | None = None
    mask: np.ndarray | None = None
    bus_rows: np.ndarray | None = None
    gen_rows: np.ndarray | None = None


class TopologyContext:
    """Graph views and normalised constant features of one topology."""

    def __init__(self, case: GridCase, stats: NormStats):
        self.case = case
        self.stats = stats
        self.hetero = build_hetero_graph(case)
        self.homo = to_homogeneous(self.hetero)
        self.node_feats = {
            t: normalize(self.hetero.nodes[t], stats.nodes[t]) if self.hetero.nodes[t].shape[0] else
            self.hetero.nodes[t]
            for t in NODE_TYPES
        }
        self.edge_feats = {}
        for key, es in self.hetero.edges.items():
            rel = key[1]
            f = es.features
            if rel in stats.edges and f.shape[0]:
                f = normalize(f, stats.edges[rel])
            self.edge_feats[key] = f
        self.ref_mask = np.ones(case.n_bus)
        self.ref_mask[case.ref_bus] = 0.0
        base = self.homo.x.copy()
        k = len(NODE_TYPES)
        for t in NODE_TYPES:
            rows = self.homo.rows(t)
            w = self.node_feats[t].shape[1]
            base[rows, k:k + w] = self.node_feats[t]
        self.homo_x = base
        self.homo_mask = L.attention_mask(self.homo.num_nodes, self.homo.src, self.homo.dst)
        self._struct = {}

    def _structure(self, B, view):
        key = (B, view)
        if key in self._struct:
            return self._struct[key]
        if view == "hetero":
            counts = self.hetero.node_counts()
            edges = {}
            for k, es in self.hetero.edges.items():
                ns, nd = counts[k[0]], counts[k[2]]
                off = np.arange(B)[:, None]
                src = (es.src[None, :] + off * ns).reshape(-1)
                dst = (es.dst[None, :] + off * nd).reshape(-1)
                feat = np.tile(self.edge_feats[k], (B, 1))
                edges[k] = (src, dst, feat)
            x = {t: np.tile(self.node_feats[t], (B, 1)) for t in NODE_TYPES if t != "load"}
            s = {"edges": edges, "x": x}
        else:
            N = self.homo.num_nodes
            off = (np.arange(B) * N)[:, None]
            s = {
                "src": (self.homo.src[None, :] + off).reshape(-1),
                "dst": (self.homo.dst[None, :] + off).reshape(-1),
                "bus_rows": (self.homo.rows("bus")[None, :] + off).reshape(-1),
                "gen_rows": (self.homo.rows("generator")[None, :] + off).reshape(-1),
                "x": np.tile(self.homo_x, (B, 1, 1)),
                "load_rows": self.homo.rows("load"),
            }
        self._struct[key] = s
        return s

    def batch(self, loads, view: str, dtype=np.float64) -> Batch:
        """Batch for load profiles ``loads`` of shape (B, n_load, 2)."""
        loads = np.asarray(loads, dtype=float).reshape(-1, self.case.n_load, 2)
        B = loads.shape[0]
        s = self._structure(B, view)
        zl = normalize(loads, self.stats.nodes["load"]) if self.case.n_load else loads
        b = Batch(self.case, B, view, loads[:, :, 0], loads[:, :, 1], dtype)
        if view == "hetero":
            b.x = {t: v.astype(dtype) for t, v in s["x"].items()}
            b.x["load"] = zl.reshape(B * self.case.n_load, 2).astype(dtype)
            b.edges = {k: (src, dst, f.astype(dtype)) for k, (src, dst, f) in s["edges"].items()}
        elif view == "homo":
            x = s["x"].copy()
            k = len(NODE_TYPES)
            x[:, s["load_rows"], k:k + 2] = zl
            b.xh = x.reshape(B * self.homo.num_nodes, -1).astype(dtype)
            b.src, b.dst = s["src"], s["dst"]
            b.mask = self.homo_mask.astype(dtype)
            b.bus_rows, b.gen_rows = s["bus_rows"], s["gen_rows"]
        else:
            raise ValueError(f"unknown graph view {view!r}")
        return b


# ---------------------------------------------------------------------------
# forward


@dataclass
class Prediction:
    z_bus: ad.Tensor  # (B, n_bus, 2) raw normalised head output
    z_gen: ad.Tensor
    vm: ad.Tensor  # (B, n_bus) physical units
    va: ad.Tensor
    pg: ad.Tensor  # (B, n_gen)
    qg: ad.Tensor
    activations: list  # per layer, (B, hidden) mean over each instance's nodes


def _param_view(params, arch, l, role):
    prefix = f"{arch}/{l}/{role}/"
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _rel_view(params, arch, l, role):
    return {tuple(k.split(".")): v for k, v in _param_view(params, arch, l, role).items()}


def _pool_hetero(h, B):
    total = None
    count = 0
    for t, x in h.items():
        n = x.shape[0] // B
        if n == 0:
            continue
        s = x.data.reshape(B, n, -1).sum(axis=1)
        total = s if total is None else total + s
        count += n
    return total / count


def model_forward(config: ModelConfig, params: dict, batch: Batch, stats: NormStats) -> Prediction:
    """Run the model on a batch and decode an operating point per instance.

    The reference-bus angle is forced to zero after denormalisation.
    """
    want = "hetero" if config.hetero else "homo"
    if batch.view != want:
        raise ValueError(f"{config.architecture} needs the {want} graph view, got {batch.view!r}")
    arch, H = config.architecture, config.heads
    B, case = batch.size, batch.case
    P = lambda name: params[f"{arch}/{name}"]
    acts = []
    relu = ad.relu

    if config.hetero:
        h = {}
        for t in NODE_TYPES:
            x = ad.Tensor(batch.x[t])
            h[t] = relu(x @ P(f"in/W/{t}") + P(f"in/b/{t}"))
        for l in range(config.layers):
            if arch == "heterognn":
                new = L.heterognn_layer(
                    h, batch.edges, _param_view(params, arch, l, "W_type"), _rel_view(params, arch, l, "W_rel"), relu
                )
                h = {t: h[t] + new[t] for t in h} if config.residual else new
            else:
                h = L.hgt_layer(
                    h, batch.edges,
                    *(_param_view(params, arch, l, r) for r in ("WQ", "WK", "WV")),
                    _rel_view(params, arch, l, "WA"), _param_view(params, arch, l, "WO"),
                    heads=H, act=relu,
                )
            acts.append(_pool_hetero(h, B))
        h_bus, h_gen = h["bus"], h["generator"]
    else:
        N = batch.xh.shape[0]
        h = relu(ad.Tensor(batch.xh) @ P("in/W") + P("in/b"))
        src, dst = batch.src, batch.dst
        for l in range(config.layers):
            if arch == "gcn":
                new = L.gcn_layer(h, src, dst, N, P(f"{l}/W"), P(f"{l}/b"), relu)
            elif arch == "gat":
                new = L.gat_layer(h, src, dst, N, P(f"{l}/W"), P(f"{l}/a_src"), P(f"{l}/a_dst"), H,
                                  config.leaky_slope, relu)
            elif arch == "gin":
                new = relu(L.gin_layer(h, src, dst, N, P(f"{l}/eps"), P(f"{l}/W1"), P(f"{l}/b1"),
                                       P(f"{l}/W2"), P(f"{l}/b2")))
            else:
                new = L.graph_transformer_layer(h, batch.mask, B, P(f"{l}/WQ"), P(f"{l}/WK"), P(f"{l}/WV"), H, relu)
            h = h + new if config.residual else new
            acts.append(h.data.reshape(B, N // B, -1).mean(axis=1))
        h_bus, h_gen = ad.gather(h, batch.bus_rows), ad.gather(h, batch.gen_rows)

    z_bus = ad.reshape(h_bus @ P("out/W/bus") + P("out/b/bus"), (B, case.n_bus, 2))
    z_gen = ad.reshape(h_gen @ P("out/W/generator") + P("out/b/generator"), (B, case.n_gen, 2))
    y_bus = z_bus * stats.bus_target.std + stats.bus_target.mean
    y_gen = z_gen * stats.gen_target.std + stats.gen_target.mean
    vm = y_bus[:, :, 0]
    va = y_bus[:, :, 1] * _ref_mask(case)
    return Prediction(z_bus, z_gen, vm, va, y_gen[:, :, 0], y_gen[:, :, 1], acts)


def _ref_mask(case):
    m = np.ones(case.n_bus)
    m[case.ref_bus] = 0.0
    return m
