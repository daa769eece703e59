"""Power network description, admittance assembly and graph views."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

NODE_TYPES = ("bus", "generator", "load", "shunt")

# Per-type feature layouts shared by the JSON schema and the graph views.
BUS_FEATURES = ("vmin", "vmax", "is_reference", "base_kv")
GEN_FEATURES = ("pmin", "pmax", "qmin", "qmax")
LOAD_FEATURES = ("pd", "qd")
SHUNT_FEATURES = ("gs", "bs")
BRANCH_FEATURES = ("r", "x", "b_charging", "tap", "shift", "s_max")

FEATURE_LAYOUT = {
    "bus": BUS_FEATURES,
    "generator": GEN_FEATURES,
    "load": LOAD_FEATURES,
    "shunt": SHUNT_FEATURES,
}

# (src_type, relation, dst_type); every forward triple is paired with its reverse.
RELATIONS = (
    ("bus", "ac_line", "bus"),
    ("bus", "transformer", "bus"),
    ("generator", "gen_link", "bus"),
    ("bus", "gen_link", "generator"),
    ("load", "load_link", "bus"),
    ("bus", "load_link", "load"),
    ("shunt", "shunt_link", "bus"),
    ("bus", "shunt_link", "shunt"),
)
EDGE_FEATURE_WIDTH = {"ac_line": 6, "transformer": 6, "gen_link": 0, "load_link": 0, "shunt_link": 0}
HOMO_FEATURE_WIDTH = len(NODE_TYPES) + max(len(v) for v in FEATURE_LAYOUT.values())
HOMO_EDGE_WIDTH = max(EDGE_FEATURE_WIDTH.values())


class CaseError(ValueError):
    """Raised when a network description violates its invariants."""


@dataclass(frozen=True)
class Bus:
    index: int
    vmin: float
    vmax: float
    is_reference: bool = False
    base_kv: float = 1.0


@dataclass(frozen=True)
class Generator:
    index: int
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    vg: float = 1.0  # voltage setpoint held at the generator's bus


@dataclass(frozen=True)
class Load:
    index: int
    bus: int
    pd: float
    qd: float


@dataclass(frozen=True)
class Shunt:
    index: int
    bus: int
    gs: float
    bs: float


@dataclass(frozen=True)
class Branch:
    index: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap: float = 1.0
    shift: float = 0.0
    s_max: float = 0.0
    is_transformer: bool = False


@dataclass(frozen=True)
class GridCase:
    case_id: str
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    branches: tuple[Branch, ...] = ()

    def __post_init__(self):
        for name in ("buses", "generators", "loads", "shunts", "branches"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        n = len(self.buses)
        if n == 0:
            raise CaseError(f"{self.case_id}: case has no buses")
        for k, b in enumerate(self.buses):
            if b.index != k:
                raise CaseError(f"{self.case_id}: bus record {k} has index {b.index}")
            if not (0 < b.vmin <= b.vmax):
                raise CaseError(f"{self.case_id}: bus {k} voltage limits invalid ({b.vmin}, {b.vmax})")
        n_ref = sum(b.is_reference for b in self.buses)
        if n_ref != 1:
            raise CaseError(f"{self.case_id}: expected exactly one reference bus, found {n_ref}")
        for kind, items in (("generator", self.generators), ("load", self.loads), ("shunt", self.shunts)):
            for k, item in enumerate(items):
                if item.index != k:
                    raise CaseError(f"{self.case_id}: {kind} record {k} has index {item.index}")
                if not (0 <= item.bus < n):
                    raise CaseError(f"{self.case_id}: {kind} {k} references unknown bus {item.bus}")
        for g in self.generators:
            if g.pmin > g.pmax or g.qmin > g.qmax:
                raise CaseError(f"{self.case_id}: generator {g.index} has min > max limits")
        for k, br in enumerate(self.branches):
            if br.index != k:
                raise CaseError(f"{self.case_id}: branch record {k} has index {br.index}")
            if not (0 <= br.from_bus < n and 0 <= br.to_bus < n):
                raise CaseError(f"{self.case_id}: branch {k} references unknown bus")
            if br.x == 0:
                raise CaseError(f"{self.case_id}: branch {k} ({br.from_bus}->{br.to_bus}) has zero reactance")
            if br.tap <= 0:
                raise CaseError(f"{self.case_id}: branch {k} has non-positive tap {br.tap}")
            if br.s_max < 0:
                raise CaseError(f"{self.case_id}: branch {k} has negative s_max")
        if n > 1 and not _connected(n, [(b.from_bus, b.to_bus) for b in self.branches]):
            raise CaseError(f"{self.case_id}: branch graph is disconnected")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @cached_property
    def ref_bus(self) -> int:
        return next(b.index for b in self.buses if b.is_reference)

    @cached_property
    def arrays(self) -> "CaseArrays":
        return CaseArrays.from_case(self)

    def with_loads(self, profile) -> "GridCase":
        """Copy of the case with load (pd, qd) replaced by ``profile`` rows."""
        profile = np.asarray(profile, dtype=float).reshape(self.n_load, 2)
        loads = tuple(
            Load(ld.index, ld.bus, float(p), float(q)) for ld, (p, q) in zip(self.loads, profile)
        )
        return GridCase(self.case_id, self.base_mva, self.buses, self.generators, loads, self.shunts, self.branches)


def _connected(n, pairs):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in pairs:
        parent[find(i)] = find(j)
    return len({find(i) for i in range(n)}) == 1


@dataclass(frozen=True)
class CaseArrays:
    """Vectorised view of a case used by the numeric kernels."""

    vmin: np.ndarray
    vmax: np.ndarray
    gen_bus: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray
    vg: np.ndarray
    load_bus: np.ndarray
    pd: np.ndarray
    qd: np.ndarray
    f_bus: np.ndarray
    t_bus: np.ndarray
    s_max: np.ndarray
    # branch two-port admittances, from/to side
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray

    @classmethod
    def from_case(cls, case: GridCase) -> "CaseArrays":
        gens, loads, brs = case.generators, case.loads, case.branches
        f = lambda items, attr, dt=float: np.array([getattr(i, attr) for i in items], dtype=dt)
        yff, yft, ytf, ytt = branch_admittances(case)
        return cls(
            vmin=f(case.buses, "vmin"), vmax=f(case.buses, "vmax"),
            gen_bus=f(gens, "bus", int), pmin=f(gens, "pmin"), pmax=f(gens, "pmax"),
            qmin=f(gens, "qmin"), qmax=f(gens, "qmax"), vg=f(gens, "vg"),
            load_bus=f(loads, "bus", int), pd=f(loads, "pd"), qd=f(loads, "qd"),
            f_bus=f(brs, "from_bus", int), t_bus=f(brs, "to_bus", int), s_max=f(brs, "s_max"),
            yff=yff, yft=yft, ytf=ytf, ytt=ytt,
        )


def branch_admittances(case: GridCase):
    """Pi-model two-port admittances (yff, yft, ytf, ytt) for every branch.

    Tap ratio and phase shift sit on the from side.
    """
    m = case.n_branch
    out = [np.zeros(m, dtype=complex) for _ in range(4)]
    for k, br in enumerate(case.branches):
        z = complex(br.r, br.x)
        if z == 0:
            raise CaseError(f"{case.case_id}: branch {k} ({br.from_bus}->{br.to_bus}) has zero impedance")
        ys = 1.0 / z
        t = br.tap * np.exp(1j * br.shift)
        ytt = ys + 0.5j * br.b_charging
        out[0][k] = ytt / (br.tap ** 2)
        out[1][k] = -ys / np.conj(t)
        out[2][k] = -ys / t
        out[3][k] = ytt
    return tuple(out)


def build_admittance(case: GridCase) -> sp.csr_matrix:
    """Bus admittance matrix Y (complex, n_bus x n_bus, CSR)."""
    n = case.n_bus
    yff, yft, ytf, ytt = branch_admittances(case)
    f = np.array([b.from_bus for b in case.branches], dtype=int)
    t = np.array([b.to_bus for b in case.branches], dtype=int)
    sh_bus = np.array([s.bus for s in case.shunts], dtype=int)
    ysh = np.array([complex(s.gs, s.bs) for s in case.shunts], dtype=complex)
    rows = np.concatenate([f, f, t, t, sh_bus])
    cols = np.concatenate([f, t, f, t, sh_bus])
    vals = np.concatenate([yff, yft, ytf, ytt, ysh])
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex).tocsr()
    Y.sum_duplicates()
    return Y


@dataclass(frozen=True)
class OperatingPoint:
    """Voltages per bus and injections per generator, all per-unit / radians."""

    vm: np.ndarray
    va: np.ndarray
    pg: np.ndarray
    qg: np.ndarray

    def __post_init__(self):
        for name in ("vm", "va", "pg", "qg"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    def check(self, case: GridCase):
        if self.vm.shape != (case.n_bus,) or self.va.shape != (case.n_bus,):
            raise ValueError(f"bus vectors must have length {case.n_bus}")
        if self.pg.shape != (case.n_gen,) or self.qg.shape != (case.n_gen,):
            raise ValueError(f"generator vectors must have length {case.n_gen}")
        return self

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.vm, self.va, self.pg, self.qg])


# ---------------------------------------------------------------------------
# graph views


@dataclass(frozen=True)
class EdgeSet:
    src: np.ndarray
    dst: np.ndarray
    features: np.ndarray  # (n_edges, width)

    def __len__(self):
        return len(self.src)


@dataclass(frozen=True)
class HeteroGraph:
    nodes: dict  # node type -> (n, f) features
    edges: dict  # (src_type, relation, dst_type) -> EdgeSet
    case_id: str = ""

    def num_nodes(self, node_type: str) -> int:
        return self.nodes[node_type].shape[0]

    def node_counts(self) -> dict:
        return {t: self.num_nodes(t) for t in NODE_TYPES}

    def edge_counts(self) -> dict:
        """Edge totals per relation name, both directions summed."""
        counts = {}
        for (_, rel, _), es in self.edges.items():
            counts[rel] = counts.get(rel, 0) + len(es)
        return counts


@dataclass(frozen=True)
class HomoGraph:
    x: np.ndarray  # (N, HOMO_FEATURE_WIDTH)
    src: np.ndarray
    dst: np.ndarray
    edge_attr: np.ndarray  # (E, HOMO_EDGE_WIDTH)
    node_type: np.ndarray  # (N,) index into NODE_TYPES
    offsets: dict  # node type -> first row in x
    counts: dict  # node type -> number of rows
    case_id: str = ""

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    def rows(self, node_type: str) -> np.ndarray:
        o = self.offsets[node_type]
        return np.arange(o, o + self.counts[node_type])


def node_features(case: GridCase) -> dict:
    """Raw per-type feature matrices following FEATURE_LAYOUT."""
    def mat(items, names):
        return np.array([[float(getattr(i, n)) for n in names] for i in items], dtype=float).reshape(
            len(items), len(names)
        )

    return {
        "bus": mat(case.buses, BUS_FEATURES),
        "generator": mat(case.generators, GEN_FEATURES),
        "load": mat(case.loads, LOAD_FEATURES),
        "shunt": mat(case.shunts, SHUNT_FEATURES),
    }


def build_hetero_graph(case: GridCase) -> HeteroGraph:
    nodes = node_features(case)
    edges = {}
    for rel, want_tr in (("ac_line", False), ("transformer", True)):
        brs = [b for b in case.branches if b.is_transformer == want_tr]
        f = np.array([b.from_bus for b in brs], dtype=int)
        t = np.array([b.to_bus for b in brs], dtype=int)
        feat = np.array([[float(getattr(b, n)) for n in BRANCH_FEATURES] for b in brs], dtype=float).reshape(-1, 6)
        edges[("bus", rel, "bus")] = EdgeSet(np.concatenate([f, t]), np.concatenate([t, f]), np.vstack([feat, feat]))
    for ntype, rel, items in (
        ("generator", "gen_link", case.generators),
        ("load", "load_link", case.loads),
        ("shunt", "shunt_link", case.shunts),
    ):
        idx = np.arange(len(items), dtype=int)
        bus = np.array([i.bus for i in items], dtype=int)
        empty = np.zeros((len(items), 0))
        edges[(ntype, rel, "bus")] = EdgeSet(idx, bus, empty)
        edges[("bus", rel, ntype)] = EdgeSet(bus.copy(), idx.copy(), empty.copy())
    return HeteroGraph(nodes=nodes, edges=edges, case_id=case.case_id)


def to_homogeneous(g: HeteroGraph) -> HomoGraph:
    """Flatten typed nodes (bus, generator, load, shunt order) and all relations."""
    offsets, counts, blocks, types = {}, {}, [], []
    start = 0
    width = HOMO_FEATURE_WIDTH
    for k, t in enumerate(NODE_TYPES):
        feats = g.nodes[t]
        n = feats.shape[0]
        block = np.zeros((n, width))
        block[:, k] = 1.0
        block[:, len(NODE_TYPES): len(NODE_TYPES) + feats.shape[1]] = feats
        blocks.append(block)
        types.append(np.full(n, k, dtype=int))
        offsets[t], counts[t] = start, n
        start += n
    src, dst, attr = [], [], []
    for (st, _, dt), es in g.edges.items():
        src.append(es.src + offsets[st])
        dst.append(es.dst + offsets[dt])
        a = np.zeros((len(es), HOMO_EDGE_WIDTH))
        a[:, : es.features.shape[1]] = es.features
        attr.append(a)
    return HomoGraph(
        x=np.vstack(blocks),
        src=np.concatenate(src).astype(int),
        dst=np.concatenate(dst).astype(int),
        edge_attr=np.vstack(attr),
        node_type=np.concatenate(types),
        offsets=offsets,
        counts=counts,
        case_id=g.case_id,
    )


def node_degrees(g: HomoGraph):
    """Per-node degree over the (bidirectional) edge list, and degree / max degree.

    Each undirected connection is stored once per direction, so the degree is
    the count of edges ending at the node.
    """
    if len(g.dst) == 0:
        raise ValueError("node_degrees: graph has no edges")
    deg = np.bincount(g.dst, minlength=g.num_nodes)
    return deg, deg / deg.max()
