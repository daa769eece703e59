"""Equality residuals and inequality violations of an AC operating point.

Two code paths compute the same quantities: plain numpy (evaluation,
label checking) and :mod:`opflab.autodiff` tensors (training losses).  Both
accept leading batch dimensions on every per-bus / per-generator array.

Constraint vectors used by the Lagrangian losses::

    r = [p_balance (n_bus), q_balance (n_bus), ref_angle (1)]
    h = [vmin - vm, vm - vmax, pmin - pg, pg - pmax, qmin - qg, qg - qmax,
         |S_from| - s_max, |S_to| - s_max]      # last two over limited branches
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .grid import GridCase, OperatingPoint, build_admittance

FAMILIES = ("p_balance", "q_balance", "ref_angle", "vm", "pg", "qg", "line")


@dataclass(frozen=True)
class _Structure:
    """Constant matrices shared by both paths."""

    y_row: np.ndarray
    y_col: np.ndarray
    g: np.ndarray
    b: np.ndarray
    bus_of_entry: np.ndarray  # (nnz, n_bus) one-hot of y_row
    gen_inc: np.ndarray  # (n_gen, n_bus)
    load_inc: np.ndarray  # (n_load, n_bus)
    ref: int
    f_bus: np.ndarray
    t_bus: np.ndarray
    limited: np.ndarray  # indices of branches with s_max > 0
    n_branch: int
    # branch admittance parts for limited branches
    gff: np.ndarray
    bff: np.ndarray
    gft: np.ndarray
    bft: np.ndarray
    gtf: np.ndarray
    btf: np.ndarray
    gtt: np.ndarray
    btt: np.ndarray
    s_max: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    pmin: np.ndarray
    pmax: np.ndarray
    qmin: np.ndarray
    qmax: np.ndarray


_CACHE: dict = {}


def structure(case: GridCase) -> _Structure:
    key = id(case)
    hit = _CACHE.get(key)
    if hit is not None and hit[0] is case:
        return hit[1]
    Y = build_admittance(case).tocoo()
    order = np.lexsort((Y.col, Y.row))
    rows, cols, vals = Y.row[order], Y.col[order], Y.data[order]
    n = case.n_bus
    a = case.arrays

    def onehot(idx, width):
        m = np.zeros((len(idx), width))
        m[np.arange(len(idx)), idx] = 1.0
        return m

    lim = np.flatnonzero(a.s_max > 0)
    s = _Structure(
        y_row=rows.astype(int), y_col=cols.astype(int), g=vals.real.copy(), b=vals.imag.copy(),
        bus_of_entry=onehot(rows, n), gen_inc=onehot(a.gen_bus, n), load_inc=onehot(a.load_bus, n),
        ref=case.ref_bus, f_bus=a.f_bus, t_bus=a.t_bus, limited=lim, n_branch=case.n_branch,
        gff=a.yff.real[lim], bff=a.yff.imag[lim], gft=a.yft.real[lim], bft=a.yft.imag[lim],
        gtf=a.ytf.real[lim], btf=a.ytf.imag[lim], gtt=a.ytt.real[lim], btt=a.ytt.imag[lim],
        s_max=a.s_max[lim], vmin=a.vmin, vmax=a.vmax, pmin=a.pmin, pmax=a.pmax, qmin=a.qmin, qmax=a.qmax,
    )
    if len(_CACHE) > 64:
        _CACHE.clear()
    _CACHE[key] = (case, s)
    return s


def constraint_counts(case: GridCase) -> tuple[int, int]:
    """(number of equality constraints, number of inequality constraints)."""
    n_lim = int(np.count_nonzero(case.arrays.s_max > 0))
    return 2 * case.n_bus + 1, 2 * case.n_bus + 4 * case.n_gen + 2 * n_lim


# ---------------------------------------------------------------------------
# report types


@dataclass(frozen=True)
class ResidualReport:
    p_balance: object
    q_balance: object
    ref_angle: object
    vm_viol: object
    pg_viol: object
    qg_viol: object
    line_viol: object


@dataclass(frozen=True)
class ViolationSummary:
    p_balance: float
    q_balance: float
    ref_angle: float
    vm: float
    pg: float
    qg: float
    line: float

    @property
    def total(self) -> float:
        return sum(getattr(self, f) for f in FAMILIES)

    def to_dict(self) -> dict:
        d = {f: float(getattr(self, f)) for f in FAMILIES}
        d["total"] = float(self.total)
        return d


# ---------------------------------------------------------------------------
# numpy path


def _injections(s: _Structure, vm, va):
    theta = va[..., s.y_row] - va[..., s.y_col]
    vv = vm[..., s.y_row] * vm[..., s.y_col]
    c, sn = np.cos(theta), np.sin(theta)
    p = (vv * (s.g * c + s.b * sn)) @ s.bus_of_entry
    q = (vv * (s.g * sn - s.b * c)) @ s.bus_of_entry
    return p, q


def equality_arrays(case, vm, va, pg, qg, pd, qd):
    """(p_balance, q_balance, ref_angle) on arrays with optional batch dims."""
    s = structure(case)
    p, q = _injections(s, vm, va)
    p_bal = pg @ s.gen_inc - pd @ s.load_inc - p
    q_bal = qg @ s.gen_inc - qd @ s.load_inc - q
    return p_bal, q_bal, va[..., s.ref]


def _flows(s: _Structure, vm, va):
    f, t = s.f_bus[s.limited], s.t_bus[s.limited]
    vf, vt = vm[..., f], vm[..., t]
    th = va[..., f] - va[..., t]
    c, sn = np.cos(th), np.sin(th)
    vv = vf * vt
    pf = s.gff * vf * vf + vv * (s.gft * c + s.bft * sn)
    qf = -s.bff * vf * vf + vv * (s.gft * sn - s.bft * c)
    pt = s.gtt * vt * vt + vv * (s.gtf * c - s.btf * sn)
    qt = -s.btt * vt * vt + vv * (-s.gtf * sn - s.btf * c)
    return np.sqrt(pf * pf + qf * qf), np.sqrt(pt * pt + qt * qt)


def inequality_arrays(case, vm, va, pg, qg):
    """Raw h blocks: dict of (lower-side, upper-side) pairs plus line ends."""
    s = structure(case)
    sf, st = _flows(s, vm, va)
    return {
        "vm": (s.vmin - vm, vm - s.vmax),
        "pg": (s.pmin - pg, pg - s.pmax),
        "qg": (s.qmin - qg, qg - s.qmax),
        "line": (sf - s.s_max, st - s.s_max),
    }


def h_vector(case, vm, va, pg, qg):
    blocks = inequality_arrays(case, vm, va, pg, qg)
    return np.concatenate([x for fam in ("vm", "pg", "qg", "line") for x in blocks[fam]], axis=-1)


def r_vector(case, vm, va, pg, qg, pd, qd):
    p, q, ref = equality_arrays(case, vm, va, pg, qg, pd, qd)
    return np.concatenate([p, q, ref[..., None]], axis=-1)


def _loads(case, pd, qd):
    if pd is None:
        pd = case.arrays.pd
    if qd is None:
        qd = case.arrays.qd
    return np.asarray(pd, dtype=float), np.asarray(qd, dtype=float)


def equality_residuals(case: GridCase, point: OperatingPoint, pd=None, qd=None):
    """Per-bus active/reactive balance and the reference-bus angle.

    Loads default to the case's own (pd, qd).
    """
    point.check(case)
    pd, qd = _loads(case, pd, qd)
    return equality_arrays(case, point.vm, point.va, point.pg, point.qg, pd, qd)


def inequality_violations(case: GridCase, point: OperatingPoint):
    """(vm_viol, pg_viol, qg_viol, line_viol), each clipped at zero."""
    point.check(case)
    return _violations(case, point.vm, point.va, point.pg, point.qg)


def _violations(case, vm, va, pg, qg):
    s = structure(case)
    blocks = inequality_arrays(case, vm, va, pg, qg)
    out = [np.maximum(np.maximum(lo, hi), 0.0) for lo, hi in (blocks[k] for k in ("vm", "pg", "qg"))]
    sf, st = blocks["line"]
    lim_viol = np.maximum(np.maximum(sf, st), 0.0)
    line = np.zeros(lim_viol.shape[:-1] + (s.n_branch,))
    line[..., s.limited] = lim_viol
    return (*out, line)


def residual_report(case: GridCase, point: OperatingPoint, pd=None, qd=None) -> ResidualReport:
    pd, qd = _loads(case, pd, qd)
    return report_arrays(case, point.vm, point.va, point.pg, point.qg, pd, qd)


def report_arrays(case, vm, va, pg, qg, pd, qd) -> ResidualReport:
    p, q, ref = equality_arrays(case, vm, va, pg, qg, pd, qd)
    return ResidualReport(p, q, ref, *_violations(case, vm, va, pg, qg))


def family_norms(report: ResidualReport, n_bus: int) -> dict:
    """Per-family L2 norm / sqrt(n_bus); works on batched reports (norm over last axis)."""
    if n_bus <= 0:
        raise ValueError("violation_summary: n_bus must be positive")
    scale = 1.0 / np.sqrt(n_bus)
    vals = {
        "p_balance": report.p_balance, "q_balance": report.q_balance,
        "ref_angle": np.asarray(report.ref_angle)[..., None],
        "vm": report.vm_viol, "pg": report.pg_viol, "qg": report.qg_viol, "line": report.line_viol,
    }
    return {k: np.sqrt(np.sum(np.square(v), axis=-1)) * scale for k, v in vals.items()}


def violation_summary(report: ResidualReport, n_bus: int) -> ViolationSummary:
    norms = family_norms(report, n_bus)
    return ViolationSummary(**{k: float(v) for k, v in norms.items()})


def mean_violation_summary(report: ResidualReport, n_bus: int) -> ViolationSummary:
    """Summary averaged over the leading batch axis of a batched report."""
    norms = family_norms(report, n_bus)
    return ViolationSummary(**{k: float(np.mean(v)) for k, v in norms.items()})


# ---------------------------------------------------------------------------
# traced path


def _c(x, like):
    return ad.astensor(np.asarray(x), like)


def traced_equality(case, vm, va, pg, qg, pd, qd):
    s = structure(case)
    theta = ad.gather(va, s.y_row, axis=-1) - ad.gather(va, s.y_col, axis=-1)
    vv = ad.gather(vm, s.y_row, axis=-1) * ad.gather(vm, s.y_col, axis=-1)
    c, sn = ad.cos(theta), ad.sin(theta)
    g, b = _c(s.g, vm), _c(s.b, vm)
    inc = _c(s.bus_of_entry, vm)
    p = (vv * (g * c + b * sn)) @ inc
    q = (vv * (g * sn - b * c)) @ inc
    gi, li = _c(s.gen_inc, vm), _c(s.load_inc, vm)
    p_bal = pg @ gi - _c(pd, vm) @ li - p
    q_bal = qg @ gi - _c(qd, vm) @ li - q
    ref = ad.gather(va, np.array([s.ref]), axis=-1)
    return p_bal, q_bal, ref


def traced_inequality(case, vm, va, pg, qg):
    s = structure(case)
    blocks = {
        "vm": (_c(s.vmin, vm) - vm, vm - _c(s.vmax, vm)),
        "pg": (_c(s.pmin, vm) - pg, pg - _c(s.pmax, vm)),
        "qg": (_c(s.qmin, vm) - qg, qg - _c(s.qmax, vm)),
    }
    f, t = s.f_bus[s.limited], s.t_bus[s.limited]
    vf, vt = ad.gather(vm, f, axis=-1), ad.gather(vm, t, axis=-1)
    th = ad.gather(va, f, axis=-1) - ad.gather(va, t, axis=-1)
    c, sn = ad.cos(th), ad.sin(th)
    vv = vf * vt
    k = {name: _c(getattr(s, name), vm) for name in ("gff", "bff", "gft", "bft", "gtf", "btf", "gtt", "btt")}
    pf = k["gff"] * vf * vf + vv * (k["gft"] * c + k["bft"] * sn)
    qf = -k["bff"] * vf * vf + vv * (k["gft"] * sn - k["bft"] * c)
    pt = k["gtt"] * vt * vt + vv * (k["gtf"] * c - k["btf"] * sn)
    qt = -k["btt"] * vt * vt + vv * (-k["gtf"] * sn - k["btf"] * c)
    smax = _c(s.s_max, vm)
    blocks["line"] = (ad.sqrt(pf * pf + qf * qf) - smax, ad.sqrt(pt * pt + qt * qt) - smax)
    return blocks


def traced_r_h(case, vm, va, pg, qg, pd, qd):
    """Constraint vectors (r, h) as tensors with the same layout as r_vector/h_vector."""
    p, q, ref = traced_equality(case, vm, va, pg, qg, pd, qd)
    blocks = traced_inequality(case, vm, va, pg, qg)
    r = ad.concat([p, q, ref], axis=-1)
    h = ad.concat([x for fam in ("vm", "pg", "qg", "line") for x in blocks[fam]], axis=-1)
    return r, h


def differentiable_residuals(case, vm, va, pg, qg, pd=None, qd=None) -> ResidualReport:
    """Traced counterpart of :func:`report_arrays`; fields are Tensors."""
    pd, qd = _loads(case, pd, qd)
    s = structure(case)
    p, q, ref = traced_equality(case, vm, va, pg, qg, pd, qd)
    blocks = traced_inequality(case, vm, va, pg, qg)
    hinge = ad.max_with_zero
    viol = [hinge(lo) + hinge(hi) for lo, hi in (blocks[k] for k in ("vm", "pg", "qg"))]
    a, b = blocks["line"]
    ra = hinge(a)
    worst = ra + hinge(b - ra)  # == max(a, b, 0)
    batch = worst.shape[:-1]
    spread = np.zeros((len(s.limited), s.n_branch))
    spread[np.arange(len(s.limited)), s.limited] = 1.0
    line = worst @ _c(spread, vm) if len(s.limited) else ad.Tensor(np.zeros(batch + (s.n_branch,), dtype=vm.dtype))
    return ResidualReport(p, q, ad.reshape(ref, ref.shape[:-1]), *viol, line)
