"""Newton-Raphson AC power flow and feasible-label generation."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, Instance, make_splits, perturb_loads
from .grid import GridCase, OperatingPoint, build_admittance
from .residuals import equality_arrays, inequality_violations

log = logging.getLogger(__name__)

__all__ = [
    "OperatingPoint",
    "PowerFlowResult",
    "PowerFlowError",
    "InsufficientCapacity",
    "Rejection",
    "dispatch_heuristic",
    "nr_solve",
    "generate_labeled_instance",
    "build_dataset",
]


class PowerFlowError(RuntimeError):
    pass


class InsufficientCapacity(ValueError):
    pass


@dataclass(frozen=True)
class PowerFlowResult:
    point: OperatingPoint
    converged: bool
    iterations: int
    max_mismatch: float
    history: tuple = ()  # max mismatch before each Newton step and at exit


@dataclass(frozen=True)
class Rejection:
    reason: str
    seed: object = None


def dispatch_heuristic(case: GridCase, load_profile=None) -> np.ndarray:
    """Split total demand across generators in proportion to their headroom.

    pg_i = pmin_i + (pmax_i - pmin_i) / sum(pmax - pmin) * (total_pd - sum(pmin)),
    clamped to [pmin, pmax].  Network losses are left to the slack bus.
    """
    a = case.arrays
    pd = a.pd if load_profile is None else np.asarray(load_profile, dtype=float).reshape(-1, 2)[:, 0]
    total = float(np.sum(pd))
    if case.n_gen == 0:
        raise InsufficientCapacity("insufficient capacity: case has no generators")
    if total > a.pmax.sum():
        raise InsufficientCapacity(
            f"insufficient capacity: demand {total:.4f} p.u. exceeds total pmax {a.pmax.sum():.4f} p.u."
        )
    head = a.pmax - a.pmin
    room = head.sum()
    share = head / room if room > 0 else np.full(case.n_gen, 1.0 / case.n_gen)
    pg = a.pmin + share * (total - a.pmin.sum())
    return np.clip(pg, a.pmin, a.pmax)


def _bus_types(case: GridCase):
    ref = case.ref_bus
    gen_buses = sorted({g.bus for g in case.generators} - {ref})
    pv = np.array(gen_buses, dtype=int)
    pq = np.array([i for i in range(case.n_bus) if i != ref and i not in set(gen_buses)], dtype=int)
    return ref, pv, pq


def _voltage_setpoints(case: GridCase) -> dict:
    out = {}
    for g in case.generators:
        out.setdefault(g.bus, g.vg)
    return out


def nr_solve(
    case: GridCase,
    load_profile=None,
    pg_setpoints=None,
    tol: float = 1e-8,
    max_iter: int = 50,
    init: OperatingPoint | None = None,
) -> PowerFlowResult:
    """Solve the polar power-flow equations by Newton-Raphson.

    Reference bus: fixed vm (generator setpoint) and va = 0.  Generator buses
    are PV with vm held at the setpoint; all other buses are PQ.  The mismatch
    covers P at PV+PQ buses and Q at PQ buses.  Returns ``converged=False``
    rather than raising when ``max_iter`` is exhausted.
    """
    a = case.arrays
    n = case.n_bus
    profile = (
        np.column_stack([a.pd, a.qd]) if load_profile is None else np.asarray(load_profile, float).reshape(-1, 2)
    )
    pd, qd = profile[:, 0], profile[:, 1]
    pg = dispatch_heuristic(case, profile) if pg_setpoints is None else np.asarray(pg_setpoints, dtype=float)
    ref, pv, pq = _bus_types(case)
    pvpq = np.concatenate([pv, pq]).astype(int)

    Y = build_admittance(case).toarray()
    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    np.add.at(p_spec, a.gen_bus, pg)
    np.add.at(p_spec, a.load_bus, -pd)
    np.add.at(q_spec, a.load_bus, -qd)

    if init is None:
        vm = np.ones(n)
        va = np.zeros(n)
    else:
        vm = np.array(init.vm, dtype=float)
        va = np.array(init.va, dtype=float)
        va = va - va[ref]
    for bus, v in _voltage_setpoints(case).items():
        vm[bus] = v
    va[ref] = 0.0

    def mismatch(vm, va):
        V = vm * np.exp(1j * va)
        S = V * np.conj(Y @ V)
        return np.concatenate([S.real[pvpq] - p_spec[pvpq], S.imag[pq] - q_spec[pq]]), V

    F, V = mismatch(vm, va)
    err = float(np.max(np.abs(F))) if F.size else 0.0
    history = [err]
    it = 0
    while err > tol and it < max_iter:
        Ibus = Y @ V
        vnorm = V / np.abs(V)
        dS_dvm = np.diag(V) @ np.conj(Y @ np.diag(vnorm)) + np.diag(np.conj(Ibus) * vnorm)
        dS_dva = 1j * np.diag(V) @ np.conj(np.diag(Ibus) - Y @ np.diag(V))
        J = np.block([
            [dS_dva.real[np.ix_(pvpq, pvpq)], dS_dvm.real[np.ix_(pvpq, pq)]],
            [dS_dva.imag[np.ix_(pq, pvpq)], dS_dvm.imag[np.ix_(pq, pq)]],
        ])
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError as e:
            raise PowerFlowError(f"{case.case_id}: singular Jacobian at iteration {it}") from e
        va[pvpq] += dx[: len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        it += 1
        F, V = mismatch(vm, va)
        err = float(np.max(np.abs(F))) if F.size else 0.0
        history.append(err)
        if not np.isfinite(err):
            break

    converged = bool(np.isfinite(err) and err <= tol)
    S = V * np.conj(Y @ V)
    pg_out, qg_out = _recover_injections(case, S, pg, pd, qd, ref)
    point = OperatingPoint(vm.copy(), va.copy(), pg_out, qg_out)
    return PowerFlowResult(point, converged, it, err, tuple(history))


def _recover_injections(case, S, pg_set, pd, qd, ref):
    """Slack active power and all generator reactive power from the solved injections."""
    a = case.arrays
    pg = pg_set.astype(float).copy()
    qg = np.zeros(case.n_gen)
    load_p = np.zeros(case.n_bus)
    load_q = np.zeros(case.n_bus)
    np.add.at(load_p, a.load_bus, pd)
    np.add.at(load_q, a.load_bus, qd)
    for bus in sorted(set(a.gen_bus.tolist())):
        idx = np.flatnonzero(a.gen_bus == bus)
        q_need = S.imag[bus] + load_q[bus]
        span = a.qmax[idx] - a.qmin[idx]
        w = span / span.sum() if span.sum() > 0 else np.full(len(idx), 1.0 / len(idx))
        qg[idx] = w * q_need
        if bus == ref:
            p_need = S.real[bus] + load_p[bus]
            pg[idx] += (p_need - pg[idx].sum()) / len(idx)
    return pg, qg


def generate_labeled_instance(
    case: GridCase,
    seed,
    perturb_range=(0.8, 1.2),
    limit_policy: str = "strict",
    tol: float = 1e-8,
):
    """Perturb loads, dispatch, solve; return an Instance or a Rejection.

    ``limit_policy="strict"`` rejects any positive inequality violation;
    ``"relaxed"`` tolerates thermal (line) violations only.
    """
    if limit_policy not in ("strict", "relaxed"):
        raise ValueError(f"unknown limit_policy {limit_policy!r}")
    lo, hi = perturb_range
    profile = perturb_loads(case, seed, lo, hi)
    try:
        pg = dispatch_heuristic(case, profile)
    except InsufficientCapacity:
        return Rejection("insufficient capacity", seed)
    try:
        res = nr_solve(case, profile, pg, tol=tol)
    except PowerFlowError:
        return Rejection("singular jacobian", seed)
    if not res.converged:
        return Rejection("no convergence", seed)
    pt = res.point
    p, q, ref = equality_arrays(case, pt.vm, pt.va, pt.pg, pt.qg, profile[:, 0], profile[:, 1])
    eq_norm = np.sqrt(np.sum(p ** 2) + np.sum(q ** 2) + ref ** 2) / np.sqrt(case.n_bus)
    if not eq_norm < 1e-6:
        return Rejection("equality check failed", seed)
    vm_v, pg_v, qg_v, line_v = inequality_violations(case, pt)
    for name, v in (("vm", vm_v), ("pg", pg_v), ("qg", qg_v)):
        if np.any(v > 0):
            return Rejection(f"{name} limit", seed)
    if limit_policy == "strict" and np.any(line_v > 0):
        return Rejection("line limit", seed)
    return Instance(case.case_id, profile, pt, seed)


def build_dataset(
    case: GridCase,
    count: int,
    seed: int = 0,
    perturb_range=(0.8, 1.2),
    limit_policy: str = "strict",
    ratios=(0.9, 0.05, 0.05),
    max_attempts: int | None = None,
) -> Dataset:
    """Draw instances with per-attempt seeds ``[seed, attempt]`` until ``count`` are accepted."""
    max_attempts = max_attempts or 20 * count + 100
    instances, reasons = [], Counter()
    attempt = 0
    while len(instances) < count and attempt < max_attempts:
        out = generate_labeled_instance(case, [int(seed), attempt], perturb_range, limit_policy)
        attempt += 1
        if isinstance(out, Rejection):
            reasons[out.reason] += 1
        else:
            instances.append(out)
    if len(instances) < count:
        raise RuntimeError(
            f"{case.case_id}: only {len(instances)}/{count} instances accepted after {attempt} attempts "
            f"(rejections: {dict(reasons)})"
        )
    log.info("%s: %d accepted / %d attempts, rejections %s", case.case_id, count, attempt, dict(reasons))
    generation = {
        "seed": int(seed),
        "count": int(count),
        "perturb_range": [float(perturb_range[0]), float(perturb_range[1])],
        "limit_policy": limit_policy,
        "attempts": attempt,
        "rejections": dict(reasons),
        "ratios": [float(r) for r in ratios],
    }
    return Dataset(case, instances, make_splits(count, ratios, seed), generation)
