import numpy as np
import pytest

from opflab import autodiff as ad
from opflab.grid import Branch, Bus, Generator, GridCase, Load, OperatingPoint, build_admittance
from opflab.powerflow import nr_solve
from opflab.residuals import (
    FAMILIES,
    ResidualReport,
    constraint_counts,
    differentiable_residuals,
    equality_residuals,
    family_norms,
    h_vector,
    inequality_violations,
    r_vector,
    report_arrays,
    residual_report,
    traced_r_h,
    violation_summary,
)

from conftest import random_point, two_bus


def _complex_oracle(case, vm, va, pg, qg):
    """Net injection mismatch from S_i = V_i conj(sum_j Y_ij V_j), computed densely."""
    Y = build_admittance(case).toarray()
    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    a = case.arrays
    gen = np.zeros(case.n_bus, dtype=complex)
    np.add.at(gen, a.gen_bus, pg + 1j * qg)
    load = np.zeros(case.n_bus, dtype=complex)
    np.add.at(load, a.load_bus, a.pd + 1j * a.qd)
    return gen - load - S


def _flow_oracle(br, vf, vt):
    """|S| at both ends through an ideal transformer followed by a pi section."""
    t = br.tap * np.exp(1j * br.shift)
    ys = 1.0 / complex(br.r, br.x)
    vf_inner = vf / t
    i_series = ys * (vf_inner - vt)
    i_from_inner = i_series + 0.5j * br.b_charging * vf_inner
    i_to = -i_series + 0.5j * br.b_charging * vt
    return abs(vf_inner * np.conj(i_from_inner)), abs(vt * np.conj(i_to))


def test_zero_injection_flat_network_has_zero_residuals():
    case = GridCase(
        "flat", 100.0, (Bus(0, 0.9, 1.1, True), Bus(1, 0.9, 1.1)),
        (Generator(0, 0, 0.0, 1.0, -1.0, 1.0),), (Load(0, 1, 0.0, 0.0),), (),
        (Branch(0, 0, 1, 0.01, 0.1),),
    )
    p, q, ref = equality_residuals(case, OperatingPoint(np.ones(2), np.zeros(2), [0.0], [0.0]))
    assert np.all(p == 0) and np.all(q == 0) and ref == 0


def test_two_bus_matches_complex_power_oracle(rng):
    case = two_bus(r=0.02, x=0.08, b=0.05, tap=1.03, shift=0.04)
    for _ in range(20):
        vm, va, pg, qg = random_point(case, rng)
        p, q, ref = equality_residuals(case, OperatingPoint(vm, va, pg, qg))
        mis = _complex_oracle(case, vm, va, pg, qg)
        np.testing.assert_allclose(p, mis.real, atol=1e-12)
        np.testing.assert_allclose(q, mis.imag, atol=1e-12)
        assert ref == va[case.ref_bus]


def test_converged_power_flow_has_tiny_residuals(case9):
    res = nr_solve(case9)
    assert res.converged
    p, q, _ = equality_residuals(case9, res.point)
    assert max(np.abs(p).max(), np.abs(q).max()) < 1e-8


def test_point_inside_boxes_has_no_violation(case3):
    pt = OperatingPoint(np.ones(3), np.zeros(3), [0.5, 0.5], [0.0, 0.0])
    for v in inequality_violations(case3, pt):
        assert np.all(v == 0)


def test_single_voltage_excursion(case3):
    vm = np.ones(3)
    vm[2] = case3.buses[2].vmax + 0.05
    vm_viol, pg_viol, qg_viol, _ = inequality_violations(case3, OperatingPoint(vm, np.zeros(3), [0.5, 0.5], [0, 0]))
    np.testing.assert_allclose(vm_viol, [0.0, 0.0, 0.05], atol=1e-15)
    assert not pg_viol.any() and not qg_viol.any()


def test_generator_box_both_sides(case3):
    g = case3.generators
    pg = [g[0].pmin - 0.3, g[1].pmax + 0.2]
    qg = [g[0].qmax + 0.1, g[1].qmin - 0.4]
    _, pv, qv, _ = inequality_violations(case3, OperatingPoint(np.ones(3), np.zeros(3), pg, qg))
    np.testing.assert_allclose(pv, [0.3, 0.2], atol=1e-12)
    np.testing.assert_allclose(qv, [0.1, 0.4], atol=1e-12)


def test_high_load_line_violation_matches_flow_oracle(case3):
    res = nr_solve(case3, load_profile=1.9 * np.column_stack([case3.arrays.pd, case3.arrays.qd]))
    assert res.converged
    pt = res.point
    line = inequality_violations(case3, pt)[3]
    V = pt.vm * np.exp(1j * pt.va)
    expected = []
    for br in case3.branches:
        sf, st = _flow_oracle(br, V[br.from_bus], V[br.to_bus])
        expected.append(max(sf - br.s_max, st - br.s_max, 0.0) if br.s_max > 0 else 0.0)
    assert max(expected) > 0.05
    np.testing.assert_allclose(line, expected, atol=1e-12)


def test_flow_oracle_with_tap_and_shift(rng):
    case = two_bus(r=0.01, x=0.12, b=0.08, tap=0.97, shift=-0.05, s_max=0.3)
    for _ in range(10):
        vm, va, pg, qg = random_point(case, rng)
        line = inequality_violations(case, OperatingPoint(vm, va, pg, qg))[3]
        sf, st = _flow_oracle(case.branches[0], vm[0] * np.exp(1j * va[0]), vm[1] * np.exp(1j * va[1]))
        assert line[0] == pytest.approx(max(sf - 0.3, st - 0.3, 0.0), abs=1e-12)


def test_unlimited_branch_contributes_nothing():
    case = two_bus(s_max=0.0)
    line = inequality_violations(case, OperatingPoint([1.1, 0.9], [0.0, -0.8], [5.0], [0.0]))[3]
    assert line.tolist() == [0.0]
    assert constraint_counts(case) == (5, 2 * 2 + 4)


def test_summary_zero_report():
    z = np.zeros(3)
    rep = ResidualReport(z, z, 0.0, z, np.zeros(2), np.zeros(2), z)
    assert violation_summary(rep, 3).total == 0.0


@pytest.mark.parametrize("family", ["p_balance", "vm", "line"])
def test_single_violation_family_norm(family):
    n = 9
    arrays = {f: np.zeros(n) for f in ("p_balance", "q_balance", "vm_viol", "pg_viol", "qg_viol", "line_viol")}
    key = {"p_balance": "p_balance", "vm": "vm_viol", "line": "line_viol"}[family]
    arrays[key][4] = 3.0
    rep = ResidualReport(arrays["p_balance"], arrays["q_balance"], 0.0, arrays["vm_viol"],
                         arrays["pg_viol"], arrays["qg_viol"], arrays["line_viol"])
    s = violation_summary(rep, n)
    assert getattr(s, family) == pytest.approx(1.0, abs=1e-15)
    assert s.total == pytest.approx(1.0, abs=1e-15)


def test_summary_uses_absolute_equality_residuals_and_total_is_sum(rng):
    rep = ResidualReport(*(rng.normal(size=4) for _ in range(2)), -0.7, *(np.abs(rng.normal(size=4)) for _ in range(4)))
    s = violation_summary(rep, 4)
    assert s.ref_angle == pytest.approx(0.7 / 2)
    assert s.total == pytest.approx(sum(s.to_dict()[f] for f in FAMILIES))
    assert all(s.total >= getattr(s, f) >= 0 for f in FAMILIES)


def test_summary_rejects_empty_topology():
    z = np.zeros(1)
    with pytest.raises(ValueError):
        violation_summary(ResidualReport(z, z, 0.0, z, z, z, z), 0)


def _duplicate(case):
    """Two copies of ``case`` tied by an unlimited, charging-free line between their reference buses."""
    n, g, ld, m = case.n_bus, case.n_gen, case.n_load, case.n_branch
    buses = list(case.buses) + [Bus(b.index + n, b.vmin, b.vmax, False, b.base_kv) for b in case.buses]
    gens = list(case.generators) + [Generator(x.index + g, x.bus + n, x.pmin, x.pmax, x.qmin, x.qmax, x.vg)
                                    for x in case.generators]
    loads = list(case.loads) + [Load(x.index + ld, x.bus + n, x.pd, x.qd) for x in case.loads]
    branches = list(case.branches) + [
        Branch(b.index + m, b.from_bus + n, b.to_bus + n, b.r, b.x, b.b_charging, b.tap, b.shift, b.s_max)
        for b in case.branches
    ]
    branches.append(Branch(2 * m, case.ref_bus, case.ref_bus + n, 0.0, 0.1))
    return GridCase(case.case_id + "x2", case.base_mva, buses, gens, loads, (), branches)


def test_duplicated_network_scale_check(case3, rng):
    big = _duplicate(case3)
    for _ in range(5):
        vm, va, pg, qg = random_point(case3, rng)
        vm = vm * 1.08
        va = va - va[case3.ref_bus]
        small = report_arrays(case3, vm, va, pg, qg, case3.arrays.pd, case3.arrays.qd)
        dbl = report_arrays(big, *(np.concatenate([x, x]) for x in (vm, va, pg, qg)), big.arrays.pd, big.arrays.qd)
        raw_small = family_norms(small, 1)
        raw_big = family_norms(dbl, 1)
        norm_small = family_norms(small, case3.n_bus)
        norm_big = family_norms(dbl, big.n_bus)
        for f in ("p_balance", "q_balance", "vm", "pg", "qg", "line"):
            assert raw_big[f] == pytest.approx(np.sqrt(2) * raw_small[f], rel=1e-12, abs=1e-14)
            assert norm_big[f] == pytest.approx(norm_small[f], rel=1e-12, abs=1e-14)


def _permute(case, perm):
    """Relabel buses so that new bus k is old bus perm[k]."""
    new_of = np.argsort(perm)
    buses = [Bus(k, case.buses[o].vmin, case.buses[o].vmax, case.buses[o].is_reference, case.buses[o].base_kv)
             for k, o in enumerate(perm)]
    gens = [Generator(x.index, int(new_of[x.bus]), x.pmin, x.pmax, x.qmin, x.qmax, x.vg) for x in case.generators]
    loads = [Load(x.index, int(new_of[x.bus]), x.pd, x.qd) for x in case.loads]
    branches = [Branch(b.index, int(new_of[b.from_bus]), int(new_of[b.to_bus]), b.r, b.x, b.b_charging, b.tap,
                       b.shift, b.s_max, b.is_transformer) for b in case.branches]
    return GridCase(case.case_id + "p", case.base_mva, buses, gens, loads, (), branches)


def test_bus_permutation_equivariance(case9, rng):
    perm = rng.permutation(case9.n_bus)
    pc = _permute(case9, perm)
    vm, va, pg, qg = random_point(case9, rng)
    a = residual_report(case9, OperatingPoint(vm, va, pg, qg))
    b = residual_report(pc, OperatingPoint(vm[perm], va[perm], pg, qg))
    for f in ("p_balance", "q_balance", "vm_viol"):
        np.testing.assert_allclose(getattr(b, f), getattr(a, f)[perm], atol=1e-12)
    np.testing.assert_allclose(b.line_viol, a.line_viol, atol=1e-12)
    sa, sb = violation_summary(a, 9).to_dict(), violation_summary(b, 9).to_dict()
    for k in sa:
        assert sb[k] == pytest.approx(sa[k], rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("name", ["case2", "case3", "case9"])
def test_dual_path_equivalence(name, request, rng):
    case = request.getfixturevalue(name)
    pts = random_point(case, rng, batch=100)
    pts = (pts[0] * rng.uniform(0.9, 1.1, pts[0].shape),) + pts[1:]
    pd = case.arrays.pd * rng.uniform(0.8, 1.2, (100, case.n_load))
    qd = case.arrays.qd * rng.uniform(0.8, 1.2, (100, case.n_load))
    pure = report_arrays(case, *pts, pd, qd)
    traced = differentiable_residuals(case, *(ad.Tensor(x) for x in pts), pd, qd)
    for f in ("p_balance", "q_balance", "ref_angle", "vm_viol", "pg_viol", "qg_viol", "line_viol"):
        np.testing.assert_allclose(getattr(traced, f).data, getattr(pure, f), rtol=0, atol=1e-12)
    r, h = traced_r_h(case, *(ad.Tensor(x) for x in pts), pd, qd)
    np.testing.assert_allclose(r.data, r_vector(case, *pts, pd, qd), atol=1e-12)
    np.testing.assert_allclose(h.data, h_vector(case, *pts), atol=1e-12)


def test_balance_gradient_matches_finite_differences(case9, rng):
    vm, va, pg, qg = random_point(case9, rng)
    a = case9.arrays
    eps = 1e-6
    for i in (0, 4, 7):
        va_t = ad.Tensor(va.copy(), requires_grad=True)
        with ad.Tape() as tape:
            rep = differentiable_residuals(case9, ad.Tensor(vm), va_t, ad.Tensor(pg), ad.Tensor(qg))
            out = ad.slice_(rep.p_balance, i)
        grad = ad.backward(tape, out, [va_t])[va_t]
        for j in range(case9.n_bus):
            up, dn = va.copy(), va.copy()
            up[j] += eps
            dn[j] -= eps
            fd = (report_arrays(case9, vm, up, pg, qg, a.pd, a.qd).p_balance[i]
                  - report_arrays(case9, vm, dn, pg, qg, a.pd, a.qd).p_balance[i]) / (2 * eps)
            assert grad[j] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_satisfied_inequality_has_zero_gradient(case3):
    vm = ad.Tensor(np.ones(3), requires_grad=True)
    pg = ad.Tensor(np.array([0.5, 0.5]), requires_grad=True)
    qg = ad.Tensor(np.zeros(2), requires_grad=True)
    va = ad.Tensor(np.array([0.0, -0.01, -0.02]), requires_grad=True)
    with ad.Tape() as tape:
        rep = differentiable_residuals(case3, vm, va, pg, qg)
        total = ad.sum_(rep.vm_viol) + ad.sum_(rep.pg_viol) + ad.sum_(rep.qg_viol) + ad.sum_(rep.line_viol)
    assert total.item() == 0.0
    grads = ad.backward(tape, total, [vm, va, pg, qg])
    for t in (vm, va, pg, qg):
        assert np.all(grads[t] == 0.0)
