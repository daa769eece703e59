"""
Power flow and constraint residuals on the 9-bus case
=====================================================

Solve the base case with Newton-Raphson, check the solution through the
residual engine, then stress the loads until limits start to bind.
"""

import numpy as np

from opflab.dataset import fixture_path, load_case, perturb_loads
from opflab.powerflow import build_dataset, dispatch_heuristic, nr_solve
from opflab.residuals import residual_report, violation_summary

case = load_case(fixture_path("case9.m"))
print(f"{case.case_id}: {case.n_bus} buses, {case.n_gen} generators, {case.n_branch} branches")

# %%
# Newton-Raphson at nominal load.  The mismatch history shows the quadratic tail.
res = nr_solve(case)
print("converged:", res.converged, "iterations:", res.iterations)
print("mismatch history:", " ".join(f"{m:.1e}" for m in res.history))

# the residual engine recomputes the balance equations independently
summary = violation_summary(residual_report(case, res.point), case.n_bus)
for family, value in summary.to_dict().items():
    print(f"  {family:10s} {value:.3e}")

# %%
# Scale every load up.  The dispatch heuristic shares the extra demand by
# headroom, and voltage or line limits eventually show up as violations.
for scale in (1.0, 1.2, 1.4, 1.6):
    profile = np.column_stack([case.arrays.pd, case.arrays.qd]) * scale
    pf = nr_solve(case, profile, dispatch_heuristic(case, profile))
    if not pf.converged:
        print(f"scale {scale:.1f}: no power-flow solution")
        continue
    s = violation_summary(residual_report(case, pf.point, profile[:, 0], profile[:, 1]), case.n_bus)
    print(f"scale {scale:.1f}: vm {s.vm:.3e}  pg {s.pg:.3e}  qg {s.qg:.3e}  line {s.line:.3e}")

# %%
# Random load draws in [0.8, 1.2] of nominal.  Points that break a limit are
# rejected under the strict policy, so every stored label is feasible.
print("one draw:", np.round(perturb_loads(case, [0, 0])[:, 0], 3))
ds = build_dataset(case, 50, seed=0)
print("accepted", len(ds), "instances; splits",
      {k: len(v) for k, v in (("train", ds.splits.train), ("val", ds.splits.val), ("test", ds.splits.test))})
