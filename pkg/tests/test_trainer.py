import numpy as np
import pytest

from opflab import autodiff as ad
from opflab import trainer as tr
from opflab.gnn import ModelConfig, Prediction, init_params
from opflab.grid import OperatingPoint
from opflab.residuals import residual_report, violation_summary
from opflab.trainer import (
    LOG_COLUMNS,
    Adam,
    Checkpoint,
    TrainConfig,
    TrainingAborted,
    TrainLog,
    evaluate,
    finetune,
    steps_to_threshold,
    train,
)

SMALL = ModelConfig("gcn", layers=2, hidden=16, heads=1)
HETERO = ModelConfig("hgt", layers=2, hidden=8, heads=2)


def _cfg(**kw):
    base = dict(topologies=("case3",), objective="mse", model=SMALL, steps=20, batch_size=8, lr=3e-3,
                seed=0, eval_every=10)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data(ds3, ds5):
    return {"case3": ds3, "case5": ds5}


@pytest.fixture(scope="module")
def trained(data):
    return train(_cfg(steps=30, objective="al", update_period=10), data)


# ---------------------------------------------------------------------------
# configuration and optimizer


@pytest.mark.parametrize("kw", [dict(steps=0), dict(lr=0.0), dict(objective="l1"), dict(precision="half"),
                                dict(topologies=()), dict(batch_size=0), dict(eval_split="dev")])
def test_config_guards(kw):
    with pytest.raises(ValueError):
        _cfg(**kw)


def test_config_round_trip():
    c = _cfg(objective="vbl", clip_quadratic=True, threshold_tau=0.1)
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_adam_first_step_is_signed_learning_rate():
    p = {"w": ad.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)}
    opt = Adam(p, lr=0.1)
    opt.step({"w": np.array([3.0, -0.01, 0.0])})
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 0.5], atol=1e-6)


def test_adam_matches_reference_recursion(rng):
    w0 = rng.normal(size=4)
    p = {"w": ad.Tensor(w0.copy(), requires_grad=True)}
    opt = Adam(p, lr=0.01)
    m = v = np.zeros(4)
    w = w0.copy()
    for t in range(1, 6):
        g = rng.normal(size=4)
        opt.step({"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)


# ---------------------------------------------------------------------------
# training loop


def test_log_layout(trained):
    ck, log = trained
    assert log.steps() == [0, 10, 20, 30]
    assert all(set(LOG_COLUMNS) <= set(r) for r in log.records)
    assert len(log.step_ms) == 30
    assert ck.step == 30


def test_mse_loss_decreases_in_most_seeds(data):
    wins = 0
    for seed in range(5):
        _, log = train(_cfg(steps=200, eval_every=100, seed=seed), data)
        recs = log.for_topology("case3")
        wins += recs[-1]["loss"] < recs[0]["loss"]
    assert wins >= 4


def test_training_is_deterministic(data):
    cfg = _cfg(topologies=("case3", "case5"), objective="vbl", update_period=5, model=HETERO)
    ck1, a = train(cfg, data)
    ck2, b = train(cfg, data)
    assert a.comparable() == b.comparable()
    for k in ck1.params:
        np.testing.assert_array_equal(ck1.params[k].data, ck2.params[k].data)
    _, c = train(_cfg(topologies=("case3", "case5"), objective="vbl", update_period=5, model=HETERO, seed=1), data)
    assert c.comparable() != a.comparable()


def test_multi_topology_records_every_topology(data):
    _, log = train(_cfg(topologies=("case3", "case5")), data)
    for step in log.steps():
        assert {r["topology"] for r in log.records if r["step"] == step} == {"case3", "case5"}


def test_dual_updates_fire_on_cadence(data):
    ck, _ = train(_cfg(steps=9, objective="al", update_period=10), data)
    assert not ck.duals.mu["case3"].any() and not ck.duals.lam["case3"].any()
    ck, _ = train(_cfg(steps=10, objective="al", update_period=10, rho_growth=2.0), data)
    assert ck.duals.lam["case3"].any()
    assert np.all(ck.duals.mu["case3"] >= 0)
    assert ck.duals.rho == 2.0
    ck, _ = train(_cfg(steps=10, objective="vbl", update_period=5), data)
    assert np.all(ck.duals.lam["case3"] >= 0) and ck.duals.lam["case3"].any()


def test_missing_dataset_is_reported(data):
    with pytest.raises(KeyError, match="case9"):
        train(_cfg(topologies=("case3", "case9")), data)


def test_nan_loss_aborts_with_snapshot(trained, data):
    ck, _ = trained
    bad = Checkpoint(ck.config, {k: ad.Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                 for k, v in ck.params.items()}, ck.stats, ck.duals, ck.step)
    next(iter(bad.params.values())).data[...] = np.nan
    with pytest.raises(TrainingAborted) as exc:
        finetune(bad, data["case3"])
    snap = exc.value.snapshot
    assert snap["step"] == 1 and snap["topology"] == "case3" and len(snap["batch_indices"]) == 8


def test_single_precision_training_returns_double_params(data):
    ck, log = train(_cfg(precision="single", steps=10), data)
    assert all(v.dtype == np.float64 for v in ck.params.values())
    assert np.isfinite(log.records[-1]["loss"])


# ---------------------------------------------------------------------------
# checkpoints and fine-tuning


def test_checkpoint_round_trip_is_bit_identical(trained, data, tmp_path):
    ck, _ = trained
    before = evaluate(ck, data["case3"])
    back = Checkpoint.load(ck.save(tmp_path / "ck.npz"))
    assert back.config == ck.config and back.step == ck.step
    np.testing.assert_array_equal(back.duals.lam["case3"], ck.duals.lam["case3"])
    np.testing.assert_array_equal(back.duals.mu["case3"], ck.duals.mu["case3"])
    assert back.duals.rho == ck.duals.rho and back.duals.update_period == ck.duals.update_period
    assert evaluate(back, data["case3"]) == before


def test_warm_start_identity(trained, data):
    ck, log = trained
    _, ft = finetune(ck, data["case3"], _cfg(steps=5, objective="al"))
    first, last = ft.records[0], log.for_topology("case3")[-1]
    assert first["step"] == 0
    assert first["opf_sol_err"] == last["opf_sol_err"] and first["viol_total"] == last["viol_total"]


def test_finetune_resumes_known_duals_and_zeroes_new_ones(trained, data):
    ck, _ = trained
    out, _ = finetune(ck, data["case5"], _cfg(steps=3, objective="al", update_period=100))
    np.testing.assert_array_equal(out.duals.lam["case3"], ck.duals.lam["case3"])
    assert not out.duals.lam["case5"].any() and not out.duals.mu["case5"].any()
    assert "case5" in out.stats and out.step == ck.step + 3
    assert out.config.topologies == ("case5",)


def test_finetune_rejects_incompatible_model(trained, data):
    ck, _ = trained
    with pytest.raises(ValueError, match="incompatible"):
        finetune(ck, data["case5"], _cfg(model=ModelConfig("gcn", layers=2, hidden=32, heads=1)))


# ---------------------------------------------------------------------------
# evaluation


def test_single_and_double_precision_evaluation_agree(trained, data):
    ck, _ = trained
    d = evaluate(ck, data["case5"], precision="double", zero_shot=True)
    s = evaluate(ck, data["case5"], precision="single", zero_shot=True)
    assert abs(s["opf_sol_err"] - d["opf_sol_err"]) <= 1e-3 * d["opf_sol_err"]
    assert abs(s["viol"] - d["viol"]) <= 1e-3 * d["viol"]


def test_unknown_topology_needs_zero_shot(trained, data):
    ck, _ = trained
    with pytest.raises(KeyError, match="zero_shot"):
        evaluate(ck, data["case5"])


def test_perfect_stub_model(trained, data, monkeypatch):
    ck, _ = trained
    ds = data["case3"]

    def oracle(config, params, ctx, loads, precision="double"):
        idx = [int(np.flatnonzero(np.all(ds.arrays()["loads"] == l, axis=(1, 2)))[0]) for l in loads]
        arr = ds.arrays(idx)
        y_bus, y_gen = tr._targets(arr, ctx.stats)
        T = ad.Tensor
        return Prediction(T(y_bus), T(y_gen), T(arr["vm"]), T(arr["va"]), T(arr["pg"]), T(arr["qg"]), [])

    monkeypatch.setattr(tr, "predict", oracle)
    m = evaluate(ck, ds)
    assert m["opf_sol_err"] == 0.0
    assert m["viol"] < 1e-6


def test_constant_zero_model_matches_brute_force_summary(data):
    ds = data["case3"]
    cfg = _cfg()
    params = init_params(SMALL, 0)
    for v in params.values():
        v.data[...] = 0.0
    stats = {"case3": ds.fit_stats()}
    ck = Checkpoint(cfg, params, stats, None, 0)
    m = evaluate(ck, ds)
    s = stats["case3"]
    vm = np.full(ds.case.n_bus, s.bus_target.mean[0])
    va = np.full(ds.case.n_bus, s.bus_target.mean[1])
    va[ds.case.ref_bus] = 0.0
    pg = np.full(ds.case.n_gen, s.gen_target.mean[0])
    qg = np.full(ds.case.n_gen, s.gen_target.mean[1])
    totals = []
    for i in ds.splits.test:
        loads = ds.arrays([i])["loads"][0]
        rep = residual_report(ds.case, OperatingPoint(vm, va, pg, qg), loads[:, 0], loads[:, 1])
        totals.append(violation_summary(rep, ds.case.n_bus).total)
    assert m["viol"] == pytest.approx(np.mean(totals), rel=1e-12)


# ---------------------------------------------------------------------------
# logs and thresholds


def _records(values, topology="case3", every=10):
    return [{"step": k * every, "topology": topology, "viol_total": v} for k, v in enumerate(values)]


def test_threshold_crossing_and_never():
    assert steps_to_threshold(_records([5.0, 3.0, 2.0, 0.9, 0.5]), 1.0) == 30
    assert steps_to_threshold(_records([5.0, 3.0, 2.0]), 1.0) == "never"
    with pytest.raises(ValueError):
        steps_to_threshold([], 1.0)


def test_threshold_matches_scan_on_noisy_log(rng):
    vals = np.abs(np.cumsum(rng.normal(size=200))) + 0.1
    tau = float(np.quantile(vals, 0.1))
    expected = next(k * 10 for k, v in enumerate(vals) if v <= tau)
    assert steps_to_threshold(_records(vals), tau) == expected


def test_threshold_requires_every_topology():
    recs = _records([2.0, 0.5, 0.5, 0.5]) + _records([0.5, 2.0, 0.4, 0.3], topology="case5")
    recs.sort(key=lambda r: r["step"])
    assert steps_to_threshold(recs, 1.0) == 20
    assert steps_to_threshold(recs, 1.0, topology="case5") == 0


def test_log_csv_round_trip(trained, tmp_path):
    _, log = trained
    back = TrainLog.read_csv(log.write_csv(tmp_path / "log.csv"))
    assert back.steps() == log.steps()
    for a, b in zip(back.records, log.records):
        for k in LOG_COLUMNS:
            assert a[k] == b[k] if k == "topology" else a[k] == pytest.approx(b[k], rel=1e-15)
    assert steps_to_threshold(back, 1e9) == 0
