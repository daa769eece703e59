import csv
import json

import numpy as np
import pytest

from opflab.cli import EXIT_FAIL, EXIT_NAN, EXIT_OK, EXIT_USAGE, run
from opflab.dataset import Dataset
from opflab.residuals import mean_violation_summary, report_arrays
from opflab.trainer import Checkpoint

SMALL = ["--architecture", "gcn", "--layers", "2", "--hidden", "16", "--heads", "1", "--batch-size", "8"]


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv("LUMINA_RUN_DIR", str(tmp_path / "runs"))
    return tmp_path


def _only_run(root, prefix):
    dirs = sorted(p for p in (root / "runs").iterdir() if p.name.startswith(prefix))
    return dirs[-1]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data for two cases, then a 500-step MSE run on case5."""
    root = tmp_path_factory.mktemp("pipe")
    paths = {}
    for case, count in (("case3", 40), ("case5", 200)):
        d = root / f"gen-{case}"
        assert run(["gen-data", "--case", case, "--count", str(count), "--seed", "1", "--run-dir", str(d)]) == EXIT_OK
        paths[case] = d / "data"
    tr = root / "train"
    code = run(["train", "--data", str(paths["case5"]), "--steps", "500", "--eval-every", "250", "--lr", "3e-3",
                "--run-dir", str(tr)] + SMALL)
    assert code == EXIT_OK
    return root, paths, tr


def test_gen_data_is_byte_identical(runs):
    outs = []
    for k in range(2):
        d = runs / f"g{k}"
        assert run(["gen-data", "--case", "case3", "--count", "10", "--seed", "1", "--run-dir", str(d)]) == EXIT_OK
        outs.append(d / "data")
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_missing_config_is_usage_error(runs, capsys):
    assert run(["train", "--config", str(runs / "missing.json")]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["train", "--bogus", "1"], ["frobnicate"], ["train"],
                                  ["eval", "--checkpoint", "nope.npz", "--data", "nowhere"]])
def test_usage_errors(runs, argv):
    assert run(argv) == EXIT_USAGE


def test_unknown_config_key_is_usage_error(runs):
    cfg = runs / "c.json"
    cfg.write_text(json.dumps({"steps": 5, "learning_rate": 0.1}))
    assert run(["train", "--config", str(cfg)]) == EXIT_USAGE


def test_invalid_value_is_usage_error(pipeline, runs):
    _, paths, _ = pipeline
    assert run(["train", "--data", str(paths["case3"]), "--steps", "0"] + SMALL) == EXIT_USAGE


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("gen-data", "train", "finetune", "eval", "transfer", "stress", "probe"):
        assert name in out


def test_train_outputs(pipeline):
    _, _, tr = pipeline
    for name in ("config_resolved.json", "run.log", "checkpoint.npz", "train_log.csv", "metrics.json"):
        assert (tr / name).is_file()
    with open(tr / "train_log.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == [0, 250, 500]
    cfg = json.loads((tr / "config_resolved.json").read_text())
    assert cfg["steps"] == 500 and cfg["architecture"] == "gcn" and cfg["command"] == "train"


def test_eval_viol_matches_recomputation_on_saved_predictions(pipeline, runs):
    _, paths, tr = pipeline
    ev = runs / "ev"
    assert run(["eval", "--checkpoint", str(tr / "checkpoint.npz"), "--data", str(paths["case5"]),
                "--run-dir", str(ev)]) == EXIT_OK
    metrics = json.loads((ev / "metrics.json").read_text())
    pred = np.load(ev / "predictions.npz")
    ds = Dataset.load(paths["case5"])
    loads = pred["loads"]
    rep = report_arrays(ds.case, pred["vm"], pred["va"], pred["pg"], pred["qg"], loads[:, :, 0], loads[:, :, 1])
    assert metrics["viol"] == pytest.approx(mean_violation_summary(rep, ds.case.n_bus).total, rel=1e-12)
    assert pred["indices"].tolist() == list(ds.splits.test)


def test_rerun_from_resolved_config_reproduces(pipeline, runs):
    _, _, tr = pipeline
    again = runs / "again"
    assert run(["train", "--config", str(tr / "config_resolved.json"), "--run-dir", str(again)]) == EXIT_OK

    def rows(d):
        with open(d / "train_log.csv", newline="") as fh:
            return [{k: v for k, v in r.items() if k != "wall_ms"} for r in csv.DictReader(fh)]

    assert rows(again) == rows(tr)


def test_default_run_dir_uses_environment(pipeline, runs):
    _, paths, _ = pipeline
    assert run(["train", "--data", str(paths["case3"]), "--steps", "2", "--eval-every", "1"] + SMALL) == EXIT_OK
    d = _only_run(runs, "train-")
    assert (d / "checkpoint.npz").is_file()


def test_finetune_and_nan_abort(pipeline, runs, tmp_path):
    _, paths, tr = pipeline
    ft = runs / "ft"
    assert run(["finetune", "--checkpoint", str(tr / "checkpoint.npz"), "--data", str(paths["case3"]),
                "--steps", "5", "--eval-every", "5", "--run-dir", str(ft)]) == EXIT_OK
    assert Checkpoint.load(ft / "checkpoint.npz").step == 505
    ck = Checkpoint.load(tr / "checkpoint.npz")
    next(iter(ck.params.values())).data[...] = np.nan
    bad = ck.save(tmp_path / "bad.npz")
    ab = runs / "abort"
    code = run(["finetune", "--checkpoint", str(bad), "--data", str(paths["case3"]), "--steps", "5",
                "--run-dir", str(ab)])
    assert code == EXIT_NAN and code not in (EXIT_USAGE, EXIT_FAIL)
    snap = json.loads((ab / "abort_snapshot.json").read_text())
    assert snap["step"] == 1


def test_finetune_incompatible_model_is_usage_error(pipeline, runs):
    _, paths, tr = pipeline
    assert run(["finetune", "--checkpoint", str(tr / "checkpoint.npz"), "--data", str(paths["case3"]),
                "--hidden", "32", "--steps", "1"]) == EXIT_USAGE


def test_diagnostic_commands(pipeline, runs):
    _, paths, tr = pipeline
    ck = str(tr / "checkpoint.npz")
    t = runs / "transfer"
    assert run(["transfer", "--checkpoint", f"m={ck}", "--data", str(paths["case5"]), str(paths["case3"]),
                "--run-dir", str(t)]) == EXIT_OK
    assert len(list(t.glob("diag_transfer_*.csv"))) == 1 and len(list(t.glob("diag_transfer_*.json"))) == 1
    s = runs / "stress"
    assert run(["stress", "--checkpoint", ck, "--data", str(paths["case5"]), "--bins", "4",
                "--run-dir", str(s)]) == EXIT_OK
    assert {p.name.split("_2")[0] for p in s.glob("diag_*")} == {"diag_load_stratified", "diag_degree_error"}
    p = runs / "probe"
    assert run(["probe", "--checkpoint", ck, "--data", str(paths["case5"]), "--run-dir", str(p)]) == EXIT_OK
    summary = json.loads(next(p.glob("diag_linear_probe_*.json")).read_text())
    assert len(summary["r2"]) == 2


def test_stress_on_uniform_degree_case_fails_cleanly(pipeline, runs, capsys):
    _, paths, tr = pipeline
    code = run(["stress", "--checkpoint", str(tr / "checkpoint.npz"), "--data", str(paths["case3"]),
                "--zero-shot", "true", "--split", "train"])
    assert code == EXIT_FAIL
    assert "undefined correlation" in capsys.readouterr().err
