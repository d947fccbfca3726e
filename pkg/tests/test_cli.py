import json
import os
import time
from pathlib import Path

import pytest

from vitlat.cli import EXIT_COVERAGE, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main, stage_seed

STAGE_ARGS = {
    "sample": ["sample", "--count", "10", "--seed", "3"],
    "lower": ["lower", "--archs", "run/archs"],
    "featurize": ["featurize", "--graphs", "run/graphs"],
    "simulate": ["simulate", "--graphs", "run/graphs", "--modes", "FormatPenalty", "DWConvSpikes", "--noise", "2"],
    "train": ["train", "--graphs", "run/graphs", "--measurements", "run/measurements.csv", "--method", "gbdt",
              "--train-size", "8", "--hyperparams", "hp.json"],
    "evaluate": ["evaluate", "--graphs", "run/graphs", "--measurements", "run/measurements.csv",
                 "--bundle", "run/bundle.gbdt.json", "--split", "run/split.json"],
    "predict": ["predict", "--graphs", "run/graphs", "--bundle", "run/bundle.gbdt.json"],
    "importance": ["importance", "--bundle", "run/bundle.gbdt.json"],
}


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    old = os.getcwd()
    os.chdir(root)
    (root / "hp.json").write_text(json.dumps({"gbdt": {"n_trees": 30}}))
    t0 = time.perf_counter()
    codes = {stage: main(args + ["--out", "run"]) for stage, args in STAGE_ARGS.items()}
    elapsed = time.perf_counter() - t0
    os.chdir(old)
    return root, codes, elapsed


def test_full_pipeline_on_ten_configs(pipeline):
    root, codes, elapsed = pipeline
    assert codes == {s: EXIT_OK for s in STAGE_ARGS}
    assert elapsed < 60
    run = root / "run"
    assert len(list((run / "archs").glob("*.json"))) == 10
    assert len(list((run / "graphs").glob("*.jsonl"))) == 10
    for stage in STAGE_ARGS:
        assert (run / f"manifest.{stage}.json").exists()
    assert (run / "features" / "Linear.csv").exists()
    assert json.loads((run / "evaluation.json").read_text())["method"] == "gbdt"
    assert (run / "importance.csv").read_text().startswith("kind_key,feature,weight\n")


def test_manifest_contents(pipeline):
    root, _, _ = pipeline
    m = json.loads((root / "run" / "manifest.train.json").read_text())
    assert m["command"] == "train" and m["seed"] == 0
    assert m["stage_seed"] == stage_seed(0, "train")
    assert "run/measurements.csv" in m["inputs"]
    assert set(m["outputs"]) == {"bundle.gbdt.json", "split.json"}
    assert set(m["versions"]) == {"vitlat", "numpy", "python"}
    assert "--out" not in m["argv"]


@pytest.mark.parametrize("stage", list(STAGE_ARGS))
def test_replay_is_byte_identical(pipeline, stage, tmp_path):
    root, _, _ = pipeline
    manifest = root / "run" / f"manifest.{stage}.json"
    assert main(["replay", str(manifest), "--out", str(tmp_path), "--strict"]) == EXIT_OK
    recorded = json.loads(manifest.read_text())["outputs"]
    for rel in recorded:
        assert (tmp_path / rel).read_bytes() == (root / "run" / rel).read_bytes(), rel
    assert (tmp_path / f"manifest.{stage}.json").exists()


def test_same_seed_same_files(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["sample", "--count", "4", "--seed", "9", "--out", "a"]) == 0
    assert main(["sample", "--count", "4", "--seed", "9", "--out", "b"]) == 0
    assert _tree(tmp_path / "a" / "archs") == _tree(tmp_path / "b" / "archs")


def test_count_zero_is_manifest_only(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(["sample", "--count", "0", "--out", "z"]) == 0
    assert [p.name for p in (tmp_path / "z").iterdir()] == ["manifest.sample.json"]


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("VITLAT_OUT", str(tmp_path / "envout"))
    assert main(["sample", "--count", "1"]) == 0
    assert (tmp_path / "envout" / "manifest.sample.json").exists()


def test_jobs_do_not_change_outputs(pipeline, tmp_path, monkeypatch):
    root, _, _ = pipeline
    monkeypatch.chdir(root)
    assert main(["lower", "--archs", "run/archs", "--jobs", "2", "--out", str(tmp_path / "j")]) == 0
    assert _tree(tmp_path / "j" / "graphs") == _tree(root / "run" / "graphs")
    assert main(["simulate", "--graphs", "run/graphs", "--modes", "FormatPenalty", "DWConvSpikes",
                 "--noise", "2", "--jobs", "2", "--out", str(tmp_path / "j")]) == 0
    assert (tmp_path / "j" / "measurements.csv").read_bytes() == (root / "run" / "measurements.csv").read_bytes()


def test_memorizing_rf_reports_zero(pipeline, tmp_path, monkeypatch, capsys):
    root, _, _ = pipeline
    monkeypatch.chdir(root)
    hp = tmp_path / "memo.json"
    hp.write_text(json.dumps({"rf": {"n_trees": 1, "max_depth": None, "bootstrap": False}}))
    sim = ["simulate", "--graphs", "run/graphs", "--modes", "--noise", "0", "--out", str(tmp_path)]
    assert main(sim) == 0
    meas = str(tmp_path / "measurements.csv")
    assert main(["train", "--graphs", "run/graphs", "--measurements", meas, "--method", "rf",
                 "--hyperparams", str(hp), "--out", str(tmp_path)]) == 0
    assert main(["evaluate", "--graphs", "run/graphs", "--measurements", meas,
                 "--bundle", str(tmp_path / "bundle.rf.json"), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "evaluation.json").read_text())["end_to_end_mape"] == 0.0
    assert "end-to-end MAPE 0.00%" in capsys.readouterr().out


def test_importance_on_lasso_is_clean_error(pipeline, tmp_path, monkeypatch, capsys):
    root, _, _ = pipeline
    monkeypatch.chdir(root)
    assert main(["train", "--graphs", "run/graphs", "--measurements", "run/measurements.csv",
                 "--method", "lasso", "--out", str(tmp_path)]) == 0
    code = main(["importance", "--bundle", str(tmp_path / "bundle.lasso.json"), "--out", str(tmp_path)])
    assert code == EXIT_VALIDATION
    assert "lasso" in capsys.readouterr().err


def test_exit_codes(pipeline, tmp_path, monkeypatch):
    root, _, _ = pipeline
    monkeypatch.chdir(root)
    out = ["--out", str(tmp_path)]
    assert main(["lower", "--archs", "nowhere"] + out) == EXIT_IO
    assert main(["train", "--graphs", "run/graphs", "--measurements", "missing.csv"] + out) == EXIT_IO
    assert main(["sample", "--count", "-1"] + out) == EXIT_VALIDATION
    assert main(["lower", "--archs", "run/archs", "--jobs", "0"] + out) == EXIT_VALIDATION

    bundle = json.loads((root / "run" / "bundle.gbdt.json").read_text())
    del bundle["predictors"]["Linear"]
    (tmp_path / "partial.json").write_text(json.dumps(bundle))
    assert main(["predict", "--graphs", "run/graphs", "--bundle", str(tmp_path / "partial.json")] + out) == EXIT_COVERAGE
    bundle["schema_version"] = 7
    (tmp_path / "future.json").write_text(json.dumps(bundle))
    assert main(["predict", "--graphs", "run/graphs", "--bundle", str(tmp_path / "future.json")] + out) == EXIT_COVERAGE

    bad = tmp_path / "bad.csv"
    bad.write_text("model_id,node_id\n")
    assert main(["train", "--graphs", "run/graphs", "--measurements", str(bad)] + out) == EXIT_VALIDATION
    with pytest.raises(SystemExit) as exc:
        main(["train", "--method", "svm"])
    assert exc.value.code == 2


def test_replay_detects_changed_inputs(pipeline, tmp_path):
    root, _, _ = pipeline
    work = tmp_path / "w"
    work.mkdir()
    (work / "hp.json").write_text(json.dumps({"gbdt": {"n_trees": 5}}))
    old = os.getcwd()
    os.chdir(work)
    try:
        assert main(["train", "--graphs", str(root / "run" / "graphs"), "--measurements",
                     str(root / "run" / "measurements.csv"), "--hyperparams", "hp.json", "--out", "o"]) == 0
    finally:
        os.chdir(old)
    (work / "hp.json").write_text(json.dumps({"gbdt": {"n_trees": 6}}))
    assert main(["replay", str(work / "o" / "manifest.train.json"), "--strict"]) == EXIT_VALIDATION
    assert main(["replay", str(tmp_path / "nope.json")]) == EXIT_IO
