import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from sammp.cli import run

SCHEMAS = Path(__file__).resolve().parents[1] / "docs" / "schemas"


def validate(doc, name):
    schema = json.loads((SCHEMAS / f"{name}.schema.json").read_text())
    jsonschema.Draft202012Validator(schema).validate(doc)


def load(path):
    return json.loads(Path(path).read_text())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run(["gen-data", "--kind", "highway", "--n-scenes", "10", "--seed", "7", "--out", str(data)]) == 0
    run_dir = root / "run"
    argv = ["train", "--data", str(data / "manifest.json"), "--out", str(run_dir), "--steps", "3", "--stride", "10",
            "--seed", "1"]
    assert run(argv) == 0
    return root


def files_bytes(directory):
    return {p.name: p.read_bytes() for p in sorted(Path(directory).iterdir()) if p.is_file()}


class TestGenData:
    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert run(["gen-data", "--seed", "7", "--n-scenes", "3", "--out", str(tmp_path / d)]) == 0
        assert files_bytes(tmp_path / "a") == files_bytes(tmp_path / "b")

    def test_manifest_schema(self, workspace):
        validate(load(workspace / "data" / "manifest.json"), "manifest")

    def test_bimodal(self, tmp_path):
        assert run(["gen-data", "--kind", "bimodal", "--n-scenes", "3", "--out", str(tmp_path)]) == 0
        doc = load(tmp_path / "manifest.json")
        validate(doc, "manifest")
        assert len(doc["files"]) == 6 and len(doc["labels"]) == 6
        assert {lab["branch"] for lab in doc["labels"]} == {"keep", "change"}

    def test_following_config_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gen": {"n_vehicles": 4}}))
        assert run(["gen-data", "--kind", "following", "--n-scenes", "1", "--config", str(cfg),
                    "--out", str(tmp_path / "d")]) == 0
        header, *rows = (tmp_path / "d" / "scene0000.csv").read_text().splitlines()
        assert header == "vehicle_id,frame,x,y"
        assert {r.split(",")[0] for r in rows} == {"0", "1", "2", "3"}


class TestTrainEval:
    def test_outputs(self, workspace):
        run_dir = workspace / "run"
        validate(load(run_dir / "model" / "model.json"), "checkpoint")
        log = (run_dir / "train_log.csv").read_text().splitlines()
        assert log[0] == "kind,step,epoch,batch,value"
        assert sum(line.startswith("train_loss") for line in log) == 3

    def test_model_and_cv_same_schema(self, workspace, tmp_path):
        manifest = str(workspace / "data" / "manifest.json")
        assert run(["eval", "--data", manifest, "--checkpoint", str(workspace / "run" / "model"),
                    "--out", str(tmp_path / "m"), "--stride", "10"]) == 0
        assert run(["eval", "--data", manifest, "--baseline", "cv", "--out", str(tmp_path / "c"),
                    "--stride", "10"]) == 0
        model_doc, cv_doc = load(tmp_path / "m" / "metrics.json"), load(tmp_path / "c" / "metrics.json")
        validate(model_doc, "metrics")
        validate(cv_doc, "metrics")
        assert len(model_doc["rows"]) == len(cv_doc["rows"]) == 40
        assert [(r["metric"], r["horizon_s"], r["scope"]) for r in model_doc["rows"]] == [
            (r["metric"], r["horizon_s"], r["scope"]) for r in cv_doc["rows"]
        ]
        assert (tmp_path / "m" / "metrics.csv").read_text().splitlines()[0] == "metric,horizon_s,value,scope"

    def test_scope_flags(self, workspace, tmp_path):
        manifest = str(workspace / "data" / "manifest.json")
        assert run(["eval", "--data", manifest, "--baseline", "cv", "--q", "1", "--r", "0.01", "--ego-only",
                    "--out", str(tmp_path), "--stride", "10"]) == 0
        rows = load(tmp_path / "metrics.json")["rows"]
        assert len(rows) == 20 and {r["scope"] for r in rows} == {"ego"}

    def test_eval_repeatable(self, workspace, tmp_path):
        manifest = str(workspace / "data" / "manifest.json")
        for d in ("a", "b"):
            assert run(["eval", "--data", manifest, "--checkpoint", str(workspace / "run" / "model"),
                        "--out", str(tmp_path / d), "--stride", "10"]) == 0
        assert files_bytes(tmp_path / "a") == files_bytes(tmp_path / "b")


class TestExports:
    def test_forecast(self, workspace, tmp_path):
        assert run(["forecast", "--data", str(workspace / "data" / "manifest.json"), "--checkpoint",
                    str(workspace / "run" / "model"), "--out", str(tmp_path), "--stride", "10", "--heatmap"]) == 0
        doc = load(tmp_path / "forecast.json")
        validate(doc, "forecast")
        p = np.array([v["steps"] for v in doc["vehicles"]])[..., 5]
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        header, first = (tmp_path / "density.csv").read_text().splitlines()[:2]
        assert header == "step,x,y,log10_density" and first.startswith("5,")

    def test_cv_forecast(self, workspace, tmp_path):
        assert run(["forecast", "--data", str(workspace / "data" / "manifest.json"), "--baseline", "cv",
                    "--out", str(tmp_path), "--stride", "10"]) == 0
        doc = load(tmp_path / "forecast.json")
        validate(doc, "forecast")
        assert doc["n_mix"] == 1

    def test_attention(self, workspace, tmp_path):
        assert run(["attention", "--data", str(workspace / "data" / "manifest.json"), "--checkpoint",
                    str(workspace / "run" / "model"), "--out", str(tmp_path), "--stride", "10"]) == 0
        doc = load(tmp_path / "attention.json")
        validate(doc, "attention")
        for head in doc["layers"][0]["heads"]:
            np.testing.assert_allclose(np.sum(head["matrix"], axis=-1), 1.0, atol=1e-9)
        for head in doc["layers"][1]["heads"]:
            np.testing.assert_allclose(np.sum(head["matrices"], axis=-1), 1.0, atol=1e-9)


class TestExitCodes:
    def test_unknown_flag(self, tmp_path):
        assert run(["gen-data", "--out", str(tmp_path), "--bogus"]) == 2

    def test_missing_subcommand(self):
        assert run([]) == 2

    def test_missing_file(self, tmp_path):
        assert run(["eval", "--data", str(tmp_path / "none.json"), "--baseline", "cv", "--out", str(tmp_path)]) == 2

    def test_bad_config(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": {"d_model": 3}}))
        argv = ["train", "--data", str(workspace / "data" / "manifest.json"), "--config", str(cfg),
                "--out", str(tmp_path / "o")]
        assert run(argv) == 2
        cfg.write_text("{")
        assert run(argv) == 2

    def test_no_forecaster(self, workspace, tmp_path):
        assert run(["eval", "--data", str(workspace / "data" / "manifest.json"), "--out", str(tmp_path)]) == 2

    def test_runtime_error(self, workspace, tmp_path):
        bad = tmp_path / "data"
        bad.mkdir()
        (bad / "scene.csv").write_text("vehicle_id,frame,x,y\n1,0,0,0\n1,0,1,0\n")
        (bad / "manifest.json").write_text(json.dumps({"files": ["scene.csv"], "seed": 0, "fractions": [1, 0, 0]}))
        assert run(["eval", "--data", str(bad / "manifest.json"), "--baseline", "cv", "--out", str(tmp_path)]) == 1

    def test_threads_env(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("SAMMP_THREADS", "1")
        assert run(["gen-data", "--n-scenes", "1", "--out", str(tmp_path / "a")]) == 0
        monkeypatch.setenv("SAMMP_THREADS", "many")
        assert run(["gen-data", "--n-scenes", "1", "--out", str(tmp_path / "b")]) == 2
