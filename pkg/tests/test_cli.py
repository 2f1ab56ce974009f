import json

import pytest

from evalblocks.cli import main

CONFIG = """
[[dataset]]
name = "syn"
manifest = "syn/manifest.json"

[[embedder]]
id = "e1"
kind = "synthetic3d"
dim = 8
standardize = false

[[evaluation]]
id = "knn"
kind = "knn"
k = [3]
report_k = 3

[[evaluation]]
id = "probe"
kind = "linear_probe"
epochs = 5

[execution]
workers = 2
cache_dir = "cache"
results_dir = "results"
"""


@pytest.fixture
def project(tmp_path):
    rc = main(
        [
            "generate", "--out", str(tmp_path / "syn"), "--n-per-class", "6",
            "--shape", "3,3,2", "--folds", "3", "--separation", "3.0", "--seed", "5",
        ]
    )
    assert rc == 0
    cfg = tmp_path / "config.toml"
    cfg.write_text(CONFIG)
    return tmp_path, cfg


class TestGenerate:
    def test_same_seed_same_manifest(self, tmp_path, capsys):
        args = ["generate", "--n-per-class", "4", "--shape", "2,2,2", "--folds", "2"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "manifest.json").read_bytes()
        b = (tmp_path / "b" / "manifest.json").read_bytes()
        assert a == b

    def test_too_few_patches_is_config_error(self, tmp_path):
        rc = main(["generate", "--out", str(tmp_path / "x"), "--n-per-class", "2", "--folds", "5"])
        assert rc == 2


class TestRun:
    def test_end_to_end_then_cached(self, project, capsys):
        tmp_path, cfg = project
        assert main(["run", "-c", str(cfg)]) == 0
        out1 = capsys.readouterr().out
        assert "executed=" in out1 and "failed=0" in out1
        records = list((tmp_path / "results" / "records").rglob("fold*.json"))
        assert len(records) == 6  # 2 evaluations x 3 folds

        assert main(["run", "-c", str(cfg)]) == 0
        out2 = capsys.readouterr().out
        assert "executed=0" in out2

    def test_dry_run_prints_plan_and_executes_nothing(self, project, capsys):
        tmp_path, cfg = project
        assert main(["run", "-c", str(cfg), "--dry"]) == 0
        out = capsys.readouterr().out
        assert "embed: 1" in out and "evaluate: 6" in out
        assert not (tmp_path / "cache").exists() or not any((tmp_path / "cache").iterdir())

    def test_selector_matching_nothing_warns_exit_zero(self, project, capsys):
        _, cfg = project
        assert main(["run", "-c", str(cfg), "--select", "dataset=nope"]) == 0
        assert "matched no experiments" in capsys.readouterr().out

    def test_bad_selector_key_exit_2(self, project):
        _, cfg = project
        assert main(["run", "-c", str(cfg), "--select", "nope=1"]) == 2

    def test_missing_manifest_exit_3(self, tmp_path):
        cfg = tmp_path / "config.toml"
        cfg.write_text(CONFIG)  # no generate step
        assert main(["run", "-c", str(cfg)]) == 3

    def test_bad_config_exit_2(self, tmp_path):
        cfg = tmp_path / "config.toml"
        cfg.write_text("[[dataset]\nboom")
        assert main(["run", "-c", str(cfg)]) == 2

    def test_failing_block_exit_4(self, project):
        tmp_path, _ = project
        text = CONFIG + """
[[embedder]]
id = "bad"
kind = "external"
command = ["sh", "-c", "exit 2", "x", "{input}", "{output}"]
"""
        cfg = tmp_path / "bad.toml"
        cfg.write_text(text)
        assert main(["run", "-c", str(cfg)]) == 4

    def test_cache_env_override(self, project, monkeypatch, capsys):
        tmp_path, cfg = project
        alt = tmp_path / "alt_cache"
        monkeypatch.setenv("EVALBLOCKS_CACHE", str(alt))
        assert main(["run", "-c", str(cfg)]) == 0
        assert any(alt.iterdir())
        assert not (tmp_path / "cache").exists()


class TestValidate:
    def test_prints_counts(self, project, capsys):
        _, cfg = project
        assert main(["validate", "-c", str(cfg)]) == 0
        out = capsys.readouterr().out
        assert "embed: 1" in out and "aggregate: 1" in out and "evaluate: 6" in out

    def test_missing_manifest_exit_3(self, tmp_path):
        cfg = tmp_path / "config.toml"
        cfg.write_text(CONFIG)
        assert main(["validate", "-c", str(cfg)]) == 3


class TestReport:
    def test_report_after_run(self, project, capsys):
        tmp_path, cfg = project
        assert main(["run", "-c", str(cfg)]) == 0
        capsys.readouterr()
        assert main(["report", "-c", str(cfg), "--group-by", "dataset,evaluation", "--metric", "auc"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("| dataset | evaluation |")
        assert (tmp_path / "results" / "reports" / "auc.svg").exists()
        assert (tmp_path / "results" / "reports" / "report.md").exists()

    def test_empty_store_exit_3(self, project):
        _, cfg = project
        assert main(["report", "-c", str(cfg)]) == 3

    def test_invalid_axis_exit_2(self, project):
        _, cfg = project
        assert main(["run", "-c", str(cfg)]) == 0
        assert main(["report", "-c", str(cfg), "--group-by", "model"]) == 2


class TestClean:
    def test_clean_forces_reexecution(self, project, capsys):
        _, cfg = project
        assert main(["run", "-c", str(cfg)]) == 0
        capsys.readouterr()
        assert main(["clean", "-c", str(cfg), "--older-than", "0"]) == 0
        out = capsys.readouterr().out
        assert "removed" in out and "0 cache" not in out
        assert main(["run", "-c", str(cfg)]) == 0
        assert "executed=0" not in capsys.readouterr().out

    def test_clean_forever_is_noop(self, project, capsys):
        _, cfg = project
        assert main(["run", "-c", str(cfg)]) == 0
        capsys.readouterr()
        assert main(["clean", "-c", str(cfg), "--older-than", "365d"]) == 0
        assert "removed 0" in capsys.readouterr().out
        assert main(["run", "-c", str(cfg)]) == 0
        assert "executed=0" in capsys.readouterr().out


class TestRunReportArtifact:
    def test_machine_readable_report(self, project):
        tmp_path, cfg = project
        assert main(["run", "-c", str(cfg)]) == 0
        runs = sorted((tmp_path / "results" / "runs").glob("*.json"))
        assert runs
        doc = json.loads(runs[-1].read_text())
        assert doc["executed"] + doc["cache_hits"] + doc["skipped"] + doc["failed"] == doc["total"]
