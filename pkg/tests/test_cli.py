"""Tests for the morphxai command line (exit codes and written artifacts)."""

import json

import pytest
from PIL import Image

from morphxai.__main__ import main
from morphxai.trainer import TrainResult


def run(*argv):
    return main([str(a) for a in argv])


def train(config_file, *extra):
    assert run("gen-data", "--config", config_file) == 0
    assert run("train", "--config", config_file, *extra) == 0


class TestGenData:
    def test_writes_manifest(self, tmp_path, tiny_config_file, capsys):
        assert run("gen-data", "--config", tiny_config_file) == 0
        assert (tmp_path / "data" / "manifest.json").exists()
        assert "[MorphXAI] Dataset written" in capsys.readouterr().out

    def test_same_config_same_manifest(self, tmp_path, tiny_config_file):
        assert run("gen-data", "--config", tiny_config_file, "--out", tmp_path / "a") == 0
        assert run("gen-data", "--config", tiny_config_file, "--out", tmp_path / "b") == 0
        a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        b = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert a["config_hash"] == b["config_hash"]
        assert a == b

    def test_writes_resolved_config(self, tmp_path, tiny_config_file):
        assert run("gen-data", "--config", tiny_config_file, "--out", tmp_path / "a") == 0
        resolved = json.loads((tmp_path / "a" / "resolved_config.json").read_text())
        assert resolved["data.n_train"] == 4
        assert resolved["scene.image_size"] == [64, 64]

    def test_unwritable_directory(self, tmp_path, tiny_config_file, capsys):
        blocker = tmp_path / "blocked"
        blocker.write_text("")
        assert run("gen-data", "--config", tiny_config_file, "--out", blocker / "data") == 1
        assert "blocked" in capsys.readouterr().err


class TestTrain:
    def test_train_then_logs(self, tmp_path, tiny_config_file, capsys):
        train(tiny_config_file)
        run_dir = tmp_path / "runs" / "default"
        assert (run_dir / "checkpoints" / "last.pt").exists()
        assert (run_dir / "train.log").exists()
        resolved = json.loads((run_dir / "resolved_config.json").read_text())
        assert resolved["model.hidden_dim"] == 16
        capsys.readouterr()
        assert run("logs", "--config", tiny_config_file, "--n", 3) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 3
        assert all(json.loads(line)["event"] in ("step", "eval") for line in lines)

    def test_lambda_flag(self, tmp_path, tiny_config_file):
        train(tiny_config_file, "--lambda", 0)
        records = [json.loads(line) for line in (tmp_path / "runs" / "default" / "train.log").read_text().splitlines()]
        steps = [r for r in records if r["event"] == "step"]
        assert steps and all(r["loss/morph_weighted"] == 0.0 and r["lambda"] == 0.0 for r in steps)

    def test_set_override(self, tmp_path, tiny_config_file):
        train(tiny_config_file, "--set", "train.epochs=1")
        resolved = json.loads((tmp_path / "runs" / "default" / "resolved_config.json").read_text())
        assert resolved["train.epochs"] == 1

    def test_resume(self, tmp_path, tiny_config_file):
        train(tiny_config_file, "--set", "train.epochs=1")
        assert run("train", "--config", tiny_config_file, "--resume") == 0
        steps = [json.loads(line)["step"] for line in (tmp_path / "runs" / "default" / "train.log").read_text().splitlines()
                 if json.loads(line)["event"] == "step"]
        assert steps == [0, 1, 2, 3]

    def test_nan_abort_exit_code(self, tiny_config_file, mocker, capsys):
        assert run("gen-data", "--config", tiny_config_file) == 0
        mocker.patch("morphxai.losses.LossBreakdown.is_finite", return_value=False)
        assert run("train", "--config", tiny_config_file) == 2
        assert "nan_dump_step0.json" in capsys.readouterr().err

    def test_best_checkpoint_without_score(self, tmp_path, tiny_config_file, mocker, capsys):
        best = tmp_path / "best.pt"
        result = TrainResult(steps=4, epochs=2, initial_loss=1.0, final_loss=0.5, best_ap_50=None,
                             last_checkpoint=tmp_path / "last.pt", best_checkpoint=best, log_path=tmp_path / "train.log")
        mocker.patch("morphxai.__main__.Trainer.fit", return_value=result)
        assert run("train", "--config", tiny_config_file) == 0
        assert f"Best checkpoint (AP.50=n/a): {best}" in capsys.readouterr().out

    def test_train_without_data(self, tiny_config_file, capsys):
        assert run("train", "--config", tiny_config_file) == 1
        assert "gen-data" in capsys.readouterr().err


class TestEvalAndInfer:
    def test_eval_is_deterministic(self, tmp_path, tiny_config_file):
        train(tiny_config_file)
        assert run("eval", "--config", tiny_config_file, "--out", tmp_path / "e1.json") == 0
        assert run("eval", "--config", tiny_config_file, "--out", tmp_path / "e2.json") == 0
        assert (tmp_path / "e1.json").read_bytes() == (tmp_path / "e2.json").read_bytes()
        summary = json.loads((tmp_path / "e1.json").read_text())
        assert {"ap_50_95", "ap_50", "attribute_accuracy", "confusion", "per_class_ap"} <= set(summary)

    def test_eval_default_output(self, tmp_path, tiny_config_file):
        train(tiny_config_file)
        assert run("eval", "--config", tiny_config_file, "--split", "train") == 0
        assert (tmp_path / "runs" / "default" / "eval_train.json").exists()

    def test_eval_and_infer_write_resolved_config(self, tmp_path, tiny_config_file):
        train(tiny_config_file)
        assert run("eval", "--config", tiny_config_file, "--out", tmp_path / "e1.json", "--threshold", 0.3) == 0
        assert json.loads((tmp_path / "e1_config.json").read_text())["eval.score_threshold"] == 0.3
        images = tmp_path / "data" / "val" / "images"
        assert run("infer", "--config", tiny_config_file, "--images", images, "--out", tmp_path / "reports") == 0
        assert json.loads((tmp_path / "reports_config.json").read_text())["model.hidden_dim"] == 16
        assert len(list((tmp_path / "reports").glob("*.json"))) == 2

    def test_infer_empty_directory(self, tmp_path, tiny_config_file):
        train(tiny_config_file)
        (tmp_path / "empty").mkdir()
        assert run("infer", "--config", tiny_config_file, "--images", tmp_path / "empty", "--out", tmp_path / "r") == 0
        assert not list((tmp_path / "r").glob("*.json"))

    def test_infer_unattainable_threshold(self, tmp_path, tiny_config_file):
        train(tiny_config_file)
        images = tmp_path / "data" / "val" / "images"
        out = tmp_path / "reports"
        assert run("infer", "--config", tiny_config_file, "--images", images, "--out", out, "--threshold", 1.01) == 0
        reports = sorted(out.glob("*.json"))
        assert len(reports) == 2
        for path in reports:
            doc = json.loads(path.read_text())
            assert doc["detections"] == []
            assert doc["image_size"] == [64, 64]

    def test_infer_resizes_foreign_images(self, tmp_path, tiny_config_file):
        train(tiny_config_file)
        folder = tmp_path / "foreign"
        folder.mkdir()
        Image.new("RGB", (100, 80), (200, 180, 190)).save(folder / "slide.png")
        assert run("infer", "--config", tiny_config_file, "--images", folder, "--out", tmp_path / "r",
                   "--threshold", 0.0) == 0
        doc = json.loads((tmp_path / "r" / "slide.json").read_text())
        assert doc["image_size"] == [100, 80]
        assert len(doc["detections"]) == 6
        assert (tmp_path / "r" / "slide.txt").exists()

    def test_infer_missing_directory(self, tmp_path, tiny_config_file):
        train(tiny_config_file)
        assert run("infer", "--config", tiny_config_file, "--images", tmp_path / "nowhere") == 1

    def test_eval_missing_checkpoint(self, tiny_config_file, capsys):
        assert run("eval", "--config", tiny_config_file) == 1
        assert "checkpoint" in capsys.readouterr().err


class TestAblateLambda:
    def test_four_row_table(self, tmp_path, tiny_config_file):
        assert run("gen-data", "--config", tiny_config_file) == 0
        assert run("ablate-lambda", "--config", tiny_config_file, "--set", "train.epochs=1",
                   "--out", tmp_path / "sweep") == 0
        table = (tmp_path / "sweep" / "ablation.md").read_text().strip().splitlines()
        assert len(table) == 6
        assert "Flagellum" in table[0]
        rows = json.loads((tmp_path / "sweep" / "ablation.json").read_text())
        assert [r["lambda"] for r in rows] == [0.2, 0.5, 1.0, 2.0]


class TestArguments:
    def test_no_command_prints_help(self, capsys):
        assert run() == 0
        assert "gen-data" in capsys.readouterr().out

    def test_missing_config_file(self, tmp_path):
        assert run("gen-data", "--config", tmp_path / "none.json") == 1

    def test_unknown_preset_rejected_by_parser(self):
        with pytest.raises(SystemExit):
            run("train", "--preset", "huge")

    def test_bad_set_syntax(self, tiny_config_file):
        assert run("gen-data", "--config", tiny_config_file, "--set", "novalue") == 1
