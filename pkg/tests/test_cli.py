import csv
import json
import re
from pathlib import Path

import numpy as np
import pytest

from teethseg.cli import build_parser, main
from teethseg.config import RunConfig
from teethseg.pgm import read_pgm, write_pgm

TINY = {"depth": 2, "base_width": 4, "height": 16, "width": 32, "epochs": 2, "lr": 0.01, "seed": 1}
ERROR_LINE = re.compile(r"^teethseg: error: (usage|config|format|data|runtime|training): \S.*$")


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def assert_single_error_line(capsys, kind=None):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) >= 1
    last = err[-1]
    assert ERROR_LINE.match(last), last
    if kind:
        assert f"error: {kind}:" in last
    return last


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["generate", "--out", str(root / "raw"), "--count", "8", "--seed", "1", "--width", "48", "--height", "24"]) == 0
    assert main(["preprocess", "--in", str(root / "raw"), "--out", str(root / "pre"), "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "pre"), "--out", str(root / "run")]) == 0
    return root


class TestGenerate:
    def test_layout(self, workspace):
        raw = workspace / "raw"
        assert len(list((raw / "images").glob("*.pgm"))) == 8
        assert len(list((raw / "masks").glob("*.pgm"))) == 8
        split = json.loads((raw / "split.json").read_text())
        assert split["seed"] == 1 and len(split["train"] + split["val"] + split["test"]) == 8

    def test_rerun_identical(self, tmp_path):
        args = ["generate", "--count", "4", "--seed", "2", "--width", "32", "--height", "16"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_count_zero(self, tmp_path, capsys):
        assert main(["generate", "--out", str(tmp_path / "x"), "--count", "0"]) == 2
        assert_single_error_line(capsys, "usage")

    def test_non_empty_without_force(self, workspace, capsys):
        assert main(["generate", "--out", str(workspace / "raw"), "--count", "2"]) == 2
        assert "--force" in assert_single_error_line(capsys, "usage")

    def test_force(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "junk").write_text("x")
        assert main(["generate", "--out", str(tmp_path / "d"), "--count", "3", "--force", "--width", "32", "--height", "16"]) == 0
        assert not (tmp_path / "d" / "junk").exists()


class TestPreprocess:
    def test_outputs(self, workspace):
        img = read_pgm(workspace / "pre" / "images" / "s0000.pgm")
        mask = read_pgm(workspace / "pre" / "masks" / "s0000.pgm")
        assert img.shape == mask.shape == (16, 32)
        assert mask.max() <= 32
        assert (workspace / "pre" / "split.json").read_bytes() == (workspace / "raw" / "split.json").read_bytes()

    def test_deterministic(self, workspace, tmp_path):
        assert main(["preprocess", "--in", str(workspace / "raw"), "--out", str(tmp_path / "p"), "--width", "32", "--height", "16"]) == 0
        assert tree_bytes(tmp_path / "p") == tree_bytes(workspace / "pre")

    def test_constant_corpus_unchanged(self, tmp_path):
        src = tmp_path / "const"
        (src / "images").mkdir(parents=True)
        (src / "masks").mkdir()
        write_pgm(src / "images" / "a.pgm", np.zeros((8, 16)))
        write_pgm(src / "masks" / "a.pgm", np.zeros((8, 16), dtype=np.uint8))
        (src / "split.json").write_text(json.dumps({"seed": 0, "train": ["a"], "val": [], "test": []}))
        assert main(["preprocess", "--in", str(src), "--out", str(tmp_path / "o"), "--width", "16", "--height", "8"]) == 0
        assert tree_bytes(tmp_path / "o") == tree_bytes(src)

    def test_missing_inputs(self, workspace, tmp_path, capsys):
        src = tmp_path / "broken"
        src.mkdir()
        (src / "split.json").write_text(json.dumps({"seed": 0, "train": ["a", "b"], "val": [], "test": []}))
        assert main(["preprocess", "--in", str(src), "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err.splitlines()
        assert sum("missing" in line for line in err) == 5
        assert ERROR_LINE.match(err[-1])

    def test_bad_radii(self, workspace, tmp_path, capsys):
        assert main(["preprocess", "--in", str(workspace / "raw"), "--out", str(tmp_path / "o"), "--radii", "2,1"]) == 2
        assert_single_error_line(capsys, "usage")


class TestTrain:
    def test_artifacts(self, workspace):
        run = workspace / "run"
        assert (run / "last.ckpt").is_file() and (run / "best.ckpt").is_file()
        with open(run / "log.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 2 and 0 <= float(rows[-1]["val_dsc"]) <= 1

    def test_unknown_key(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({**TINY, "learning_rate": 0.1, "epochs": -1}))
        assert main(["train", "--config", str(cfg), "--data", str(workspace / "pre"), "--out", str(tmp_path / "r")]) == 2
        line = assert_single_error_line(capsys, "config")
        assert "'learning_rate'" in line

    def test_all_value_errors_listed(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({**TINY, "epochs": -1, "batch": 0}))
        assert main(["train", "--config", str(cfg), "--data", str(workspace / "pre"), "--out", str(tmp_path / "r")]) == 2
        line = assert_single_error_line(capsys, "config")
        assert "epochs" in line and "batch" in line

    def test_resume_flag(self, workspace, tmp_path):
        cfg1 = tmp_path / "one.json"
        cfg1.write_text(json.dumps({**TINY, "epochs": 1}))
        out = tmp_path / "r"
        assert main(["train", "--config", str(cfg1), "--data", str(workspace / "pre"), "--out", str(out)]) == 0
        cfg2 = workspace / "cfg.json"
        assert main(["train", "--config", str(cfg2), "--data", str(workspace / "pre"), "--out", str(out), "--resume", str(out / "last.ckpt")]) == 0
        assert (out / "last.ckpt").read_bytes() == (workspace / "run" / "last.ckpt").read_bytes()

    def test_missing_dataset(self, workspace, tmp_path, capsys):
        assert main(["train", "--config", str(workspace / "cfg.json"), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 1
        assert_single_error_line(capsys, "data")


class TestEval:
    def test_oracle(self, workspace, tmp_path, capsys):
        out = tmp_path / "o.csv"
        assert main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--data", str(workspace / "pre"), "--split", "train", "--csv", str(out), "--oracle"]) == 0
        assert out.read_text().splitlines()[1] == "ORACLE,1.000000,1.000000,1.000000,1.000000,1.000000,1.000000"
        assert "ORACLE,1.000000" in capsys.readouterr().out

    def test_deterministic_and_per_class(self, workspace, tmp_path):
        args = ["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--data", str(workspace / "pre"), "--split", "test"]
        assert main(args + ["--csv", str(tmp_path / "a.csv")]) == 0
        assert main(args + ["--csv", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert (tmp_path / "a_per_class.csv").read_bytes() == (tmp_path / "b_per_class.csv").read_bytes()
        header, *rows = (tmp_path / "a_per_class.csv").read_text().splitlines()
        assert header == "model,acc,dsc,ji,precision,recall,specificity"
        assert len(rows) == 33

    def test_checkpoint_config_mismatch(self, workspace, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--data", str(workspace / "raw"), "--split", "test", "--csv", str(tmp_path / "x.csv")]) == 1
        assert "does not match" in assert_single_error_line(capsys, "data")

    def test_corrupt_checkpoint(self, workspace, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes((workspace / "run" / "last.ckpt").read_bytes()[:100])
        assert main(["eval", "--checkpoint", str(bad), "--data", str(workspace / "pre"), "--csv", str(tmp_path / "x.csv")]) == 1
        assert_single_error_line(capsys, "format")


class TestPredict:
    def test_mask_and_overlay(self, workspace, tmp_path):
        args = ["predict", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--image", str(workspace / "pre" / "images" / "s0001.pgm")]
        assert main(args + ["--out", str(tmp_path / "m.pgm"), "--overlay", str(tmp_path / "o.pgm")]) == 0
        assert main(args + ["--out", str(tmp_path / "m2.pgm")]) == 0
        mask = read_pgm(tmp_path / "m.pgm")
        assert mask.shape == (16, 32) and mask.max() <= 32
        assert (tmp_path / "m.pgm").read_bytes() == (tmp_path / "m2.pgm").read_bytes()
        assert read_pgm(tmp_path / "o.pgm").shape == (16, 32)

    def test_extent_mismatch(self, workspace, tmp_path, capsys):
        assert main(["predict", "--checkpoint", str(workspace / "run" / "last.ckpt"), "--image", str(workspace / "raw" / "images" / "s0001.pgm"), "--out", str(tmp_path / "m.pgm")]) == 1
        assert_single_error_line(capsys, "data")


class TestGradcheck:
    def test_default_seed_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "conv2d" in out and "tiny_model" in out and "FAIL" not in out

    def test_fault_canary(self, capsys):
        assert main(["gradcheck", "--inject-fault", "layer_norm"]) == 1
        captured = capsys.readouterr()
        assert "layer_norm" in captured.out and "FAIL" in captured.out
        assert ERROR_LINE.match(captured.err.strip())

    def test_unknown_fault_op(self, capsys):
        assert main(["gradcheck", "--inject-fault", "nope"]) == 2
        assert_single_error_line(capsys, "usage")


class TestAblation:
    def test_rows(self, workspace, tmp_path, capsys):
        assert main(["ablation", "--config", str(workspace / "cfg.json"), "--data", str(workspace / "pre"), "--out", str(tmp_path / "abl")]) == 0
        text = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
        assert text[0] == "model,acc,dsc,ji,precision,recall,specificity"
        assert [r.split(",")[0] for r in text[1:]] == ["VARIATION A", "VARIATION B", "VARIATION C", "VARIATION D", "PROPOSED"]
        for row in text[1:]:
            assert all(0 <= float(v) <= 1 for v in row.split(",")[1:])
        assert "seed 1" in capsys.readouterr().out


class TestParser:
    def test_usage_error_single_line(self, capsys):
        assert main(["train", "--config"]) == 2
        assert_single_error_line(capsys, "usage")
        assert main([]) == 2
        assert_single_error_line(capsys, "usage")

    @pytest.mark.parametrize("command", ["generate", "preprocess", "train", "eval", "predict", "gradcheck", "ablation"])
    def test_help_lists_every_flag_with_default(self, command):
        parser = build_parser()
        sub = next(a for a in parser._actions if a.dest == "command").choices[command]
        text = sub.format_help()
        for action in sub._actions:
            if action.option_strings and action.dest != "help":
                assert action.option_strings[-1] in text
                if action.default is not None and not action.required and action.default is not False:
                    assert f"(default: {action.default})" in text

    def test_generate_defaults_match_data_defaults(self):
        parser = build_parser()
        sub = next(a for a in parser._actions if a.dest == "command").choices["generate"]
        defaults = {a.dest: a.default for a in sub._actions}
        cfg = RunConfig()
        assert (defaults["width"], defaults["height"]) == (cfg.width, cfg.height)


def test_readme_documents_default_config():
    text = (Path(__file__).resolve().parents[1] / "README.md").read_text()
    block = re.search(r"```json\n(.*?)```", text, re.S).group(1)
    assert block == RunConfig().to_json()
