import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from lgfd import config as cfgmod
from lgfd.cli import _synthetic, build_parser, main
from lgfd.data import load_coco

FIXTURES = Path(__file__).parent / "fixtures"
FIXTURE = FIXTURES / "fixture.ini"

SUBCOMMAND_FLAGS = {
    "gen-data": ["--config", "--out", "--count", "--split"],
    "caption": ["--annotations", "--out"],
    "train": ["--config", "--data", "--eval-data", "--run-dir", "--epochs"],
    "eval": ["--ckpt", "--data", "--out"],
    "ablate": ["--config", "--arms", "--seeds", "--epochs", "--jobs", "--out", "--cache"],
    "gradcheck": ["--config", "--count"],
    "heatmaps": ["--ckpt", "--data", "--out", "--limit"],
}


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "fixture"
    assert run("gen-data", "--config", FIXTURE, "--out", out, "--count", 8) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("runs") / "r"
    assert run("train", "--config", FIXTURE, "--data", dataset, "--run-dir", out) == 0
    return out


class TestGenData:
    def test_files(self, dataset):
        assert len(list((dataset / "images").glob("*.pgm"))) == 8
        assert (dataset / "annotations.json").exists()

    def test_bit_identical_rerun(self, dataset, tmp_path):
        assert run("gen-data", "--config", FIXTURE, "--out", tmp_path, "--count", 8) == 0
        for p in sorted(dataset.rglob("*")):
            if p.is_file():
                assert (tmp_path / p.relative_to(dataset)).read_bytes() == p.read_bytes(), p

    def test_loads_back(self, dataset):
        data = load_coco(dataset / "annotations.json", dataset / "images")
        assert len(data) == 8 and data.categories == ["person", "car", "bicycle"]
        ref = _synthetic(cfgmod.load(FIXTURE), "train", 8)
        assert [im.boxes for im in data] == [im.boxes for im in ref]

    def test_embeds_config(self, dataset):
        assert (dataset / "config.ini").read_text() == cfgmod.dumps(cfgmod.load(FIXTURE))


class TestCaption:
    def test_empty_image_line(self, tmp_path):
        out = tmp_path / "c.tsv"
        assert run("caption", "--annotations", FIXTURES / "captions" / "annotations.json", "--out", out) == 0
        first = out.read_text().splitlines()[0]
        assert first.split("\t")[1] == "an infrared image with no objects."

    def test_stdout(self, capsys):
        assert run("caption", "--annotations", FIXTURES / "captions" / "annotations.json") == 0
        assert capsys.readouterr().out == (FIXTURES / "captions" / "golden.tsv").read_text()


class TestTrainEval:
    def test_run_dir(self, run_dir):
        assert len((run_dir / "metrics.jsonl").read_text().splitlines()) == 1
        for name in ("report.json", "ckpt_last.bin", "ckpt_best.bin"):
            assert (run_dir / name).exists()

    def test_report_embeds_config(self, run_dir):
        report = json.loads((run_dir / "report.json").read_text())
        assert report["config"]["train"] == cfgmod.dumps(cfgmod.load(FIXTURE))

    def test_eval_reproduces_report(self, run_dir, dataset, tmp_path):
        out = tmp_path / "eval.json"
        assert run("eval", "--ckpt", run_dir / "ckpt_last.bin", "--data", dataset, "--out", out) == 0
        final = json.loads((run_dir / "report.json").read_text())["final"]
        assert json.loads(out.read_text()) == final

    def test_train_rerun_bit_identical(self, run_dir, dataset, tmp_path):
        assert run("train", "--config", FIXTURE, "--data", dataset, "--run-dir", tmp_path) == 0
        for name in ("metrics.jsonl", "report.json", "ckpt_last.bin", "ckpt_best.bin"):
            assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()

    def test_heatmaps(self, run_dir, dataset, tmp_path):
        assert run("heatmaps", "--ckpt", run_dir / "ckpt_last.bin", "--data", dataset, "--out", tmp_path, "--limit", 3) == 0
        assert len(list(tmp_path.glob("*.pgm"))) == 3 * 2 * 2

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run("eval", "--ckpt", tmp_path / "nope.bin") == 1
        assert "nope.bin" in capsys.readouterr().err

    def test_nan_abort_exits_2(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "diverge.ini"
        cfg.write_text(FIXTURE.read_text().replace("[train]\n", "[train]\nlr = 1e12\n").replace("epochs = 1", "epochs = 3"))
        with pytest.warns(RuntimeWarning):
            code = run("train", "--config", cfg, "--data", dataset, "--run-dir", tmp_path / "r")
        assert code == 2
        assert "non-finite loss" in capsys.readouterr().err


class TestAblateGradcheck:
    def test_ablate_four_rows(self, tmp_path, capsys):
        code = run("ablate", "--config", FIXTURE, "--arms", "table3", "--seeds", 2, "--epochs", 1, "--out", tmp_path)
        assert code == 0
        text = capsys.readouterr().out
        assert len(text.splitlines()) == 2 + 4
        doc = json.loads((tmp_path / "ablation.json").read_text())
        assert [r["arm"] for r in doc["rows"]] == ["baseline", "sfa", "ofd", "full"]
        assert all(len(r["ap50"]) == 2 for r in doc["rows"])
        assert (tmp_path / "ablation.txt").read_text() == text

    def test_unknown_arm_exits_1(self, capsys):
        assert run("ablate", "--config", FIXTURE, "--arms", "table9") == 1
        assert "table9" in capsys.readouterr().err

    def test_gradcheck(self, capsys):
        assert run("gradcheck", "--config", FIXTURE) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["passed"] and min(doc["checked"].values()) >= 20


class TestParser:
    @pytest.mark.parametrize("cmd", sorted(SUBCOMMAND_FLAGS))
    def test_help_lists_every_flag(self, cmd, capsys):
        assert main([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        for flag in SUBCOMMAND_FLAGS[cmd]:
            assert flag in text

    def test_flag_table_is_complete(self):
        sub = next(a for a in build_parser()._actions if a.dest == "command")
        assert set(sub.choices) == set(SUBCOMMAND_FLAGS)
        for name, parser in sub.choices.items():
            flags = {o for a in parser._actions for o in a.option_strings if o.startswith("--") and o != "--help"}
            assert flags == set(SUBCOMMAND_FLAGS[name])

    def test_unknown_flag_exits_1(self, capsys):
        assert main(["train", "--run-dir", "x", "--bogus"]) == 1
        assert "--bogus" in capsys.readouterr().err

    def test_missing_command_exits_1(self):
        assert main([]) == 1

    def test_bad_config_key_exits_1(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text("[model]\nwidth = 3\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "model.width" in capsys.readouterr().err


def test_full_pipeline_console_script(tmp_path):
    """gen-data -> caption -> train -> eval -> heatmaps through the installed entry point."""
    exe = [sys.executable, "-m", "lgfd.cli"]
    start = time.perf_counter()
    steps = [
        ["gen-data", "--config", FIXTURE, "--out", tmp_path / "d"],
        ["caption", "--annotations", tmp_path / "d" / "annotations.json", "--out", tmp_path / "c.tsv"],
        ["train", "--config", FIXTURE, "--data", tmp_path / "d", "--run-dir", tmp_path / "r"],
        ["eval", "--ckpt", tmp_path / "r" / "ckpt_last.bin", "--data", tmp_path / "d", "--out", tmp_path / "e.json"],
        ["heatmaps", "--ckpt", tmp_path / "r" / "ckpt_best.bin", "--data", tmp_path / "d", "--out", tmp_path / "h"],
    ]
    for step in steps:
        proc = subprocess.run(exe + [str(s) for s in step], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
    assert time.perf_counter() - start < 300
    assert len((tmp_path / "c.tsv").read_text().splitlines()) == 8
    assert len(list((tmp_path / "h").glob("*.pgm"))) == 8 * 2 * 2
