import dataclasses
import json
import shutil
import subprocess

import pytest

from vlfa import stages
from vlfa.checkpoint import load_checkpoint, save_checkpoint
from vlfa.cli import main
from vlfa.errors import TrainingError

TINY = {"seed": 3, "data": {"n_train": 1000, "n_diffusion": 500, "n_test": 64},
        "regressor": {"epochs": 2}, "vqvae": {"epochs": 2}, "align": {"epochs": 2},
        "diffusion": {"epochs": 2, "hidden": 64}, "eval": {"seeds": [0], "masks": ["all", "no-text"]}}


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.fixture(scope="module")
def tiny_run(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run-all", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


def test_run_all_is_bit_identical_on_rerun(tiny_run, tiny_config, tmp_path):
    assert main(["run-all", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "ablation.csv").read_bytes() == (tiny_run / "ablation.csv").read_bytes()
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert not list(tiny_run.glob("*.partial"))
    lines = (tiny_run / "ablation.csv").read_text().splitlines()
    assert lines[0] == "mask,seed,n_scenes,mpjpe_mm,pa_mpjpe_mm,flags"
    assert [line.split(",")[0] for line in lines[1:]] == ["gaussian", "init", "all", "no-text"]


def test_ablate_subcommand_matches_run_all(tiny_run, tmp_path):
    code = main(["ablate", "--data", str(tiny_run / "test.jsonl"), "--ckpt-dir", str(tiny_run),
                 "--out", str(tmp_path), "--masks", "all", "no-text", "--seeds", "0"])
    assert code == 0
    assert (tmp_path / "ablation.csv").read_bytes() == (tiny_run / "ablation.csv").read_bytes()


def test_failed_stage_leaves_partial_artifacts(tiny_config, tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise TrainingError("synthetic failure")

    monkeypatch.setattr(stages, "diffusion_stage", boom)
    assert main(["run-all", "--config", str(tiny_config), "--out", str(tmp_path)]) == 1
    assert not (tmp_path / "manifest.json").exists()
    status = json.loads((tmp_path / "manifest.json.partial").read_text())
    assert status["status"] == "failed" and status["failed_stage"] == "train-diffusion"
    assert (tmp_path / "regressor.ckpt.partial").exists()
    assert not (tmp_path / "regressor.ckpt").exists()


def test_mixed_checkpoints_need_explicit_flag(tiny_run, tmp_path):
    for name in stages.CHECKPOINTS.values():
        shutil.copy(tiny_run / name, tmp_path / name)
    ckpt = load_checkpoint(tmp_path / "text.ckpt")
    save_checkpoint(tmp_path / "text.ckpt", dataclasses.replace(ckpt, config_hash="0" * 16))
    args = ["eval", "--data", str(tiny_run / "test.jsonl"), "--ckpt-dir", str(tmp_path), "--mask", "init",
            "--out", str(tmp_path / "e.csv")]
    assert main(args) == 2
    assert main(args + ["--allow-mixed", "--json", str(tmp_path / "e.json")]) == 0
    assert json.loads((tmp_path / "e.json").read_text())["config_hash"] == "mixed"


def test_invalid_config_fails_before_any_stage(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"align": {"tau": -1.0}}))
    out = tmp_path / "out"
    assert main(["run-all", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists() or not any(out.iterdir())


def test_gen_data_and_console_script(tmp_path):
    out = tmp_path / "scenes.jsonl"
    assert main(["gen-data", "--seed", "1", "--count", "5", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 5
    done = subprocess.run(["vlfa", "--help"], capture_output=True, text=True)
    assert done.returncode == 0 and "run-all" in done.stdout
