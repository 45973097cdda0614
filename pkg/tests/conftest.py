import dataclasses
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from vlfa.body import BodyTemplate
from vlfa.camera import Camera


@pytest.fixture(scope="session")
def template():
    return BodyTemplate.default()


@pytest.fixture(scope="session")
def camera():
    return Camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL_CONFIG = {
    "seed": 5,
    "data": {"n_train": 1000, "n_diffusion": 2000, "n_test": 100},
    "regressor": {"epochs": 8},
    "vqvae": {"epochs": 8, "codebook_size": 64},
    "align": {"epochs": 5},
    "diffusion": {"epochs": 12, "hidden": 128},
    "eval": {"seeds": [0, 1], "masks": ["all", "no-text"]},
}


@pytest.fixture(scope="session")
def small_config():
    from vlfa.config import RunConfig

    return RunConfig.from_dict(SMALL_CONFIG)


@pytest.fixture(scope="session")
def small_pipeline(small_config):
    """Checkpoints and test scenes from a scaled-down training run."""
    from vlfa.scenes import SceneBatch
    from vlfa import stages

    cfg = small_config
    train = SceneBatch.from_records(stages.generate_split(cfg, "train"))
    test = SceneBatch.from_records(stages.generate_split(cfg, "test"))
    ckpts = {"regressor": stages.regressor_stage(train, cfg)}
    ckpts["vqvae"] = stages.vqvae_stage(train, cfg)
    ckpts["text"] = stages.align_stage(train, stages.vqvae_from(ckpts["vqvae"]), cfg)
    partial = stages.partial_models(ckpts)
    diff = SceneBatch.from_records(stages.generate_split(cfg, "diffusion"))
    ckpts["denoiser"] = stages.diffusion_stage(diff, partial, cfg)
    return ckpts, stages.models_from(ckpts), test


@dataclasses.dataclass
class FullRun:
    out: Path
    manifest: dict
    wall_s: float


@pytest.fixture(scope="session")
def full_run(tmp_path_factory):
    """The default `vlfa run-all`.  Set VLFA_FULL_RUN to an existing output directory
    to reuse a finished run instead of training from scratch."""
    from vlfa.cli import main
    from vlfa.config import RunConfig

    given = os.environ.get("VLFA_FULL_RUN")
    if given:
        out = Path(given)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_hash"] == RunConfig().hash(), "VLFA_FULL_RUN was not made with the default config"
        return FullRun(out, manifest, float(sum(manifest["timings_s"].values())))
    out = tmp_path_factory.mktemp("full-run")
    start = time.time()
    assert main(["run-all", "--out", str(out)]) == 0
    wall = time.time() - start
    return FullRun(out, json.loads((out / "manifest.json").read_text()), wall)


@pytest.fixture(scope="session")
def full_models(full_run):
    from vlfa.scenes import SceneBatch, read_corpus
    from vlfa.stages import load_models

    return load_models(full_run.out), SceneBatch.from_records(read_corpus(full_run.out / "test.jsonl"))


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
