"""Run configuration: every stage's hyperparameters in one JSON document."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import MASKS
from .errors import ConfigError


@dataclass
class DataConfig:
    n_train: int = 8000  # regressor, VQ-VAE and text alignment
    n_diffusion: int = 24000  # separate scenes for the denoiser
    n_test: int = 2000
    sigma_px: float = 3.0
    p_occ: float = 0.15
    focal: float = 500.0
    image_size: int = 512


@dataclass
class RegressorConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    hidden: list[int] = field(default_factory=lambda: [256, 256])
    lambda_smpl: float = 1.0
    lambda_joint: float = 5.0
    lambda_reproj: float = 0.01


@dataclass
class VqvaeConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 128
    alpha: float = 0.25
    decay: float = 0.99
    codebook_size: int = 512


@dataclass
class AlignConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 64
    tau: float = 0.07
    symmetric: bool = False
    rec_weight: float = 1.0


@dataclass
class DiffusionConfig:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 128
    sigma: float = 0.5
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    p_all: float = 0.5
    hidden: int = 512
    squared_text_loss: bool = False


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    masks: list[str] = field(default_factory=lambda: ["image", "keypoints", "text", "no-keypoints", "no-text", "all"])


SECTIONS = {"data": DataConfig, "regressor": RegressorConfig, "vqvae": VqvaeConfig, "align": AlignConfig,
            "diffusion": DiffusionConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    vqvae: VqvaeConfig = field(default_factory=VqvaeConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - {"seed", *SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        if "seed" in doc:
            kwargs["seed"] = doc["seed"]
        for name, section in SECTIONS.items():
            if name not in doc:
                continue
            sub = doc[name]
            if not isinstance(sub, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in dataclasses.fields(section)}
            bad = set(sub) - known
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")
            kwargs[name] = section(**sub)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def validate(self) -> None:
        def need(ok: bool, msg: str) -> None:
            if not ok:
                raise ConfigError(msg)

        need(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        d = self.data
        need(d.n_train >= 1000, "data.n_train must be at least 1000")
        need(d.n_diffusion >= 0 and d.n_test >= 32, "data.n_diffusion >= 0 and data.n_test >= 32 required")
        need(d.sigma_px >= 0 and 0 <= d.p_occ < 1, "data noise needs sigma_px >= 0 and 0 <= p_occ < 1")
        need(d.focal > 0 and d.image_size > 0, "camera focal and image size must be positive")
        for name in ("regressor", "vqvae", "align", "diffusion"):
            s = getattr(self, name)
            need(s.epochs >= 1, f"{name}.epochs must be >= 1")
            need(s.lr > 0, f"{name}.lr must be positive")
            need(s.batch_size >= 2, f"{name}.batch_size must be >= 2")
        r = self.regressor
        w = (r.lambda_smpl, r.lambda_joint, r.lambda_reproj)
        need(min(w) >= 0 and max(w) > 0, "regressor loss weights must be non-negative and not all zero")
        need(all(h >= 1 for h in r.hidden), "regressor.hidden sizes must be positive")
        v = self.vqvae
        need(v.alpha >= 0 and 0 < v.decay < 1 and v.codebook_size >= 1, "invalid vqvae alpha/decay/codebook_size")
        a = self.align
        need(a.tau > 0, "align.tau must be positive")
        need(a.rec_weight >= 0, "align.rec_weight must be non-negative")
        f = self.diffusion
        need(f.sigma > 0, "diffusion.sigma must be positive")
        need(f.T >= 1 and 0 < f.beta_start <= f.beta_end < 1, "diffusion schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
        need(0 < f.p_all <= 1, "diffusion.p_all must lie in (0, 1]")
        need(f.hidden >= 1, "diffusion.hidden must be positive")
        e = self.eval
        need(len(e.seeds) >= 1, "eval.seeds must not be empty")
        need(all(m in MASKS for m in e.masks), f"eval.masks must be drawn from {sorted(MASKS)}")
