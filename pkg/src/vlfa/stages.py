"""Pipeline stages shared by the individual subcommands and `run-all`:
corpus generation, the four training stages and checkpoint loading."""

from __future__ import annotations

import logging
from pathlib import Path

from .body import BodyTemplate
from .camera import Camera
from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig
from .diffusion import DenoiserNet, Guidance, NoiseSchedule, train_diffusion
from .errors import ConfigError
from .evaluation import ModelSet, prepare
from .regressor import RegressorLossWeights, RegressorNet, train_regressor
from .scenes import NoiseConfig, SceneBatch, SceneRecord, generate_corpus
from .seeding import substream
from .text_align import TextEncoder, train_alignment
from .vqvae import PoseVqvae, reconstruction_mpjpe, train_vqvae

log = logging.getLogger(__name__)

# scene-id offsets keep the three corpora disjoint under one root seed
SPLIT_START = {"train": 0, "diffusion": 1_000_000, "test": 2_000_000}
CHECKPOINTS = {"regressor": "regressor.ckpt", "vqvae": "vqvae.ckpt", "text": "text.ckpt", "denoiser": "denoiser.ckpt"}


def camera_for(cfg: RunConfig) -> Camera:
    s = cfg.data.image_size
    return Camera(cfg.data.focal, (s / 2, s / 2), (s, s))


def noise_for(cfg: RunConfig) -> NoiseConfig:
    return NoiseConfig(cfg.data.sigma_px, cfg.data.p_occ)


def generate_split(cfg: RunConfig, split: str) -> list[SceneRecord]:
    count = {"train": cfg.data.n_train, "diffusion": cfg.data.n_diffusion, "test": cfg.data.n_test}[split]
    return generate_corpus(cfg.seed, count, camera_for(cfg), noise_for(cfg), start_id=SPLIT_START[split])


def _ckpt(module: str, tensors: dict, cfg: RunConfig, corpus_hash: str, **extra) -> Checkpoint:
    return Checkpoint(module, dict(tensors), cfg.to_dict(), cfg.seed, corpus_hash, cfg.hash(), extra)


def regressor_stage(batch: SceneBatch, cfg: RunConfig, corpus_hash: str = "") -> Checkpoint:
    rc = cfg.regressor
    template = BodyTemplate.default()
    weights = RegressorLossWeights(rc.lambda_smpl, rc.lambda_joint, rc.lambda_reproj)
    res = train_regressor(batch, template, weights, rc.epochs, rc.lr, rc.batch_size,
                          substream(cfg.seed, "train-regressor"), tuple(rc.hidden))
    return _ckpt("regressor", {**res.net.state_dict(), **template.state_dict()}, cfg, corpus_hash,
                 hidden=list(rc.hidden), losses=res.losses)


def vqvae_stage(batch: SceneBatch, cfg: RunConfig, corpus_hash: str = "") -> Checkpoint:
    vc = cfg.vqvae
    res = train_vqvae(batch.theta, vc.epochs, vc.lr, vc.batch_size, substream(cfg.seed, "train-vqvae"),
                      vc.alpha, vc.decay, vc.codebook_size)
    recon = reconstruction_mpjpe(res.model, batch.theta, batch.beta, BodyTemplate.default())
    log.info("VQ-VAE reconstruction MPJPE on training poses: %.1f mm", recon)
    return _ckpt("vqvae", res.model.state_dict(), cfg, corpus_hash, losses=res.losses,
                 perplexity=res.perplexities[-1], reconstruction_mpjpe_mm=recon)


def align_stage(batch: SceneBatch, vqvae: PoseVqvae, cfg: RunConfig, corpus_hash: str = "",
                heldout: SceneBatch | None = None) -> Checkpoint:
    ac = cfg.align
    res = train_alignment(batch.theta, batch.tokens, vqvae, ac.epochs, ac.lr, ac.batch_size,
                          substream(cfg.seed, "train-align"), ac.tau, ac.symmetric, ac.rec_weight,
                          heldout=(heldout.theta, heldout.tokens) if heldout is not None else None)
    return _ckpt("text", res.encoder.state_dict(), cfg, corpus_hash, losses=res.losses, retrieval=res.retrieval)


def diffusion_stage(batch: SceneBatch, models: ModelSet, cfg: RunConfig, corpus_hash: str = "") -> Checkpoint:
    dc = cfg.diffusion
    prep = prepare(batch, models.regressor, models.text)
    schedule = NoiseSchedule(dc.T, dc.beta_start, dc.beta_end)
    guidance = Guidance(models.template, batch.camera, models.vqvae, dc.squared_text_loss)
    res = train_diffusion(prep.x_gt, prep.x_init, prep.obs, guidance, schedule, dc.epochs, dc.lr, dc.batch_size,
                          substream(cfg.seed, "train-diffusion"), dc.sigma, dc.p_all, dc.hidden)
    return _ckpt("denoiser", res.net.state_dict(), cfg, corpus_hash, losses=res.losses,
                 hidden=dc.hidden, squared_text_loss=dc.squared_text_loss)


# -- loading ------------------------------------------------------------------
def regressor_from(ckpt: Checkpoint) -> tuple[RegressorNet, BodyTemplate]:
    net = RegressorNet(hidden=tuple(ckpt.extra.get("hidden", (256, 256))))
    net.load_state_dict(ckpt.tensors)
    return net, BodyTemplate.from_state_dict(ckpt.tensors)


def vqvae_from(ckpt: Checkpoint) -> PoseVqvae:
    size, dim = ckpt.tensors["vq.codebook"].shape
    model = PoseVqvae(codebook_size=size, latent_dim=dim)
    model.load_state_dict(ckpt.tensors)
    return model


def text_from(ckpt: Checkpoint) -> TextEncoder:
    enc = TextEncoder(vocab_size=ckpt.tensors["text.token_table"].shape[0])
    enc.load_state_dict(ckpt.tensors)
    return enc


def denoiser_from(ckpt: Checkpoint) -> DenoiserNet:
    net = DenoiserNet(hidden=int(ckpt.extra.get("hidden", 512)))
    net.load_state_dict(ckpt.tensors)
    return net


def check_hashes(ckpts: dict[str, Checkpoint], allow_mixed: bool = False) -> str:
    hashes = {name: c.config_hash for name, c in ckpts.items()}
    if len(set(hashes.values())) > 1:
        detail = ", ".join(f"{k}={v}" for k, v in sorted(hashes.items()))
        if not allow_mixed:
            raise ConfigError(f"checkpoints come from different configs ({detail}); pass --allow-mixed to proceed")
        log.warning("evaluating a mixed checkpoint set: %s", detail)
        return "mixed"
    return next(iter(hashes.values()), "")


def load_checkpoints(ckpt_dir, names=tuple(CHECKPOINTS)) -> dict[str, Checkpoint]:
    ckpt_dir = Path(ckpt_dir)
    paths = {n: ckpt_dir / CHECKPOINTS[n] for n in names}
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise ConfigError(f"missing checkpoint(s): {', '.join(missing)}")
    return {n: load_checkpoint(p) for n, p in paths.items()}


def load_models(ckpt_dir, allow_mixed: bool = False) -> ModelSet:
    ckpts = load_checkpoints(ckpt_dir)
    return models_from(ckpts, allow_mixed)


def models_from(ckpts: dict[str, Checkpoint], allow_mixed: bool = False) -> ModelSet:
    config_hash = check_hashes(ckpts, allow_mixed)
    regressor, template = regressor_from(ckpts["regressor"])
    return ModelSet(template, regressor, vqvae_from(ckpts["vqvae"]), text_from(ckpts["text"]),
                    denoiser_from(ckpts["denoiser"]), config_hash,
                    bool(ckpts["denoiser"].extra.get("squared_text_loss", False)))


def partial_models(ckpts: dict[str, Checkpoint], allow_mixed: bool = False) -> ModelSet:
    """Regressor, VQ-VAE and text encoder only (the denoiser slot is a fresh net)."""
    regressor, template = regressor_from(ckpts["regressor"])
    return ModelSet(template, regressor, vqvae_from(ckpts["vqvae"]), text_from(ckpts["text"]), DenoiserNet(),
                    check_hashes(ckpts, allow_mixed))
