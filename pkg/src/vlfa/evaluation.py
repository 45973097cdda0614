"""Joint-error metrics, the ablation runner and its CSV / JSON reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .body import IDENTITY_6D, N_JOINTS, POSE_DIM, SHAPE_DIM, BodyTemplate, fk_arrays
from .diffusion import MASKS, DenoiserNet, Guidance, Observations, refine_batch
from .errors import ContractError, DimensionError
from .regressor import RegressorNet, predict_vectors
from .scenes import SceneBatch
from .seeding import substream
from .text_align import TextEncoder
from .vqvae import PoseVqvae

log = logging.getLogger(__name__)

CHUNK = 250  # scenes per refinement call; fixed so results do not depend on the worker count
RANK_TOL = 1e-9
CSV_COLUMNS = ("mask", "seed", "n_scenes", "mpjpe_mm", "pa_mpjpe_mm", "flags")
ABLATION_MASKS = ("image", "keypoints", "text", "no-keypoints", "no-text", "all")


# -- metrics ----------------------------------------------------------------
def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise DimensionError(f"joint sets differ in shape: {pred.shape} vs {gt.shape}")
    return pred, gt


def mpjpe(pred, gt) -> np.ndarray | float:
    """Mean Euclidean joint distance in millimetres; (J,3) -> float, (B,J,3) -> (B,)."""
    pred, gt = _check_pair(pred, gt)
    out = 1000.0 * np.mean(np.linalg.norm(pred - gt, axis=-1), axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class Alignment:
    aligned: np.ndarray  # (J, 3) prediction mapped onto gt
    rotation: np.ndarray  # (3, 3)
    scale: float
    translation: np.ndarray  # (3,)
    fallback: bool  # rank-deficient input, translation-only alignment used


def procrustes_align(pred, gt, scale: bool = True) -> Alignment:
    """Similarity (or, with scale=False, rigid) transform of pred that best matches gt
    in least squares.  The rotation is kept proper by flipping the last singular
    direction when the cross-covariance would give a reflection."""
    pred, gt = _check_pair(pred, gt)
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p, g = pred - mu_p, gt - mu_g
    sp = np.linalg.svd(p, compute_uv=False)
    sg = np.linalg.svd(g, compute_uv=False)
    # fewer than two independent directions: all joints collinear or coincident
    if sp[1] <= RANK_TOL * max(sp[0], 1.0) or sg[1] <= RANK_TOL * max(sg[0], 1.0):
        return Alignment(pred - mu_p + mu_g, np.eye(3), 1.0, mu_g - mu_p, True)
    U, S, Vt = np.linalg.svd(p.T @ g)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = (U @ D @ Vt).T
    s = float(np.sum(S * np.diag(D)) / np.sum(p * p)) if scale else 1.0
    t = mu_g - s * R @ mu_p
    return Alignment(s * pred @ R.T + t, R, s, t, False)


def pa_mpjpe(pred, gt, scale: bool = True) -> float:
    al = procrustes_align(pred, gt, scale)
    if al.fallback:
        log.warning("rank-deficient joint set; PA-MPJPE uses translation-only alignment")
    # the identity is a feasible transform; the least-squares fit can still lose on mean distance
    return min(mpjpe(al.aligned, gt), mpjpe(pred, gt))


def pa_mpjpe_batch(pred, gt, scale: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-scene PA-MPJPE (mm) and the translation-only fallback flags."""
    pred, gt = _check_pair(pred, gt)
    vals = np.empty(len(pred))
    flags = np.zeros(len(pred), dtype=bool)
    for i in range(len(pred)):
        al = procrustes_align(pred[i], gt[i], scale)
        vals[i] = mpjpe(al.aligned, gt[i])
        flags[i] = al.fallback
    # the identity is a feasible transform; guard against round-off above the raw error
    return np.minimum(vals, mpjpe(pred, gt)), flags


def root_relative(joints: np.ndarray) -> np.ndarray:
    return joints - joints[..., :1, :]


# -- models and inputs ------------------------------------------------------
@dataclass
class ModelSet:
    template: BodyTemplate
    regressor: RegressorNet
    vqvae: PoseVqvae
    text: TextEncoder
    denoiser: DenoiserNet
    config_hash: str = ""
    squared_text_loss: bool = False

    def guidance(self, camera) -> Guidance:
        return Guidance(self.template, camera, self.vqvae, self.squared_text_loss)


@dataclass
class Prepared:
    x_init: np.ndarray  # (B, 147) regressor [theta, trans]
    obs: Observations
    x_gt: np.ndarray  # (B, 147)


def prepare(batch: SceneBatch, regressor: RegressorNet, text: TextEncoder) -> Prepared:
    pv = predict_vectors(regressor, batch.features, batch.bbox, batch.camera)
    x_init = np.concatenate([pv[:, :POSE_DIM], pv[:, POSE_DIM + SHAPE_DIM:]], axis=1)
    obs = Observations(batch.features, batch.uv, batch.confidence, pv[:, POSE_DIM:POSE_DIM + SHAPE_DIM],
                       text.embed_batch(batch.tokens))
    return Prepared(x_init, obs, np.concatenate([batch.theta, batch.trans], axis=1))


def zero_pose_start(x_init: np.ndarray) -> np.ndarray:
    """Rest-pose rotations with the regressor's translation."""
    out = np.array(x_init, dtype=np.float64)
    out[:, :POSE_DIM] = np.tile(IDENTITY_6D, N_JOINTS)
    return out


# -- refinement over a corpus -----------------------------------------------
_WORKER: dict = {}


def _init_worker(models: ModelSet, prep: Prepared, camera) -> None:
    _WORKER.update(models=models, prep=prep, camera=camera)


def _init_pool_worker(models: ModelSet, prep: Prepared, camera) -> None:
    from threadpoolctl import threadpool_limits

    # one BLAS thread per process; parallelism comes from the pool
    _WORKER["limits"] = threadpool_limits(1)
    _init_worker(models, prep, camera)


def _refine_chunk(args) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi, mask, seed, ids, start_from_zero = args
    models, prep, camera = _WORKER["models"], _WORKER["prep"], _WORKER["camera"]
    idx = np.arange(lo, hi)
    x0 = prep.x_init[idx]
    if start_from_zero:
        x0 = zero_pose_start(x0)
    rngs = [substream(seed, "refine", int(i)) for i in ids]
    res = refine_batch(x0, prep.obs.subset(idx), models.denoiser, models.guidance(camera), mask=mask, rngs=rngs)
    return res.x, res.diverged, res.behind_steps > 0


def refine_corpus(models: ModelSet, batch: SceneBatch, prep: Prepared, mask: str, seed: int,
                  start_from_zero: bool = False, workers: int = 1) -> tuple[np.ndarray, dict[str, int]]:
    """Refined [theta, trans] for every scene plus flag counts.

    Scene i always draws its noise from substream(seed, "refine", scene_id), so
    every mask sees the same noise for the same scene.
    """
    jobs = [(lo, min(lo + CHUNK, len(batch)), mask, seed, batch.ids[lo:lo + CHUNK], start_from_zero)
            for lo in range(0, len(batch), CHUNK)]
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("fork") if "fork" in multiprocessing.get_all_start_methods() else None
        with ProcessPoolExecutor(workers, mp_context=ctx, initializer=_init_pool_worker,
                                 initargs=(models, prep, batch.camera)) as pool:
            parts = list(pool.map(_refine_chunk, jobs))
    else:
        _init_worker(models, prep, batch.camera)
        parts = [_refine_chunk(j) for j in jobs]
    x = np.concatenate([p[0] for p in parts])
    flags = {"diverged": int(sum(p[1].sum() for p in parts)), "behind": int(sum(p[2].sum() for p in parts))}
    return x, flags


# -- reports ----------------------------------------------------------------
@dataclass
class EvalReport:
    mask: str
    seed: int | str
    per_scene_mpjpe: np.ndarray
    per_scene_pa_mpjpe: np.ndarray
    flags: dict[str, int] = field(default_factory=dict)
    config_hash: str = ""

    @property
    def n_scenes(self) -> int:
        return len(self.per_scene_mpjpe)

    @property
    def mpjpe_mm(self) -> float:
        return float(np.mean(self.per_scene_mpjpe))

    @property
    def pa_mpjpe_mm(self) -> float:
        return float(np.mean(self.per_scene_pa_mpjpe))

    def flag_text(self) -> str:
        return ";".join(f"{k}={v}" for k, v in sorted(self.flags.items()))

    def row(self) -> dict:
        return {"mask": self.mask, "seed": self.seed, "n_scenes": self.n_scenes,
                "mpjpe_mm": f"{self.mpjpe_mm:.6f}", "pa_mpjpe_mm": f"{self.pa_mpjpe_mm:.6f}",
                "flags": self.flag_text()}

    def to_json(self, per_scene: bool = False) -> dict:
        out = {"mask": self.mask, "seed": self.seed, "n_scenes": self.n_scenes, "mpjpe_mm": self.mpjpe_mm,
               "pa_mpjpe_mm": self.pa_mpjpe_mm, "flags": dict(self.flags), "config_hash": self.config_hash}
        if per_scene:
            out["per_scene_mpjpe_mm"] = self.per_scene_mpjpe.tolist()
            out["per_scene_pa_mpjpe_mm"] = self.per_scene_pa_mpjpe.tolist()
        return out


def evaluate_params(x: np.ndarray, beta: np.ndarray, batch: SceneBatch, template: BodyTemplate, mask: str,
                    seed, flags: dict[str, int] | None = None, config_hash: str = "") -> EvalReport:
    """Pelvis-centred MPJPE and PA-MPJPE of estimates x = [theta, trans] with shape beta."""
    pred = root_relative(fk_arrays(x[:, :POSE_DIM], beta, x[:, POSE_DIM:], template).joints)
    gt = root_relative(fk_arrays(batch.theta, batch.beta, batch.trans, template).joints)
    pa, fallback = pa_mpjpe_batch(pred, gt)
    flags = dict(flags or {})
    flags["pa_fallback"] = int(fallback.sum())
    return EvalReport(mask, seed, mpjpe(pred, gt), pa, flags, config_hash)


def evaluate_mask(models: ModelSet, batch: SceneBatch, mask: str, seed: int, workers: int = 1,
                  prep: Prepared | None = None) -> EvalReport:
    """One ablation row: "init" (regressor only), "gaussian" (diffusion from a rest
    pose, all conditions) or a condition mask."""
    prep = prep or prepare(batch, models.regressor, models.text)
    if mask == "init":
        return evaluate_params(prep.x_init, prep.obs.beta, batch, models.template, mask, seed,
                               config_hash=models.config_hash)
    if mask == "gaussian":
        x, flags = refine_corpus(models, batch, prep, "all", seed, start_from_zero=True, workers=workers)
    elif mask in MASKS:
        x, flags = refine_corpus(models, batch, prep, mask, seed, workers=workers)
    else:
        raise ContractError(f"unknown ablation row {mask!r}")
    return evaluate_params(x, prep.obs.beta, batch, models.template, mask, seed, flags, models.config_hash)


def run_ablation(models: ModelSet, batch: SceneBatch, masks=ABLATION_MASKS, seeds=(0, 1, 2),
                 workers: int = 1) -> list[EvalReport]:
    """Rows gaussian, init and each mask for every seed, followed (when there is more
    than one seed) by one seed-averaged row per mask (seed "mean")."""
    if not seeds:
        raise ContractError("at least one seed is required")
    for m in masks:
        if m not in MASKS:
            raise ContractError(f"unknown condition mask {m!r}")
    prep = prepare(batch, models.regressor, models.text)
    rows = ["gaussian", "init", *masks]
    reports = []
    for seed in seeds:
        for m in rows:
            rep = evaluate_mask(models, batch, m, int(seed), workers, prep)
            log.info("seed %s %-12s MPJPE %.2f mm  PA-MPJPE %.2f mm", seed, m, rep.mpjpe_mm, rep.pa_mpjpe_mm)
            reports.append(rep)
    if len(seeds) == 1:
        return reports
    for m in rows:
        group = [r for r in reports if r.mask == m]
        flags = {}
        for r in group:
            for k, v in r.flags.items():
                flags[k] = flags.get(k, 0) + v
        # per-scene values averaged across seeds, so the aggregate is the mean of seed means
        reports.append(EvalReport(m, "mean", np.mean([r.per_scene_mpjpe for r in group], axis=0),
                                  np.mean([r.per_scene_pa_mpjpe for r in group], axis=0), flags,
                                  models.config_hash))
    return reports


def reports_to_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def write_reports(reports: list[EvalReport], csv_path, json_path=None, config: dict | None = None,
                  per_scene: bool = False) -> None:
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(reports_to_csv(reports))
    if json_path is not None:
        doc = {"config": config or {}, "config_hash": reports[0].config_hash if reports else "",
               "rows": [r.to_json(per_scene) for r in reports]}
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)


def seed_means(reports: list[EvalReport]) -> dict[str, float]:
    means = {r.mask: r.mpjpe_mm for r in reports if r.seed == "mean"}
    return means or {r.mask: r.mpjpe_mm for r in reports}
