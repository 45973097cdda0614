"""`vlfa` command-line interface."""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

log = logging.getLogger("vlfa")

THREADS_ENV = "VLFA_THREADS"
PARTIAL = ".partial"


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if n < 1:
        raise SystemExit(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


# -- helpers ------------------------------------------------------------------
def _config(args):
    from .config import RunConfig

    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _override(cfg, section: str, args, names) -> None:
    sub = getattr(cfg, section)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            setattr(sub, name, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()


def _batch(path):
    from .scenes import SceneBatch, read_corpus

    return SceneBatch.from_records(read_corpus(path))


def _batches(paths):
    from .scenes import SceneBatch, read_corpus

    records = [r for p in paths for r in read_corpus(p)]
    return SceneBatch.from_records(records)


def _corpus_hash(paths) -> str:
    from .checkpoint import file_hash

    return ",".join(file_hash(p)[:16] for p in paths)


def _save(ckpt, path) -> None:
    from .checkpoint import save_checkpoint

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, ckpt)
    log.info("wrote %s", path)


# -- subcommands --------------------------------------------------------------
def cmd_gen_data(args) -> None:
    from .camera import Camera
    from .scenes import NoiseConfig, generate_corpus, write_corpus

    s = args.image_size
    records = generate_corpus(args.seed, args.count, Camera(args.focal, (s / 2, s / 2), (s, s)),
                              NoiseConfig(args.sigma_px, args.p_occ), start_id=args.start_id)
    write_corpus(records, args.out)
    log.info("wrote %d scenes to %s", len(records), args.out)


def cmd_train_regressor(args) -> None:
    from .stages import regressor_stage

    cfg = _config(args)
    _override(cfg, "regressor", args, ("epochs", "lr"))
    _save(regressor_stage(_batch(args.data), cfg, _corpus_hash([args.data])), args.out)


def cmd_train_vqvae(args) -> None:
    from .stages import vqvae_stage

    cfg = _config(args)
    _override(cfg, "vqvae", args, ("epochs", "lr"))
    _save(vqvae_stage(_batch(args.data), cfg, _corpus_hash([args.data])), args.out)


def cmd_train_align(args) -> None:
    from .checkpoint import load_checkpoint
    from .stages import align_stage, vqvae_from

    cfg = _config(args)
    _override(cfg, "align", args, ("epochs", "lr", "tau"))
    heldout = _batch(args.heldout) if args.heldout else None
    ckpt = align_stage(_batch(args.data), vqvae_from(load_checkpoint(args.vqvae)), cfg, _corpus_hash([args.data]),
                       heldout)
    if ckpt.extra.get("retrieval") is not None:
        print(f"held-out text-to-pose top-1 at batch 32: {ckpt.extra['retrieval']:.3f}")
    _save(ckpt, args.out)


def cmd_train_diffusion(args) -> None:
    from .stages import diffusion_stage, load_checkpoints, partial_models

    cfg = _config(args)
    _override(cfg, "diffusion", args, ("epochs", "lr", "sigma"))
    models = partial_models(load_checkpoints(args.ckpt_dir, ("regressor", "vqvae", "text")), args.allow_mixed)
    ckpt = diffusion_stage(_batches(args.data), models, cfg, _corpus_hash(args.data))
    _save(ckpt, args.out or Path(args.ckpt_dir) / "denoiser.ckpt")


def cmd_refine(args) -> None:
    import numpy as np

    from .diffusion import refine_batch
    from .evaluation import CHUNK, prepare
    from .seeding import substream
    from .stages import load_models

    models = load_models(args.ckpt_dir, args.allow_mixed)
    batch = _batch(args.data)
    prep = prepare(batch, models.regressor, models.text)
    guidance = models.guidance(batch.camera)
    traj_fh = open(args.trajectory, "w", encoding="utf-8") if args.trajectory else None
    try:
        with open(args.out, "w", encoding="utf-8") as out:
            for lo in range(0, len(batch), CHUNK):
                idx = np.arange(lo, min(lo + CHUNK, len(batch)))
                rngs = [substream(args.seed, "refine", int(i)) for i in batch.ids[idx]]
                res = refine_batch(prep.x_init[idx], prep.obs.subset(idx), models.denoiser, guidance, mask=args.mask,
                                   rngs=rngs, keep_trajectory=traj_fh is not None)
                for k, i in enumerate(idx):
                    x = res.x[k]
                    rec = {"id": int(batch.ids[i]), "mask": args.mask, "seed": args.seed,
                           "params": {"theta": x[:144].tolist(), "beta": prep.obs.beta[i].tolist(),
                                      "trans": x[144:].tolist()},
                           "diverged": bool(res.diverged[k]), "behind_steps": int(res.behind_steps[k])}
                    out.write(json.dumps(rec) + "\n")
                    if traj_fh is not None:
                        traj_fh.write(json.dumps({"id": int(batch.ids[i]), "residuals": res.trajectory[k].tolist()}) + "\n")
    finally:
        if traj_fh is not None:
            traj_fh.close()
    log.info("wrote %d refined scenes to %s", len(batch), args.out)


def cmd_eval(args) -> None:
    from .evaluation import evaluate_mask, write_reports
    from .stages import load_models

    models = load_models(args.ckpt_dir, args.allow_mixed)
    rep = evaluate_mask(models, _batch(args.data), args.mask, args.seed, thread_count())
    write_reports([rep], args.out, args.json, per_scene=True)
    print(f"{rep.mask} seed {rep.seed}: MPJPE {rep.mpjpe_mm:.2f} mm, PA-MPJPE {rep.pa_mpjpe_mm:.2f} mm ({rep.flag_text()})")


def cmd_ablate(args) -> None:
    from .evaluation import run_ablation, write_reports
    from .stages import load_models

    models = load_models(args.ckpt_dir, args.allow_mixed)
    reports = run_ablation(models, _batch(args.data), args.masks, args.seeds, thread_count())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "ablation.csv", out / "ablation.json",
                  {"masks": list(args.masks), "seeds": list(args.seeds), "ckpt_dir": str(args.ckpt_dir)})
    _print_means(reports)


def _print_means(reports) -> None:
    rows = [r for r in reports if r.seed == "mean"] or reports
    for r in rows:
        print(f"{r.mask:>13}: MPJPE {r.mpjpe_mm:7.2f} mm  PA-MPJPE {r.pa_mpjpe_mm:7.2f} mm")


def cmd_run_all(args) -> int:
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return run_pipeline(cfg, out, thread_count())


def run_pipeline(cfg, out: Path, workers: int = 1) -> int:
    """All stages in order.  Artifacts carry a `.partial` suffix until the whole run
    succeeds; on failure they are left in place under that name."""
    from .checkpoint import file_hash, save_checkpoint
    from .evaluation import run_ablation, write_reports
    from .scenes import SceneBatch, write_corpus
    from .stages import (CHECKPOINTS, align_stage, diffusion_stage, generate_split, models_from, regressor_stage,
                         vqvae_stage)

    cfg.validate()
    config_hash = cfg.hash()
    written: list[Path] = []
    timings: dict[str, float] = {}
    manifest = {"config": cfg.to_dict(), "config_hash": config_hash, "artifacts": {}, "timings_s": timings}

    def artifact(name: str) -> Path:
        p = out / (name + PARTIAL)
        written.append(p)
        return p

    def record(name: str, path: Path) -> None:
        manifest["artifacts"][name] = {"file": name, "sha256": file_hash(path), "config_hash": config_hash}

    stage = "setup"
    try:
        t0 = time.time()
        stage = "gen-data"
        batches, corpus_hashes = {}, {}
        for split in ("train", "diffusion", "test"):
            records = generate_split(cfg, split)
            path = artifact(f"{split}.jsonl")
            write_corpus(records, path)
            record(f"{split}.jsonl", path)
            corpus_hashes[split] = manifest["artifacts"][f"{split}.jsonl"]["sha256"][:16]
            batches[split] = SceneBatch.from_records(records) if records else None
        timings[stage] = time.time() - t0

        ckpts = {}

        def run_stage(name, key, fn):
            nonlocal stage
            stage = name
            t = time.time()
            ckpt = fn()
            path = artifact(CHECKPOINTS[key])
            save_checkpoint(path, ckpt)
            record(CHECKPOINTS[key], path)
            ckpts[key] = ckpt
            timings[name] = time.time() - t
            log.info("%s done in %.0f s", name, timings[name])

        train, test = batches["train"], batches["test"]
        run_stage("train-regressor", "regressor", lambda: regressor_stage(train, cfg, corpus_hashes["train"]))
        run_stage("train-vqvae", "vqvae", lambda: vqvae_stage(train, cfg, corpus_hashes["train"]))
        from .stages import vqvae_from

        run_stage("train-align", "text", lambda: align_stage(train, vqvae_from(ckpts["vqvae"]), cfg,
                                                             corpus_hashes["train"], test))
        from .stages import partial_models

        dtrain = batches["diffusion"] if batches["diffusion"] is not None else train
        run_stage("train-diffusion", "denoiser",
                  lambda: diffusion_stage(dtrain, partial_models(ckpts), cfg, corpus_hashes["diffusion"]))

        stage = "ablate"
        t = time.time()
        # evaluate from the checkpoints as written, so the numbers match `vlfa ablate`
        from .checkpoint import load_checkpoint

        loaded = {k: load_checkpoint(out / (CHECKPOINTS[k] + PARTIAL)) for k in CHECKPOINTS}
        models = models_from(loaded)
        reports = run_ablation(models, test, cfg.eval.masks, cfg.eval.seeds, workers)
        csv_path, json_path = artifact("ablation.csv"), artifact("ablation.json")
        write_reports(reports, csv_path, json_path, cfg.to_dict())
        record("ablation.csv", csv_path)
        record("ablation.json", json_path)
        timings[stage] = time.time() - t
        _print_means(reports)
        manifest["retrieval_top1"] = ckpts["text"].extra.get("retrieval")
        manifest["status"] = "complete"
    except Exception as exc:
        log.error("stage %s failed: %s", stage, exc)
        manifest["status"] = "failed"
        manifest["failed_stage"] = stage
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        (out / ("manifest.json" + PARTIAL)).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        return 1
    for p in written:
        if p.exists():
            shutil.move(str(p), str(p.with_name(p.name[:-len(PARTIAL)])))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return 0


# -- parser -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    from .diffusion import MASKS
    from .evaluation import ABLATION_MASKS

    p = argparse.ArgumentParser(prog="vlfa", description="Diffusion pose refinement with keypoint and text feedback")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene corpus (JSON lines)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--sigma-px", type=float, default=3.0)
    g.add_argument("--p-occ", type=float, default=0.15)
    g.add_argument("--start-id", type=int, default=0)
    g.add_argument("--focal", type=float, default=500.0)
    g.add_argument("--image-size", type=int, default=512)
    g.set_defaults(func=cmd_gen_data)

    def training(name, helptext, func):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", required=True, nargs="+" if name == "train-diffusion" else None)
        s.add_argument("--config", help="RunConfig JSON; flags below override it")
        s.add_argument("--epochs", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--seed", type=int)
        s.set_defaults(func=func)
        return s

    s = training("train-regressor", "train the initial pose regressor", cmd_train_regressor)
    s.add_argument("--out", required=True)
    s = training("train-vqvae", "train the pose VQ-VAE", cmd_train_vqvae)
    s.add_argument("--out", required=True)
    s = training("train-align", "train the text encoder against a frozen VQ-VAE", cmd_train_align)
    s.add_argument("--vqvae", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tau", type=float)
    s.add_argument("--heldout", help="corpus for the retrieval report")
    s = training("train-diffusion", "train the denoiser (needs regressor, vqvae and text checkpoints)", cmd_train_diffusion)
    s.add_argument("--ckpt-dir", required=True)
    s.add_argument("--out", help="default: CKPT_DIR/denoiser.ckpt")
    s.add_argument("--sigma", type=float)
    s.add_argument("--allow-mixed", action="store_true")

    r = sub.add_parser("refine", help="refine every scene of a corpus")
    r.add_argument("--data", required=True)
    r.add_argument("--ckpt-dir", required=True)
    r.add_argument("--mask", choices=sorted(MASKS), default="all")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--trajectory", help="write per-scene residual trajectories as JSON lines")
    r.add_argument("--allow-mixed", action="store_true")
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="evaluate one ablation row")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt-dir", required=True)
    e.add_argument("--mask", choices=["init", "gaussian", *sorted(MASKS)], default="all")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="CSV report")
    e.add_argument("--json", help="JSON report with per-scene values")
    e.add_argument("--allow-mixed", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="full ablation table over masks and seeds")
    a.add_argument("--data", required=True)
    a.add_argument("--ckpt-dir", required=True)
    a.add_argument("--out", required=True, help="output directory")
    a.add_argument("--masks", nargs="+", choices=sorted(MASKS), default=list(ABLATION_MASKS))
    a.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    a.add_argument("--allow-mixed", action="store_true")
    a.set_defaults(func=cmd_ablate)

    ra = sub.add_parser("run-all", help="data generation, all training stages and the ablation")
    ra.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
    ra.add_argument("--out", required=True)
    ra.set_defaults(func=cmd_run_all)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    from threadpoolctl import threadpool_limits

    from .errors import VlfaError

    try:
        # BLAS stays single-threaded so results do not depend on the thread budget;
        # VLFA_THREADS sets the number of refinement worker processes instead
        with threadpool_limits(1):
            rc = args.func(args)
    except VlfaError as exc:
        log.error("%s", exc)
        return 2
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
