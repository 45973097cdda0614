"""Pose VQ-VAE: encoder, nearest-code quantizer with EMA codebook, decoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .body import POSE_DIM, SHAPE_DIM, BodyTemplate, fk_arrays
from .errors import ContractError, NonFiniteError, TrainingError
from .nn import MLP, Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

LATENT_DIM = 64
CODEBOOK_SIZE = 512
MIN_PERPLEXITY = 8.0


def quantize(z, codebook) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codebook entry by Euclidean distance; ties go to the lowest index.

    Accepts a single latent (D,) or a batch (B, D).  Candidates are ranked with
    the expanded form of the distance and any near-tie is settled by exact
    squared differences, so the result equals a plain linear scan.
    """
    codebook = np.asarray(codebook, dtype=np.float64)
    if len(codebook) == 0:
        raise ContractError("empty codebook")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z.reshape(1, -1) if single else z
    approx = np.sum(codebook**2, axis=1)[None, :] - 2.0 * zb @ codebook.T
    best = approx.min(axis=1, keepdims=True)
    scale = np.sum(zb**2, axis=1, keepdims=True) + np.abs(best) + 1.0
    near = approx <= best + 1e-9 * scale
    ids = np.argmax(near, axis=1)
    for row in np.flatnonzero(near.sum(axis=1) > 1):
        cand = np.flatnonzero(near[row])
        diff = zb[row] - codebook[cand]
        exact = np.sum(diff * diff, axis=1)
        ids[row] = cand[np.argmin(exact)]
    q = codebook[ids]
    return (int(ids[0]), q[0]) if single else (ids, q)


class PoseVqvae:
    def __init__(self, rng: np.random.Generator | None = None, alpha: float = 0.25, decay: float = 0.99,
                 codebook_size: int = CODEBOOK_SIZE, latent_dim: int = LATENT_DIM):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.alpha = alpha
        self.decay = decay
        self.encoder = MLP([POSE_DIM, 128, latent_dim], rng, name="vq.encoder")
        self.decoder = MLP([latent_dim, 128, POSE_DIM], rng, name="vq.decoder")
        self.codebook = rng.normal(0.0, 1.0, size=(codebook_size, latent_dim))
        self.ema_count = np.ones(codebook_size)
        self.ema_sum = self.codebook.copy()

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def encode(self, theta) -> np.ndarray:
        return self.encoder.forward_numpy(np.asarray(theta).reshape(-1, POSE_DIM)).astype(np.float64)

    def decode(self, z) -> np.ndarray:
        return self.decoder.forward_numpy(np.asarray(z).reshape(-1, self.codebook.shape[1])).astype(np.float64)

    def reconstruct(self, theta) -> tuple[np.ndarray, np.ndarray]:
        ids, q = quantize(self.encode(theta), self.codebook)
        return self.decode(q), ids

    def ema_update(self, z: np.ndarray, ids: np.ndarray) -> None:
        """Move each assigned code toward the mean of its encodings; others stay put."""
        used = np.unique(ids)
        counts = np.bincount(ids, minlength=len(self.codebook))[used]
        sums = np.zeros((len(used), self.codebook.shape[1]))
        np.add.at(sums, np.searchsorted(used, ids), z)
        d = self.decay
        self.ema_count[used] = d * self.ema_count[used] + (1 - d) * counts
        self.ema_sum[used] = d * self.ema_sum[used] + (1 - d) * sums
        self.codebook[used] = self.ema_sum[used] / self.ema_count[used, None]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {**self.encoder.state_dict(), **self.decoder.state_dict()}
        out["vq.codebook"] = self.codebook
        out["vq.ema_count"] = self.ema_count
        out["vq.ema_sum"] = self.ema_sum
        out["vq.hparams"] = np.array([self.alpha, self.decay])
        return out

    def load_state_dict(self, state) -> None:
        self.encoder.load_state_dict(state)
        self.decoder.load_state_dict(state)
        self.codebook = np.asarray(state["vq.codebook"], dtype=np.float64)
        self.ema_count = np.asarray(state["vq.ema_count"], dtype=np.float64)
        self.ema_sum = np.asarray(state["vq.ema_sum"], dtype=np.float64)
        self.alpha, self.decay = (float(v) for v in state["vq.hparams"])


@dataclass
class VqLoss:
    total: Tensor
    z: np.ndarray
    ids: np.ndarray


def vq_loss(theta, model: PoseVqvae) -> VqLoss:
    """Commitment term toward the stopped-gradient code plus reconstruction through
    the straight-through estimator; batch mean of per-sample sums."""
    theta_t = theta if isinstance(theta, Tensor) else Tensor(np.asarray(theta).reshape(-1, POSE_DIM))
    B = theta_t.shape[0]
    z = model.encoder(theta_t)
    ids, q = quantize(z.data, model.codebook)
    q_const = Tensor(q)
    # straight-through: forward value is q, backward treats the quantizer as identity
    z_st = z + (q_const - z.detach())
    recon = model.decoder(z_st)
    dz = z - q_const
    dr = recon - theta_t
    total = model.alpha * tn.tsum(dz * dz) / B + tn.tsum(dr * dr) / B
    return VqLoss(total, z.data.astype(np.float64), ids)


def perplexity(ids: np.ndarray, n_codes: int) -> float:
    p = np.bincount(ids, minlength=n_codes) / max(len(ids), 1)
    nz = p[p > 0]
    return float(np.exp(-np.sum(nz * np.log(nz))))


def reconstruction_mpjpe(model: PoseVqvae, theta, beta, template: BodyTemplate) -> float:
    """Root-relative joint error (mm) of decoded poses at the true shape."""
    recon, _ = model.reconstruct(theta)
    zeros = np.zeros((len(theta), 3))
    a = fk_arrays(recon, beta, zeros, template).joints
    b = fk_arrays(theta, beta, zeros, template).joints
    return float(1000 * np.mean(np.linalg.norm(a - b, axis=-1)))


@dataclass
class VqTrainResult:
    model: PoseVqvae
    losses: list[float] = field(default_factory=list)
    usage: np.ndarray | None = None
    perplexities: list[float] = field(default_factory=list)
    reseeded: int = 0


def train_vqvae(theta_set, epochs: int = 30, lr: float = 1e-3, batch_size: int = 128,
                rng: np.random.Generator | None = None, alpha: float = 0.25, decay: float = 0.99,
                codebook_size: int = CODEBOOK_SIZE, min_poses: int = 1000) -> VqTrainResult:
    theta_set = np.asarray(theta_set, dtype=np.float64).reshape(-1, POSE_DIM)
    if len(theta_set) < min_poses:
        raise ContractError(f"need at least {min_poses} training poses, got {len(theta_set)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = PoseVqvae(rng, alpha=alpha, decay=decay, codebook_size=codebook_size)
    # initialise codes on encoder outputs so none start far from the data
    init = rng.choice(len(theta_set), size=codebook_size, replace=len(theta_set) < codebook_size)
    model.codebook = model.encode(theta_set[init])
    model.ema_sum = model.codebook.copy()
    opt = Adam(model.parameters(), lr=lr)
    result = VqTrainResult(model)
    for epoch in range(epochs):
        order = rng.permutation(len(theta_set))
        total, n = 0.0, 0
        usage = np.zeros(codebook_size, dtype=np.int64)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            try:
                out = vq_loss(theta_set[idx], model)
            except NonFiniteError as exc:
                raise TrainingError(f"VQ-VAE training diverged at epoch {epoch}: {exc}") from exc
            tn.backward(out.total)
            opt.step()
            model.ema_update(out.z, out.ids)
            usage += np.bincount(out.ids, minlength=codebook_size)
            total += out.total.item() * len(idx)
            n += len(idx)
        loss = total / n
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite VQ-VAE loss at epoch {epoch}")
        ppl = perplexity(np.repeat(np.arange(codebook_size), usage), codebook_size)
        result.losses.append(loss)
        result.perplexities.append(ppl)
        result.usage = usage
        dead = np.flatnonzero(usage == 0)
        if ppl < MIN_PERPLEXITY:
            log.warning("codebook collapse (perplexity %.2f); re-seeding %d dead codes", ppl, len(dead))
        if len(dead) and epoch < epochs - 1:
            _reseed(model, theta_set, dead, rng)
            result.reseeded += len(dead)
        log.info("vqvae epoch %d loss %.4f perplexity %.1f", epoch, loss, ppl)
    return result


def _reseed(model: PoseVqvae, theta_set: np.ndarray, dead: np.ndarray, rng: np.random.Generator) -> None:
    if len(dead) == 0:
        return
    pick = rng.choice(len(theta_set), size=len(dead), replace=len(theta_set) < len(dead))
    z = model.encode(theta_set[pick])
    model.codebook[dead] = z
    model.ema_sum[dead] = z
    model.ema_count[dead] = 1.0
