"""Text branch: pooled token embeddings projected into the pose latent space,
contrastive + reconstruction alignment, and the pose-text cosine guidance loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .body import POSE_DIM
from .errors import ContractError, NonFiniteError, TrainingError, VocabularyError
from .nn import MLP, Adam
from .scenes import VOCAB
from .tensor import Tensor
from .vqvae import LATENT_DIM, PoseVqvae

log = logging.getLogger(__name__)

EMBED_DIM = 128
TAU = 0.07
RETRIEVAL_BATCH = 32
ZERO_NORM = 1e-12


class TextEncoder:
    def __init__(self, rng: np.random.Generator | None = None, vocab_size: int = len(VOCAB), tau: float = TAU,
                 embed_dim: int = EMBED_DIM, latent_dim: int = LATENT_DIM):
        if not tau > 0:
            raise ContractError("temperature must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.tau = float(tau)
        self.vocab_size = vocab_size
        self.token_table = Tensor(rng.normal(0.0, 1.0, size=(vocab_size, embed_dim)), requires_grad=True)
        self.proj = MLP([embed_dim, 128, latent_dim], rng, name="text.proj")
        # test hook: multiplies every text latent; cosine quantities must not care
        self.output_scale = 1.0

    def parameters(self) -> list[Tensor]:
        return [self.token_table] + self.proj.parameters()

    def pooling_matrix(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        """(B, vocab) row-stochastic matrix; row i averages the multiset of tokens i."""
        P = np.zeros((len(token_lists), self.vocab_size))
        for i, toks in enumerate(token_lists):
            if len(toks) == 0:
                raise ContractError(f"empty token list at position {i}")
            for t in toks:
                if not 0 <= int(t) < self.vocab_size:
                    raise VocabularyError(f"unknown token id {t}")
                P[i, int(t)] += 1.0
            P[i] /= len(toks)
        return P

    def forward(self, token_lists: Sequence[Sequence[int]]) -> Tensor:
        pooled = Tensor(self.pooling_matrix(token_lists)) @ self.token_table
        z = self.proj(pooled)
        return z * self.output_scale if self.output_scale != 1.0 else z

    def embed_batch(self, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
        pooled = self.pooling_matrix(token_lists) @ self.token_table.data
        return self.proj.forward_numpy(pooled).astype(np.float64) * self.output_scale

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"text.token_table": self.token_table.data, "text.tau": np.array([self.tau])}
        out.update(self.proj.state_dict())
        return out

    def load_state_dict(self, state) -> None:
        self.token_table = Tensor(state["text.token_table"], requires_grad=True)
        self.vocab_size = self.token_table.shape[0]
        self.tau = float(np.asarray(state["text.tau"]).reshape(-1)[0])
        self.proj.load_state_dict(state)


def embed_text(tokens: Sequence[int], encoder: TextEncoder) -> np.ndarray:
    return encoder.embed_batch([list(tokens)])[0]


def _normalize_rows(z: Tensor) -> Tensor:
    n = tn.l2norm(z, axis=1, keepdims=True)
    return z / n.broadcast_to(z.shape)


def contrastive_loss(z_pose, z_text: Tensor, tau: float, symmetric: bool = False) -> Tensor:
    """Cross-entropy with matched pairs on the diagonal; each pose is the anchor and
    the texts of the batch are its candidates.  `symmetric` averages in the
    text-anchored direction."""
    zp = z_pose if isinstance(z_pose, Tensor) else Tensor(z_pose)
    N = zp.shape[0]
    logits = (_normalize_rows(zp) @ _normalize_rows(z_text).transpose()) / tau
    diag = Tensor(np.eye(N))
    pose_anchor = tn.tsum(tn.logsumexp(logits, axis=1)) - tn.tsum(logits * diag)
    loss = pose_anchor / N
    if symmetric:
        text_anchor = tn.tsum(tn.logsumexp(logits, axis=0)) - tn.tsum(logits * diag)
        loss = (loss + text_anchor / N) * 0.5
    return loss


@dataclass
class AlignLoss:
    total: Tensor
    contrastive: float
    reconstruction: float


def align_loss(theta, token_lists, vqvae: PoseVqvae, encoder: TextEncoder, symmetric: bool = False,
               rec_weight: float = 1.0) -> AlignLoss:
    """Contrastive term on frozen pose latents plus text-to-pose reconstruction
    through the frozen decoder (per-sample squared error, batch mean)."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, POSE_DIM)
    N = len(theta)
    if len(token_lists) != N:
        raise ContractError("theta and token lists differ in length")
    z_text = encoder.forward(token_lists)
    if N >= 2:
        contra = contrastive_loss(Tensor(vqvae.encode(theta)), z_text, encoder.tau, symmetric)
    else:
        log.warning("contrastive term skipped: batch of %d", N)
        contra = Tensor(0.0)
    recon = vqvae.decoder(z_text) - Tensor(theta)
    rec = tn.tsum(recon * recon) / N
    total = contra + rec_weight * rec if rec_weight else contra
    return AlignLoss(total, contra.item(), rec.item())


@dataclass
class CosineResult:
    loss: np.ndarray  # (B,)
    grad: np.ndarray  # (B, 144), d loss / d theta
    flagged: np.ndarray  # (B,) bool, zero-norm latent


def cosine_guidance(theta, z_text, vqvae: PoseVqvae, squared: bool = False) -> CosineResult:
    """Per-row guidance loss between E_p(theta) and a text latent, with its gradient
    with respect to theta through the pose encoder.

    Default loss is -cos, which is smallest when the pose agrees with the text;
    `squared` gives cos^2 instead.  Rows whose pose or text latent has zero norm
    get loss 0 and gradient 0 and are flagged.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, POSE_DIM)
    z_text = np.asarray(z_text, dtype=np.float64).reshape(len(theta), -1)
    th = Tensor(theta, requires_grad=True)
    zp = vqvae.encoder(th)
    np_norm = np.linalg.norm(zp.data, axis=1)
    nt_norm = np.linalg.norm(z_text, axis=1)
    flagged = (np_norm < ZERO_NORM) | (nt_norm < ZERO_NORM)
    keep = (~flagged).astype(np.float64)
    t_unit = z_text / np.where(flagged, 1.0, nt_norm)[:, None]
    # flagged rows get a unit denominator and a zero mask so nothing divides by zero
    denom = tn.l2norm(zp, axis=1) + Tensor(flagged.astype(np.float64))
    cos = tn.tsum(zp * Tensor(t_unit), axis=1) / denom * Tensor(keep)
    per_row = cos * cos if squared else -cos
    tn.backward(tn.tsum(per_row))
    grad = th.grad if th.grad is not None else np.zeros_like(theta)
    return CosineResult(per_row.data.astype(np.float64), np.asarray(grad, dtype=np.float64), flagged)


def cosine_loss(theta, tokens: Sequence[int], vqvae: PoseVqvae, encoder: TextEncoder,
                squared: bool = False) -> tuple[float, np.ndarray, bool]:
    """Single-pose guidance loss, its 144-d gradient and the zero-norm flag."""
    res = cosine_guidance(np.asarray(theta).reshape(1, POSE_DIM), embed_text(tokens, encoder)[None], vqvae, squared)
    return float(res.loss[0]), res.grad[0], bool(res.flagged[0])


def retrieval_accuracy(encoder: TextEncoder, vqvae: PoseVqvae, theta, token_lists,
                       batch_size: int = RETRIEVAL_BATCH) -> float:
    """Text-to-pose top-1 accuracy over consecutive chunks of `batch_size` pairs."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, POSE_DIM)
    n_chunks = len(theta) // batch_size
    if n_chunks == 0:
        raise ContractError(f"need at least {batch_size} pairs for retrieval")
    zp = vqvae.encode(theta)
    zt = encoder.embed_batch(token_lists)
    zp /= np.maximum(np.linalg.norm(zp, axis=1, keepdims=True), ZERO_NORM)
    zt /= np.maximum(np.linalg.norm(zt, axis=1, keepdims=True), ZERO_NORM)
    hits = 0
    for c in range(n_chunks):
        sl = slice(c * batch_size, (c + 1) * batch_size)
        sim = zt[sl] @ zp[sl].T
        hits += int(np.sum(np.argmax(sim, axis=1) == np.arange(batch_size)))
    return hits / (n_chunks * batch_size)


@dataclass
class AlignTrainResult:
    encoder: TextEncoder
    losses: list[float] = field(default_factory=list)
    retrieval: float | None = None


def train_alignment(theta, token_lists, vqvae: PoseVqvae, epochs: int = 20, lr: float = 1e-3,
                    batch_size: int = 64, rng: np.random.Generator | None = None, tau: float = TAU,
                    symmetric: bool = False, rec_weight: float = 1.0, heldout=None) -> AlignTrainResult:
    """Fit the token table and projection with the pose VQ-VAE frozen.

    `heldout` is an optional (theta, token_lists) pair used for the reported
    retrieval accuracy.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(-1, POSE_DIM)
    if len(theta) != len(token_lists):
        raise ContractError("theta and token lists differ in length")
    rng = rng if rng is not None else np.random.default_rng(0)
    encoder = TextEncoder(rng, tau=tau)
    opt = Adam(encoder.parameters(), lr=lr)
    result = AlignTrainResult(encoder)
    for epoch in range(epochs):
        order = rng.permutation(len(theta))
        total, n = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            try:
                out = align_loss(theta[idx], [token_lists[i] for i in idx], vqvae, encoder, symmetric, rec_weight)
            except NonFiniteError as exc:
                raise TrainingError(f"alignment training diverged at epoch {epoch}: {exc}") from exc
            tn.backward(out.total)
            # the VQ-VAE is frozen: drop any gradient that reached it
            for p in vqvae.parameters():
                p.grad = None
            opt.step()
            total += out.total.item() * len(idx)
            n += len(idx)
        result.losses.append(total / n)
        if not np.isfinite(result.losses[-1]):
            raise TrainingError(f"non-finite alignment loss at epoch {epoch}")
        log.info("align epoch %d loss %.4f", epoch, result.losses[-1])
    if heldout is not None:
        result.retrieval = retrieval_accuracy(encoder, vqvae, *heldout)
        log.info("held-out text-to-pose top-1 at batch %d: %.3f", RETRIEVAL_BATCH, result.retrieval)
    return result
