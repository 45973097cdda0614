"""Conditional diffusion refinement of [theta, trans] around the regressor's prediction.

The denoiser predicts the noise added to a scaled residual.  For a noised
residual r_t the score of q(r_t) is -eps / sqrt(1 - abar_t), so the usual
ancestral step

    r_{t-1} = (r_t + beta_t * score) / sqrt(alpha_t) + sqrt(var_t) * z

is a score-ascent step of size beta_t followed by fresh noise.  Keypoint and
text gradients are never added to the state directly; they reach the model
only through its condition input, rebuilt from the current estimate at every
step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .body import IDENTITY_6D, N_JOINTS, POSE_DIM, BodyTemplate, fk_arrays
from .camera import MIN_DEPTH, Camera, keypoint_gradient
from .errors import ContractError, NonFiniteError, TrainingError
from .nn import MLP, Adam, sinusoidal_embedding
from .scenes import FEATURE_DIM
from .tensor import Tensor
from .text_align import cosine_guidance
from .vqvae import PoseVqvae

log = logging.getLogger(__name__)

X_DIM = POSE_DIM + 3
KEYP_DIM = N_JOINTS * 3
COND_DIM = FEATURE_DIM + KEYP_DIM + POSE_DIM
TIME_DIM = 32
HIDDEN = 512
SIGMA = 0.5
TRANS_SCALE = 0.5
DIVERGENCE = 10.0  # in units of sigma

SEGMENTS = {"image": slice(0, FEATURE_DIM),
            "keypoints": slice(FEATURE_DIM, FEATURE_DIM + KEYP_DIM),
            "text": slice(FEATURE_DIM + KEYP_DIM, COND_DIM)}
MASKS = {
    "all": ("image", "keypoints", "text"),
    "image": ("image",),
    "keypoints": ("keypoints",),
    "text": ("text",),
    "no-text": ("image", "keypoints"),
    "no-keypoints": ("image", "text"),
    "no-image": ("keypoints", "text"),
}


def mask_vector(mask: str) -> np.ndarray:
    if mask not in MASKS:
        raise ContractError(f"unknown condition mask {mask!r}; expected one of {sorted(MASKS)}")
    keep = np.zeros(COND_DIM)
    for seg in MASKS[mask]:
        keep[SEGMENTS[seg]] = 1.0
    return keep


class NoiseSchedule:
    def __init__(self, T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1 or not 0 < beta_start <= beta_end < 1:
            raise ContractError("schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
        self.T = int(T)
        self.betas = np.linspace(beta_start, beta_end, self.T)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        # variance of q(r_{t-1} | r_t, r_0)
        self.posterior_var = self.betas * (1.0 - prev) / (1.0 - self.alpha_bars)

    def to_json(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def q_sample(r0: np.ndarray, t: np.ndarray, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noised residual at 1-based timesteps t (one per row)."""
    ab = schedule.alpha_bars[np.asarray(t) - 1][:, None]
    return np.sqrt(ab) * r0 + np.sqrt(1.0 - ab) * eps


def reverse_step(r_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule, z: np.ndarray | None) -> np.ndarray:
    i = t - 1
    score = -eps_hat / np.sqrt(1.0 - schedule.alpha_bars[i])
    mean = (r_t + schedule.betas[i] * score) / np.sqrt(schedule.alphas[i])
    if t > 1 and z is not None:
        mean = mean + np.sqrt(schedule.posterior_var[i]) * z
    return mean


# -- residual coordinates ---------------------------------------------------
def _coord_scale(sigma: float) -> np.ndarray:
    return np.concatenate([np.full(POSE_DIM, 1.0), np.full(3, TRANS_SCALE)]) / sigma


def to_residual(x: np.ndarray, x_init: np.ndarray, sigma: float = SIGMA) -> np.ndarray:
    return (np.asarray(x) - x_init) * _coord_scale(sigma)


def from_residual(r: np.ndarray, x_init: np.ndarray, sigma: float = SIGMA) -> np.ndarray:
    return x_init + np.asarray(r) / _coord_scale(sigma)


# -- condition --------------------------------------------------------------
@dataclass
class Observations:
    """Per-scene inputs that stay fixed during refinement (batched)."""

    features: np.ndarray  # (B, 64)
    uv: np.ndarray  # (B, 24, 2)
    confidence: np.ndarray  # (B, 24)
    beta: np.ndarray  # (B, 10) held fixed
    z_text: np.ndarray  # (B, 64)

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "Observations":
        return Observations(self.features[idx], self.uv[idx], self.confidence[idx], self.beta[idx], self.z_text[idx])


@dataclass
class Guidance:
    template: BodyTemplate
    camera: Camera
    vqvae: PoseVqvae
    squared_text_loss: bool = False


@dataclass
class Condition:
    c: np.ndarray  # (B, 280)
    reproj: np.ndarray  # (B,) confidence-weighted reprojection loss, inf where undefined
    behind: np.ndarray  # (B,) bool
    degenerate: np.ndarray  # (B,) bool
    text_flagged: np.ndarray  # (B,) bool


def _safe_theta(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    blocks = theta.reshape(len(theta), N_JOINTS, 6)
    a1, a2 = blocks[..., :3], blocks[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    u2 = a2 - (np.sum(a1 * a2, axis=-1) / np.maximum(n1, 1e-300) ** 2)[..., None] * a1
    bad = (n1 <= 1e-6) | (np.linalg.norm(u2, axis=-1) <= 1e-6)
    if not bad.any():
        return theta, np.zeros(len(theta), dtype=bool)
    fixed = blocks.copy()
    fixed[bad] = IDENTITY_6D
    return fixed.reshape(len(theta), -1), bad.any(axis=1)


def build_condition(x: np.ndarray, obs: Observations, guidance: Guidance, mask: str = "all") -> Condition:
    """Condition vectors for a batch of current estimates x = [theta, trans].

    Rows whose joints fall behind the camera get a zero keypoint segment and a
    flag; the remaining rows are unaffected.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, X_DIM)
    B = len(x)
    keep = mask_vector(mask)
    theta, degenerate = _safe_theta(x[:, :POSE_DIM])
    joints = fk_arrays(theta, obs.beta, x[:, POSE_DIM:], guidance.template).joints
    behind = np.any(joints[..., 2] <= MIN_DEPTH, axis=1)
    g_keyp = np.zeros((B, N_JOINTS, 3))
    reproj = np.full(B, np.inf)
    ok = ~behind
    if ok.any():
        j, uv, conf = joints[ok], obs.uv[ok], obs.confidence[ok]
        g_keyp[ok] = keypoint_gradient(guidance.camera, j, uv, conf)
        cx, cy = guidance.camera.principal
        f = guidance.camera.focal
        proj = np.stack([f * j[..., 0] / j[..., 2] + cx, f * j[..., 1] / j[..., 2] + cy], axis=-1)
        reproj[ok] = np.sum(((proj - uv) * conf[..., None]) ** 2, axis=(1, 2))
    c = np.zeros((B, COND_DIM))
    if keep[SEGMENTS["image"]].any():
        c[:, SEGMENTS["image"]] = obs.features
    if keep[SEGMENTS["keypoints"]].any():
        c[:, SEGMENTS["keypoints"]] = g_keyp.reshape(B, -1)
    text_flagged = np.zeros(B, dtype=bool)
    if keep[SEGMENTS["text"]].any():
        res = cosine_guidance(theta, obs.z_text, guidance.vqvae, guidance.squared_text_loss)
        c[:, SEGMENTS["text"]] = res.grad
        text_flagged = res.flagged
    c *= keep
    return Condition(c, reproj, behind, degenerate, text_flagged)


# -- denoiser ---------------------------------------------------------------
class DenoiserNet:
    """MLP over [noised residual, condition, timestep embedding] predicting the noise.

    Each condition segment is divided by a fixed scale measured on training
    data and passed through asinh, so pixel-sized keypoint gradients with heavy
    tails and unit-sized features enter the first layer at comparable
    magnitudes.  Zero entries stay zero, so a masked segment contributes
    nothing to the first layer.

    The output adds k(t) * r_t to the MLP, where k(t) is the best linear noise
    estimate for residuals of second moment `data_var`.  The MLP then only
    learns a correction, instead of having to build a t-dependent product
    with its input.
    """

    def __init__(self, rng: np.random.Generator | None = None, hidden: int = HIDDEN,
                 segment_scale: np.ndarray | None = None, data_var: float = 1.0,
                 schedule: NoiseSchedule | None = None, sigma: float = SIGMA):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mlp = MLP([X_DIM + COND_DIM + TIME_DIM, hidden, hidden, X_DIM], rng, name="denoiser")
        last = self.mlp.layers[-1]
        last.weight = Tensor(last.weight.data * 0.1, requires_grad=True)
        self.segment_scale = np.ones(3) if segment_scale is None else np.asarray(segment_scale, dtype=np.float64)
        self.data_var = float(data_var)
        self.schedule = schedule or NoiseSchedule()
        if not sigma > 0:
            raise ContractError("sigma must be positive")
        self.sigma = float(sigma)

    def parameters(self):
        return self.mlp.parameters()

    def skip(self, t: np.ndarray) -> np.ndarray:
        ab = self.schedule.alpha_bars[np.asarray(t) - 1][:, None]
        return np.sqrt(1.0 - ab) / (ab * self.data_var + 1.0 - ab)

    def _inputs(self, r: np.ndarray, t: np.ndarray, c: np.ndarray) -> np.ndarray:
        c = np.array(c, dtype=np.float64)
        for s, sl in zip(self.segment_scale, SEGMENTS.values()):
            c[:, sl] = np.arcsinh(c[:, sl] / s)
        return np.concatenate([r, c, sinusoidal_embedding(t, TIME_DIM)], axis=1)

    def predict(self, r: np.ndarray, t: np.ndarray, c: np.ndarray) -> np.ndarray:
        out = self.mlp.forward_numpy(self._inputs(r, t, c)).astype(np.float64)
        return out + self.skip(t) * r

    def __call__(self, r: np.ndarray, t: np.ndarray, c: np.ndarray) -> Tensor:
        return self.mlp(Tensor(self._inputs(r, t, c))) + Tensor(self.skip(t) * r)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.mlp.state_dict())
        out["denoiser.segment_scale"] = self.segment_scale
        out["denoiser.data_var"] = np.array([self.data_var])
        out["denoiser.sigma"] = np.array([self.sigma])
        sched = self.schedule.to_json()
        out["denoiser.schedule"] = np.array([sched["T"], sched["beta_start"], sched["beta_end"]])
        return out

    def load_state_dict(self, state) -> None:
        self.mlp.load_state_dict(state)
        self.segment_scale = np.asarray(state["denoiser.segment_scale"], dtype=np.float64)
        self.data_var = float(np.asarray(state["denoiser.data_var"]).reshape(-1)[0])
        self.sigma = float(np.asarray(state["denoiser.sigma"]).reshape(-1)[0])
        T, b0, b1 = np.asarray(state["denoiser.schedule"], dtype=np.float64)
        self.schedule = NoiseSchedule(int(T), float(b0), float(b1))


def segment_scales(c: np.ndarray) -> np.ndarray:
    """Median magnitude of the non-zero entries of each condition segment (1 if none)."""
    out = []
    for sl in SEGMENTS.values():
        seg = np.abs(c[:, sl])
        seg = seg[seg > 0]
        out.append(float(np.median(seg)) if seg.size else 1.0)
    return np.array(out)


# -- training ---------------------------------------------------------------
TRAIN_MASKS = tuple(MASKS)


def _draw_masks(rng: np.random.Generator, n: int, p_all: float) -> list[str]:
    others = [m for m in TRAIN_MASKS if m != "all"]
    pick = rng.uniform(size=n)
    which = rng.integers(0, len(others), size=n)
    return ["all" if p < p_all else others[w] for p, w in zip(pick, which)]


def _conditions_by_mask(x: np.ndarray, obs: Observations, guidance: Guidance, masks: list[str]) -> Condition:
    """Builds each row's condition under its own mask, sharing the expensive parts."""
    full = build_condition(x, obs, guidance, "all")
    keep = np.stack([mask_vector(m) for m in masks])
    full.c = full.c * keep
    return full


@dataclass
class DiffusionTrainResult:
    net: DenoiserNet
    losses: list[float] = field(default_factory=list)


def train_diffusion(x_gt: np.ndarray, x_init: np.ndarray, obs: Observations, guidance: Guidance,
                    schedule: NoiseSchedule | None = None, epochs: int = 30, lr: float = 1e-3,
                    batch_size: int = 128, rng: np.random.Generator | None = None, sigma: float = SIGMA,
                    p_all: float = 0.5, hidden: int = HIDDEN, final_lr_frac: float = 0.05) -> DiffusionTrainResult:
    """Fit the noise predictor on residuals x_gt - x_init.

    Each training row draws a condition mask ("all" with probability `p_all`,
    otherwise one of the partial masks) so every ablation seen at inference is
    also seen in training.  The learning rate follows a cosine decay to
    `final_lr_frac * lr` over the epochs.
    """
    schedule = schedule or NoiseSchedule()
    rng = rng if rng is not None else np.random.default_rng(0)
    x_gt = np.asarray(x_gt, dtype=np.float64).reshape(-1, X_DIM)
    x_init = np.asarray(x_init, dtype=np.float64).reshape(-1, X_DIM)
    n = len(x_gt)
    if n == 0 or len(x_init) != n or len(obs) != n:
        raise ContractError("training arrays must be non-empty and aligned")
    r0 = to_residual(x_gt, x_init, sigma)

    # fixed input scaling from conditions at freshly noised samples
    probe = rng.choice(n, size=min(n, 512), replace=False)
    t_probe = rng.integers(1, schedule.T + 1, size=len(probe))
    r_probe = q_sample(r0[probe], t_probe, rng.normal(size=(len(probe), X_DIM)), schedule)
    c_probe = build_condition(from_residual(r_probe, x_init[probe], sigma), obs.subset(probe), guidance).c
    scales = segment_scales(c_probe)
    net = DenoiserNet(rng, hidden, scales, float(np.mean(r0**2)), schedule, sigma)
    opt = Adam(net.parameters(), lr=lr)
    result = DiffusionTrainResult(net)
    for epoch in range(epochs):
        opt.lr = lr * (final_lr_frac + (1 - final_lr_frac) * 0.5 * (1 + np.cos(np.pi * epoch / max(epochs, 1))))
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.normal(size=(len(idx), X_DIM))
            r_t = q_sample(r0[idx], t, eps, schedule)
            masks = _draw_masks(rng, len(idx), p_all)
            cond = _conditions_by_mask(from_residual(r_t, x_init[idx], sigma), obs.subset(idx), guidance, masks)
            try:
                pred = net(r_t, t, cond.c)
                d = pred - Tensor(eps)
                loss = tn.tsum(d * d) / (len(idx) * X_DIM)
            except NonFiniteError as exc:
                raise TrainingError(f"diffusion training diverged at epoch {epoch}: {exc}") from exc
            tn.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        result.losses.append(total / n)
        if not np.isfinite(result.losses[-1]):
            raise TrainingError(f"non-finite diffusion loss at epoch {epoch}")
        log.info("diffusion epoch %d loss %.4f", epoch, result.losses[-1])
    return result


# -- sampling ---------------------------------------------------------------
@dataclass
class RefineResult:
    x: np.ndarray  # (B, 147) refined [theta, trans]
    diverged: np.ndarray  # (B,) bool
    behind_steps: np.ndarray  # (B,) count of steps with joints behind the camera
    trajectory: np.ndarray | None = None  # (B, T + 1, 147) residuals, when requested


def refine_batch(x_init: np.ndarray, obs: Observations, net: DenoiserNet, guidance: Guidance,
                 schedule: NoiseSchedule | None = None, mask: str = "all", rngs: list[np.random.Generator] | None = None,
                 keep_trajectory: bool = False, noise: bool = True) -> RefineResult:
    """Reverse diffusion for a batch of scenes; row i draws all its noise from rngs[i],
    so a scene's result does not depend on which other scenes share the batch.

    `noise=False` skips the per-step noise (the start sample is still drawn).
    """
    x_init = np.asarray(x_init, dtype=np.float64).reshape(-1, X_DIM)
    B = len(x_init)
    schedule = schedule or net.schedule
    sigma = net.sigma
    mask_vector(mask)
    if rngs is None:
        rngs = [np.random.default_rng(i) for i in range(B)]
    if len(rngs) != B or len(obs) != B:
        raise ContractError("one generator and one observation per scene are required")
    r = np.stack([g.normal(size=X_DIM) for g in rngs])
    active = np.ones(B, dtype=bool)
    diverged = np.zeros(B, dtype=bool)
    behind_steps = np.zeros(B, dtype=np.int64)
    best_r = r.copy()
    best_loss = np.full(B, np.inf)
    traj = [r.copy()] if keep_trajectory else None
    for t in range(schedule.T, 0, -1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        x = from_residual(r[idx], x_init[idx], sigma)
        cond = build_condition(x, obs.subset(idx), guidance, mask)
        behind_steps[idx] += cond.behind
        better = cond.reproj < best_loss[idx]
        best_loss[idx[better]] = cond.reproj[better]
        best_r[idx[better]] = r[idx[better]]
        eps_hat = net.predict(r[idx], np.full(len(idx), t), cond.c)
        z = np.stack([rngs[i].normal(size=X_DIM) for i in idx]) if (noise and t > 1) else None
        r[idx] = reverse_step(r[idx], t, eps_hat, schedule, z)
        bad = np.max(np.abs(r[idx]), axis=1) > DIVERGENCE
        if bad.any():
            stop = idx[bad]
            diverged[stop] = True
            active[stop] = False
            r[stop] = best_r[stop]
            log.debug("%d scene(s) diverged at t=%d", len(stop), t)
        if keep_trajectory:
            traj.append(r.copy())
    if diverged.any():
        log.warning("%d of %d scene(s) diverged; kept best-so-far by reprojection loss", int(diverged.sum()), B)
    x = from_residual(r, x_init, sigma)
    trajectory = np.stack(traj, axis=1) if keep_trajectory else None
    return RefineResult(x, diverged, behind_steps, trajectory)


# -- one-dimensional sanity harness ----------------------------------------
@dataclass
class HarnessResult:
    samples: np.ndarray
    losses: list[float]


def gaussian_harness(target_mean: float = 0.3, target_std: float = 0.1, init: float = 0.0, sigma: float = 0.5,
                     n_train: int = 4096, epochs: int = 60, n_samples: int = 500,
                     schedule: NoiseSchedule | None = None, rng: np.random.Generator | None = None,
                     hidden: int = 64) -> HarnessResult:
    """Train an unconditional scalar denoiser on N(target_mean, target_std^2) data,
    expressed as residuals around `init`, then draw refined samples."""
    schedule = schedule or NoiseSchedule()
    rng = rng if rng is not None else np.random.default_rng(0)
    data = rng.normal(target_mean, target_std, size=(n_train, 1))
    r0 = (data - init) / sigma
    mlp = MLP([1 + TIME_DIM, hidden, hidden, 1], rng, name="harness")
    opt = Adam(mlp.parameters(), lr=2e-3)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, 256):
            idx = order[start:start + 256]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            eps = rng.normal(size=(len(idx), 1))
            r_t = q_sample(r0[idx], t, eps, schedule)
            pred = mlp(Tensor(np.concatenate([r_t, sinusoidal_embedding(t, TIME_DIM)], axis=1)))
            d = pred - Tensor(eps)
            loss = tn.tsum(d * d) / len(idx)
            tn.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n_train)
    r = rng.normal(size=(n_samples, 1))
    for t in range(schedule.T, 0, -1):
        tt = np.full(n_samples, t)
        eps_hat = mlp.forward_numpy(np.concatenate([r, sinusoidal_embedding(tt, TIME_DIM)], axis=1)).astype(np.float64)
        r = reverse_step(r, t, eps_hat, schedule, rng.normal(size=r.shape) if t > 1 else None)
    return HarnessResult(init + sigma * r[:, 0], losses)
