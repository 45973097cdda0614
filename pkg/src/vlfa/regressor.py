"""Initial pose regressor: features + box -> (theta, beta, trans), trained with a
weighted parameter / 3D joint / reprojection loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .body import IDENTITY_6D, N_JOINTS, POSE_DIM, SHAPE_DIM, BodyTemplate, PoseParams, degenerate_6d_mask, fk_arrays, fk_tensor
from .camera import MIN_DEPTH, Camera, project
from .errors import ContractError, DegeneracyError, NonFiniteError, TrainingError
from .nn import MLP, Adam
from .scenes import FEATURE_DIM, SceneBatch
from .tensor import Tensor

log = logging.getLogger(__name__)

OUT_DIM = POSE_DIM + SHAPE_DIM + 3
HIDDEN = (256, 256)
DEFAULT_DEPTH = 3.5
# added to the raw network output so an all-zero network predicts the rest pose
OUTPUT_OFFSET = np.concatenate([np.tile(IDENTITY_6D, N_JOINTS), np.zeros(SHAPE_DIM), [0.0, 0.0, np.log(DEFAULT_DEPTH)]])


@dataclass(frozen=True)
class RegressorLossWeights:
    lambda_smpl: float = 1.0
    lambda_joint: float = 5.0
    lambda_reproj: float = 0.01

    def __post_init__(self):
        w = (self.lambda_smpl, self.lambda_joint, self.lambda_reproj)
        if min(w) < 0 or max(w) == 0:
            raise ContractError("loss weights must be non-negative and not all zero")


class RegressorNet:
    def __init__(self, rng: np.random.Generator | None = None, hidden=HIDDEN):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.mlp = MLP([FEATURE_DIM, *hidden, OUT_DIM], rng, name="regressor")
        # start close to the constant rest-pose predictor
        last = self.mlp.layers[-1]
        last.weight = Tensor(last.weight.data * 0.01, requires_grad=True)

    def parameters(self):
        return self.mlp.parameters()

    def state_dict(self):
        return self.mlp.state_dict()

    def load_state_dict(self, state):
        self.mlp.load_state_dict(state)

    def raw(self, features) -> Tensor:
        return self.mlp(Tensor(features))


def _root_to_trans(u, v, z, camera: Camera):
    cx, cy = camera.principal
    return (u - cx) * z / camera.focal, (v - cy) * z / camera.focal


def decode_numpy(raw: np.ndarray, bbox: np.ndarray, camera: Camera) -> np.ndarray:
    """Raw network output (B,157) -> parameter vectors (B,157) in (theta, beta, trans) order."""
    out = raw.astype(np.float64) + OUTPUT_OFFSET
    box = np.asarray(bbox, dtype=np.float64).reshape(-1, 4)
    s = np.maximum(box[:, 2], box[:, 3])
    u = box[:, 0] + box[:, 2] / 2 + s * out[:, -3]
    v = box[:, 1] + box[:, 3] / 2 + s * out[:, -2]
    z = np.exp(out[:, -1])
    x, y = _root_to_trans(u, v, z, camera)
    out[:, -3:] = np.stack([x, y, z], axis=1)
    return out


def decode_tensor(raw: Tensor, bbox: np.ndarray, camera: Camera):
    """Differentiable version of `decode_numpy`; returns (theta, beta, trans) tensors."""
    B = raw.shape[0]
    out = raw + Tensor(np.broadcast_to(OUTPUT_OFFSET, (B, OUT_DIM)))
    theta = out[:, :POSE_DIM]
    beta = out[:, POSE_DIM:POSE_DIM + SHAPE_DIM]
    box = np.asarray(bbox, dtype=np.float64).reshape(-1, 4)
    s = np.maximum(box[:, 2], box[:, 3])
    u = Tensor(box[:, 0] + box[:, 2] / 2) + out[:, -3] * Tensor(s)
    v = Tensor(box[:, 1] + box[:, 3] / 2) + out[:, -2] * Tensor(s)
    z = tn.exp(out[:, -1])
    cx, cy = camera.principal
    x = (u - cx) * z / camera.focal
    y = (v - cy) * z / camera.focal
    trans = tn.stack([x, y, z], axis=1)
    return theta, beta, trans


def predict_vectors(net: RegressorNet, features, bbox, camera: Camera) -> np.ndarray:
    """Batched deterministic prediction as (B,157) parameter vectors."""
    features = np.asarray(features, dtype=np.float64).reshape(-1, FEATURE_DIM)
    raw = net.mlp.forward_numpy(features)
    out = decode_numpy(raw, bbox, camera)
    bad = degenerate_6d_mask(out[:, :POSE_DIM]).any(axis=1)
    if np.any(bad):
        # inference-time recovery: nudge degenerate rows once
        out[bad, :POSE_DIM] += 1e-3
        if degenerate_6d_mask(out[bad, :POSE_DIM]).any():
            raise DegeneracyError("regressor produced a degenerate 6D block")
    return out


def predict(net: RegressorNet, feature_vec, bbox, camera: Camera) -> PoseParams:
    return PoseParams.from_vector(predict_vectors(net, feature_vec, bbox, camera)[0])


@dataclass
class LossParts:
    total: Tensor
    smpl: float
    joint: float
    reproj: float
    masked: int = 0


def regressor_loss(theta: Tensor, beta: Tensor, trans: Tensor, gt_theta, gt_beta, gt_trans, camera: Camera,
                   gt_kp2d, template: BodyTemplate, weights: RegressorLossWeights = RegressorLossWeights()) -> LossParts:
    """Batch-mean of the weighted three-term loss.

    `gt_kp2d` are noiseless projections of the ground-truth joints.  Samples
    with any predicted joint at depth <= 1 cm drop their reprojection term.
    """
    B = theta.shape[0]
    gt_theta = np.asarray(gt_theta).reshape(B, POSE_DIM)
    gt_beta = np.asarray(gt_beta).reshape(B, SHAPE_DIM)
    d_theta = theta - Tensor(gt_theta)
    d_beta = beta - Tensor(gt_beta)
    l_smpl = (tn.tsum(d_theta * d_theta) + tn.tsum(d_beta * d_beta)) / B

    joints = fk_tensor(theta, beta, trans, template)
    gt_joints = fk_arrays(gt_theta, gt_beta, np.asarray(gt_trans).reshape(B, 3), template).joints
    dj = joints - Tensor(gt_joints)
    l_joint = tn.tsum(dj * dj) / B

    ok = np.all(joints.data[..., 2] > MIN_DEPTH, axis=1)
    mask = np.broadcast_to(ok[:, None], (B, N_JOINTS)).astype(np.float64)
    z = joints[..., 2] * Tensor(mask) + Tensor(1.0 - mask)
    cx, cy = camera.principal
    u = joints[..., 0] * camera.focal / z + cx
    v = joints[..., 1] * camera.focal / z + cy
    kp = np.asarray(gt_kp2d).reshape(B, N_JOINTS, 2)
    ru = (u - Tensor(kp[..., 0])) * Tensor(mask)
    rv = (v - Tensor(kp[..., 1])) * Tensor(mask)
    l_reproj = (tn.tsum(ru * ru) + tn.tsum(rv * rv)) / B

    total = weights.lambda_smpl * l_smpl + weights.lambda_joint * l_joint + weights.lambda_reproj * l_reproj
    return LossParts(total, l_smpl.item(), l_joint.item(), l_reproj.item(), int(np.sum(~ok)))


@dataclass
class TrainResult:
    net: RegressorNet
    losses: list[float] = field(default_factory=list)


def train_regressor(batch: SceneBatch, template: BodyTemplate, weights: RegressorLossWeights = RegressorLossWeights(),
                    epochs: int = 50, lr: float = 1e-3, batch_size: int = 64, rng: np.random.Generator | None = None,
                    hidden=HIDDEN) -> TrainResult:
    if len(batch) == 0:
        raise ContractError("empty corpus")
    rng = rng if rng is not None else np.random.default_rng(0)
    net = RegressorNet(rng, hidden)
    opt = Adam(net.parameters(), lr=lr)
    gt_joints = fk_arrays(batch.theta, batch.beta, batch.trans, template).joints
    gt_kp = project(batch.camera, gt_joints)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(batch))
        total, n = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            try:
                theta, beta, trans = decode_tensor(net.raw(batch.features[idx]), batch.bbox[idx], batch.camera)
                parts = regressor_loss(theta, beta, trans, batch.theta[idx], batch.beta[idx], batch.trans[idx],
                                       batch.camera, gt_kp[idx], template, weights)
            except (NonFiniteError, DegeneracyError) as exc:
                raise TrainingError(f"regressor training diverged at epoch {epoch}: {exc}") from exc
            tn.backward(parts.total)
            opt.step()
            total += parts.total.item() * len(idx)
            n += len(idx)
        losses.append(total / n)
        if not np.isfinite(losses[-1]):
            raise TrainingError(f"non-finite regressor loss at epoch {epoch}")
        log.info("regressor epoch %d loss %.4f", epoch, losses[-1])
    return TrainResult(net, losses)
