"""Training objectives: reconstruction, relaxed, alignment, bicycle,
diversity, and the closed-form Gaussian KL."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .kinematics import geodesic_distance, rot6d_to_matrix
from .model import LatentCode


class LossError(Exception):
    pass


@dataclass
class LossWeights:
    rot: float = 1.0
    pos: float = 1.0
    speed: float = 5.0
    align: float = 1.0
    relax: float = 1.0
    cyc: float = 1.0
    ds: float = 1.0
    kl: float = 0.01
    rho: float = 0.02  # relaxed-loss dead zone, meters
    tau: float = 1.0  # diversity hinge bound, meters

    def __post_init__(self):
        for name in ("rot", "pos", "speed", "align", "relax", "cyc", "ds", "kl"):
            if getattr(self, name) < 0:
                raise LossError(f"weight {name} must be >= 0")
        if self.rho <= 0 or self.tau <= 0:
            raise LossError("rho and tau must be positive")


@dataclass
class LossReport:
    terms: dict = field(default_factory=dict)
    total: float = 0.0
    step: int = 0
    tape_ops: int = 0

    def to_json(self):
        d = {"step": self.step, "total": self.total}
        d.update(self.terms)
        return json.dumps(d)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise LossError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def rotation_loss(pred6d, target6d, jitter_counter=None):
    """Mean geodesic distance between decoded rotations; 3D mode only."""
    pred6d, target6d = nd.astensor(pred6d), nd.astensor(target6d)
    _check_same_shape(pred6d, target6d, "rotation_loss")
    if pred6d.shape[-1] != 6:
        raise LossError("rotation_loss needs 6D rotation inputs (3D mode only)")
    rp = rot6d_to_matrix(pred6d, jitter_counter)
    rt = rot6d_to_matrix(target6d, jitter_counter)
    return nd.mean(geodesic_distance(rp, rt))


def position_loss(pred, target):
    """Mean over frames and joints of the per-joint coordinate-sum L1 norm."""
    pred, target = nd.astensor(pred), nd.astensor(target)
    _check_same_shape(pred, target, "position_loss")
    per_joint = nd.sum_(nd.abs_(nd.sub(pred, target)), axis=-1)
    return nd.mean(per_joint)


def speed_loss(pred, target):
    """L1 between per-frame position differences; needs T >= 2."""
    pred, target = nd.astensor(pred), nd.astensor(target)
    _check_same_shape(pred, target, "speed_loss")
    if pred.shape[-3] < 2:
        raise LossError("speed_loss needs at least two frames")
    vp = nd.sub(pred[..., 1:, :, :], pred[..., :-1, :, :])
    vt = nd.sub(target[..., 1:, :, :], target[..., :-1, :, :])
    return position_loss(vp, vt)


def motion_reconstruction_loss(
    pred_rot6d, pred_pos, target_rot6d, target_pos, weights: LossWeights,
    jitter_counter=None,
):
    """Weighted rotation + position + speed loss; rotation term only in 3D mode."""
    terms = {}
    total = nd.Tensor(0.0)
    if pred_rot6d is not None:
        terms["rot"] = rotation_loss(pred_rot6d, target_rot6d, jitter_counter)
        total = nd.add(total, nd.mul(terms["rot"], weights.rot))
    terms["pos"] = position_loss(pred_pos, target_pos)
    terms["speed"] = speed_loss(pred_pos, target_pos)
    total = nd.add(total, nd.mul(terms["pos"], weights.pos))
    total = nd.add(total, nd.mul(terms["speed"], weights.speed))
    return total, terms


def relaxed_motion_loss(pred_pos, target_pos, rho):
    """Position loss with a dead zone: hinge on the per-joint L1 distance."""
    pred_pos, target_pos = nd.astensor(pred_pos), nd.astensor(target_pos)
    _check_same_shape(pred_pos, target_pos, "relaxed_motion_loss")
    per_joint = nd.sum_(nd.abs_(nd.sub(pred_pos, target_pos)), axis=-1)
    return nd.mean(nd.maximum(nd.sub(per_joint, rho), 0.0))


def alignment_loss(s_a, s_m):
    """Elementwise L1 between the two shared codes, mean-reduced."""
    s_a, s_m = nd.astensor(s_a), nd.astensor(s_m)
    _check_same_shape(s_a, s_m, "alignment_loss")
    return nd.mean(nd.abs_(nd.sub(s_a, s_m)))


def bicycle_loss(i_hat, i_r):
    """L1 between the re-encoded specific code and the one fed to the decoder."""
    i_hat, i_r = nd.astensor(i_hat), nd.astensor(i_r)
    _check_same_shape(i_hat, i_r, "bicycle_loss")
    return nd.mean(nd.abs_(nd.sub(i_hat, i_r)))


def diversity_loss(pos_a, pos_b, tau):
    """-min(position distance, tau); maximizing the distance spreads samples."""
    return nd.neg(nd.minimum(position_loss(pos_a, pos_b), tau))


def kl_divergence(code: LatentCode):
    """Closed-form KL to the standard normal, per frame, mean over frames."""
    mean, log_var = nd.astensor(code.mean), nd.astensor(code.log_var)
    var = nd.exp(log_var)
    per = nd.mul(
        nd.sub(
            nd.add(nd.sum_(var, axis=-2), nd.sum_(nd.square(mean), axis=-2)),
            nd.add(nd.Tensor(float(mean.shape[-2])), nd.sum_(log_var, axis=-2)),
        ),
        0.5,
    )
    return nd.mean(per)


def kl_monte_carlo(mean: np.ndarray, var: np.ndarray, n_samples, rng) -> float:
    """MC estimate of KL(N(mean, diag var) || N(0, I)); oracle for tests."""
    std = np.sqrt(var)
    z = mean[None] + std[None] * rng.standard_normal((n_samples, mean.size))
    log_q = -0.5 * (((z - mean[None]) / std[None]) ** 2 + np.log(2 * np.pi * var)[None]).sum(axis=1)
    log_p = -0.5 * (z**2 + np.log(2 * np.pi)).sum(axis=1)
    return float((log_q - log_p).mean())
