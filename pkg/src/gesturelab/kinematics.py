"""Skeleton, 6D rotation decoding, forward kinematics, geodesic distance.

Per-joint 6D outputs are interpreted as local rotations relative to the
parent; FK composes them down the chain (global_j = global_parent @ local_j)
so child positions satisfy p_j = p_parent + R_global_j @ offset_j.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd

ROT6D_EPS = 1e-8


class KinematicsError(Exception):
    pass


@dataclass
class Skeleton:
    """Joint hierarchy with fixed bone offsets (meters).

    parent[j] < j for every non-root joint; exactly one root with parent -1.
    """

    names: list
    parent: list
    offsets: np.ndarray  # [J, 3]
    root_position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.root_position = np.asarray(self.root_position, dtype=np.float64)
        j = len(self.parent)
        if j < 2:
            raise KinematicsError("skeleton needs at least one non-root joint")
        roots = [i for i, p in enumerate(self.parent) if p < 0]
        if roots != [0]:
            raise KinematicsError("skeleton must have exactly one root at index 0")
        for i, p in enumerate(self.parent[1:], 1):
            if not 0 <= p < i:
                raise KinematicsError(f"parent of joint {i} must precede it, got {p}")
        if not np.all(np.isfinite(self.offsets)) or self.offsets.shape != (j, 3):
            raise KinematicsError("offsets must be finite [J,3]")

    @property
    def joint_count(self):
        return len(self.parent)

    def to_json(self):
        return json.dumps(
            {
                "joints": [
                    {"name": n, "parent": p, "offset": list(map(float, o))}
                    for n, p, o in zip(self.names, self.parent, self.offsets)
                ],
                "root_position": list(map(float, self.root_position)),
            }
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        joints = d["joints"]
        return cls(
            names=[j["name"] for j in joints],
            parent=[j["parent"] for j in joints],
            offsets=np.array([j["offset"] for j in joints], dtype=np.float64),
            root_position=np.array(d["root_position"], dtype=np.float64),
        )


def canonical_skeleton() -> Skeleton:
    """8-joint desk-scale skeleton: root, spine, neck, head, two 2-joint arms."""
    names = ["root", "spine", "neck", "head", "l_upper", "l_lower", "r_upper", "r_lower"]
    parent = [-1, 0, 1, 2, 2, 4, 2, 6]
    offsets = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.0, 0.3, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.15, 0.0],
            [0.22, 0.0, 0.0],
            [0.25, 0.0, 0.0],
            [-0.22, 0.0, 0.0],
            [-0.25, 0.0, 0.0],
        ]
    )
    return Skeleton(names, parent, offsets)


@dataclass
class MotionSequence:
    """Per-frame pose data: 6D rotations (3D mode) or root-relative 2D positions."""

    mode: str  # "3d" or "2d"
    frame_rate: float
    data: np.ndarray  # 3d: [T, J, 6] rot6d; 2d: [T, J, 2] positions
    skeleton: Skeleton | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.mode not in ("3d", "2d"):
            raise KinematicsError(f"unknown motion mode {self.mode!r}")
        if self.data.ndim != 3 or self.data.shape[0] < 2:
            raise KinematicsError("motion needs [T,J,D] data with T >= 2")
        want = 6 if self.mode == "3d" else 2
        if self.data.shape[2] != want:
            raise KinematicsError(f"{self.mode} motion needs {want} values per joint")
        if self.mode == "3d" and self.skeleton is None:
            raise KinematicsError("3d motion requires a skeleton")

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def joints(self):
        return self.data.shape[1]

    def positions(self) -> np.ndarray:
        """World positions [T,J,3] (3d mode) or the stored planar positions."""
        if self.mode == "2d":
            return self.data
        return forward_kinematics(self.skeleton, nd.Tensor(self.data)).data


# ---------------------------------------------------------------------------
# rotations


def rot6d_to_matrix(r, jitter_counter=None):
    """Gram-Schmidt decode of a 6D rotation representation to matrices.

    r: Tensor [..., 6]. Returns Tensor [..., 3, 3] whose columns are the two
    orthonormalized vectors and their cross product. Degenerate inputs raise
    unless jitter_counter (a 1-element list) is given, in which case a small
    canonical-basis jitter keeps training alive and the counter increments.
    """
    r = nd.astensor(r)
    if r.shape[-1] != 6:
        raise KinematicsError("rot6d input must have trailing dimension 6")
    a = r[..., 0:3]
    b = r[..., 3:6]
    norm_a = np.sqrt((a.data**2).sum(axis=-1))
    proj = (a.data * b.data).sum(axis=-1, keepdims=True) * a.data / np.maximum(
        (a.data**2).sum(axis=-1, keepdims=True), ROT6D_EPS**2
    )
    norm_res = np.sqrt(((b.data - proj) ** 2).sum(axis=-1))
    if np.any(norm_a <= ROT6D_EPS) or np.any(norm_res <= ROT6D_EPS):
        if jitter_counter is None:
            raise KinematicsError("degenerate 6D rotation input")
        jitter_counter[0] += 1
        basis = np.zeros(6)
        basis[0] = basis[4] = 1.0
        r = nd.add(r, nd.Tensor(1e-6 * basis))
        a = r[..., 0:3]
        b = r[..., 3:6]
    c1 = _normalize(a)
    resid = nd.sub(b, nd.mul(nd.sum_(nd.mul(b, c1), axis=-1, keepdims=True), c1))
    c2 = _normalize(resid)
    c3 = _cross(c1, c2)
    return nd.stack([c1, c2, c3], axis=-1)


def _normalize(v):
    n = nd.sqrt(nd.sum_(nd.square(v), axis=-1, keepdims=True))
    return nd.div(v, n)


def _cross(u, v):
    parts = []
    for i, j in ((1, 2), (2, 0), (0, 1)):
        parts.append(
            nd.sub(
                nd.mul(u[..., i], v[..., j]),
                nd.mul(u[..., j], v[..., i]),
            )
        )
    return nd.stack(parts, axis=-1)


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """First two columns flattened; inverse of rot6d_to_matrix on valid rotations."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def validate_rotation(m: np.ndarray, tol=1e-6):
    m = np.asarray(m)
    if not np.allclose(m.swapaxes(-1, -2) @ m, np.eye(3), atol=tol):
        raise KinematicsError("matrix is not orthonormal")
    if not np.allclose(np.linalg.det(m), 1.0, atol=tol):
        raise KinematicsError("matrix determinant is not +1")


def geodesic_distance(r, r_hat):
    """Angular distance acos((trace(R @ R_hat^T) - 1) / 2) in [0, pi].

    Accepts Tensors [..., 3, 3]; the trace argument is clamped per ndgrad.acos.
    """
    r, r_hat = nd.astensor(r), nd.astensor(r_hat)
    rel = nd.matmul(r, nd.transpose(r_hat, tuple(range(r_hat.ndim - 2)) + (r_hat.ndim - 1, r_hat.ndim - 2)))
    trace = nd.add(nd.add(rel[..., 0, 0], rel[..., 1, 1]), rel[..., 2, 2])
    return nd.acos(nd.mul(nd.sub(trace, 1.0), 0.5))


# ---------------------------------------------------------------------------
# forward kinematics


def forward_kinematics(skeleton: Skeleton, rot6d, jitter_counter=None):
    """World joint positions [..., T, J, 3] from local 6D rotations [..., T, J, 6]."""
    rot6d = nd.astensor(rot6d)
    j = skeleton.joint_count
    if rot6d.shape[-2] != j:
        raise KinematicsError(
            f"skeleton has {j} joints but motion has {rot6d.shape[-2]}"
        )
    local = rot6d_to_matrix(rot6d, jitter_counter)  # [..., J, 3, 3]
    globals_ = [None] * j
    positions = [None] * j
    lead = rot6d.shape[:-2]
    root_pos = nd.Tensor(np.broadcast_to(skeleton.root_position, lead + (3,)).copy())
    for idx in range(j):
        rot_local = local[..., idx, :, :]
        p = skeleton.parent[idx]
        if p < 0:
            globals_[idx] = rot_local
            positions[idx] = root_pos
        else:
            globals_[idx] = nd.matmul(globals_[p], rot_local)
            off = nd.Tensor(skeleton.offsets[idx].reshape(3, 1))
            step = nd.matmul(globals_[idx], off)[..., 0]
            positions[idx] = nd.add(positions[p], step)
    return nd.stack(positions, axis=-2)


def fk_reference(skeleton: Skeleton, rot6d: np.ndarray) -> np.ndarray:
    """Naive per-frame recursive FK used as an independent oracle."""
    rot6d = np.asarray(rot6d, dtype=np.float64)
    t, j, _ = rot6d.shape
    out = np.zeros((t, j, 3))
    for ti in range(t):
        mats = {}
        for ji in range(j):
            a = rot6d[ti, ji, :3]
            b = rot6d[ti, ji, 3:]
            c1 = a / np.linalg.norm(a)
            res = b - np.dot(b, c1) * c1
            c2 = res / np.linalg.norm(res)
            local = np.stack([c1, c2, np.cross(c1, c2)], axis=-1)
            p = skeleton.parent[ji]
            if p < 0:
                mats[ji] = local
                out[ti, ji] = skeleton.root_position
            else:
                mats[ji] = mats[p] @ local
                out[ti, ji] = out[ti, p] + mats[ji] @ skeleton.offsets[ji]
    return out
