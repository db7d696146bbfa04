"""Articulated skeleton: poses, forward kinematics, per-bone motion bases.

All rotation math runs through the autodiff ops so the same code path serves
both inference (no active tape) and training (gradients flow from the warp
back into refined joint angles).  Vectors are rows, rotations act as
``x @ R.T + t``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


# ---------------------------------------------------------------------------
# Data types


@dataclass
class Skeleton:
    """Bone hierarchy with rest offsets and a canonical pose.

    ``parent[i]`` is the parent bone index (root has -1).  ``rest_offset[i]``
    is the bone origin in its parent's frame, ``tip[i]`` the capsule end
    point in the bone's own frame (typically the primary child's offset).
    """

    names: List[str]
    parent: np.ndarray
    rest_offset: np.ndarray
    canonical_angles: np.ndarray
    canonical_root: np.ndarray
    tip: np.ndarray

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.rest_offset = np.asarray(self.rest_offset, dtype=np.float64)
        self.canonical_angles = np.asarray(self.canonical_angles, dtype=np.float64)
        self.canonical_root = np.asarray(self.canonical_root, dtype=np.float64)
        self.tip = np.asarray(self.tip, dtype=np.float64)
        k = self.bone_count
        if k < 1:
            raise ValueError("skeleton needs at least one bone")
        roots = np.where(self.parent < 0)[0]
        if len(roots) != 1:
            raise ValueError(f"skeleton must have exactly one root, found {len(roots)}")
        # parents must be acyclic: every chain terminates at the root
        for i in range(k):
            seen = set()
            j = i
            while j >= 0:
                if j in seen:
                    raise ValueError(f"cycle in parent chain at bone {i}")
                seen.add(j)
                j = int(self.parent[j])

    @property
    def bone_count(self) -> int:
        return len(self.names)

    @property
    def root_index(self) -> int:
        return int(np.where(self.parent < 0)[0][0])

    def topo_order(self) -> List[int]:
        order, placed = [], set()
        pending = list(range(self.bone_count))
        while pending:
            rest = []
            for i in pending:
                p = int(self.parent[i])
                if p < 0 or p in placed:
                    order.append(i)
                    placed.add(i)
                else:
                    rest.append(i)
            pending = rest
        return order

    def to_json(self) -> str:
        bones = []
        for i, name in enumerate(self.names):
            p = int(self.parent[i])
            bones.append({
                "name": name,
                "parent": self.names[p] if p >= 0 else None,
                "offset": self.rest_offset[i].tolist(),
                "canonical_angle": self.canonical_angles[i].tolist(),
                "tip": self.tip[i].tolist(),
            })
        return json.dumps({"canonical_root": self.canonical_root.tolist(), "bones": bones}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Skeleton":
        doc = json.loads(text)
        bones = doc["bones"]
        names = [b["name"] for b in bones]
        idx = {n: i for i, n in enumerate(names)}
        parent = np.array([idx[b["parent"]] if b["parent"] is not None else -1 for b in bones])
        return cls(
            names=names,
            parent=parent,
            rest_offset=np.array([b["offset"] for b in bones]),
            canonical_angles=np.array([b["canonical_angle"] for b in bones]),
            canonical_root=np.array(doc["canonical_root"]),
            tip=np.array([b["tip"] for b in bones]),
        )


@dataclass
class Pose:
    """World joint positions plus per-bone axis-angle rotations."""

    joints: np.ndarray
    angles: np.ndarray
    root_translation: np.ndarray

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.joints.shape != self.angles.shape:
            raise ValueError(f"joints {self.joints.shape} vs angles {self.angles.shape}")
        if not (np.all(np.isfinite(self.joints)) and np.all(np.isfinite(self.angles))
                and np.all(np.isfinite(self.root_translation))):
            raise ValueError("pose contains non-finite entries")

    @property
    def bone_count(self) -> int:
        return self.joints.shape[0]


@dataclass
class ShapeParams:
    """Per-bone capsule radius (m) and axial length scale for the synthetic body."""

    radius: np.ndarray
    length_scale: np.ndarray

    def __post_init__(self):
        self.radius = np.asarray(self.radius, dtype=np.float64)
        self.length_scale = np.asarray(self.length_scale, dtype=np.float64)
        if np.any(self.radius <= 0) or np.any(self.length_scale <= 0):
            raise ValueError("capsule radii and length scales must be positive")


_RIGID_TOL = 1e-9


@dataclass
class BoneTransform:
    """Rigid map ``x -> x @ R.T + t``."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > _RIGID_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.R) - 1.0) > _RIGID_TOL:
            raise ValueError("rotation determinant is not +1")

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.R.T + self.t

    def inverse(self) -> "BoneTransform":
        return BoneTransform(self.R.T, -(self.R.T @ self.t))

    def compose(self, other: "BoneTransform") -> "BoneTransform":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return BoneTransform(self.R @ other.R, self.R @ other.t + self.t)


# ---------------------------------------------------------------------------
# Rotations


def rodrigues(omega: Tensor) -> Tensor:
    """Axis-angle vectors (K,3) to rotation matrices (K,3,3).

    Small angles take a series branch so the map and its gradient are exact
    at omega = 0.
    """
    if omega.data.ndim != 2 or omega.shape[1] != 3:
        raise ad.DimensionError(f"rodrigues expects (K,3), got {omega.shape}")
    k = omega.shape[0]
    s = ad.skew3(omega)
    ss = ad.bmm(s, s)
    sumsq = ad.sum_last(ad.mul(omega, omega))
    near = sumsq.data < 1e-8  # |omega| < 1e-4

    n = ad.sqrt(ad.clamp(sumsq, lo=1e-120))
    a_closed = ad.div(ad.sin(n), n)
    b_closed = ad.div(ad.add_scalar(ad.neg(ad.cos(n)), 1.0), ad.clamp(sumsq, lo=1e-120))
    a_series = ad.add_scalar(ad.mul_scalar(sumsq, -1.0 / 6.0), 1.0)
    b_series = ad.add_scalar(ad.mul_scalar(sumsq, -1.0 / 24.0), 0.5)
    a = ad.where_mask(near, a_series, a_closed)
    b = ad.where_mask(near, b_series, b_closed)

    eye = ad.as_tensor(np.broadcast_to(np.eye(3, dtype=omega.dtype), (k, 3, 3)).copy())
    return ad.add(eye, ad.add(ad.scale_leading(s, a), ad.scale_leading(ss, b)))


def rodrigues_np(omega: np.ndarray) -> np.ndarray:
    """Plain-array convenience wrapper (total function, no gradients)."""
    arr = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    out = rodrigues(ad.as_tensor(arr)).data
    return out[0] if np.asarray(omega).ndim == 1 else out


def rotation_log(r: Tensor) -> Tensor:
    """Rotation matrices (K,3,3) back to axis-angle (K,3).

    Uses ``omega = theta/(2 sin theta) * unskew(R)`` with a series-smoothed
    factor; angles near pi are rejected (outside the supported motion range).
    """
    c = ad.mul_scalar(ad.add_scalar(ad.trace3(r), -1.0), 0.5)
    factor = ad.rot_log_factor(c)
    return ad.scale_leading(ad.unskew3(r), factor)


def rotation_log_np(r: np.ndarray) -> np.ndarray:
    arr = r.reshape((-1, 3, 3))
    out = rotation_log(ad.as_tensor(arr)).data
    return out[0] if r.ndim == 2 else out


# ---------------------------------------------------------------------------
# Forward kinematics and motion bases


def forward_kinematics(skeleton: Skeleton, angles: Tensor, root_translation: Tensor
                       ) -> Tuple[Tensor, Tensor]:
    """Per-bone world transforms for a pose.

    ``T_i = T_parent(i) ∘ translate(rest_offset_i) ∘ rotate(angles_i)``; the
    returned translations are also the joint world positions.

    Returns ``(R, t)`` with shapes (K,3,3) and (K,3).
    """
    k = skeleton.bone_count
    if angles.shape != (k, 3):
        raise ad.DimensionError(f"expected angles ({k},3), got {angles.shape}")
    rots = rodrigues(angles)
    root_row = ad.reshape(root_translation, (1, 3))

    r_world: List[Optional[Tensor]] = [None] * k
    t_world: List[Optional[Tensor]] = [None] * k
    for i in skeleton.topo_order():
        rot_i = ad.index0(rots, i)
        off = ad.as_tensor(skeleton.rest_offset[i].reshape(1, 3).astype(angles.dtype))
        p = int(skeleton.parent[i])
        if p < 0:
            r_parent, t_parent = None, root_row
        else:
            r_parent, t_parent = r_world[p], t_world[p]
        if r_parent is None:
            r_world[i] = rot_i
            t_world[i] = ad.add(t_parent, off)
        else:
            r_world[i] = ad.matmul(r_parent, rot_i)
            t_world[i] = ad.add(t_parent, ad.matmul(off, ad.transpose2d(r_parent)))
    r_all = ad.stack0([r for r in r_world])
    t_all = ad.reshape(ad.stack0([t for t in t_world]), (k, 3))
    return r_all, t_all


def forward_kinematics_np(skeleton: Skeleton, angles: np.ndarray, root_translation: np.ndarray
                          ) -> Tuple[np.ndarray, np.ndarray]:
    r, t = forward_kinematics(skeleton, ad.as_tensor(np.asarray(angles, dtype=np.float64)),
                              ad.as_tensor(np.asarray(root_translation, dtype=np.float64)))
    return r.data, t.data


def canonical_transforms(skeleton: Skeleton) -> Tuple[np.ndarray, np.ndarray]:
    """World transforms of the canonical pose (constants)."""
    return forward_kinematics_np(skeleton, skeleton.canonical_angles, skeleton.canonical_root)


def motion_basis(skeleton: Skeleton, angles: Tensor, root_translation: Tensor
                 ) -> Tuple[Tensor, Tensor]:
    """Per-bone rigid maps from the observed frame into the canonical frame.

    ``G_i = T_i(canonical) ∘ T_i(observed)^{-1}``: a point rigidly attached
    to bone i in the observed pose lands at its canonical-pose location.
    """
    rc, tc = canonical_transforms(skeleton)
    rc_t = ad.as_tensor(rc.astype(angles.dtype))
    tc_t = ad.as_tensor(tc.astype(angles.dtype))
    ro, to = forward_kinematics(skeleton, angles, root_translation)
    g_r = ad.bmm(rc_t, ad.transpose_last2(ro))
    k = skeleton.bone_count
    moved = ad.reshape(ad.bmm(g_r, ad.reshape(to, (k, 3, 1))), (k, 3))
    g_t = ad.sub(tc_t, moved)
    return g_r, g_t


def motion_basis_np(skeleton: Skeleton, pose: Pose) -> List[BoneTransform]:
    g_r, g_t = motion_basis(skeleton, ad.as_tensor(pose.angles),
                            ad.as_tensor(pose.root_translation))
    return [BoneTransform(g_r.data[i], g_t.data[i]) for i in range(skeleton.bone_count)]


def pose_from_angles(skeleton: Skeleton, angles: np.ndarray, root_translation: np.ndarray) -> Pose:
    _, joints = forward_kinematics_np(skeleton, angles, root_translation)
    return Pose(joints=joints, angles=np.asarray(angles, dtype=np.float64),
                root_translation=np.asarray(root_translation, dtype=np.float64))


def canonical_pose(skeleton: Skeleton) -> Pose:
    return pose_from_angles(skeleton, skeleton.canonical_angles, skeleton.canonical_root)


# ---------------------------------------------------------------------------
# Default body


def default_skeleton() -> Skeleton:
    """Ten-bone human-ish skeleton: pelvis root, two spine segments, head,
    upper/lower arms, single-segment legs.  Y is up, the subject faces +Z,
    +X is the subject's left; units are meters.

    Rest geometry is a T-pose; the canonical pose drops the arms 45 degrees
    and splays the legs slightly so canonical-space limbs stay separated.
    """
    a = 0.25 * np.pi
    leg = 0.10
    bones = [
        # name, parent, offset, canonical angle, tip
        ("pelvis", None, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.12, 0.0]),
        ("spine", "pelvis", [0.0, 0.12, 0.0], [0.0, 0.0, 0.0], [0.0, 0.22, 0.0]),
        ("chest", "spine", [0.0, 0.22, 0.0], [0.0, 0.0, 0.0], [0.0, 0.18, 0.0]),
        ("head", "chest", [0.0, 0.18, 0.0], [0.0, 0.0, 0.0], [0.0, 0.24, 0.0]),
        ("l_upper_arm", "chest", [0.16, 0.12, 0.0], [0.0, 0.0, -a], [0.26, 0.0, 0.0]),
        ("l_forearm", "l_upper_arm", [0.26, 0.0, 0.0], [0.0, 0.0, 0.0], [0.24, 0.0, 0.0]),
        ("r_upper_arm", "chest", [-0.16, 0.12, 0.0], [0.0, 0.0, a], [-0.26, 0.0, 0.0]),
        ("r_forearm", "r_upper_arm", [-0.26, 0.0, 0.0], [0.0, 0.0, 0.0], [-0.24, 0.0, 0.0]),
        ("l_leg", "pelvis", [0.09, -0.03, 0.0], [0.0, 0.0, -leg], [0.0, -0.82, 0.0]),
        ("r_leg", "pelvis", [-0.09, -0.03, 0.0], [0.0, 0.0, leg], [0.0, -0.82, 0.0]),
    ]
    names = [b[0] for b in bones]
    idx = {n: i for i, n in enumerate(names)}
    return Skeleton(
        names=names,
        parent=np.array([idx[b[1]] if b[1] else -1 for b in bones]),
        rest_offset=np.array([b[2] for b in bones]),
        canonical_angles=np.array([b[3] for b in bones]),
        canonical_root=np.array([0.0, 0.95, 0.0]),
        tip=np.array([b[4] for b in bones]),
    )


def default_shape(skeleton: Skeleton) -> ShapeParams:
    radius = {
        "pelvis": 0.13, "spine": 0.12, "chest": 0.13, "head": 0.11,
        "l_upper_arm": 0.05, "l_forearm": 0.045, "r_upper_arm": 0.05,
        "r_forearm": 0.045, "l_leg": 0.07, "r_leg": 0.07,
    }
    r = np.array([radius.get(n, 0.06) for n in skeleton.names])
    return ShapeParams(radius=r, length_scale=np.ones(skeleton.bone_count))
