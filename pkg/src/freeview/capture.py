"""Synthetic monocular capture oracle.

Renders a posed capsule body with an analytic raytracer to produce
training/evaluation data with exactly known cameras and poses: images,
binary masks, depth, and a metadata file.  Shading is Lambertian with a
single fixed directional light evaluated in each bone's local frame (plus a
constant ambient term), so a surface point keeps its color across both
viewpoints and poses -- the appearance is rigidly attached to the body,
which is the invariance the downstream canonical-space model fits.

Dataset layout on disk::

    <root>/frames/<id>.png   8-bit RGB
    <root>/masks/<id>.png    8-bit single channel, {0, 255}
    <root>/skeleton.json
    <root>/meta.json
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .skeleton import (Pose, ShapeParams, Skeleton, default_shape, default_skeleton,
                       forward_kinematics_np, pose_from_angles)

META_FORMAT = 1


# ---------------------------------------------------------------------------
# Cameras


@dataclass
class CameraModel:
    """Pinhole camera: 3x3 intrinsics plus a rigid world-to-camera map."""

    intrinsics: np.ndarray
    world_to_camera: np.ndarray  # 4x4, rows [R | t]
    width: int
    height: int

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        k = self.intrinsics
        if k.shape != (3, 3) or k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("intrinsics must be 3x3 with positive focal lengths")
        if not (0 <= k[0, 2] < self.width and 0 <= k[1, 2] < self.height):
            raise ValueError("principal point outside image")
        r = self.world_to_camera[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9 or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("extrinsic rotation is not rigid")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def rays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-pixel world rays through pixel centers, row-major pixel order."""
        w, h = self.width, self.height
        xs, ys = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
        pix = np.stack([xs.ravel(), ys.ravel(), np.ones(w * h)], axis=1)
        dirs_cam = pix @ np.linalg.inv(self.intrinsics).T
        dirs = dirs_cam @ self.rotation
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.center, dirs.shape).copy()
        return origins, dirs

    def ray_for_pixel(self, px: int, py: int) -> Tuple[np.ndarray, np.ndarray]:
        if not (0 <= px < self.width and 0 <= py < self.height):
            raise ValueError(f"pixel ({px},{py}) outside {self.width}x{self.height}")
        p = np.array([px + 0.5, py + 0.5, 1.0])
        d = (np.linalg.inv(self.intrinsics) @ p) @ self.rotation
        return self.center.copy(), d / np.linalg.norm(d)

    def project(self, pts: np.ndarray) -> np.ndarray:
        """World points (N,3) to continuous pixel coordinates (N,2)."""
        cam = pts @ self.rotation.T + self.translation
        uv = cam[:, :2] / cam[:, 2:3]
        return uv * [self.intrinsics[0, 0], self.intrinsics[1, 1]] + self.intrinsics[:2, 2]

    def to_meta(self, cam_id: int) -> dict:
        return {
            "id": cam_id,
            "intrinsics": self.intrinsics.reshape(-1).tolist(),
            "world_to_camera": self.world_to_camera.reshape(-1).tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_meta(cls, doc: dict) -> "CameraModel":
        return cls(np.array(doc["intrinsics"]).reshape(3, 3),
                   np.array(doc["world_to_camera"]).reshape(4, 4),
                   int(doc["width"]), int(doc["height"]))


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    Camera convention: +x right, +y down, +z forward (view direction).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    x = np.cross(fwd, np.asarray(up, dtype=np.float64))
    x = x / np.linalg.norm(x)
    y = np.cross(fwd, x)
    y = y / np.linalg.norm(y)
    r = np.stack([x, y, fwd])
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = -r @ eye
    return m


def orbit_camera(target, yaw_deg: float, pitch_deg: float, radius: float, fov_deg: float,
                 width: int, height: int) -> CameraModel:
    """Camera on a sphere around ``target``; yaw about +Y, pitch above horizon."""
    yaw = np.deg2rad(yaw_deg)
    pitch = np.deg2rad(pitch_deg)
    target = np.asarray(target, dtype=np.float64)
    eye = target + radius * np.array([
        np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
    f = 0.5 * height / np.tan(0.5 * np.deg2rad(fov_deg))
    k = np.array([[f, 0, width / 2.0], [0, f, height / 2.0], [0, 0, 1.0]])
    return CameraModel(k, look_at(eye, target), width, height)


# ---------------------------------------------------------------------------
# Capsule body


_DEFAULT_ALBEDO = {
    "pelvis": (0.25, 0.32, 0.72),
    "spine": (0.28, 0.38, 0.68),
    "chest": (0.33, 0.45, 0.66),
    "head": (0.88, 0.72, 0.58),
    "l_upper_arm": (0.82, 0.22, 0.20),
    "l_forearm": (0.90, 0.38, 0.28),
    "r_upper_arm": (0.20, 0.66, 0.28),
    "r_forearm": (0.32, 0.78, 0.38),
    "l_leg": (0.38, 0.26, 0.58),
    "r_leg": (0.30, 0.22, 0.52),
}


@dataclass
class CapsuleBody:
    """Per-bone capsules with albedo; optional bone-aligned albedo stripes."""

    skeleton: Skeleton
    shape: ShapeParams
    albedo: np.ndarray
    stripes: bool = True
    stripe_period: float = 0.08
    stripe_factor: float = 0.65

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.albedo.shape != (self.skeleton.bone_count, 3):
            raise ValueError(f"albedo shape {self.albedo.shape}")
        lengths = np.linalg.norm(self.skeleton.tip * self.shape.length_scale[:, None], axis=1)
        if np.any(lengths <= 0):
            raise ValueError("every capsule needs positive length")

    @classmethod
    def default(cls, skeleton: Optional[Skeleton] = None, shape: Optional[ShapeParams] = None,
                stripes: bool = True) -> "CapsuleBody":
        skeleton = skeleton or default_skeleton()
        shape = shape or default_shape(skeleton)
        alb = np.array([_DEFAULT_ALBEDO.get(n, (0.6, 0.6, 0.6)) for n in skeleton.names])
        return cls(skeleton, shape, alb, stripes=stripes)

    def capsules_world(self, pose: Pose):
        """Per bone: (p0, p1, radius, world rotation) of the posed capsule."""
        r_all, t_all = forward_kinematics_np(self.skeleton, pose.angles, pose.root_translation)
        out = []
        for i in range(self.skeleton.bone_count):
            p0 = t_all[i]
            p1 = t_all[i] + r_all[i] @ (self.skeleton.tip[i] * self.shape.length_scale[i])
            out.append((p0, p1, float(self.shape.radius[i]), r_all[i]))
        return out

    def bounds(self, pose: Pose, margin: float = 0.05) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box around the posed capsules, dilated by ``margin``."""
        caps = self.capsules_world(pose)
        pts = np.concatenate([[p0 - r, p0 + r, p1 - r, p1 + r] for p0, p1, r, _ in caps])
        return pts.min(axis=0) - margin, pts.max(axis=0) + margin


@dataclass
class LightModel:
    """One directional light, carried in each bone's local frame, plus ambient."""

    direction: np.ndarray = field(default_factory=lambda: np.array([0.35, 0.75, 0.55]))
    ambient: float = 0.25
    diffuse: float = 0.75

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.direction = self.direction / np.linalg.norm(self.direction)


def _ray_capsule(origins, dirs, p0, p1, radius):
    """Nearest intersection of unit-direction rays with one capsule.

    Returns (t, normal, axial) with t = inf on miss; ``axial`` is the
    coordinate along the capsule axis used for striping.
    """
    n = origins.shape[0]
    axis = p1 - p0
    length = np.linalg.norm(axis)
    ahat = axis / length
    tiny = 1e-12

    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_s = np.zeros(n)

    m = origins - p0
    md = m @ ahat
    dd = dirs @ ahat
    mp = m - md[:, None] * ahat
    dp = dirs - dd[:, None] * ahat

    a = np.einsum("ij,ij->i", dp, dp)
    b = np.einsum("ij,ij->i", mp, dp)
    c = np.einsum("ij,ij->i", mp, mp) - radius * radius
    disc = b * b - a * c
    ok = (disc >= 0) & (a > tiny)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for sign in (-1.0, 1.0):
        t = np.where(ok, (-b + sign * sq) / np.where(ok, a, 1.0), np.inf)
        s = md + t * dd
        valid = ok & (t > tiny) & (s >= 0.0) & (s <= length) & (t < best_t)
        if np.any(valid):
            x = origins[valid] + t[valid, None] * dirs[valid]
            foot = p0 + s[valid, None] * ahat
            best_t[valid] = t[valid]
            best_n[valid] = (x - foot) / radius
            best_s[valid] = s[valid]

    for center, s_val in ((p0, 0.0), (p1, length)):
        mc = origins - center
        bs = np.einsum("ij,ij->i", mc, dirs)
        cs = np.einsum("ij,ij->i", mc, mc) - radius * radius
        disc_s = bs * bs - cs
        oks = disc_s >= 0
        sqs = np.sqrt(np.where(oks, disc_s, 0.0))
        for sign in (-1.0, 1.0):
            t = np.where(oks, -bs + sign * sqs, np.inf)
            valid = oks & (t > tiny) & (t < best_t)
            if np.any(valid):
                x = origins[valid] + t[valid, None] * dirs[valid]
                axial = (x - p0) @ ahat
                cap_side = np.clip(axial, 0.0, length)
                # only the hemisphere beyond the cylinder belongs to the cap
                hemi = (axial < 0.0) | (axial > length)
                sel = np.where(valid)[0][hemi]
                if sel.size:
                    xs = origins[sel] + t[sel, None] * dirs[sel]
                    best_t[sel] = t[sel]
                    best_n[sel] = (xs - center) / radius
                    best_s[sel] = cap_side[hemi]
    return best_t, best_n, best_s


def raycast_rays(body: CapsuleBody, pose: Pose, origins: np.ndarray, dirs: np.ndarray,
                 light: LightModel, background: np.ndarray):
    """Shade a batch of rays; returns (rgb, mask, depth, bone index)."""
    n = origins.shape[0]
    caps = body.capsules_world(pose)
    depth = np.full(n, np.inf)
    bone = np.full(n, -1, dtype=np.int64)
    normal = np.zeros((n, 3))
    axial = np.zeros(n)
    for i, (p0, p1, radius, _) in enumerate(caps):
        t, nrm, s = _ray_capsule(origins, dirs, p0, p1, radius)
        closer = t < depth
        depth[closer] = t[closer]
        bone[closer] = i
        normal[closer] = nrm[closer]
        axial[closer] = s[closer]

    rgb = np.tile(np.asarray(background, dtype=np.float64), (n, 1))
    hit = bone >= 0
    if np.any(hit):
        hb = bone[hit]
        alb = body.albedo[hb].copy()
        if body.stripes:
            band = np.floor(axial[hit] / body.stripe_period).astype(np.int64) % 2
            alb[band == 1] *= body.stripe_factor
        # light direction rides the bone frame: n_local . l
        rot = np.stack([caps[i][3] for i in range(len(caps))])
        n_local = np.einsum("nij,ni->nj", rot[hb], normal[hit])
        lam = np.maximum(n_local @ light.direction, 0.0)
        rgb[hit] = np.clip(alb * (light.ambient + light.diffuse * lam)[:, None], 0.0, 1.0)
    return rgb, hit, depth, bone


def raycast(body: CapsuleBody, pose: Pose, camera: CameraModel, pixel: Tuple[int, int],
            light: Optional[LightModel] = None,
            background=(0.5, 0.5, 0.5)):
    """Single-pixel oracle: (rgb, mask, depth) for the ray through ``pixel``."""
    light = light or LightModel()
    o, d = camera.ray_for_pixel(*pixel)
    rgb, hit, depth, _ = raycast_rays(body, pose, o[None, :], d[None, :], light,
                                      np.asarray(background, dtype=np.float64))
    return rgb[0], bool(hit[0]), float(depth[0])


# ---------------------------------------------------------------------------
# Frames and datasets


@dataclass
class CaptureFrame:
    """One rendered observation; ``mask`` is true exactly where depth is finite."""

    image: np.ndarray
    mask: np.ndarray
    depth: Optional[np.ndarray]
    pose: Pose
    camera: CameraModel
    index: int

    def __post_init__(self):
        if self.depth is not None:
            if not np.array_equal(self.mask > 0, np.isfinite(self.depth)):
                raise ValueError("mask/depth consistency violated")


def render_frame(body: CapsuleBody, pose: Pose, camera: CameraModel, light: LightModel,
                 background, index: int = 0) -> CaptureFrame:
    origins, dirs = camera.rays()
    rgb, hit, depth, _ = raycast_rays(body, pose, origins, dirs, light,
                                      np.asarray(background, dtype=np.float64))
    h, w = camera.height, camera.width
    return CaptureFrame(
        image=rgb.reshape(h, w, 3),
        mask=hit.reshape(h, w),
        depth=depth.reshape(h, w),
        pose=pose,
        camera=camera,
        index=index,
    )


# ---------------------------------------------------------------------------
# Motion scripts

MOTION_SCRIPTS = ("arm_swing", "walk_cycle", "torso_twist")


def motion_angles(script: str, skeleton: Skeleton, frame: int, frame_count: int
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Joint angles and root translation for one time step.

    Every script turns the whole body through a full revolution over the
    sequence so a single fixed camera observes all sides.
    """
    if script not in MOTION_SCRIPTS:
        raise ValueError(f"unknown motion script '{script}' (have {MOTION_SCRIPTS})")
    t = frame / max(frame_count, 1)
    idx = {n: i for i, n in enumerate(skeleton.names)}
    ang = skeleton.canonical_angles.copy()
    root = skeleton.canonical_root.copy()
    ang[idx["pelvis"]] = [0.0, 2.0 * np.pi * t, 0.0]

    two = 2.0 * np.pi
    if script == "arm_swing":
        swing = 0.55 * np.sin(two * 2.0 * t)
        ang[idx["l_upper_arm"]] += [swing, 0.15 * np.sin(two * t), 0.0]
        ang[idx["r_upper_arm"]] += [-swing, -0.15 * np.sin(two * t), 0.0]
        ang[idx["l_forearm"]] = [0.0, 0.0, 0.30 + 0.25 * np.sin(two * 2.0 * t)]
        ang[idx["r_forearm"]] = [0.0, 0.0, -0.30 - 0.25 * np.cos(two * 2.0 * t)]
        ang[idx["spine"]] = [0.0, 0.12 * np.sin(two * t), 0.0]
        root = root + [0.0, 0.02 * np.sin(two * 4.0 * t), 0.0]
    elif script == "walk_cycle":
        step = 0.45 * np.sin(two * 3.0 * t)
        ang[idx["l_leg"]] += [step, 0.0, 0.0]
        ang[idx["r_leg"]] += [-step, 0.0, 0.0]
        ang[idx["l_upper_arm"]] += [-0.35 * np.sin(two * 3.0 * t), 0.0, 0.0]
        ang[idx["r_upper_arm"]] += [0.35 * np.sin(two * 3.0 * t), 0.0, 0.0]
        ang[idx["l_forearm"]] = [0.0, 0.0, 0.25]
        ang[idx["r_forearm"]] = [0.0, 0.0, -0.25]
        root = root + [0.0, 0.03 * np.abs(np.sin(two * 3.0 * t)), 0.0]
    elif script == "torso_twist":
        twist = 0.55 * np.sin(two * 2.0 * t)
        ang[idx["chest"]] = [0.0, twist, 0.0]
        ang[idx["head"]] = [0.0, -0.4 * twist, 0.0]
        ang[idx["l_upper_arm"]] += [0.0, 0.0, 0.25 * np.sin(two * 2.0 * t)]
        ang[idx["r_upper_arm"]] += [0.0, 0.0, -0.25 * np.sin(two * 2.0 * t)]
    return ang, root


# ---------------------------------------------------------------------------
# Dataset generation


@dataclass
class CaptureConfig:
    out_dir: str
    seed: int = 0
    frame_count: int = 60
    width: int = 128
    height: int = 128
    motion: str = "arm_swing"
    n_eval_cameras: int = 4
    eval_every: int = 15
    camera_radius: float = 2.6
    fov_deg: float = 45.0
    background: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    stripes: bool = True
    perturb_deg: float = 0.0
    perturb_seed: int = 1


class CaptureDataset:
    """On-disk dataset handle: metadata plus lazily loaded frames."""

    def __init__(self, root: str, meta: dict, skeleton: Skeleton):
        self.root = Path(root)
        self.meta = meta
        self.skeleton = skeleton

    # -- loading -----------------------------------------------------------

    @classmethod
    def load(cls, root: str) -> "CaptureDataset":
        root_p = Path(root)
        meta_path = root_p / "meta.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no dataset metadata at {meta_path}")
        meta = json.loads(meta_path.read_text())
        skeleton = Skeleton.from_json((root_p / meta["skeleton_file"]).read_text())
        ds = cls(root_p, meta, skeleton)
        for fr in meta["frames"]:
            if not (root_p / fr["file"]).exists():
                raise FileNotFoundError(f"missing frame file {fr['file']}")
        return ds

    # -- accessors ----------------------------------------------------------

    @property
    def frames(self) -> List[dict]:
        return self.meta["frames"]

    @property
    def train_ids(self) -> List[int]:
        return self.meta["splits"]["train"]

    @property
    def heldout_ids(self) -> List[int]:
        return self.meta["splits"]["heldout"]

    @property
    def background(self) -> np.ndarray:
        return np.array(self.meta["background"], dtype=np.float64)

    def camera(self, cam_id: int) -> CameraModel:
        return CameraModel.from_meta(self.meta["cameras"][cam_id])

    def frame_record(self, frame_id: int) -> dict:
        return self.meta["frames"][frame_id]

    def pose(self, frame_id: int) -> Pose:
        rec = self.frame_record(frame_id)
        return pose_from_angles(self.skeleton, np.array(rec["pose"]["angles"]),
                                np.array(rec["pose"]["root"]))

    def perturbed_pose(self, frame_id: int) -> Pose:
        doc = self.meta.get("perturbed_poses")
        if not doc:
            return self.pose(frame_id)
        rec = self.frame_record(frame_id)
        for entry in doc["poses"]:
            if entry["frame"] == frame_id:
                return Pose(joints=self.pose(frame_id).joints,
                            angles=np.array(entry["angles"]),
                            root_translation=np.array(rec["pose"]["root"]))
        return self.pose(frame_id)

    def load_image(self, frame_id: int) -> np.ndarray:
        rec = self.frame_record(frame_id)
        arr = np.asarray(Image.open(self.root / rec["file"]), dtype=np.float64)
        return arr / 255.0

    def load_mask(self, frame_id: int) -> np.ndarray:
        rec = self.frame_record(frame_id)
        return np.asarray(Image.open(self.root / rec["mask"]), dtype=np.uint8) > 127

    def body(self) -> CapsuleBody:
        return CapsuleBody(self.skeleton,
                           ShapeParams(np.array(self.meta["shape"]["radius"]),
                                       np.array(self.meta["shape"]["length_scale"])),
                           np.array(self.meta["albedo"]),
                           stripes=self.meta["stripes"],
                           stripe_period=self.meta["stripe_period"])

    def light(self) -> LightModel:
        doc = self.meta["light"]
        return LightModel(np.array(doc["direction"]), doc["ambient"], doc["diffuse"])


def _save_png(path: Path, arr: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def image_to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(config: CaptureConfig) -> CaptureDataset:
    """Deterministic synthetic capture: one training camera over every time
    step plus held-out ring cameras sampled every ``eval_every`` steps."""
    skeleton = default_skeleton()
    body = CapsuleBody.default(skeleton, stripes=config.stripes)
    light = LightModel()
    background = np.array(config.background, dtype=np.float64)
    root = Path(config.out_dir)
    root.mkdir(parents=True, exist_ok=True)

    target = np.array([0.0, 0.93, 0.0])
    cams = [orbit_camera(target, 0.0, 0.0, config.camera_radius, config.fov_deg,
                         config.width, config.height)]
    for i in range(config.n_eval_cameras):
        cams.append(orbit_camera(target, 45.0 * (i + 1), 0.0, config.camera_radius,
                                 config.fov_deg, config.width, config.height))

    poses = []
    for f in range(config.frame_count):
        ang, root_t = motion_angles(config.motion, skeleton, f, config.frame_count)
        poses.append(pose_from_angles(skeleton, ang, root_t))

    frames_meta: List[dict] = []
    splits = {"train": [], "heldout": []}

    def emit(time_idx: int, cam_id: int, split: str):
        fid = len(frames_meta)
        frame = render_frame(body, poses[time_idx], cams[cam_id], light, background, index=fid)
        fname = f"frames/{fid:06d}.png"
        mname = f"masks/{fid:06d}.png"
        _save_png(root / fname, image_to_bytes(frame.image))
        _save_png(root / mname, (frame.mask * np.uint8(255)))
        frames_meta.append({
            "id": fid,
            "file": fname,
            "mask": mname,
            "time": time_idx,
            "camera": cam_id,
            "split": split,
            "pose": {"angles": poses[time_idx].angles.tolist(),
                     "root": poses[time_idx].root_translation.tolist()},
        })
        splits[split].append(fid)

    for f in range(config.frame_count):
        emit(f, 0, "train")
    for cam_id in range(1, len(cams)):
        for f in range(0, config.frame_count, config.eval_every):
            emit(f, cam_id, "heldout")

    (root / "skeleton.json").write_text(skeleton.to_json())
    meta = {
        "format": META_FORMAT,
        "seed": config.seed,
        "resolution": [config.width, config.height],
        "frame_count": config.frame_count,
        "motion": config.motion,
        "background": list(config.background),
        "light": {"direction": light.direction.tolist(), "ambient": light.ambient,
                  "diffuse": light.diffuse},
        "stripes": config.stripes,
        "stripe_period": body.stripe_period,
        "skeleton_file": "skeleton.json",
        "shape": {"radius": body.shape.radius.tolist(),
                  "length_scale": body.shape.length_scale.tolist()},
        "albedo": body.albedo.tolist(),
        "cameras": [c.to_meta(i) for i, c in enumerate(cams)],
        "frames": frames_meta,
        "splits": splits,
        "perturbed_poses": None,
    }
    ds = CaptureDataset(root, meta, skeleton)
    if config.perturb_deg > 0:
        perturbed = perturb_poses(ds, config.perturb_deg, config.perturb_seed)
        meta["perturbed_poses"] = {
            "sigma_deg": config.perturb_deg,
            "seed": config.perturb_seed,
            "poses": [{"frame": fid, "angles": ang.tolist()} for fid, ang in perturbed.items()],
        }
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    return ds


def perturb_poses(dataset: CaptureDataset, sigma_deg: float, seed: int) -> Dict[int, np.ndarray]:
    """Per-joint axis-angle noise on the training poses; originals untouched.

    Joint positions stay exact; only the angles are disturbed, mimicking the
    inaccuracy of poses estimated from images.
    """
    if sigma_deg < 0:
        raise ValueError("sigma_deg must be >= 0")
    sigma = np.deg2rad(sigma_deg)
    rng = np.random.default_rng(seed)
    out: Dict[int, np.ndarray] = {}
    for fid in dataset.train_ids:
        angles = np.array(dataset.frame_record(fid)["pose"]["angles"])
        out[fid] = angles + rng.normal(0.0, sigma, angles.shape) if sigma > 0 else angles
    return out
