"""Seeded synthetic multi-person scenes with simulated 2D detections and depth readouts.

A scene holds up to four people placed in the camera frustum. The 2D detector
is modelled as projection plus isotropic pixel noise and independent joint
misses; the depth estimator as ``ln(z)`` plus log-noise, with occasional
readouts taken from the wrong surface (an occluding person or the background).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, normalize_array, project_array
from .skeleton import JointSet, get_joint_set


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    sigma_2d_px: float = 5.0
    joint_miss_prob: float = 0.05
    hip_miss_prob: float = 0.03
    # confidence = 1 / (1 + |pixel error| / conf_scale_px)
    conf_scale_px: float = 10.0
    depth_log_sigma: float = 0.1
    depth_substitution_prob: float = 0.05
    background_depth_mm: float = 10000.0
    # systematic miscalibration of the depth estimator in log space
    depth_bias_scale: float = 1.0
    depth_bias_offset: float = 0.0

    def __post_init__(self):
        for name in ("joint_miss_prob", "hip_miss_prob", "depth_substitution_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"noise.{name} must be a probability, got {p}")
        for name in ("sigma_2d_px", "depth_log_sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"noise.{name} must be non-negative")
        if self.conf_scale_px <= 0 or self.background_depth_mm <= 0:
            raise ConfigError("noise.conf_scale_px and noise.background_depth_mm must be positive")


@dataclass(frozen=True)
class SceneConfig:
    people_per_scene: int = 4
    depth_min_mm: float = 2000.0
    depth_max_mm: float = 8000.0
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 640.0
    cy: float = 360.0
    width: int = 1280
    height: int = 720
    templates: int = 4
    min_root_separation_mm: float = 300.0
    frustum_margin_px: float = 20.0
    bone_jitter: float = 0.1
    angle_jitter: float = 0.12
    independent_side_jitter: bool = True
    joint_set: str = "default14"
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        if not 0 < self.depth_min_mm < self.depth_max_mm:
            raise ConfigError("depth range must satisfy 0 < min < max")
        if not 1 <= self.people_per_scene <= 4:
            raise ConfigError("people_per_scene must be between 1 and 4")
        if not 1 <= self.templates <= len(TEMPLATES):
            raise ConfigError(f"templates must be between 1 and {len(TEMPLATES)}")
        if self.width <= 2 * self.frustum_margin_px or self.height <= 2 * self.frustum_margin_px:
            raise ConfigError("image too small for the frustum margin")
        CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy)

    @property
    def joints(self) -> JointSet:
        return get_joint_set(self.joint_set)


# -- skeleton templates -------------------------------------------------------

# bone kind -> (nominal length mm, plausible human range mm)
BONE_LENGTHS = {
    "hip": (120.0, (90.0, 150.0)),
    "femur": (430.0, (350.0, 500.0)),
    "tibia": (410.0, (330.0, 480.0)),
    "spine": (510.0, (420.0, 600.0)),
    "clavicle": (180.0, (140.0, 220.0)),
    "humerus": (310.0, (250.0, 380.0)),
    "forearm": (265.0, (210.0, 320.0)),
    "head": (200.0, (150.0, 260.0)),
}

BONE_KIND = {
    "r_hip": "hip", "l_hip": "hip",
    "r_knee": "femur", "l_knee": "femur",
    "r_ankle": "tibia", "l_ankle": "tibia",
    "neck": "spine",
    "r_shoulder": "clavicle", "l_shoulder": "clavicle",
    "r_elbow": "humerus", "l_elbow": "humerus",
    "r_wrist": "forearm", "l_wrist": "forearm",
    "nose": "head",
}  # fmt: skip

# child joint -> bone direction in a body frame facing the camera (y down, -z toward camera)
_STAND = {
    "neck": (0, -1, 0), "nose": (0, -1, -0.2),
    "r_shoulder": (-1, 0, 0), "l_shoulder": (1, 0, 0),
    "r_elbow": (-0.1, 1, 0), "l_elbow": (0.1, 1, 0),
    "r_wrist": (0, 1, -0.1), "l_wrist": (0, 1, -0.1),
    "r_hip": (-1, 0, 0), "l_hip": (1, 0, 0),
    "r_knee": (0, 1, 0), "l_knee": (0, 1, 0),
    "r_ankle": (0, 1, 0), "l_ankle": (0, 1, 0),
}  # fmt: skip

TEMPLATES = {
    "stand": _STAND,
    "sit": {**_STAND, "neck": (0, -1, 0.15),
            "r_knee": (0, 0.05, -1), "l_knee": (0, 0.05, -1),
            "r_wrist": (0, 0.2, -1), "l_wrist": (0, 0.2, -1)},
    "walk": {**_STAND,
             "r_knee": (0, 1, -0.45), "r_ankle": (0, 1, 0.25),
             "l_knee": (0, 1, 0.35), "l_ankle": (0, 1, 0.45),
             "r_elbow": (-0.1, 1, 0.4), "l_elbow": (0.1, 1, -0.4),
             "r_wrist": (0, 1, -0.3), "l_wrist": (0, 0.8, -0.6)},
    "reach": {**_STAND,
              "r_elbow": (-0.2, -0.3, -1), "r_wrist": (0, -0.2, -1),
              "l_elbow": (0.4, -1, 0), "l_wrist": (0, -1, 0)},
}  # fmt: skip
TEMPLATE_NAMES = tuple(TEMPLATES)


def _unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _yaw(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def bone_lengths(pose: np.ndarray, joints: JointSet) -> dict[tuple[str, str], float]:
    return {(a, b): float(np.linalg.norm(pose[joints.index(b)] - pose[joints.index(a)])) for a, b in joints.bones}


def sample_skeleton(rng: np.random.Generator, config: SceneConfig | None = None) -> np.ndarray:
    """Root-relative ``(J, 3)`` pose in mm from a jittered template."""
    config = config or SceneConfig()
    joints = config.joints
    template = TEMPLATES[TEMPLATE_NAMES[rng.integers(config.templates)]]
    jitter = {}
    for kind in BONE_LENGTHS:
        jitter[kind] = rng.uniform(1 - config.bone_jitter, 1 + config.bone_jitter)
    pose = np.zeros((len(joints), 3))
    for parent, child in joints.bones:
        kind = BONE_KIND[child]
        nominal, (lo, hi) = BONE_LENGTHS[kind]
        if config.independent_side_jitter:
            scale = rng.uniform(1 - config.bone_jitter, 1 + config.bone_jitter)
        else:
            scale = jitter[kind]
        length = float(np.clip(nominal * scale, lo, hi))
        direction = _unit(np.asarray(template[child], dtype=float) + rng.normal(0.0, config.angle_jitter, 3))
        pose[joints.index(child)] = pose[joints.index(parent)] + length * direction
    rot = _yaw(rng.uniform(-np.pi, np.pi))
    return pose @ rot.T


# -- scenes -------------------------------------------------------------------


@dataclass
class SyntheticScene:
    """One image worth of people.

    ``uv``/``confidence`` are NaN for missed joints; ``logdepth`` is NaN where no
    keypoint was detected to read the depth at.
    """

    poses3d: np.ndarray  # (P, J, 3) mm
    camera: CameraIntrinsics
    width: int
    height: int
    seed: int = 0
    uv: np.ndarray | None = None  # (P, J, 2) px
    confidence: np.ndarray | None = None  # (P, J)
    visible: np.ndarray | None = None  # (P, J) bool
    logdepth: np.ndarray | None = None  # (P, J)


def place_people(skeletons: list[np.ndarray], config: SceneConfig, rng: np.random.Generator,
                 max_tries: int = 1000) -> SyntheticScene:
    if not 1 <= len(skeletons) <= 4:
        raise ConfigError("a scene holds 1 to 4 people")
    cam = config.camera
    m = config.frustum_margin_px
    roots: list[np.ndarray] = []
    poses = []
    for skel in skeletons:
        for _ in range(max_tries):
            z = rng.uniform(config.depth_min_mm, config.depth_max_mm)
            u = rng.uniform(m, config.width - m)
            v = rng.uniform(m, config.height - m)
            root = np.array([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z])
            if np.any(skel[:, 2] + z <= 100.0):
                continue
            if all(np.linalg.norm(root - r) >= config.min_root_separation_mm for r in roots):
                break
        else:
            raise ConfigError(f"could not place a person after {max_tries} tries; frustum too tight")
        roots.append(root)
        poses.append(skel + root)
    return SyntheticScene(np.stack(poses), cam, config.width, config.height)


def render_detections(scene: SyntheticScene, noise: NoiseModel, rng: np.random.Generator,
                      joints: JointSet | None = None) -> SyntheticScene:
    """Simulate a 2D keypoint detector; fills ``uv``, ``confidence`` and ``visible``."""
    joints = joints or get_joint_set("default14")
    n_people, n_joints, _ = scene.poses3d.shape
    root = joints.root_index
    exact = project_array(scene.camera, scene.poses3d)
    err = rng.normal(0.0, 1.0, exact.shape) * noise.sigma_2d_px
    miss_p = np.full((n_people, n_joints), noise.joint_miss_prob)
    miss_p[:, root] = noise.hip_miss_prob
    visible = rng.random((n_people, n_joints)) >= miss_p
    uv = exact + err
    conf = 1.0 / (1.0 + np.linalg.norm(err, axis=-1) / noise.conf_scale_px)
    uv[~visible] = np.nan
    conf[~visible] = np.nan
    scene.uv, scene.confidence, scene.visible = uv, conf, visible
    return scene


_TORSO = ("pelvis", "neck", "r_shoulder", "l_shoulder", "r_hip", "l_hip")


def simulate_depth_readout(scene: SyntheticScene, noise: NoiseModel, rng: np.random.Generator,
                           joints: JointSet | None = None, torso_pad_px: float = 10.0) -> SyntheticScene:
    """Fill ``scene.logdepth`` with simulated depth-map readouts at detected keypoints.

    A substituted readout comes from the nearest person whose torso box covers
    the keypoint (their root depth) or, failing that, the background plane.
    """
    joints = joints or get_joint_set("default14")
    n_people, n_joints, _ = scene.poses3d.shape
    z = scene.poses3d[..., 2]
    log_true = np.log(z)
    uv = scene.uv if scene.uv is not None else project_array(scene.camera, scene.poses3d)
    visible = scene.visible if scene.visible is not None else np.ones((n_people, n_joints), dtype=bool)

    torso_idx = [joints.index(n) for n in _TORSO if n in joints.names]
    torso_uv = project_array(scene.camera, scene.poses3d[:, torso_idx])
    lo = torso_uv.min(axis=1) - torso_pad_px
    hi = torso_uv.max(axis=1) + torso_pad_px
    root_z = scene.poses3d[:, joints.root_index, 2]

    substitute = rng.random((n_people, n_joints)) < noise.depth_substitution_prob
    readout = log_true.copy()
    for p, j in zip(*np.nonzero(substitute)):
        if not visible[p, j]:
            continue
        depth = noise.background_depth_mm
        best = np.inf
        for q in range(n_people):
            if q == p or root_z[q] >= z[p, j]:
                continue
            if np.all(uv[p, j] >= lo[q]) and np.all(uv[p, j] <= hi[q]) and root_z[q] < best:
                best = root_z[q]
        if np.isfinite(best):
            depth = best
        readout[p, j] = np.log(depth)
    readout = noise.depth_bias_scale * readout + noise.depth_bias_offset
    readout = readout + rng.normal(0.0, 1.0, readout.shape) * noise.depth_log_sigma
    readout[~visible] = np.nan
    scene.logdepth = readout
    return scene


def crop_zoom_camera(cam: CameraIntrinsics, offset: tuple[float, float], zoom: float) -> CameraIntrinsics:
    return CameraIntrinsics(cam.fx * zoom, cam.fy * zoom, (cam.cx - offset[0]) * zoom, (cam.cy - offset[1]) * zoom)


def apply_crop_zoom(scene: SyntheticScene, offset: tuple[float, float], size: tuple[float, float],
                    zoom: float) -> SyntheticScene:
    """Crop the window ``offset .. offset + size`` and rescale it by ``zoom``.

    Intrinsics and pixel detections move together, so normalized coordinates
    and 3D poses are unchanged.
    """
    x0, y0 = offset
    w, h = size
    if not (zoom > 0 and w > 0 and h > 0):
        raise ConfigError("degenerate crop window or zoom")
    if x0 < 0 or y0 < 0 or x0 + w > scene.width or y0 + h > scene.height:
        raise ConfigError("crop window must lie inside the image")
    cam = crop_zoom_camera(scene.camera, offset, zoom)
    uv = None
    if scene.uv is not None:
        uv = (scene.uv - np.array([x0, y0])) * zoom
    return replace(scene, camera=cam, uv=uv, width=int(round(w * zoom)), height=int(round(h * zoom)))


def augment_crop_zoom(scene: SyntheticScene, rng: np.random.Generator,
                      zoom_range: tuple[float, float] = (0.6, 1.4), min_crop: float = 0.6) -> SyntheticScene:
    frac = rng.uniform(min_crop, 1.0)
    w, h = scene.width * frac, scene.height * frac
    offset = (rng.uniform(0, scene.width - w), rng.uniform(0, scene.height - h))
    return apply_crop_zoom(scene, offset, (w, h), rng.uniform(*zoom_range))


def redetect(xyz: np.ndarray, visible: np.ndarray, cam: CameraIntrinsics, sigma_px: float,
             rng: np.random.Generator) -> np.ndarray:
    """Fresh detector output for the given camera, returned in normalized coordinates.

    Used for training-time crop/zoom: the detector runs on the transformed image,
    so its pixel noise lives in the new pixel frame.
    """
    uv = project_array(cam, xyz) + rng.normal(0.0, 1.0, xyz.shape[:-1] + (2,)) * sigma_px
    out = normalize_array(cam, uv)
    out[~visible] = np.nan
    return out


def generate_scene(config: SceneConfig, seed: int) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    skeletons = [sample_skeleton(rng, config) for _ in range(config.people_per_scene)]
    scene = place_people(skeletons, config, rng)
    scene.seed = int(seed)
    render_detections(scene, config.noise, rng, config.joints)
    simulate_depth_readout(scene, config.noise, rng, config.joints)
    return scene


# -- dataset ------------------------------------------------------------------


POSE_COLUMNS = ("scene_id", "person_id", "joint_name", "u_px", "v_px", "confidence", "visible",
                "logdepth_readout", "X_mm", "Y_mm", "Z_mm")
CAMERA_COLUMNS = ("scene_id", "fx", "fy", "cx", "cy", "width", "height")
POSES_FILE = "poses.csv"
CAMERAS_FILE = "cameras.csv"


@dataclass
class PoseDataset:
    """Flat per-person arrays; ``P`` persons, ``J`` joints."""

    joints: JointSet
    scene_id: np.ndarray  # (P,)
    person_id: np.ndarray  # (P,)
    uv: np.ndarray  # (P, J, 2)
    confidence: np.ndarray  # (P, J)
    visible: np.ndarray  # (P, J)
    logdepth: np.ndarray  # (P, J)
    xyz: np.ndarray  # (P, J, 3)
    cameras: dict[int, tuple[CameraIntrinsics, int, int]]

    def __len__(self):
        return len(self.scene_id)

    @property
    def detected(self) -> np.ndarray:
        return self.visible[:, self.joints.root_index]

    def camera_of(self, i: int) -> CameraIntrinsics:
        return self.cameras[int(self.scene_id[i])][0]

    def normalized_uv(self) -> np.ndarray:
        out = np.empty_like(self.uv)
        for sid, (cam, _, _) in self.cameras.items():
            m = self.scene_id == sid
            out[m] = normalize_array(cam, self.uv[m])
        return out

    def focal_per_pose(self) -> np.ndarray:
        return np.array([self.cameras[int(s)][0].f for s in self.scene_id])

    def subset(self, mask) -> PoseDataset:
        mask = np.asarray(mask)
        sids = set(int(s) for s in self.scene_id[mask])
        return PoseDataset(self.joints, self.scene_id[mask], self.person_id[mask], self.uv[mask],
                           self.confidence[mask], self.visible[mask], self.logdepth[mask], self.xyz[mask],
                           {s: c for s, c in self.cameras.items() if s in sids})

    @classmethod
    def from_scenes(cls, scenes: list[SyntheticScene], joints: JointSet) -> PoseDataset:
        sid, pid = [], []
        for k, s in enumerate(scenes):
            n = len(s.poses3d)
            sid.extend([k] * n)
            pid.extend(range(n))
        cat = lambda name: np.concatenate([getattr(s, name) for s in scenes])  # noqa: E731
        return cls(joints, np.array(sid, dtype=int), np.array(pid, dtype=int), cat("uv"), cat("confidence"),
                   cat("visible"), cat("logdepth"), cat("poses3d"),
                   {k: (s.camera, s.width, s.height) for k, s in enumerate(scenes)})


def scene_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_dataset(ds: PoseDataset, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(",".join(POSE_COLUMNS) + "\n")
    names = ds.joints.names
    for i in range(len(ds)):
        s, p = int(ds.scene_id[i]), int(ds.person_id[i])
        for j, name in enumerate(names):
            u, v = ds.uv[i, j]
            x, y, z = ds.xyz[i, j]
            buf.write(f"{s},{p},{name},{_fmt(u)},{_fmt(v)},{_fmt(ds.confidence[i, j])},{int(ds.visible[i, j])},"
                      f"{_fmt(ds.logdepth[i, j])},{_fmt(x)},{_fmt(y)},{_fmt(z)}\n")
    poses_path = out_dir / POSES_FILE
    poses_path.write_text(buf.getvalue(), encoding="utf-8")

    lines = [",".join(CAMERA_COLUMNS)]
    for sid in sorted(ds.cameras):
        cam, w, h = ds.cameras[sid]
        lines.append(f"{sid},{_fmt(cam.fx)},{_fmt(cam.fy)},{_fmt(cam.cx)},{_fmt(cam.cy)},{w},{h}")
    cam_path = out_dir / CAMERAS_FILE
    cam_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return poses_path, cam_path


def read_dataset(path, joints: JointSet | None = None) -> PoseDataset:
    """Read a dataset directory (or the path of its ``poses.csv``)."""
    path = Path(path)
    poses_path = path / POSES_FILE if path.is_dir() else path
    cam_path = poses_path.parent / CAMERAS_FILE
    if not poses_path.exists():
        raise FileNotFoundError(f"dataset file not found: {poses_path}")
    if not cam_path.exists():
        raise FileNotFoundError(f"camera sidecar not found: {cam_path}")

    cameras = {}
    with cam_path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CAMERA_COLUMNS:
            raise ValueError(f"{cam_path}: unexpected header {header}")
        for row in reader:
            cameras[int(row[0])] = (CameraIntrinsics(*map(float, row[1:5])), int(row[5]), int(row[6]))

    with poses_path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != POSE_COLUMNS:
            raise ValueError(f"{poses_path}: unexpected header {header}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{poses_path}: no pose rows")

    names = []
    for row in rows:
        if row[0] != rows[0][0] or row[1] != rows[0][1]:
            break
        names.append(row[2])
    if joints is None:
        for js in (get_joint_set("default14"), get_joint_set("nose15")):
            if tuple(names) == js.names:
                joints = js
                break
        else:
            raise ValueError(f"{poses_path}: joint order {names} matches no known joint set")
    n_j = len(joints)
    if len(rows) % n_j:
        raise ValueError(f"{poses_path}: row count {len(rows)} is not a multiple of {n_j} joints")
    num = np.array([r[3:6] + r[7:11] for r in rows], dtype=float).reshape(-1, n_j, 7)
    ids = np.array([r[:2] for r in rows[::n_j]], dtype=int)
    visible = np.array([r[6] == "1" for r in rows]).reshape(-1, n_j)
    return PoseDataset(joints, ids[:, 0], ids[:, 1], num[..., 0:2], num[..., 2], visible, num[..., 3],
                       num[..., 4:7], cameras)


def generate_dataset(config: SceneConfig, n_scenes: int, seed: int, out_dir=None) -> PoseDataset:
    """Generate ``n_scenes`` scenes deterministically from ``(config, seed)``.

    When ``out_dir`` is given the pose CSV and camera sidecar are written there.
    """
    if n_scenes < 1:
        raise ConfigError("n_scenes must be at least 1")
    seeds = scene_seeds(seed, n_scenes)
    scenes = [generate_scene(config, int(s)) for s in seeds]
    ds = PoseDataset.from_scenes(scenes, config.joints)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def contaminate_targets(xyz: np.ndarray, fraction: float, rng: np.random.Generator,
                        depth_shift_mm: tuple[float, float] = (1000.0, 3000.0), lateral_mm: float = 1000.0,
                        joint_sigma_mm: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a fraction of ground-truth poses to simulate annotation outliers.

    Corrupted poses are pushed away from the camera by a random depth shift,
    moved laterally and get per-joint noise. Returns ``(targets, mask)``.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("contamination fraction must be in [0, 1]")
    out = np.array(xyz, dtype=float, copy=True)
    n = len(out)
    mask = rng.random(n) < fraction
    k = int(mask.sum())
    shift = np.stack([rng.uniform(-lateral_mm, lateral_mm, k), rng.uniform(-lateral_mm, lateral_mm, k),
                      rng.uniform(*depth_shift_mm, k)], axis=1)
    out[mask] += shift[:, None, :] + rng.normal(0.0, joint_sigma_mm, out[mask].shape)
    return out, mask
