"""Joint sets, pose containers and the root-relative / absolute decomposition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Frame


class RootMissing(ValueError):
    """The root joint was not detected; the whole person counts as undetected."""


@dataclass(frozen=True)
class JointSet:
    names: tuple[str, ...]
    root: str = "pelvis"
    # (parent, child) pairs forming a tree rooted at ``root``
    bones: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if len(self.names) < 2:
            raise ValueError("a joint set needs at least 2 joints")
        if len(set(self.names)) != len(self.names):
            raise ValueError("joint names must be unique")
        if self.names.count(self.root) != 1:
            raise ValueError(f"root joint {self.root!r} must appear exactly once")

    def __len__(self):
        return len(self.names)

    @property
    def root_index(self) -> int:
        return self.names.index(self.root)

    @property
    def non_root(self) -> np.ndarray:
        """Indices of all joints except the root, in joint-set order."""
        return np.array([i for i in range(len(self.names)) if i != self.root_index], dtype=int)

    def index(self, name: str) -> int:
        return self.names.index(name)


_LIMB_BONES = (
    ("pelvis", "neck"),
    ("neck", "r_shoulder"), ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("neck", "l_shoulder"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("pelvis", "r_hip"), ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
    ("pelvis", "l_hip"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
)  # fmt: skip

# 14 joints: the named keypoint set without the nose.
DEFAULT_JOINTS = JointSet(
    names=(
        "pelvis", "neck",
        "r_shoulder", "r_elbow", "r_wrist",
        "l_shoulder", "l_elbow", "l_wrist",
        "r_hip", "r_knee", "r_ankle",
        "l_hip", "l_knee", "l_ankle",
    ),
    root="pelvis",
    bones=_LIMB_BONES,
)  # fmt: skip

NOSE_JOINTS = JointSet(
    names=DEFAULT_JOINTS.names + ("nose",),
    root="pelvis",
    bones=_LIMB_BONES + (("neck", "nose"),),
)

JOINT_SETS = {"default14": DEFAULT_JOINTS, "nose15": NOSE_JOINTS}


def get_joint_set(name: str) -> JointSet:
    try:
        return JOINT_SETS[name]
    except KeyError:
        raise ValueError(f"unknown joint set {name!r}; choose from {sorted(JOINT_SETS)}") from None


@dataclass
class Pose2D:
    """Per-joint 2D detections. Invisible joints have NaN coordinates and confidence."""

    xy: np.ndarray
    confidence: np.ndarray
    visible: np.ndarray
    frame: Frame = Frame.PIXEL

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(-1)
        self.frame = Frame(self.frame)
        if not (len(self.xy) == len(self.visible) == len(self.confidence)):
            raise ValueError("xy, confidence and visible must have one entry per joint")
        if np.any(np.isnan(self.confidence[self.visible])) or np.any(~np.isnan(self.confidence[~self.visible])):
            raise ValueError("confidence must be present exactly for visible joints")
        if not np.all(np.isfinite(self.xy[self.visible])):
            raise ValueError("visible joints must have finite coordinates")

    def __len__(self):
        return len(self.xy)


@dataclass
class Pose3D:
    xyz: np.ndarray
    detected: bool = True
    # set by the two-step baseline when translation recovery failed
    unbounded_translation: bool = False

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)

    def __len__(self):
        return len(self.xyz)


@dataclass
class RootSplitPose:
    root: np.ndarray
    relative: np.ndarray  # (J-1, D); root row omitted
    root_index: int
    frame: Frame | None = field(default=None)


def _coords(p) -> tuple[np.ndarray, np.ndarray, Frame | None]:
    if isinstance(p, Pose2D):
        return p.xy, p.visible, p.frame
    if isinstance(p, Pose3D):
        present = np.all(np.isfinite(p.xyz), axis=1) if p.detected else np.zeros(len(p.xyz), dtype=bool)
        return p.xyz, present, None
    arr = np.asarray(p, dtype=float)
    return arr, np.all(np.isfinite(arr), axis=1), None


def split_root_relative(p, joints: JointSet = DEFAULT_JOINTS) -> RootSplitPose:
    """Split a pose into root coordinates and root-relative offsets of the other joints."""
    coords, present, frame = _coords(p)
    if len(coords) != len(joints):
        raise ValueError(f"pose has {len(coords)} joints, joint set has {len(joints)}")
    r = joints.root_index
    if not present[r]:
        raise RootMissing("root joint not detected")
    root = coords[r].copy()
    relative = coords[joints.non_root] - root
    return RootSplitPose(root=root, relative=relative, root_index=r, frame=frame)


def assemble_absolute(s: RootSplitPose) -> Pose3D:
    n = len(s.relative) + 1
    out = np.empty((n, s.root.shape[0]))
    mask = np.ones(n, dtype=bool)
    mask[s.root_index] = False
    out[mask] = s.relative + s.root
    out[s.root_index] = s.root
    return Pose3D(out)


def filter_detected(poses: list[Pose2D], joints: JointSet = DEFAULT_JOINTS) -> tuple[list[Pose2D], int]:
    r = joints.root_index
    kept = [p for p in poses if p.visible[r]]
    return kept, len(poses) - len(kept)
