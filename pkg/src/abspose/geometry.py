"""Pinhole camera model, 2D normalization and weak-perspective translation recovery.

Coordinates are camera-centered millimeters (x right, y down, z away from the
camera). 2D points carry a frame tag so pixel and normalized coordinates are
never mixed silently.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

DEGENERATE_EPS = 1e-12


class GeometryError(ValueError):
    """Raised on invalid geometric input (point behind camera, wrong frame, ...)."""


class DegenerateConfigurationError(GeometryError):
    """The weak-perspective scale cannot be recovered from the given correspondences."""


class Frame(str, Enum):
    PIXEL = "pixel"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not np.all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise GeometryError("camera intrinsics must be finite")

    @property
    def f(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.z])):
            raise GeometryError("Point3 components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclass(frozen=True)
class Point2:
    u: float
    v: float
    frame: Frame = Frame.PIXEL

    def __post_init__(self):
        if not np.all(np.isfinite([self.u, self.v])):
            raise GeometryError("Point2 components must be finite")
        object.__setattr__(self, "frame", Frame(self.frame))

    def as_array(self) -> np.ndarray:
        return np.array([self.u, self.v], dtype=float)


@dataclass(frozen=True)
class TranslationSolution:
    t: Point3
    alpha: float
    residual: float

    @property
    def t_array(self) -> np.ndarray:
        return self.t.as_array()


# -- projection ---------------------------------------------------------------


def project_array(cam: CameraIntrinsics, xyz: np.ndarray) -> np.ndarray:
    """Vectorized pinhole projection of ``(..., 3)`` points to ``(..., 2)`` pixels."""
    xyz = np.asarray(xyz, dtype=float)
    z = xyz[..., 2]
    if np.any(~(z > 0)):
        raise GeometryError("point behind camera (z <= 0)")
    u = cam.fx * xyz[..., 0] / z + cam.cx
    v = cam.fy * xyz[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def project(cam: CameraIntrinsics, p: Point3) -> Point2:
    uv = project_array(cam, p.as_array())
    return Point2(float(uv[0]), float(uv[1]), Frame.PIXEL)


def normalize_array(cam: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    """Apply K^-1 to pixel coordinates of shape ``(..., 2)``."""
    uv = np.asarray(uv, dtype=float)
    return np.stack([(uv[..., 0] - cam.cx) / cam.fx, (uv[..., 1] - cam.cy) / cam.fy], axis=-1)


def denormalize_array(cam: CameraIntrinsics, xy: np.ndarray) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    return np.stack([xy[..., 0] * cam.fx + cam.cx, xy[..., 1] * cam.fy + cam.cy], axis=-1)


def normalize_2d(cam: CameraIntrinsics, p: Point2) -> Point2:
    if p.frame is not Frame.PIXEL:
        raise GeometryError("normalize_2d expects a pixel-frame point")
    x, y = normalize_array(cam, p.as_array())
    return Point2(float(x), float(y), Frame.NORMALIZED)


def denormalize_2d(cam: CameraIntrinsics, p: Point2) -> Point2:
    if p.frame is not Frame.NORMALIZED:
        raise GeometryError("denormalize_2d expects a normalized-frame point")
    u, v = denormalize_array(cam, p.as_array())
    return Point2(float(u), float(v), Frame.PIXEL)


# -- weak-perspective translation ---------------------------------------------


def _as_2d_array(p2d) -> np.ndarray:
    if isinstance(p2d, np.ndarray):
        return np.asarray(p2d, dtype=float).reshape(-1, 2)
    pts = list(p2d)
    if any(isinstance(p, Point2) and p.frame is not Frame.NORMALIZED for p in pts):
        raise GeometryError("translation solver expects normalized 2D points")
    return np.array([p.as_array() if isinstance(p, Point2) else p for p in pts], dtype=float).reshape(-1, 2)


def _as_3d_array(p3d) -> np.ndarray:
    if isinstance(p3d, np.ndarray):
        return np.asarray(p3d, dtype=float).reshape(-1, 3)
    return np.array([p.as_array() if isinstance(p, Point3) else p for p in p3d], dtype=float).reshape(-1, 3)


def _weak_residual(p2d: np.ndarray, p3d_rel: np.ndarray, t: np.ndarray, f: float) -> float:
    proj = f * (p3d_rel[:, :2] + t[:2]) / t[2]
    return float(np.mean(np.sum((p2d - proj) ** 2, axis=1)))


def reprojection_error(p2d, p3d_rel, t, f: float = 1.0) -> float:
    """Mean squared weak-perspective reprojection error.

    All joints are projected with the common depth ``t.z`` (the root depth).
    """
    p2d = _as_2d_array(p2d)
    p3d_rel = _as_3d_array(p3d_rel)
    t = t.as_array() if isinstance(t, Point3) else np.asarray(t, dtype=float)
    if len(p2d) != len(p3d_rel):
        raise GeometryError(f"length mismatch: {len(p2d)} 2D vs {len(p3d_rel)} 3D points")
    if not t[2] > 0:
        raise GeometryError("non-positive common depth in weak-perspective projection")
    return _weak_residual(p2d, p3d_rel, t, f)


def solve_weak_perspective_translation(p2d, p3d_rel, f: float = 1.0) -> TranslationSolution:
    """Closed-form least-squares translation under weak perspective.

    ``p2d`` are normalized image coordinates, ``p3d_rel`` root-relative joints
    in mm. Returns the translation minimizing the weak-perspective reprojection
    error together with the scale ``alpha`` (equal to the recovered depth when
    ``f == 1``).
    """
    p2d = _as_2d_array(p2d)
    p3d_rel = _as_3d_array(p3d_rel)
    if len(p2d) != len(p3d_rel):
        raise GeometryError(f"length mismatch: {len(p2d)} 2D vs {len(p3d_rel)} 3D points")
    if len(p2d) < 2:
        raise GeometryError("at least 2 joints are required to recover translation")

    xy = p3d_rel[:, :2]
    mean_2d = p2d.mean(axis=0)
    mean_xy = xy.mean(axis=0)
    d2 = p2d - mean_2d
    d3 = xy - mean_xy
    num = float(np.sum(d3 * d3))
    den = float(np.sum(d2 * d3))
    if abs(den) < DEGENERATE_EPS or num < DEGENERATE_EPS:
        raise DegenerateConfigurationError(
            f"weak-perspective scale is unrecoverable (numerator={num:.3e}, denominator={den:.3e})"
        )
    alpha = num / den
    t = np.array([alpha * mean_2d[0] - mean_xy[0], alpha * mean_2d[1] - mean_xy[1], alpha * f])
    return TranslationSolution(Point3(*t), alpha, _weak_residual(p2d, p3d_rel, t, f))
