"""Camera model, positional mesh grid, Euler conventions and the grasp pose type.

Rotation convention: ``R = Rx(gamma) @ Ry(beta) @ Rz(theta)``. The grasp frame
columns are ``[closing axis, binormal, approach]``, so ``R @ e_z`` (the
approach) depends only on ``(gamma, beta)`` and ``theta`` spins the jaws about
the approach axis.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

W_MAX = 0.085  # Robotiq 2F-85 stroke, meters
HALF_PI = math.pi / 2
_ANGLE_TOL = 1e-9


class InvalidDepthError(ValueError):
    pass


class GimbalLockWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive: fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))

    @classmethod
    def from_json(cls, path) -> "CameraIntrinsics":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_intrinsics(width: int = 96, height: int = 96, focal: float | None = None) -> CameraIntrinsics:
    """Pinhole camera used by the synthetic scenes (~37 cm field at 0.6 m)."""
    f = focal if focal is not None else 160.0 * width / 96.0
    return CameraIntrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class ImageFrame:
    rgb: np.ndarray    # (3, H, W) in [0, 1]
    depth: np.ndarray  # (1, H, W) millimeters, 0 = invalid
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.rgb.shape != (3, h, w) or self.depth.shape != (1, h, w):
            raise ValueError(f"frame shapes rgb={self.rgb.shape} depth={self.depth.shape} "
                             f"do not match intrinsics {w}x{h}")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def euler_to_matrix(theta: float, gamma: float, beta: float) -> np.ndarray:
    return rot_x(gamma) @ rot_y(beta) @ rot_z(theta)


def euler_to_matrix_batch(theta, gamma, beta) -> np.ndarray:
    """Vectorised ``euler_to_matrix`` returning (n, 3, 3)."""
    theta, gamma, beta = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (theta, gamma, beta))
    ct, st = np.cos(theta), np.sin(theta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    cb, sb = np.cos(beta), np.sin(beta)
    r = np.empty((theta.size, 3, 3))
    r[:, 0, 0] = cb * ct
    r[:, 0, 1] = -cb * st
    r[:, 0, 2] = sb
    r[:, 1, 0] = sg * sb * ct + cg * st
    r[:, 1, 1] = -sg * sb * st + cg * ct
    r[:, 1, 2] = -sg * cb
    r[:, 2, 0] = -cg * sb * ct + sg * st
    r[:, 2, 1] = cg * sb * st + sg * ct
    r[:, 2, 2] = cg * cb
    return r


def is_gimbal_degenerate(rot: np.ndarray, tol: float = 1e-6) -> bool:
    return abs(abs(rot[0, 2]) - 1.0) < tol


def matrix_to_euler(rot: np.ndarray) -> tuple[float, float, float]:
    """Invert ``euler_to_matrix``; returns ``(theta, gamma, beta)``.

    When beta is within 1e-6 of +-pi/2 the decomposition is not unique: a
    ``GimbalLockWarning`` is emitted and theta is pinned to 0.
    """
    rot = np.asarray(rot, dtype=np.float64)
    beta = math.asin(max(-1.0, min(1.0, rot[0, 2])))
    if is_gimbal_degenerate(rot):
        warnings.warn("gimbal-degenerate rotation; theta set to 0", GimbalLockWarning, stacklevel=2)
        return 0.0, math.atan2(rot[2, 1], rot[1, 1]), beta
    gamma = math.atan2(-rot[1, 2], rot[2, 2])
    theta = math.atan2(-rot[0, 1], rot[0, 0])
    return theta, gamma, beta


def wrap_half_pi(a):
    """Wrap an angle (or array) to [-pi/2, pi/2) with period pi."""
    return (np.asarray(a) + HALF_PI) % math.pi - HALF_PI


def grasp_frame(approach, closing) -> np.ndarray:
    """Rotation with columns [closing, approach x closing, approach]."""
    a = np.asarray(approach, dtype=np.float64)
    a = a / np.linalg.norm(a)
    c = np.asarray(closing, dtype=np.float64)
    c = c - a * (c @ a)
    c = c / np.linalg.norm(c)
    return np.stack([c, np.cross(a, c), a], axis=1)


def canonical_euler(approach, closing) -> tuple[float, float, float]:
    """Euler angles of a parallel-jaw grasp with both angles in range.

    The jaw-swap symmetry (closing -> -closing) is used to bring theta into
    [-pi/2, pi/2]. Requires the approach to point away from the camera.
    """
    a = np.asarray(approach, dtype=np.float64)
    if a[2] <= 0:
        raise ValueError(f"approach {a} does not point into the scene (+z)")
    c = np.asarray(closing, dtype=np.float64)
    rot = grasp_frame(a, c)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GimbalLockWarning)
        theta, gamma, beta = matrix_to_euler(rot)
    if abs(theta) > HALF_PI:
        theta = float(wrap_half_pi(theta))
    return theta, gamma, beta


@dataclass
class GraspPose:
    x: float
    y: float
    z: float
    theta: float
    gamma: float
    beta: float
    w: float
    score: float = 1.0

    def __post_init__(self):
        for name in ("theta", "gamma", "beta"):
            if abs(getattr(self, name)) > HALF_PI + _ANGLE_TOL:
                raise ValueError(f"{name}={getattr(self, name)} outside [-pi/2, pi/2]")
        if not (-_ANGLE_TOL <= self.w <= W_MAX + _ANGLE_TOL):
            raise ValueError(f"width {self.w} outside [0, {W_MAX}]")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def rotation(self) -> np.ndarray:
        return euler_to_matrix(self.theta, self.gamma, self.beta)

    @property
    def approach(self) -> np.ndarray:
        return self.rotation()[:, 2]

    @property
    def closing(self) -> np.ndarray:
        return self.rotation()[:, 0]

    def to_dict(self) -> dict:
        return {"x": float(self.x), "y": float(self.y), "z": float(self.z), "theta": float(self.theta),
                "gamma": float(self.gamma), "beta": float(self.beta), "width": float(self.w),
                "score": float(self.score)}

    @classmethod
    def from_dict(cls, d: dict) -> "GraspPose":
        return cls(d["x"], d["y"], d["z"], d["theta"], d["gamma"], d["beta"],
                   d.get("width", d.get("w")), d.get("score", 1.0))

    @classmethod
    def from_frame(cls, center, approach, closing, width, score=1.0) -> "GraspPose":
        theta, gamma, beta = canonical_euler(approach, closing)
        return cls(float(center[0]), float(center[1]), float(center[2]), theta, gamma, beta,
                   float(min(max(width, 0.0), W_MAX)), score)


def canonical_euler_batch(approach, closing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``canonical_euler`` for (n, 3) approach and closing arrays."""
    a = np.asarray(approach, dtype=np.float64).reshape(-1, 3)
    a = a / np.linalg.norm(a, axis=1, keepdims=True)
    if np.any(a[:, 2] <= 0):
        raise ValueError("every approach must point into the scene (+z)")
    c = np.asarray(closing, dtype=np.float64).reshape(-1, 3)
    c = c - a * (c * a).sum(1, keepdims=True)
    c = c / np.linalg.norm(c, axis=1, keepdims=True)
    b = np.cross(a, c)
    beta = np.arcsin(np.clip(a[:, 0], -1.0, 1.0))
    gamma = np.arctan2(-a[:, 1], a[:, 2])
    theta = np.arctan2(-b[:, 0], c[:, 0])
    theta = np.where(np.abs(theta) > HALF_PI, wrap_half_pi(theta), theta)
    return theta, gamma, beta


# -- camera model ----------------------------------------------------------

def positional_meshgrid(intr: CameraIntrinsics, dtype=np.float32) -> np.ndarray:
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    gx = (u - intr.cx) / (1000.0 * intr.fx)
    gy = (v - intr.cy) / (1000.0 * intr.fy)
    out = np.empty((2, intr.height, intr.width), dtype=dtype)
    out[0] = gx[None, :]
    out[1] = gy[:, None]
    return out


def make_network_input(frame: ImageFrame) -> np.ndarray:
    """6-channel tensor [R, G, B, depth in meters, mesh x, mesh y]."""
    intr = frame.intrinsics
    out = np.empty((6, intr.height, intr.width), dtype=np.float32)
    out[:3] = frame.rgb
    depth = frame.depth[0].astype(np.float32)
    out[3] = np.where(depth > 0, depth / 1000.0, 0.0)
    out[4:] = positional_meshgrid(intr)
    return out


def pixel_to_point(u: float, v: float, depth_mm: float, intr: CameraIntrinsics) -> tuple[float, float, float]:
    if not depth_mm > 0:
        raise InvalidDepthError(f"invalid depth {depth_mm} mm at pixel ({u}, {v})")
    z = depth_mm / 1000.0
    return (u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z


def project_point(x: float, y: float, z: float, intr: CameraIntrinsics) -> tuple[float, float]:
    if not z > 0:
        raise InvalidDepthError(f"point at z={z} is not in front of the camera")
    return intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorised projection of (n, 3) camera-frame points to (n, 2) pixels."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    return np.stack([intr.fx * pts[:, 0] / z + intr.cx, intr.fy * pts[:, 1] / z + intr.cy], axis=1)


def rotation_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, radians."""
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return math.acos(max(-1.0, min(1.0, c)))


# -- heatmap grid <-> image pixels -------------------------------------------

def cell_to_pixel(c, stride: int = 4):
    """Image-pixel coordinate of a heatmap cell center (align-corners-false)."""
    return np.asarray(c, dtype=np.float64) * stride + (stride - 1) / 2.0


def pixel_to_cell(p, stride: int = 4):
    return (np.asarray(p, dtype=np.float64) - (stride - 1) / 2.0) / stride
