"""Synthetic tabletop scenes and their ray-cast RGB-D frames.

The camera sits at the origin looking down +z at a table plane ``z = table_z``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import CameraIntrinsics, ImageFrame, rot_z
from .primitives import ScenePrimitive

TABLE_Z = 0.6
PLACE_EXTENT = 0.12  # object centers fall in [-0.12, 0.12]^2 (m)
PLACE_GAP = 0.015  # minimum free space between footprints (m)
MAX_REJECTIONS = 1000

# Size ranges keep every isolated object able to offer at least 50 grasps that
# are distinct under 3 cm / 30 deg NMS, so perfect labels can fill a top-50.
SPHERE_R = (0.029, 0.037)
BOX_HALF_XY = (0.031, 0.041)
BOX_HALF_Z = (0.028, 0.034)
CYL_R = (0.015, 0.035)
CYL_HALF_H = (0.025, 0.05)

TABLE_RGB = (0.55, 0.55, 0.52)
PALETTE = ((0.85, 0.25, 0.2), (0.2, 0.6, 0.85), (0.95, 0.75, 0.2), (0.35, 0.75, 0.35), (0.7, 0.35, 0.8),
           (0.95, 0.5, 0.15), (0.2, 0.8, 0.75), (0.85, 0.45, 0.6), (0.5, 0.4, 0.25), (0.3, 0.3, 0.75))


class PlacementWarning(UserWarning):
    pass


@dataclass
class SceneModel:
    primitives: list[ScenePrimitive]
    table_z: float = TABLE_Z
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "table_z": self.table_z, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneModel":
        return cls([ScenePrimitive.from_dict(p) for p in d["primitives"]], float(d["table_z"]), d.get("seed"))

    def save(self, path, intrinsics: CameraIntrinsics | None = None) -> None:
        d = self.to_dict()
        if intrinsics is not None:
            d["intrinsics"] = intrinsics.to_dict()
        Path(path).write_text(json.dumps(d, indent=1))

    @classmethod
    def load(cls, path) -> "SceneModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _random_primitive(rng: np.random.Generator, table_z: float) -> ScenePrimitive:
    kind = ("sphere", "box", "cylinder")[int(rng.integers(3))]
    yaw = rng.uniform(-math.pi, math.pi)
    if kind == "sphere":
        size, rot = (rng.uniform(*SPHERE_R),), np.eye(3)
    elif kind == "box":
        size = (rng.uniform(*BOX_HALF_XY), rng.uniform(*BOX_HALF_XY), rng.uniform(*BOX_HALF_Z))
        rot = rot_z(yaw)
    else:
        size = (rng.uniform(*CYL_R), rng.uniform(*CYL_HALF_H))
        rot = rot_z(yaw)  # upright
    xy = rng.uniform(-PLACE_EXTENT, PLACE_EXTENT, 2)
    prim = ScenePrimitive(kind, size, rot, np.zeros(3))
    return ScenePrimitive(kind, size, rot, np.array([xy[0], xy[1], table_z - prim.lowest_z_extent()]))


def _clear(a: ScenePrimitive, b: ScenePrimitive, gap: float) -> bool:
    d = math.hypot(*(a.translation[:2] - b.translation[:2]))
    return d >= a.support_radius() + b.support_radius() + gap


def gen_scene(seed, n_objects: int, table_z: float = TABLE_Z) -> SceneModel:
    """Random non-overlapping primitives resting on the table.

    ``seed`` is an int or a ``numpy.random.Generator``. An object that cannot
    be placed after 1000 tries is dropped with a ``PlacementWarning``.
    """
    if not 1 <= n_objects <= 10:
        raise ValueError(f"n_objects must be in [1, 10], got {n_objects}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    prims: list[ScenePrimitive] = []
    for i in range(n_objects):
        for _ in range(MAX_REJECTIONS):
            cand = _random_primitive(rng, table_z)
            if all(_clear(cand, p, PLACE_GAP) for p in prims):
                prims.append(cand)
                break
        else:
            warnings.warn(f"placed only {len(prims)} of {n_objects} objects", PlacementWarning, stacklevel=2)
            break
    return SceneModel(prims, table_z, seed if isinstance(seed, (int, np.integer)) else None)


def validate_scene(scene: SceneModel, gap: float = 0.0) -> list[str]:
    """Problems found by the resting and center-distance checks (empty when valid)."""
    problems = []
    for i, p in enumerate(scene.primitives):
        bottom = p.translation[2] + p.lowest_z_extent()
        if bottom > scene.table_z + 1e-9:
            problems.append(f"object {i} penetrates the table by {bottom - scene.table_z:.4f} m")
    for i in range(len(scene.primitives)):
        for j in range(i + 1, len(scene.primitives)):
            if not _clear(scene.primitives[i], scene.primitives[j], gap):
                problems.append(f"objects {i} and {j} overlap")
    return problems


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) ray directions with unit z, so the ray parameter equals depth."""
    v, u = np.meshgrid(np.arange(intr.height, dtype=np.float64), np.arange(intr.width, dtype=np.float64),
                       indexing="ij")
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def raycast(scene: SceneModel, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel hit depth (m) and object id (-1 table)."""
    dirs = pixel_rays(intr).reshape(-1, 3)
    origin = np.zeros_like(dirs)
    depth = np.full(len(dirs), scene.table_z)
    ids = np.full(len(dirs), -1, dtype=np.int64)
    for i, p in enumerate(scene.primitives):
        t0, t1 = p.intersect(origin, dirs)
        t = np.where(t0 > 0, t0, t1)
        hit = (t0 <= t1) & (t > 0) & (t < depth)
        depth[hit] = t[hit]
        ids[hit] = i
    return depth.reshape(intr.height, intr.width), ids.reshape(intr.height, intr.width)


def render_depth(scene: SceneModel, intr: CameraIntrinsics) -> np.ndarray:
    """Depth image (1, H, W) in millimeters; 0 marks pixels with no hit."""
    depth, _ = raycast(scene, intr)
    return (depth * 1000.0).astype(np.float32)[None]


def render_rgb(scene: SceneModel, intr: CameraIntrinsics, ids: np.ndarray | None = None) -> np.ndarray:
    """Flat per-object colors, (3, H, W) in [0, 1]."""
    if ids is None:
        _, ids = raycast(scene, intr)
    colors = np.array((TABLE_RGB,) + PALETTE, dtype=np.float32)
    return colors[(ids + 1) % len(colors)].transpose(2, 0, 1).copy()


def render_frame(scene: SceneModel, intr: CameraIntrinsics, quantize_mm: bool = True) -> ImageFrame:
    """RGB-D frame of a scene; depth is rounded to whole millimeters by default (as stored on disk)."""
    depth, ids = raycast(scene, intr)
    depth_mm = depth * 1000.0
    if quantize_mm:
        depth_mm = np.round(depth_mm)
    return ImageFrame(render_rgb(scene, intr, ids), depth_mm.astype(np.float32)[None], intr)
