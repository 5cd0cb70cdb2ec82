"""AP over friction levels for the top-50 NMS-filtered grasps of a scene."""

from __future__ import annotations

import math

import numpy as np

from ..geometry import GraspPose
from .grasping import check_grasps
from .scene import SceneModel

MU_GRID = (0.2, 0.4, 0.6, 0.8, 1.0)
TOP_K = 50


def ap_mu(grasps: list[GraspPose], scene: SceneModel, mu: float, top_k: int = TOP_K) -> float:
    """Successes at ``mu`` over a fixed denominator of ``top_k``; only the first ``top_k`` grasps count."""
    grasps = grasps[:top_k]
    if not grasps:
        return 0.0
    return int(check_grasps(grasps, scene).success(mu).sum()) / top_k


def ap_per_mu(grasps: list[GraspPose], scene: SceneModel, top_k: int = TOP_K) -> dict[float, float]:
    grasps = grasps[:top_k]
    if not grasps:
        return {mu: 0.0 for mu in MU_GRID}
    chk = check_grasps(grasps, scene)
    return {mu: int(chk.success(mu).sum()) / top_k for mu in MU_GRID}


def ap(grasps: list[GraspPose], scene: SceneModel, top_k: int = TOP_K) -> float:
    return float(np.mean(list(ap_per_mu(grasps, scene, top_k).values())))


def map_over_scenes(results) -> float:
    """Mean of per-scene ap values; 0 for no scenes."""
    vals = [float(r) for r in results]
    return float(np.mean(vals)) if vals else 0.0


def evaluate_scene(grasps: list[GraspPose], scene: SceneModel, trans_thresh: float = 0.03,
                   rot_thresh: float = math.radians(30), top_k: int = TOP_K) -> dict:
    """Sort by score, NMS, keep the top ``top_k``, then score each friction level."""
    from ..rotation import grasp_nms
    ordered = sorted(grasps, key=lambda g: -g.score)
    kept = grasp_nms(ordered, trans_thresh, rot_thresh)[:top_k]
    per_mu = ap_per_mu(kept, scene, top_k)
    return {"ap": float(np.mean(list(per_mu.values()))), "ap_mu": {f"{m:.1f}": v for m, v in per_mu.items()},
            "n_evaluated": len(kept)}
