"""Regional rotation heatmaps: anchors, the two-FC head, GT targets, decoding and NMS."""

from __future__ import annotations

import json
import math
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .geometry import (W_MAX, GraspPose, ImageFrame, InvalidDepthError, cell_to_pixel,
                       euler_to_matrix_batch, pixel_to_cell, project_point)
from .region import RegionBatch, RegionCenter, lookup_depth_m, lookup_depth_m_batch

HIDDEN = 256
OUT_CHANNELS = 6  # score + theta, width, offset_u, offset_v, offset_d
OFFSET_D_MAX = 0.02
REFINE_SCALE = np.array([math.pi / 2, W_MAX / 2, 1.0, 1.0, OFFSET_D_MAX])


@dataclass(frozen=True)
class AnchorGrid:
    gamma: np.ndarray
    beta: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.gamma), len(self.beta)


def bin_centers(a: int) -> np.ndarray:
    centers = np.array([-math.pi / 2 + (i + 0.5) * math.pi / a for i in range(a)])
    # enforce exact mirror symmetry against rounding
    half = a // 2
    centers[a - half:] = -centers[:half][::-1]
    if a % 2:
        centers[half] = 0.0
    return centers


def build_anchor_grid(a_gamma: int = 6, a_beta: int = 6) -> AnchorGrid:
    if a_gamma < 2 or a_beta < 2:
        raise ValueError("need at least 2 anchors per axis")
    return AnchorGrid(bin_centers(a_gamma), bin_centers(a_beta))


def angle_to_bin(angle: float, a: int) -> int:
    """Bin index over [-pi/2, pi/2]; an angle on a bin boundary goes to the lower bin."""
    x = (angle + math.pi / 2) / (math.pi / a)
    return int(min(max(math.ceil(x - 1e-9) - 1, 0), a - 1))


@dataclass
class RotationHeatmap:
    scores: np.ndarray  # (k, Ag, Ab) in [0, 1]


@dataclass
class Refinement:
    theta: np.ndarray
    width: np.ndarray
    offset_u: np.ndarray
    offset_v: np.ndarray
    offset_d: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.theta, self.width, self.offset_u, self.offset_v, self.offset_d], axis=-1)


@dataclass
class HeadOutput:
    heatmap: RotationHeatmap
    refinement: Refinement
    raw: np.ndarray  # (k, Ag, Ab, 6) bounded outputs
    cache: object = field(default=None, repr=False)


def init_params(in_dim: int, anchors: AnchorGrid, rng: np.random.Generator, two_fc: bool = True,
                hidden: int = HIDDEN) -> dict[str, np.ndarray]:
    out_dim = anchors.shape[0] * anchors.shape[1] * OUT_CHANNELS
    p = {}
    if two_fc:
        p["rot.fc1.weight"] = (rng.standard_normal((hidden, in_dim)) * math.sqrt(2.0 / in_dim)).astype(np.float32)
        p["rot.fc1.bias"] = np.zeros(hidden, np.float32)
        p["rot.fc2.weight"] = (rng.standard_normal((out_dim, hidden)) * math.sqrt(1.0 / hidden)).astype(np.float32)
        p["rot.fc2.bias"] = np.zeros(out_dim, np.float32)
    else:
        p["rot.fc.weight"] = (rng.standard_normal((out_dim, in_dim)) * math.sqrt(1.0 / in_dim)).astype(np.float32)
        p["rot.fc.bias"] = np.zeros(out_dim, np.float32)
    return p


def rotation_head_forward(features, params: dict, anchors: AnchorGrid) -> HeadOutput:
    """flatten -> linear(256) -> ReLU -> linear(Ag*Ab*6), then bounded activations.

    ``features`` is a RegionBatch or its (k, Cf, g, g) array. Falls back to a
    single linear layer when only ``rot.fc.*`` weights exist.
    """
    if isinstance(features, RegionBatch):
        features = features.features
    k = features.shape[0]
    ag, ab = anchors.shape
    x = features.reshape(k, -1)
    if "rot.fc1.weight" in params:
        h, c1 = tc.linear_forward(x, params["rot.fc1.weight"], params["rot.fc1.bias"])
        h, mask = tc.relu_forward(h)
        logits, c2 = tc.linear_forward(h, params["rot.fc2.weight"], params["rot.fc2.bias"])
        trunk = ("two", c1, mask, c2)
    else:
        logits, c = tc.linear_forward(x, params["rot.fc.weight"], params["rot.fc.bias"])
        trunk = ("one", c)
    logits = logits.reshape(k, ag, ab, OUT_CHANNELS)
    score = tc.sigmoid(logits[..., 0])
    t = np.tanh(logits[..., 1:])
    raw = np.empty_like(logits)
    raw[..., 0] = score
    raw[..., 1:] = t
    phys = t * REFINE_SCALE.astype(t.dtype)
    phys[..., 1] += W_MAX / 2
    ref = Refinement(phys[..., 0], phys[..., 1], phys[..., 2], phys[..., 3], phys[..., 4])
    return HeadOutput(RotationHeatmap(score), ref, raw, (trunk, features.shape))


def rotation_head_backward(dscores: np.ndarray, dref_norm: np.ndarray, out: HeadOutput):
    """Backward from d(score) (k,Ag,Ab) and d(tanh outputs) (k,Ag,Ab,5).

    ``dref_norm`` is the gradient w.r.t. the unit-range refinement outputs
    (the tanh values), not the physical ones.
    """
    trunk, fshape = out.cache
    k = fshape[0]
    dlogits = np.empty_like(out.raw)
    s = out.raw[..., 0]
    dlogits[..., 0] = dscores * s * (1 - s)
    t = out.raw[..., 1:]
    dlogits[..., 1:] = dref_norm * (1 - t * t)
    dlogits = dlogits.reshape(k, -1)
    grads = {}
    if trunk[0] == "two":
        _, c1, mask, c2 = trunk
        g2 = tc.linear_backward(dlogits, c2)
        grads["rot.fc2.weight"], grads["rot.fc2.bias"] = g2.params["weight"], g2.params["bias"]
        g1 = tc.linear_backward(tc.relu_backward(g2.input, mask).input, c1)
        grads["rot.fc1.weight"], grads["rot.fc1.bias"] = g1.params["weight"], g1.params["bias"]
        dx = g1.input
    else:
        g = tc.linear_backward(dlogits, trunk[1])
        grads["rot.fc.weight"], grads["rot.fc.bias"] = g.params["weight"], g.params["bias"]
        dx = g.input
    return grads, dx.reshape(fshape)


def normalize_refinement(phys: np.ndarray) -> np.ndarray:
    """Physical (theta, width, du, dv, dd) -> unit range matching the tanh outputs."""
    out = np.array(phys, dtype=np.float64, copy=True)
    out[..., 1] -= W_MAX / 2
    return out / REFINE_SCALE


# -- ground truth ----------------------------------------------------------

@dataclass
class RotationTarget:
    scores: np.ndarray   # (k, Ag, Ab) in {0, 1}
    refine: np.ndarray   # (k, Ag, Ab, 5) physical units; valid where scores == 1
    assigned: np.ndarray  # (n_labels,) region index or -1


def shifted_center(center: RegionCenter, du: float, dv: float, depth_mm: np.ndarray, stride: int = 4):
    """Pixel position and surface depth (m) of a region center moved by (du, dv) cells.

    Falls back to the unshifted center depth when the shifted pixel has no
    valid depth; the third return value flags that fallback.
    """
    px = float(cell_to_pixel(center.u + du, stride))
    py = float(cell_to_pixel(center.v + dv, stride))
    d = lookup_depth_m(depth_mm, px, py)
    if d > 0:
        return px, py, d, False
    return px, py, center.depth_m, True


def anchor_theta(label: GraspPose, gamma: float, beta: float) -> float:
    """Theta that best keeps ``label``'s closing axis once its approach snaps to an anchor.

    The label's closing axis is expressed in the anchor frame Rx(gamma) Ry(beta)
    and its in-plane angle taken; jaw-swap symmetry folds it into [-pi/2, pi/2].
    """
    closing = euler_to_matrix_batch(label.theta, label.gamma, label.beta)[0, :, 0]
    base = euler_to_matrix_batch(0.0, gamma, beta)[0]
    local = base.T @ closing
    theta = math.atan2(local[1], local[0])
    if theta > math.pi / 2:
        theta -= math.pi
    elif theta < -math.pi / 2:
        theta += math.pi
    return theta


def snap_to_anchor(label: GraspPose, anchors: AnchorGrid, clearance: float = 0.0) -> GraspPose:
    """The pose the decoder would emit for ``label``: approach on the anchor, theta from
    ``anchor_theta`` and the width opened by ``clearance``."""
    i, j = angle_to_bin(label.gamma, len(anchors.gamma)), angle_to_bin(label.beta, len(anchors.beta))
    g, b = float(anchors.gamma[i]), float(anchors.beta[j])
    return GraspPose(label.x, label.y, label.z, anchor_theta(label, g, b), g, b,
                     min(label.w + clearance, W_MAX), label.score)


def make_gt_rotation(labels: list[GraspPose], batch_centers: list[RegionCenter], sizes: list[float],
                     anchors: AnchorGrid, frame: ImageFrame, assign_radius: float | None = None,
                     stride: int = 4, strict: bool = False) -> RotationTarget:
    """Per-region rotation-heatmap targets.

    Each label goes to the region whose center is nearest to the label's
    projected heatmap cell, provided it lies within ``assign_radius`` cells
    (default: half that region's size). Inside the region the cell holding
    the label's (gamma, beta) becomes positive and carries width, the residual
    offsets and the theta that keeps the label's closing axis under that
    anchor's approach; competing labels in one cell resolve to the one
    closest to the anchor center.

    With ``strict`` a label only becomes a positive when the bounded offsets
    can reach it exactly (within one cell in-plane and ``OFFSET_D_MAX`` in
    depth) instead of being clipped to the nearest reachable pose.
    """
    k = len(batch_centers)
    ag, ab = anchors.shape
    scores = np.zeros((k, ag, ab), np.float32)
    refine = np.zeros((k, ag, ab, 5), np.float32)
    best_dist = np.full((k, ag, ab), np.inf)
    assigned = np.full(len(labels), -1, dtype=np.int64)
    if k == 0 or not labels:
        return RotationTarget(scores, refine, assigned)
    intr = frame.intrinsics
    depth = frame.depth[0]
    cu = np.array([c.u for c in batch_centers])
    cv = np.array([c.v for c in batch_centers])
    radius = np.array([assign_radius if assign_radius is not None else s / 2 for s in sizes])
    for li, lab in enumerate(labels):
        if lab.z <= 0:
            continue
        px, py = project_point(lab.x, lab.y, lab.z, intr)
        lu, lv = float(pixel_to_cell(px, stride)), float(pixel_to_cell(py, stride))
        dist = np.hypot(cu - lu, cv - lv)
        r = int(np.argmin(dist))
        if dist[r] > radius[r]:
            continue
        assigned[li] = r
        i, j = angle_to_bin(lab.gamma, ag), angle_to_bin(lab.beta, ab)
        adist = math.hypot(lab.gamma - anchors.gamma[i], lab.beta - anchors.beta[j])
        if adist >= best_dist[r, i, j]:
            continue
        c = batch_centers[r]
        du = float(np.clip(lu - c.u, -1, 1))
        dv = float(np.clip(lv - c.v, -1, 1))
        _, _, d, _ = shifted_center(c, du, dv, depth, stride)
        dd = float(np.clip(lab.z - d, -OFFSET_D_MAX, OFFSET_D_MAX))
        if strict and (du != lu - c.u or dv != lv - c.v or dd != lab.z - d):
            continue
        best_dist[r, i, j] = adist
        scores[r, i, j] = 1.0
        refine[r, i, j] = (anchor_theta(lab, anchors.gamma[i], anchors.beta[j]), lab.w, du, dv, dd)
    return RotationTarget(scores, refine, assigned)


# -- decoding --------------------------------------------------------------

def decode_grasps(heatmap: RotationHeatmap, refinement: Refinement, batch: RegionBatch, frame: ImageFrame,
                  anchors: AnchorGrid, score_thresh: float = 0.1, diagnostics: dict | None = None,
                  stride: int = 4) -> list[GraspPose]:
    """Turn rotation-heatmap cells at or above ``score_thresh`` into scene grasps.

    Grasp score is cell score x region graspability; the list is sorted by
    score, highest first (stable for equal scores).
    """
    if not 0 <= score_thresh <= 1:
        raise ValueError("score_thresh must be in [0, 1]")
    intr = frame.intrinsics
    depth = frame.depth[0]
    r, i, j = np.nonzero(heatmap.scores >= score_thresh)
    cu = np.array([c.u for c in batch.centers], dtype=np.float64)[r]
    cv = np.array([c.v for c in batch.centers], dtype=np.float64)[r]
    cd = np.array([c.depth_m for c in batch.centers], dtype=np.float64)[r]
    du = refinement.offset_u[r, i, j].astype(np.float64)
    dv = refinement.offset_v[r, i, j].astype(np.float64)
    px = cell_to_pixel(cu + du, stride)
    py = cell_to_pixel(cv + dv, stride)
    # unshifted cells keep the region's own depth; shifted ones re-read the surface
    moved = (du != 0.0) | (dv != 0.0)
    d = np.where(moved, lookup_depth_m_batch(depth, px, py), cd)
    fell_back = moved & ~(d > 0)
    d = np.where(fell_back, cd, d)
    z = (d + refinement.offset_d[r, i, j].astype(np.float64))
    if np.any(~(z > 0)):
        raise InvalidDepthError("decoded grasp behind the camera")
    x = (px - intr.cx) * z / intr.fx
    y = (py - intr.cy) * z / intr.fy
    theta = np.clip(refinement.theta[r, i, j].astype(np.float64), -math.pi / 2, math.pi / 2)
    width = np.clip(refinement.width[r, i, j].astype(np.float64), 0, W_MAX)
    graspability = np.array([c.graspability for c in batch.centers], dtype=np.float64)[r]
    score = np.clip(heatmap.scores[r, i, j].astype(np.float64) * graspability, 0.0, 1.0)
    if diagnostics is not None:
        diagnostics["depth_fallbacks"] = diagnostics.get("depth_fallbacks", 0) + int(fell_back.sum())
    order = np.argsort(-score, kind="stable")
    gamma, beta = anchors.gamma[i], anchors.beta[j]
    return [GraspPose(float(x[n]), float(y[n]), float(z[n]), float(theta[n]), float(gamma[n]), float(beta[n]),
                      float(width[n]), float(score[n])) for n in order]


# -- NMS -------------------------------------------------------------------

def grasp_arrays(grasps: list[GraspPose]) -> tuple[np.ndarray, np.ndarray]:
    t = np.array([[g.x, g.y, g.z] for g in grasps], dtype=np.float64).reshape(-1, 3)
    r = euler_to_matrix_batch([g.theta for g in grasps], [g.gamma for g in grasps], [g.beta for g in grasps])
    return t, r


def grasp_nms(grasps: list[GraspPose], trans_thresh: float = 0.03,
              rot_thresh: float = math.radians(30)) -> list[GraspPose]:
    """Greedy NMS over a score-sorted list.

    A grasp is dropped when an earlier kept grasp is closer than
    ``trans_thresh`` (meters) and ``rot_thresh`` (geodesic radians).
    """
    n = len(grasps)
    if n == 0:
        return []
    t, r = grasp_arrays(grasps)
    diff = t[:, None, :] - t[None, :, :]
    near_t = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)) < trans_thresh
    # geodesic angle < thresh  <=>  (trace(Ri^T Rj) - 1) / 2 > cos(thresh)
    flat = r.reshape(n, 9)
    cos_ang = (flat @ flat.T - 1.0) / 2.0
    suppress = near_t & (cos_ang > math.cos(rot_thresh))
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(i)
        alive[i + 1:] &= ~suppress[i, i + 1:]
    return [grasps[i] for i in keep]


def grasps_to_json(grasps: list[GraspPose], indent: int | None = 1) -> str:
    if indent is None:
        return json.dumps([g.to_dict() for g in grasps], separators=(",", ":"))
    return json.dumps([g.to_dict() for g in grasps], indent=indent)


def save_grasps(path, grasps: list[GraspPose]) -> None:
    Path(path).write_text(grasps_to_json(grasps))


def load_grasps(path) -> list[GraspPose]:
    """Reads a JSON array of grasps, or an object holding one under ``"grasps"``."""
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("grasps", [])
    if not isinstance(data, list):
        raise ValueError(f"{path}: expected a JSON array of grasps")
    return [GraspPose.from_dict(d) for d in data]
