"""Two-finger gripper model, antipodal force-closure test and analytic grasp labels.

Gripper frame columns are ``[closing c, binormal b, approach a]`` around the
grasp center. The body is three boxes: two fingers just outside the jaw
positions ``+-w/2`` whose tips reach ``FINGER_DEPTH`` past the center along
``a``, and a palm behind the finger bases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import W_MAX, GraspPose, canonical_euler_batch, euler_to_matrix_batch
from .primitives import ScenePrimitive, _norm
from .scene import SceneModel

FINGER_T = 0.01  # along closing
FINGER_B = 0.01  # along binormal
FINGER_DEPTH = 0.02  # fingertip insertion past the grasp center
FINGER_LEN = 0.06
PALM_T = 0.01
_FINGER_MID = FINGER_DEPTH - FINGER_LEN / 2
CONTACT_TOL = 1e-3
PENETRATION_TOL = 1e-3

OK, MISS, JAW_INSIDE, SPLIT_CONTACT, COLLISION = range(5)
REASONS = ("ok", "miss", "jaw_inside", "split_contact", "collision")


@dataclass
class ContactPair:
    p1: np.ndarray  # jaw on the -c side
    p2: np.ndarray
    n1: np.ndarray  # inward unit normals
    n2: np.ndarray
    primitive: int


@dataclass
class GraspCheck:
    """Per-grasp geometry verdicts; force closure at mu is ``status == OK and cone_angle <= atan(mu)``."""
    status: np.ndarray  # (n,) int codes, see REASONS
    cone_angle: np.ndarray  # (n,) max angle between contact line and inward normals, rad
    primitive: np.ndarray  # (n,) contacted primitive or -1
    t_contact: np.ndarray  # (n, 2) contact parameters along the closing axis

    def success(self, mu: float) -> np.ndarray:
        return (self.status == OK) & (self.cone_angle <= math.atan(mu))


def _unit_lattice(nc: int, nb: int, na: int) -> np.ndarray:
    g = np.meshgrid(np.linspace(-1, 1, nc), np.linspace(-1, 1, nb), np.linspace(-1, 1, na), indexing="ij")
    return np.stack([x.reshape(-1) for x in g], axis=1)


# sparse lattices: faces and edges of each box plus interior rows ~7 mm apart
_FINGER_LAT = _unit_lattice(2, 2, 9)
_PALM_LAT = _unit_lattice(12, 2, 2)
_REGION_LAT = _unit_lattice(8, 2, 9)
_CORNERS = _unit_lattice(2, 2, 2)


def gripper_boxes(width: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(center, half extents) per body box in the gripper frame, each (n, 3)."""
    w2 = np.asarray(width, dtype=np.float64)[:, None] / 2.0
    z = np.zeros_like(w2)
    one = np.ones_like(w2)
    finger_half = one * [FINGER_T / 2, FINGER_B / 2, FINGER_LEN / 2]
    return [
        (np.hstack([w2 + FINGER_T / 2, z, z + _FINGER_MID]), finger_half),
        (np.hstack([-w2 - FINGER_T / 2, z, z + _FINGER_MID]), finger_half),
        (np.hstack([z, z, z + FINGER_DEPTH - FINGER_LEN - PALM_T / 2]),
         np.hstack([w2 + FINGER_T, one * FINGER_B / 2, one * PALM_T / 2])),
    ]


def _box_points(rot, center, c_local, half, lattice):
    local = c_local[:, None, :] + lattice[None] * half[:, None, :]
    return np.matmul(local, rot.transpose(0, 2, 1)) + center[:, None, :]


def gripper_body_points(rot: np.ndarray, center: np.ndarray, width: np.ndarray) -> np.ndarray:
    """Camera-frame lattice points of the three gripper boxes, (n, P, 3)."""
    boxes = gripper_boxes(width)
    return np.concatenate([_box_points(rot, center, c, h, lat)
                           for (c, h), lat in zip(boxes, (_FINGER_LAT, _FINGER_LAT, _PALM_LAT))], axis=1)


def _region_box(width: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w2 = np.asarray(width, dtype=np.float64)[:, None] / 2.0
    half = np.hstack([w2, np.full_like(w2, FINGER_B / 2), np.full_like(w2, FINGER_LEN / 2)])
    mid = np.zeros_like(half)
    mid[:, 2] = _FINGER_MID
    return mid, half, _REGION_LAT


def closing_region_points(rot: np.ndarray, center: np.ndarray, width: np.ndarray) -> np.ndarray:
    """Lattice points of the space swept between the fingers, (n, Q, 3)."""
    mid, half, lat = _region_box(width)
    return _box_points(rot, center, mid, half, lat)


def pose_arrays(grasps: list[GraspPose]):
    center = np.array([[g.x, g.y, g.z] for g in grasps], dtype=np.float64).reshape(-1, 3)
    rot = euler_to_matrix_batch([g.theta for g in grasps], [g.gamma for g in grasps], [g.beta for g in grasps])
    width = np.array([g.w for g in grasps], dtype=np.float64)
    return center, rot, width


def check_arrays(center: np.ndarray, rot: np.ndarray, width: np.ndarray, scene: SceneModel) -> GraspCheck:
    n = len(center)
    m = len(scene.primitives)
    status = np.full(n, OK)
    cone = np.full(n, np.pi)
    prim = np.full(n, -1)
    tc = np.full((n, 2), np.nan)
    if n == 0:
        return GraspCheck(status, cone, prim, tc)
    if m == 0:
        status[:] = MISS
        return GraspCheck(status, cone, prim, tc)
    closing = rot[:, :, 0]
    t_in = np.empty((n, m))
    t_out = np.empty((n, m))
    for j, p in enumerate(scene.primitives):
        t_in[:, j], t_out[:, j] = p.intersect(center, closing)
    s = width[:, None] / 2.0
    hit = t_in <= t_out
    inside = hit & (((t_in < s - CONTACT_TOL) & (t_out > s + CONTACT_TOL))
                    | ((t_in < -s - CONTACT_TOL) & (t_out > -s + CONTACT_TOL)))
    cand_p = hit & (t_out <= s + CONTACT_TOL) & (t_out >= -s - CONTACT_TOL)
    cand_m = hit & (t_in >= -s - CONTACT_TOL) & (t_in <= s + CONTACT_TOL)
    jp = np.argmax(np.where(cand_p, t_out, -np.inf), axis=1)
    jm = np.argmin(np.where(cand_m, t_in, np.inf), axis=1)
    miss = ~cand_p.any(1) | ~cand_m.any(1)
    status[miss] = MISS
    status[inside.any(1)] = JAW_INSIDE
    status[(status == OK) & (jp != jm)] = SPLIT_CONTACT
    rows = np.arange(n)
    good = status == OK
    prim[good] = jp[good]
    tc[good, 0] = t_in[rows, jm][good]
    tc[good, 1] = t_out[rows, jp][good]
    for j, p in enumerate(scene.primitives):
        sel = good & (prim == j)
        if not sel.any():
            continue
        c = closing[sel]
        p1 = center[sel] + tc[sel, :1] * c
        p2 = center[sel] + tc[sel, 1:] * c
        n1 = -p.normal(p1)  # inward at the -c contact
        n2 = -p.normal(p2)
        a1 = np.arccos(np.clip((n1 * c).sum(1), -1, 1))
        a2 = np.arccos(np.clip(-(n2 * c).sum(1), -1, 1))
        cone[sel] = np.maximum(a1, a2)
    # gripper vs the table: a box clears a plane iff all its corners do
    if good.any():
        corners = np.concatenate([_box_points(rot[good], center[good], c, h, _CORNERS)
                                  for c, h in gripper_boxes(width[good])], axis=1)
        idx = np.nonzero(good)[0]
        status[idx[(corners[..., 2] > scene.table_z + PENETRATION_TOL).any(1)]] = COLLISION
        good = status == OK
    # gripper body vs every primitive; closing region vs the other objects
    if good.any():
        idx = np.nonzero(good)[0]
        c_g, r_g, w_g, target = center[idx], rot[idx], width[idx], prim[idx]
        hit = np.zeros(len(idx), dtype=bool)
        boxes = [(c, h, lat, None) for (c, h), lat in zip(gripper_boxes(w_g), (_FINGER_LAT, _FINGER_LAT, _PALM_LAT))]
        boxes.append(_region_box(w_g) + (target,))
        for c_local, half, lat, skip in boxes:
            mid = c_g + np.matmul(r_g, c_local[:, :, None])[..., 0]
            circum = _norm(half)
            for j, p in enumerate(scene.primitives):
                # sdf is 1-Lipschitz: a box can only penetrate if its center is within its circumradius
                rows = ~hit & (p.sdf(mid) < circum - PENETRATION_TOL)
                if skip is not None:
                    rows &= skip != j
                rows = np.nonzero(rows)[0]
                if len(rows):
                    pts = _box_points(r_g[rows], c_g[rows], c_local[rows], half[rows], lat)
                    hit[rows] |= (p.sdf(pts) < -PENETRATION_TOL).any(1)
        status[idx[hit]] = COLLISION
    return GraspCheck(status, cone, prim, tc)


def check_grasps(grasps: list[GraspPose], scene: SceneModel) -> GraspCheck:
    return check_arrays(*pose_arrays(grasps), scene)


def force_closure(grasp: GraspPose, scene: SceneModel, mu: float, diagnostics: dict | None = None) -> bool:
    """Two-contact antipodal test with Coulomb cones of half-angle atan(mu), plus gripper collision."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    chk = check_grasps([grasp], scene)
    if diagnostics is not None:
        key = REASONS[int(chk.status[0])]
        diagnostics[key] = diagnostics.get(key, 0) + 1
    return bool(chk.success(mu)[0])


def find_contacts(grasp: GraspPose, scene: SceneModel) -> ContactPair | None:
    chk = check_grasps([grasp], scene)
    if np.isnan(chk.t_contact[0, 0]):
        return None
    center, rot, _ = pose_arrays([grasp])
    c = rot[0, :, 0]
    p = scene.primitives[int(chk.primitive[0])]
    p1 = center[0] + chk.t_contact[0, 0] * c
    p2 = center[0] + chk.t_contact[0, 1] * c
    return ContactPair(p1, p2, -p.normal(p1[None])[0], -p.normal(p2[None])[0], int(chk.primitive[0]))


# -- analytic labels -------------------------------------------------------

def _approach_fans(closing: np.ndarray, tilts: np.ndarray) -> np.ndarray:
    """(n, T, 3) approaches perpendicular to each closing axis, tilted from the one closest to +z.

    Vertical closing axes get NaN fans (no approach points into the scene).
    """
    c = closing[:, None, :]
    e = np.array([0.0, 0.0, 1.0]) - c[..., 2:] * c
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    e = np.where(norm > 1e-6, e / np.maximum(norm, 1e-12), np.nan)
    n = np.cross(c, e)
    return np.cos(tilts)[None, :, None] * e + np.sin(tilts)[None, :, None] * n


def _spaced(half: float, margin: float, step: float) -> np.ndarray:
    """Offsets ``step`` apart from ``-(half - margin)`` up to at most ``half - margin``.

    Anchoring at one end lets greedy NMS start packing from an extreme.
    """
    span = half - margin
    if span <= 0:
        return np.zeros(1)
    return -span + step * np.arange(int(math.floor(2 * span / step)) + 1)


# Position and tilt grids sit just above half the NMS spacing so greedy NMS
# keeps every other entry.
POS_STEP = 0.0151
_TILTS = np.radians(np.arange(-77.5, 78, 15.5))
_SPINS = np.radians(np.arange(0, 180, 15.5))
_SPHERE_STEP = 10.0  # degrees, for sphere approach directions
_SPHERE_POLAR_MAX = 80.0
_EDGE = 0.001


def _perp_basis(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.array([0.0, 0.0, 1.0]) if abs(u[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def _sphere_approaches() -> np.ndarray:
    dirs = []
    for polar in np.radians(np.arange(0, _SPHERE_POLAR_MAX + 0.1, _SPHERE_STEP)):
        n_az = max(1, int(round(360 * math.sin(polar) / _SPHERE_STEP)))
        az = np.arange(n_az) * 2 * math.pi / n_az
        dirs.append(np.stack([np.sin(polar) * np.cos(az), np.sin(polar) * np.sin(az),
                              np.full(n_az, np.cos(polar))], axis=1))
    return np.concatenate(dirs)


def _grid(*axes):
    return [g.reshape(-1) for g in np.meshgrid(*axes, indexing="ij")]


def _families(prim: ScenePrimitive):
    """Analytic antipodal families as ``(centers, closings, widths, approaches or None)`` arrays.

    ``None`` approaches mean "fan the approach about each closing axis".
    """
    o, R = prim.translation, prim.rotation
    out = []
    if prim.kind == "sphere":
        a = _sphere_approaches()
        e1 = np.cross(a, np.where(np.abs(a[:, 1:2]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]]))
        e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
        e2 = np.cross(a, e1)
        c = (np.cos(_SPINS)[None, :, None] * e1[:, None] + np.sin(_SPINS)[None, :, None] * e2[:, None])
        n = c.shape[0] * c.shape[1]
        out.append((np.tile(o, (n, 1)), c.reshape(-1, 3), np.full(n, 2 * prim.size[0]),
                    np.repeat(a, len(_SPINS), axis=0)))
        return out
    if prim.kind == "box":
        h = prim.size
        for k in range(3):
            if 2 * h[k] > W_MAX:
                continue
            i, j = [m for m in range(3) if m != k]
            s1, s2 = _grid(_spaced(h[i], _EDGE, POS_STEP), _spaced(h[j], _EDGE, POS_STEP))
            centers = o + s1[:, None] * R[:, i] + s2[:, None] * R[:, j]
            out.append((centers, np.tile(R[:, k], (len(s1), 1)), np.full(len(s1), 2 * h[k]), None))
        return out
    r, hh = prim.size
    u = R[:, 2]
    e1, e2 = _perp_basis(u)
    if 2 * r <= W_MAX:
        s, psi = _grid(_spaced(hh, _EDGE, POS_STEP), _SPINS)
        c = np.cos(psi)[:, None] * e1 + np.sin(psi)[:, None] * e2
        out.append((o + s[:, None] * u, c, np.full(len(s), 2 * r), None))
    if 2 * hh <= W_MAX:
        s1, s2 = _grid(_spaced(r, _EDGE, POS_STEP), _spaced(r, _EDGE, POS_STEP))
        keep = np.hypot(s1, s2) < r - _EDGE
        s1, s2 = s1[keep], s2[keep]
        out.append((o + s1[:, None] * e1 + s2[:, None] * e2, np.tile(u, (len(s1), 1)),
                    np.full(len(s1), 2 * hh), None))
    return out


def candidate_arrays(prim: ScenePrimitive):
    """Analytic candidates as arrays: center (n, 3), theta, gamma, beta, width."""
    centers, closings, approaches, widths = [], [], [], []
    for center, c, width, approach in _families(prim):
        if approach is None:
            fan = _approach_fans(c, _TILTS)
            t = fan.shape[1]
            center, c, width = np.repeat(center, t, 0), np.repeat(c, t, 0), np.repeat(width, t)
            approach = fan.reshape(-1, 3)
        ok = approach[:, 2] > 0.05
        centers.append(center[ok])
        closings.append(c[ok])
        approaches.append(approach[ok])
        widths.append(width[ok])
    if not centers or not sum(len(x) for x in centers):
        z = np.zeros(0)
        return np.zeros((0, 3)), z, z, z, z
    theta, gamma, beta = canonical_euler_batch(np.concatenate(approaches), np.concatenate(closings))
    return np.concatenate(centers), theta, gamma, beta, np.minimum(np.concatenate(widths), W_MAX)


def candidate_grasps(prim: ScenePrimitive) -> list[GraspPose]:
    center, theta, gamma, beta, width = candidate_arrays(prim)
    return [GraspPose(*center[i], theta[i], gamma[i], beta[i], width[i]) for i in range(len(center))]


def spread_order(grasps: list[GraspPose], trans_thresh: float = 0.03,
                 rot_thresh: float = math.radians(30)) -> list[GraspPose]:
    """Reorder so the greedy NMS survivors of the list come first."""
    from ..rotation import grasp_nms
    kept = grasp_nms(grasps, trans_thresh, rot_thresh)
    ids = {id(g) for g in kept}
    return kept + [g for g in grasps if id(g) not in ids]


def label_grasps(scene: SceneModel, mu_check: float = 0.2) -> list[GraspPose]:
    """Analytic antipodal labels that survive the collision and force-closure checks.

    Per object, NMS-distinct labels come first so a top-k after NMS keeps as
    many distinct grasps as possible.
    """
    labels = []
    for j, prim in enumerate(scene.primitives):
        center, theta, gamma, beta, width = candidate_arrays(prim)
        if not len(center):
            continue
        chk = check_arrays(center, euler_to_matrix_batch(theta, gamma, beta), width, scene)
        ok = np.nonzero(chk.success(mu_check) & (chk.primitive == j))[0]
        labels.extend(spread_order([GraspPose(*center[i], theta[i], gamma[i], beta[i], width[i]) for i in ok]))
    return labels
