"""Analytic scene primitives: sphere, box and capped cylinder.

All queries run in the primitive's local frame (``p_local = R.T @ (p - t)``)
and are vectorised over points or lines. Cylinders have their axis on local z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("sphere", "box", "cylinder")
_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class ScenePrimitive:
    kind: str
    size: tuple  # sphere (r,), box (hx, hy, hz), cylinder (r, half_height)
    rotation: np.ndarray  # local -> camera
    translation: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        want = {"sphere": 1, "box": 3, "cylinder": 2}[self.kind]
        size = tuple(float(s) for s in self.size)
        if len(size) != want or min(size) <= 0:
            raise ValueError(f"{self.kind} needs {want} positive size values, got {self.size}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    # -- frames ---------------------------------------------------------

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.translation) @ self.rotation

    def dir_to_local(self, dirs: np.ndarray) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation

    # -- queries --------------------------------------------------------

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry/exit parameters of the lines ``o + t d`` (t over all reals).

        Misses come back as ``(inf, -inf)`` so ``t_in > t_out`` flags them.
        """
        o = self.to_local(origins)
        d = self.dir_to_local(dirs)
        if self.kind == "sphere":
            return _sphere_interval(o, d, self.size[0])
        if self.kind == "box":
            return _slab_interval(o, d, np.array(self.size))
        r, hh = self.size
        t0, t1 = _disk_interval(o[..., :2], d[..., :2], r)
        s0, s1 = _slab_interval(o[..., 2:], d[..., 2:], np.array([hh]))
        return _merge(np.maximum(t0, s0), np.minimum(t1, s1))

    def sdf(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance, negative inside."""
        p = self.to_local(pts)
        if self.kind == "sphere":
            return _norm(p) - self.size[0]
        if self.kind == "box":
            q = np.abs(p) - np.array(self.size)
        else:
            r, hh = self.size
            q = np.stack([_norm(p[..., :2]) - r, np.abs(p[..., 2]) - hh], axis=-1)
        outside = _norm(np.maximum(q, 0.0))
        return outside + np.minimum(q.max(axis=-1), 0.0)

    def normal(self, pts: np.ndarray) -> np.ndarray:
        """Outward unit normal at (or nearest to) surface points."""
        p = self.to_local(pts)
        if self.kind == "sphere":
            n = p
        elif self.kind == "box":
            rel = np.abs(p) / np.array(self.size)
            axis = np.argmax(rel, axis=-1)
            n = np.zeros_like(p)
            np.put_along_axis(n, axis[..., None], np.take_along_axis(np.sign(p), axis[..., None], -1), -1)
        else:
            r, hh = self.size
            rho = np.linalg.norm(p[..., :2], axis=-1)
            cap = np.abs(p[..., 2]) / hh >= rho / r
            n = np.concatenate([p[..., :2], np.zeros_like(p[..., 2:])], axis=-1)
            n[cap] = 0.0
            n[cap, 2] = np.sign(p[cap, 2])
        n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), _EPS)
        return n @ self.rotation.T

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.size))

    def support_radius(self) -> float:
        """Radius of the primitive's footprint on the table plane (xy bounding circle)."""
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return float(np.hypot(self.size[0], self.size[1]))
        r, hh = self.size
        upright = abs(self.rotation[2, 2]) > 0.5
        return r if upright else float(np.hypot(r, hh))

    def lowest_z_extent(self) -> float:
        """Half extent along camera z (the table normal)."""
        if self.kind == "sphere":
            return self.size[0]
        if self.kind == "box":
            return float(np.abs(self.rotation[2]) @ np.array(self.size))
        r, hh = self.size
        az = abs(self.rotation[2, 2])
        return float(hh * az + r * np.sqrt(max(0.0, 1 - az * az)))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": list(self.size),
                "pose": {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePrimitive":
        return cls(d["kind"], tuple(d["size"]), np.array(d["pose"]["rotation"]),
                   np.array(d["pose"]["translation"]))


def _norm(v: np.ndarray) -> np.ndarray:
    """Euclidean norm over the last axis (faster than ``np.linalg.norm`` on small trailing axes)."""
    return np.sqrt(np.einsum("...i,...i->...", v, v))


def _merge(t0, t1):
    miss = ~(t0 <= t1)
    t0 = np.where(miss, np.inf, t0)
    t1 = np.where(miss, -np.inf, t1)
    return t0, t1


def _sphere_interval(o, d, r):
    a = (d * d).sum(-1)
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - r * r
    disc = b * b - a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
    t0 = np.where(disc >= 0, t0, np.inf)
    t1 = np.where(disc >= 0, t1, -np.inf)
    return _merge(t0, t1)


def _slab_interval(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (-half - o) * inv
        tb = (half - o) * inv
    lo = np.minimum(ta, tb)
    hi = np.maximum(ta, tb)
    # a line parallel to a slab is either always inside it or never
    par = np.abs(d) < _EPS
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    return _merge(lo.max(-1), hi.min(-1))


def _disk_interval(o2, d2, r):
    """Interval inside the infinite cylinder x^2 + y^2 <= r^2."""
    a = (d2 * d2).sum(-1)
    b = (o2 * d2).sum(-1)
    c = (o2 * o2).sum(-1) - r * r
    disc = b * b - a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
    par = a < _EPS
    t0 = np.where(par, np.where(c <= 0, -np.inf, np.inf), np.where(disc >= 0, t0, np.inf))
    t1 = np.where(par, np.where(c <= 0, np.inf, -np.inf), np.where(disc >= 0, t1, -np.inf))
    return t0, t1
