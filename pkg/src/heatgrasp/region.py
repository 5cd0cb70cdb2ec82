"""Region feature propagation.

Graspable centers are picked from the location heatmap (threshold, top-N,
farthest point sampling), each center gets a depth-scaled g x g sampling
lattice, and all lattices are read from the shared scene feature map in a
single bilinear grid-sample call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .geometry import cell_to_pixel

Z_REF = 0.5  # meters; depth at which a region spans exactly s cells


@dataclass(frozen=True)
class RegionCenter:
    u: float  # heatmap column
    v: float  # heatmap row
    depth_m: float
    graspability: float

    def __post_init__(self):
        if not self.depth_m > 0:
            raise ValueError(f"region center depth must be positive, got {self.depth_m}")


@dataclass
class RegionBatch:
    features: np.ndarray  # (k, Cf, g, g)
    centers: list[RegionCenter]
    sizes: list[float]
    cache: object = field(default=None, repr=False)

    @property
    def k(self) -> int:
        return len(self.centers)


def select_candidates(heatmap: np.ndarray, threshold: float = 0.3, max_n: int = 128):
    """Cells with value >= threshold, highest first, at most ``max_n``.

    Falls back to the single argmax cell (first in row-major order) when
    nothing passes. Returns a list of ``(u, v, value)``.
    """
    if not 0 <= threshold <= 1:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    hm = np.asarray(heatmap).reshape(heatmap.shape[-2:])
    flat = hm.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    passing = order[flat[order] >= threshold][:max_n]
    if passing.size == 0:
        passing = order[:1]
    w = hm.shape[1]
    return [(int(i % w), int(i // w), float(flat[i])) for i in passing]


def farthest_point_sampling(points, k: int, seed_index: int = 0) -> list[int]:
    """Greedy maximin selection in 2-D Euclidean distance.

    Starts from ``seed_index``; ties go to the smaller index. ``k`` larger
    than the number of points returns every index.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, n)
    chosen = [seed_index]
    mind = ((pts - pts[seed_index]) ** 2).sum(axis=1)
    mind[seed_index] = -1.0
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1), out=mind)
        mind[chosen] = -1.0
    return chosen


def lattice_offsets(s: float, g: int) -> np.ndarray:
    """(g*g, 2) offsets (du, dv) spanning [-s/2, s/2], row-major over (v, u)."""
    t = np.linspace(-s / 2.0, s / 2.0, g)
    dv, du = np.meshgrid(t, t, indexing="ij")
    return np.stack([du.reshape(-1), dv.reshape(-1)], axis=1)


def region_grid_coords(center: RegionCenter, s: float, g: int, hm_hw: tuple[int, int],
                       z_ref: float = Z_REF) -> np.ndarray:
    """Normalized grid-sample coordinates of one region lattice, shape (g*g, 2).

    Offsets are scaled by the normalized depth ``z_ref / depth_m`` so nearer
    centers get larger footprints.
    """
    if s <= 0:
        raise ValueError("region size must be positive")
    if g < 2:
        raise ValueError("lattice size g must be >= 2")
    h, w = hm_hw
    d = z_ref / center.depth_m
    cells = np.array([center.u, center.v]) + d * lattice_offsets(s, g)
    out = np.empty_like(cells)
    out[:, 0] = 2.0 * cells[:, 0] / (w - 1) - 1.0
    out[:, 1] = 2.0 * cells[:, 1] / (h - 1) - 1.0
    return out


def sample_region_size(rng: np.random.Generator, training: bool, base_s: float = 12.0,
                       low: float = 0.7, high: float = 1.3) -> float:
    if base_s <= 0:
        raise ValueError("base_s must be positive")
    if not training:
        return float(base_s)
    return float(rng.uniform(low * base_s, high * base_s))


def propagate_region_features(fused: np.ndarray, centers: list[RegionCenter], sizes: list[float],
                              g: int = 8, z_ref: float = Z_REF) -> RegionBatch:
    """Sample every region lattice from ``fused`` (1, Cf, h, w) in one call."""
    if not centers:
        raise ValueError("at least one region center is required")
    if fused.shape[0] != 1:
        raise ValueError("region propagation runs on one frame at a time")
    hm_hw = fused.shape[2:]
    coords = np.concatenate([region_grid_coords(c, s, g, hm_hw, z_ref) for c, s in zip(centers, sizes)])
    out, cache = tc.grid_sample_bilinear_forward(fused, coords[None].astype(fused.dtype))
    k, cf = len(centers), fused.shape[1]
    feats = out[0].reshape(cf, k, g, g).transpose(1, 0, 2, 3)
    return RegionBatch(np.ascontiguousarray(feats), list(centers), list(sizes), cache)


def propagate_backward(dfeatures: np.ndarray, batch: RegionBatch) -> np.ndarray:
    """Gradient of the region features w.r.t. the scene feature map."""
    k, cf, g, _ = dfeatures.shape
    dout = dfeatures.transpose(1, 0, 2, 3).reshape(1, cf, k * g * g)
    return tc.grid_sample_bilinear_backward(dout, batch.cache).input


def lookup_depth_m(depth_mm: np.ndarray, px: float, py: float) -> float:
    """Nearest valid surface depth (meters) among the 2x2 pixels around (px, py); 0 if none."""
    h, w = depth_mm.shape
    xs = {min(max(int(math.floor(px)), 0), w - 1), min(max(int(math.ceil(px)), 0), w - 1)}
    ys = {min(max(int(math.floor(py)), 0), h - 1), min(max(int(math.ceil(py)), 0), h - 1)}
    vals = [depth_mm[y, x] for y in ys for x in xs if depth_mm[y, x] > 0]
    return float(min(vals)) / 1000.0 if vals else 0.0


def lookup_depth_m_batch(depth_mm: np.ndarray, px, py) -> np.ndarray:
    """Vectorised ``lookup_depth_m`` over arrays of pixel coordinates."""
    h, w = depth_mm.shape
    px, py = np.asarray(px, dtype=np.float64), np.asarray(py, dtype=np.float64)
    best = np.full(px.shape, np.inf)
    for fx in (np.floor, np.ceil):
        for fy in (np.floor, np.ceil):
            x = np.clip(fx(px).astype(np.int64), 0, w - 1)
            y = np.clip(fy(py).astype(np.int64), 0, h - 1)
            d = depth_mm[y, x].astype(np.float64)
            best = np.where(d > 0, np.minimum(best, d), best)
    return np.where(np.isfinite(best), best / 1000.0, 0.0)


def cell_depth_m(depth_mm: np.ndarray, u: float, v: float, stride: int = 4) -> float:
    return lookup_depth_m(depth_mm, float(cell_to_pixel(u, stride)), float(cell_to_pixel(v, stride)))


def choose_centers(heatmap: np.ndarray, depth_mm: np.ndarray, k: int = 32, threshold: float = 0.3,
                   max_candidates: int = 128, stride: int = 4) -> list[RegionCenter]:
    """Threshold + top-N + FPS (seeded at the strongest candidate) on a (h, w) heatmap."""
    cands = [c for c in select_candidates(heatmap, threshold, max_candidates)
             if cell_depth_m(depth_mm, c[0], c[1], stride) > 0]
    if not cands:
        return []
    idx = farthest_point_sampling([(u, v) for u, v, _ in cands], k, 0)
    return [RegionCenter(float(cands[i][0]), float(cands[i][1]),
                         cell_depth_m(depth_mm, cands[i][0], cands[i][1], stride), cands[i][2]) for i in idx]


def region_overlay(heatmap: np.ndarray, batch: RegionBatch, g: int, z_ref: float = Z_REF) -> np.ndarray:
    """RGB (3, h, w) debug image: heatmap in gray, region footprints in red, centers in green."""
    hm = np.asarray(heatmap, dtype=np.float32).reshape(heatmap.shape[-2:])
    h, w = hm.shape
    img = np.repeat(hm[None], 3, axis=0)
    for c, s in zip(batch.centers, batch.sizes):
        half = 0.5 * s * z_ref / c.depth_m
        u0, u1 = int(round(c.u - half)), int(round(c.u + half))
        v0, v1 = int(round(c.v - half)), int(round(c.v + half))
        for u in range(max(u0, 0), min(u1, w - 1) + 1):
            for v in (v0, v1):
                if 0 <= v < h:
                    img[:, v, u] = (1, 0, 0)
        for v in range(max(v0, 0), min(v1, h - 1) + 1):
            for u in (u0, u1):
                if 0 <= u < w:
                    img[:, v, u] = (1, 0, 0)
        cu, cv = int(round(c.u)), int(round(c.v))
        if 0 <= cu < w and 0 <= cv < h:
            img[:, cv, cu] = (0, 1, 0)
    return img
