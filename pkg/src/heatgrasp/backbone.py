"""Geometry-aware encoder, FPN fusion and the global location heatmap head.

Layout at the default 96x96 input::

    stem   3x3/2   6 -> 16      48x48
    stage0 3x3/2 + 3x3/1 -> 16  24x24   C2
    stage1                -> 32 12x12   C3
    stage2                -> 64  6x6    C4
    stage3                -> 128 3x3    C5

The FPN fuses C2..C5 top-down into one stride-4 map (``f_scene``); the head
turns it into a per-cell graspability map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .geometry import CameraIntrinsics, GraspPose, pixel_to_cell, project_point

HEATMAP_STRIDE = 4
GT_SIGMA = 2.0


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    input_channels: int = 6
    input_hw: tuple[int, int] = (96, 96)
    fpn_channels: int = 64
    head_channels: int = 32

    def __post_init__(self):
        ch = tuple(self.stage_channels)
        object.__setattr__(self, "stage_channels", ch)
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        if len(ch) != 4:
            raise ValueError(f"encoder needs exactly 4 stages, got {ch}")
        if any(b <= a for a, b in zip(ch, ch[1:])):
            raise ValueError(f"stage channels must be strictly increasing, got {ch}")
        h, w = self.input_hw
        if h % 32 or w % 32:
            raise ValueError(f"input resolution {h}x{w} must be divisible by 32")

    @property
    def heatmap_hw(self) -> tuple[int, int]:
        return self.input_hw[0] // HEATMAP_STRIDE, self.input_hw[1] // HEATMAP_STRIDE

    def to_dict(self) -> dict:
        return {"stage_channels": list(self.stage_channels), "fpn_channels": self.fpn_channels,
                "input_hw": list(self.input_hw)}


@dataclass
class FeaturePyramid:
    fused: np.ndarray  # (N, Cf, H/4, W/4)
    cache: object = field(default=None, repr=False)


@dataclass
class LocationHeatmap:
    values: np.ndarray  # (N, 1, H/4, W/4), entries in [0, 1]
    stride: int = HEATMAP_STRIDE
    cache: object = field(default=None, repr=False)


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p = {}

    def conv(name, cin, cout, k):
        p[f"{name}.weight"] = _he(rng, (cout, cin, k, k))
        p[f"{name}.bias"] = np.zeros(cout, np.float32)

    c = cfg.stage_channels
    conv("enc.stem", cfg.input_channels, c[0], 3)
    prev = c[0]
    for i, ch in enumerate(c):
        conv(f"enc.s{i}.down", prev, ch, 3)
        conv(f"enc.s{i}.conv", ch, ch, 3)
        prev = ch
    for i, ch in enumerate(c):
        conv(f"fpn.lat{i}", ch, cfg.fpn_channels, 1)
    conv("fpn.smooth", cfg.fpn_channels, cfg.fpn_channels, 3)
    conv("head.conv", cfg.fpn_channels, cfg.head_channels, 3)
    conv("head.out", cfg.head_channels, 1, 1)
    return p


def _conv_relu(x, params, name, stride):
    out, ccache = tc.conv2d_forward(x, params[f"{name}.weight"], params[f"{name}.bias"], stride, 1)
    out, mask = tc.relu_forward(out)
    return out, (name, ccache, mask)


def _conv_relu_backward(dout, cache, grads):
    name, ccache, mask = cache
    g = tc.conv2d_backward(tc.relu_backward(dout, mask).input, ccache)
    grads[f"{name}.weight"] = g.params["weight"]
    grads[f"{name}.bias"] = g.params["bias"]
    return g.input


def encoder_forward(x: np.ndarray, params: dict, cfg: EncoderConfig | None = None):
    """Returns ``([C2, C3, C4, C5], cache)`` for an (N, 6, H, W) input."""
    if cfg is not None and tuple(x.shape[2:]) != cfg.input_hw:
        raise ValueError(f"input {x.shape[2:]} does not match configured {cfg.input_hw}")
    if x.shape[2] % 32 or x.shape[3] % 32:
        raise ValueError(f"input extents {x.shape[2:]} must be divisible by 32")
    caches = []
    h, c = _conv_relu(x, params, "enc.stem", 2)
    caches.append(c)
    feats = []
    for i in range(4):
        h, c1 = _conv_relu(h, params, f"enc.s{i}.down", 2)
        h, c2 = _conv_relu(h, params, f"enc.s{i}.conv", 1)
        caches.append((c1, c2))
        feats.append(h)
    return feats, caches


def encoder_backward(dfeats: list, cache) -> tuple[dict, np.ndarray]:
    """``dfeats`` may hold ``None`` for levels that received no gradient."""
    grads = {}
    stem_cache, stages = cache[0], cache[1:]
    dh = None
    for i in reversed(range(4)):
        c1, c2 = stages[i]
        d = dfeats[i]
        if dh is not None:
            d = dh if d is None else d + dh
        if d is None:
            # unused deep level (no top-down pathway): zero gradients, nothing flows down
            for name in (c1[0], c2[0]):
                grads[f"{name}.weight"] = np.zeros_like(c1[1][2] if name == c1[0] else c2[1][2])
                grads[f"{name}.bias"] = np.zeros(grads[f"{name}.weight"].shape[0], grads[f"{name}.weight"].dtype)
            continue
        d = _conv_relu_backward(d, c2, grads)
        dh = _conv_relu_backward(d, c1, grads)
    dx = _conv_relu_backward(dh, stem_cache, grads)
    return grads, dx


def fpn_forward(feats: list, params: dict, use_topdown: bool = True) -> FeaturePyramid:
    """Top-down fusion of [C2..C5] into a stride-4 map, then a 3x3 smoothing conv.

    With ``use_topdown=False`` only the C2 lateral is used (ablation).
    """
    lat_caches = {}
    levels = range(4) if use_topdown else range(1)
    lats = {}
    for i in levels:
        lats[i], lat_caches[i] = tc.conv2d_forward(feats[i], params[f"fpn.lat{i}.weight"],
                                                   params[f"fpn.lat{i}.bias"], 1, 0)
    up_caches = {}
    top = lats[max(levels)]
    for i in reversed(range(max(levels))):
        up, up_caches[i] = tc.upsample_bilinear_2x_forward(top)
        top = lats[i] + up
    fused, smooth_cache = tc.conv2d_forward(top, params["fpn.smooth.weight"], params["fpn.smooth.bias"], 1, 1)
    return FeaturePyramid(fused, (lat_caches, up_caches, smooth_cache, use_topdown))


def fpn_backward(dfused: np.ndarray, pyramid: FeaturePyramid) -> tuple[dict, list]:
    lat_caches, up_caches, smooth_cache, use_topdown = pyramid.cache
    grads = {}
    g = tc.conv2d_backward(dfused, smooth_cache)
    grads["fpn.smooth.weight"], grads["fpn.smooth.bias"] = g.params["weight"], g.params["bias"]
    dtop = g.input
    dlats = {}
    top_level = max(lat_caches)
    for i in range(top_level):
        dlats[i] = dtop
        dtop = tc.upsample_bilinear_2x_backward(dtop, up_caches[i]).input
    dlats[top_level] = dtop
    dfeats = [None] * 4
    for i, cache in lat_caches.items():
        g = tc.conv2d_backward(dlats[i], cache)
        grads[f"fpn.lat{i}.weight"], grads[f"fpn.lat{i}.bias"] = g.params["weight"], g.params["bias"]
        dfeats[i] = g.input
    return grads, dfeats


def heatmap_head(pyramid: FeaturePyramid, params: dict) -> LocationHeatmap:
    """3x3 conv -> ReLU -> 1x1 conv -> sigmoid."""
    h, c1 = _conv_relu(pyramid.fused, params, "head.conv", 1)
    logits, c2 = tc.conv2d_forward(h, params["head.out.weight"], params["head.out.bias"], 1, 0)
    values = tc.sigmoid(logits)
    return LocationHeatmap(values, cache=(c1, c2))


def heatmap_head_backward(dvalues: np.ndarray, heatmap: LocationHeatmap) -> tuple[dict, np.ndarray]:
    c1, c2 = heatmap.cache
    grads = {}
    dlogits = tc.sigmoid_backward(dvalues, heatmap.values).input
    g = tc.conv2d_backward(dlogits, c2)
    grads["head.out.weight"], grads["head.out.bias"] = g.params["weight"], g.params["bias"]
    dfused = _conv_relu_backward(g.input, c1, grads)
    return grads, dfused


def make_gt_heatmap(labels: list[GraspPose], intr: CameraIntrinsics, hm_hw: tuple[int, int] | None = None,
                    sigma: float = GT_SIGMA) -> tuple[np.ndarray, int]:
    """Gaussian-splat heatmap target of shape (1, h, w) and the count of skipped labels.

    Each grasp center is projected, snapped to its stride-4 cell and splatted
    with peak 1; overlapping splats combine by per-cell max. Labels behind the
    camera or projecting off the grid are skipped.
    """
    h, w = hm_hw or (intr.height // HEATMAP_STRIDE, intr.width // HEATMAP_STRIDE)
    target = np.zeros((1, h, w), np.float32)
    skipped = 0
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    seen = set()
    for g in labels:
        if g.z <= 0:
            skipped += 1
            continue
        px, py = project_point(g.x, g.y, g.z, intr)
        cu = int(round(float(pixel_to_cell(px, HEATMAP_STRIDE))))
        cv = int(round(float(pixel_to_cell(py, HEATMAP_STRIDE))))
        if not (0 <= cu < w and 0 <= cv < h):
            skipped += 1
            continue
        if (cu, cv) in seen:
            continue
        seen.add((cu, cv))
        blob = np.exp(-((rows - cv) ** 2 + (cols - cu) ** 2) / (2 * sigma * sigma)).astype(np.float32)
        np.maximum(target[0], blob, out=target[0])
    return target, skipped
