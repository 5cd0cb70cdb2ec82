"""The end-to-end detector.

One frame goes through: 6-channel input -> encoder -> FPN -> location heatmap
-> region centers (threshold + FPS) -> region features -> rotation head ->
decoded grasps -> NMS. With region feature propagation on, the encoder runs
once per frame and every region reads the shared scene map. With it off,
each region is re-cropped from the raw input and re-encoded.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import evalkit as ek
from . import region as rg
from . import rotation as rot
from . import tensorcore as tc
from .geometry import (W_MAX, GraspPose, ImageFrame, cell_to_pixel, make_network_input, pixel_to_cell,
                       project_point)

STAGES = ("input", "encoder", "fpn", "heatmap", "region", "rotation", "decode", "nms")


class ResolutionError(ValueError):
    """Frame extents differ from the configured input resolution."""


@dataclass(frozen=True)
class PipelineConfig:
    input_hw: tuple[int, int] = (96, 96)
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    fpn_channels: int = 64
    head_channels: int = 32
    heatmap_threshold: float = 0.3
    max_candidates: int = 128
    k: int = 32
    g: int = 8
    base_s: float = 12.0
    a_gamma: int = 6
    a_beta: int = 6
    hidden: int = 256
    score_thresh: float = 0.1
    nms_trans: float = 0.03
    nms_rot_deg: float = 30.0
    width_clearance: float = 0.03
    use_rfp: bool = True
    use_fpn_heatmap: bool = True
    use_rotation_heatmap: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        checks = [
            (0 <= self.heatmap_threshold <= 1, "heatmap_threshold must be in [0, 1]"),
            (0 <= self.score_thresh <= 1, "score_thresh must be in [0, 1]"),
            (self.max_candidates >= 1 and self.k >= 1, "k and max_candidates must be >= 1"),
            (self.g >= 2, "g must be >= 2"),
            (self.base_s > 0, "base_s must be positive"),
            (self.a_gamma >= 2 and self.a_beta >= 2, "anchor counts must be >= 2"),
            (self.hidden >= 1 and self.fpn_channels >= 1 and self.head_channels >= 1, "layer widths must be >= 1"),
            (self.nms_trans > 0 and 0 < self.nms_rot_deg <= 180, "NMS thresholds out of range"),
            (0 <= self.width_clearance <= W_MAX, "width_clearance out of range"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        self.encoder_config()  # validates stages and resolution

    def encoder_config(self) -> bb.EncoderConfig:
        return bb.EncoderConfig(self.stage_channels, 6, self.input_hw, self.fpn_channels, self.head_channels)

    @property
    def heatmap_hw(self) -> tuple[int, int]:
        return self.input_hw[0] // bb.HEATMAP_STRIDE, self.input_hw[1] // bb.HEATMAP_STRIDE

    @property
    def crop_hw(self) -> int:
        """Input crop side used per region when region feature propagation is off."""
        return max(32, 32 * math.ceil(bb.HEATMAP_STRIDE * self.g / 32))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def init_params(cfg: PipelineConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = bb.init_params(cfg.encoder_config(), rng)
    anchors = rot.build_anchor_grid(cfg.a_gamma, cfg.a_beta)
    params.update(rot.init_params(cfg.fpn_channels * cfg.g * cfg.g, anchors, rng,
                                  two_fc=cfg.use_rotation_heatmap, hidden=cfg.hidden))
    return params


def reachable_labels(labels: list[GraspPose], frame: ImageFrame, stride: int = bb.HEATMAP_STRIDE) -> list[GraspPose]:
    """Labels whose center the decoder can express: within the depth offset range of the
    observed surface at the label's own heatmap cell."""
    depth = frame.depth[0]
    intr = frame.intrinsics
    out = []
    for lab in labels:
        if lab.z <= 0:
            continue
        px, py = project_point(lab.x, lab.y, lab.z, intr)
        cu, cv = round(float(pixel_to_cell(px, stride))), round(float(pixel_to_cell(py, stride)))
        d = rg.lookup_depth_m(depth, float(cell_to_pixel(cu, stride)), float(cell_to_pixel(cv, stride)))
        if d > 0 and abs(lab.z - d) <= rot.OFFSET_D_MAX:
            out.append(lab)
    return out


def training_labels(labels: list[GraspPose], frame: ImageFrame, scene=None, cfg: PipelineConfig | None = None,
                    mu: float = 1.0) -> list[GraspPose]:
    """Reachable labels that, when a scene model is given, still hold force closure at ``mu``
    after snapping to their anchor. Near an edge a few degrees of snapping can
    move a contact onto the next face, and such labels only teach bad poses."""
    cfg = cfg or PipelineConfig()
    labels = reachable_labels(labels, frame)
    if scene is None or not labels:
        return labels
    anchors = rot.build_anchor_grid(cfg.a_gamma, cfg.a_beta)
    ok = ek.check_grasps([rot.snap_to_anchor(g, anchors, cfg.width_clearance) for g in labels], scene).success(mu)
    return [g for g, keep in zip(labels, ok) if keep]


@dataclass
class Detection:
    grasps: list[GraspPose]
    heatmap: np.ndarray  # (h, w)
    centers: list[rg.RegionCenter]
    timings: dict[str, float]  # seconds per stage
    diagnostics: dict = field(default_factory=dict)


@dataclass
class _RegionPass:
    batch: rg.RegionBatch
    crops: list | None = None  # per-region (encoder cache, pyramid, sample cache) with RFP off


class Detector:
    """Holds weights and runs inference or a training step on single frames."""

    def __init__(self, cfg: PipelineConfig | None = None, params: dict | None = None):
        self.cfg = cfg or PipelineConfig()
        self.enc_cfg = self.cfg.encoder_config()
        self.anchors = rot.build_anchor_grid(self.cfg.a_gamma, self.cfg.a_beta)
        if params is None:
            self.params = init_params(self.cfg)
        else:
            self.params = dict(params)
            self._check_params()
        self.encoder_calls = 0
        self.region_encoder_calls = 0

    def _check_params(self) -> None:
        want = param_shapes(self.cfg)
        missing = sorted(set(want) - set(self.params))
        if missing:
            raise tc.WeightFormatError(f"weights lack tensors required by the config: {missing[:4]}")
        for name, shape in want.items():
            if tuple(self.params[name].shape) != tuple(shape):
                raise tc.WeightFormatError(f"tensor {name!r} has shape {tuple(self.params[name].shape)}, "
                                           f"config expects {tuple(shape)}")

    def reset_counters(self) -> None:
        self.encoder_calls = 0
        self.region_encoder_calls = 0

    # -- forward pieces ----------------------------------------------------

    def check_frame(self, frame: ImageFrame) -> None:
        hw = (frame.intrinsics.height, frame.intrinsics.width)
        if hw != self.cfg.input_hw:
            raise ResolutionError(f"frame is {hw[0]}x{hw[1]} but the config expects "
                                  f"{self.cfg.input_hw[0]}x{self.cfg.input_hw[1]}")

    def _encode(self, x: np.ndarray):
        self.encoder_calls += 1
        return bb.encoder_forward(x, self.params)

    def region_pass(self, x: np.ndarray, pyramid: bb.FeaturePyramid, centers: list[rg.RegionCenter],
                    sizes: list[float], timings: dict | None = None) -> _RegionPass:
        cfg = self.cfg
        if cfg.use_rfp:
            return _RegionPass(rg.propagate_region_features(pyramid.fused, centers, sizes, cfg.g))
        # baseline: crop the raw input around every center and encode it again
        c = cfg.crop_hw
        crops, feats = [], []
        g_coords = np.stack(np.meshgrid(np.linspace(-1, 1, cfg.g), np.linspace(-1, 1, cfg.g), indexing="xy"),
                            axis=-1).reshape(1, -1, 2).astype(x.dtype)
        h, w = x.shape[2:]
        for center, s in zip(centers, sizes):
            t0 = time.perf_counter()
            span = s * rg.Z_REF / center.depth_m  # cells
            t = np.linspace(-span / 2, span / 2, c)
            vv, uu = np.meshgrid(center.v + t, center.u + t, indexing="ij")
            px = cell_to_pixel(uu, bb.HEATMAP_STRIDE)
            py = cell_to_pixel(vv, bb.HEATMAP_STRIDE)
            coords = np.stack([2 * px / (w - 1) - 1, 2 * py / (h - 1) - 1], axis=-1).reshape(1, -1, 2)
            crop, _ = tc.grid_sample_bilinear_forward(x, coords.astype(x.dtype))
            crop = crop.reshape(1, x.shape[1], c, c)
            t1 = time.perf_counter()
            feats_c, enc_cache = self._encode(crop)
            self.region_encoder_calls += 1
            t2 = time.perf_counter()
            pyr = bb.fpn_forward(feats_c, self.params, cfg.use_fpn_heatmap)
            t3 = time.perf_counter()
            out, scache = tc.grid_sample_bilinear_forward(pyr.fused, g_coords)
            feats.append(out.reshape(cfg.fpn_channels, cfg.g, cfg.g))
            crops.append((enc_cache, pyr, scache))
            if timings is not None:
                timings["encoder"] += t2 - t1
                timings["fpn"] += t3 - t2
                timings["region"] += (t1 - t0) + (time.perf_counter() - t3)
        batch = rg.RegionBatch(np.stack(feats), list(centers), list(sizes))
        return _RegionPass(batch, crops)

    # -- inference ---------------------------------------------------------

    def infer(self, frame: ImageFrame, tta_scales: tuple[float, ...] = ()) -> Detection:
        """Grasps for one frame, sorted by score, after NMS."""
        cfg = self.cfg
        self.check_frame(frame)
        timings = dict.fromkeys(STAGES, 0.0)
        diag: dict = {}
        t = time.perf_counter()

        def lap(stage):
            nonlocal t
            now = time.perf_counter()
            timings[stage] += now - t
            t = now

        x = make_network_input(frame)[None]
        lap("input")
        feats, _ = self._encode(x)
        lap("encoder")
        pyramid = bb.fpn_forward(feats, self.params, cfg.use_fpn_heatmap)
        lap("fpn")
        hm = bb.heatmap_head(pyramid, self.params).values[0, 0]
        lap("heatmap")
        centers = rg.choose_centers(hm, frame.depth[0], cfg.k, cfg.heatmap_threshold, cfg.max_candidates)
        lap("region")
        grasps: list[GraspPose] = []
        for scale in (1.0,) + tuple(tta_scales):
            if not centers:
                break
            sizes = [cfg.base_s * scale] * len(centers)
            rp = self.region_pass(x, pyramid, centers, sizes, timings)
            if cfg.use_rfp:
                lap("region")
            else:
                t = time.perf_counter()  # region_pass already split its time across stages
            head = rot.rotation_head_forward(rp.batch, self.params, self.anchors)
            lap("rotation")
            decoded = rot.decode_grasps(head.heatmap, head.refinement, rp.batch, frame, self.anchors,
                                        cfg.score_thresh, diag)
            grasps.extend(dataclasses.replace(g, w=min(g.w + cfg.width_clearance, W_MAX)) for g in decoded)
            lap("decode")
        grasps.sort(key=lambda g: -g.score)
        grasps = rot.grasp_nms(grasps, cfg.nms_trans, math.radians(cfg.nms_rot_deg))
        lap("nms")
        return Detection(grasps, hm, centers, timings, diag)

    # -- training ----------------------------------------------------------

    def loss_and_grads(self, frame: ImageFrame, labels: list[GraspPose], rng: np.random.Generator,
                       need_grads: bool = True) -> tuple[dict[str, float], dict[str, np.ndarray] | None]:
        """Heatmap BCE + rotation-score BCE + refinement smooth-L1 for one frame.

        Training regions are picked from the ground-truth heatmap the same way
        inference picks them from the predicted one, with random region sizes.
        """
        cfg = self.cfg
        self.check_frame(frame)
        labels = reachable_labels(labels, frame)
        x = make_network_input(frame)[None]
        feats, enc_cache = self._encode(x)
        pyramid = bb.fpn_forward(feats, self.params, cfg.use_fpn_heatmap)
        heat = bb.heatmap_head(pyramid, self.params)
        target_hm, _ = bb.make_gt_heatmap(labels, frame.intrinsics, cfg.heatmap_hw)
        l_hm, hm_cache = tc.bce_loss_forward(heat.values, target_hm[None])

        losses = {"heatmap_loss": float(l_hm), "rotation_loss": 0.0, "refine_loss": 0.0}
        centers = rg.choose_centers(target_hm[0], frame.depth[0], cfg.k, cfg.heatmap_threshold,
                                    cfg.max_candidates) if labels else []
        rp = head = None
        if centers:
            sizes = [rg.sample_region_size(rng, True, cfg.base_s) for _ in centers]
            rp = self.region_pass(x, pyramid, centers, sizes)
            head = rot.rotation_head_forward(rp.batch, self.params, self.anchors)
            target = rot.make_gt_rotation(labels, centers, sizes, self.anchors, frame, strict=True)
            l_rot, rot_cache = tc.bce_loss_forward(head.heatmap.scores, target.scores)
            losses["rotation_loss"] = float(l_rot)
            pos = target.scores > 0.5
            if pos.any():
                pred = head.raw[..., 1:][pos].astype(np.float64)
                goal = rot.normalize_refinement(target.refine[pos])
                # theta has period pi, i.e. 2 in normalized units: regress to the nearest equivalent
                diff = pred[:, 0] - goal[:, 0]
                goal[:, 0] = pred[:, 0] - (np.mod(diff + 1.0, 2.0) - 1.0)
                l_ref, ref_cache = tc.smooth_l1_loss_forward(pred, goal, 0.1)
                losses["refine_loss"] = float(l_ref)
        if not need_grads:
            return losses, None

        grads: dict[str, np.ndarray] = {}
        dtype = next(iter(self.params.values())).dtype  # float32 in training, float64 in gradient checks

        def add(gs):
            for k, v in gs.items():
                grads[k] = grads[k] + v if k in grads else v

        dvalues = tc.bce_loss_backward(1.0, hm_cache).input
        g_head, dfused = bb.heatmap_head_backward(dvalues.astype(dtype), heat)
        add(g_head)
        if head is not None:
            dscores = tc.bce_loss_backward(1.0, rot_cache).input
            dref = np.zeros(head.raw[..., 1:].shape, np.float64)
            if pos.any():
                dref[pos] = tc.smooth_l1_loss_backward(1.0, ref_cache).input
            g_rot, dfeat = rot.rotation_head_backward(dscores.astype(dtype), dref.astype(dtype), head)
            add(g_rot)
            if cfg.use_rfp:
                dfused = dfused + rg.propagate_backward(dfeat, rp.batch)
            else:
                for r, (c_enc, c_pyr, c_s) in enumerate(rp.crops):
                    dcrop = tc.grid_sample_bilinear_backward(dfeat[r].reshape(1, cfg.fpn_channels, -1), c_s).input
                    g_fpn, dcf = bb.fpn_backward(dcrop, c_pyr)
                    add(g_fpn)
                    g_enc, _ = bb.encoder_backward(dcf, c_enc)
                    add(g_enc)
        g_fpn, dfeats = bb.fpn_backward(dfused, pyramid)
        add(g_fpn)
        g_enc, _ = bb.encoder_backward(dfeats, enc_cache)
        add(g_enc)
        for name, p in self.params.items():
            if name not in grads:
                grads[name] = np.zeros_like(p)
        return losses, {k: v.astype(self.params[k].dtype) for k, v in grads.items()}


def param_shapes(cfg: PipelineConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_params(cfg).items()}
