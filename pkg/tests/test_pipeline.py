import dataclasses
import math

import numpy as np
import pytest

from heatgrasp import evalkit as ek
from heatgrasp import pipeline as pl
from heatgrasp import rotation as rot
from heatgrasp import tensorcore as tc
from heatgrasp.geometry import default_intrinsics

INTR = default_intrinsics()


@pytest.fixture(scope="module")
def scene():
    return ek.gen_scene(42, 5)


@pytest.fixture(scope="module")
def frame(scene):
    return ek.render_frame(scene, INTR)


@pytest.fixture(scope="module")
def labels(scene):
    return ek.label_grasps(scene)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = pl.PipelineConfig(k=16, use_rfp=False, stage_channels=(8, 16, 32, 64))
        assert pl.PipelineConfig.from_dict(cfg.to_dict()) == cfg
        path = tmp_path / "c.json"
        import json
        path.write_text(json.dumps(cfg.to_dict()))
        assert pl.PipelineConfig.load(path) == cfg

    def test_hash(self):
        a = pl.PipelineConfig()
        assert a.config_hash() == pl.PipelineConfig().config_hash()
        assert a.config_hash() != pl.PipelineConfig(use_rfp=False).config_hash()
        assert len(a.config_hash()) == 16

    @pytest.mark.parametrize("kw", [{"heatmap_threshold": 1.5}, {"k": 0}, {"g": 1}, {"a_beta": 1},
                                    {"nms_rot_deg": 0}, {"width_clearance": -0.01}, {"base_s": 0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            pl.PipelineConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            pl.PipelineConfig.from_dict({"bogus": 1})

    def test_heatmap_extent(self):
        assert pl.PipelineConfig().heatmap_hw == (24, 24)


class TestParams:
    def test_deterministic(self):
        a, b = pl.init_params(pl.PipelineConfig(seed=3)), pl.init_params(pl.PipelineConfig(seed=3))
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        c = pl.init_params(pl.PipelineConfig(seed=4))
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_shapes(self):
        cfg = pl.PipelineConfig()
        assert {k: v.shape for k, v in pl.init_params(cfg).items()} == pl.param_shapes(cfg)

    def test_missing_tensor(self):
        params = pl.init_params(pl.PipelineConfig())
        params.pop(sorted(params)[0])
        with pytest.raises(tc.WeightFormatError):
            pl.Detector(pl.PipelineConfig(), params)

    def test_wrong_shape(self):
        params = pl.init_params(pl.PipelineConfig())
        name = sorted(params)[0]
        params[name] = np.zeros(params[name].shape + (1,), np.float32)
        with pytest.raises(tc.WeightFormatError, match="shape"):
            pl.Detector(pl.PipelineConfig(), params)


class TestInfer:
    def test_contract(self, frame):
        det = pl.Detector()
        out = det.infer(frame)
        assert det.encoder_calls == 1 and det.region_encoder_calls == 0
        assert out.heatmap.shape == (24, 24)
        assert set(out.timings) == set(pl.STAGES) and all(v >= 0 for v in out.timings.values())
        scores = [g.score for g in out.grasps]
        assert scores == sorted(scores, reverse=True)
        assert all(0 <= s <= 1 for s in scores)
        assert len(out.centers) <= det.cfg.k

    def test_deterministic(self, frame):
        a = pl.Detector().infer(frame).grasps
        b = pl.Detector().infer(frame).grasps
        assert a == b

    def test_nms_applied(self, frame):
        out = pl.Detector().infer(frame)
        assert rot.grasp_nms(out.grasps) == out.grasps

    def test_width_clearance(self, frame):
        det = pl.Detector(pl.PipelineConfig(width_clearance=0.0))
        wide = pl.Detector(pl.PipelineConfig(width_clearance=0.02), det.params)
        a, b = det.infer(frame).grasps, wide.infer(frame).grasps
        assert len(a) == len(b)
        key = lambda g: (g.x, g.y, g.z, g.theta, g.gamma, g.beta)
        widths = {key(g): g.w for g in a}
        for g in b:
            assert g.w == pytest.approx(min(widths[key(g)] + 0.02, 0.085))

    def test_rfp_off_reencodes_every_region(self, frame):
        on = pl.Detector()
        off = pl.Detector(pl.PipelineConfig(use_rfp=False), on.params)
        a, b = on.infer(frame), off.infer(frame)
        assert len(b.centers) == on.cfg.k
        assert off.region_encoder_calls == len(b.centers) and on.region_encoder_calls == 0
        assert a.centers == b.centers
        assert [g.score for g in a.grasps] != [g.score for g in b.grasps]

    def test_tta_adds_candidates(self, frame):
        det = pl.Detector()
        plain = det.infer(frame)
        det.reset_counters()
        tta = det.infer(frame, (0.75, 1.25))
        assert det.encoder_calls == 1
        assert len(tta.grasps) >= len(plain.grasps)

    def test_resolution_mismatch(self):
        small = ek.render_frame(ek.gen_scene(1, 2), default_intrinsics(64, 64))
        with pytest.raises(pl.ResolutionError):
            pl.Detector().infer(small)


class TestLabels:
    def test_reachable_within_offset(self, frame, labels):
        kept = pl.reachable_labels(labels, frame)
        assert 0 < len(kept) < len(labels)
        depth = frame.depth[0] / 1000.0
        for g in kept[:50]:
            assert g.z - depth[depth > 0].min() > -rot.OFFSET_D_MAX - 1e-9

    def test_training_labels_survive_snapping(self, frame, labels, scene):
        cfg = pl.PipelineConfig()
        reach = pl.reachable_labels(labels, frame)
        kept = pl.training_labels(labels, frame, scene, cfg)
        assert 0 < len(kept) <= len(reach) and {id(g) for g in kept} <= {id(g) for g in reach}
        anchors = rot.build_anchor_grid()
        snapped = [rot.snap_to_anchor(g, anchors, cfg.width_clearance) for g in kept]
        assert all(ek.check_grasps(snapped, scene).success(1.0))
        assert pl.training_labels(labels, frame, None, cfg) == reach


def directional_check(det, frame, labels, seed=0, eps=1e-5, n_dirs=3):
    """Worst relative error of the analytic gradient against central differences
    along random directions in parameter space, in float64."""
    # nonzero biases keep zero-padded crop pixels off the ReLU kink
    jitter = np.random.default_rng(7)
    det.params = {k: v.astype(np.float64) + (0.05 * jitter.standard_normal(v.shape) if k.endswith("bias") else 0)
                  for k, v in det.params.items()}
    total = lambda losses: sum(losses.values())
    _, grads = det.loss_and_grads(frame, labels, np.random.default_rng(seed))
    rng = np.random.default_rng(100 + seed)
    base = dict(det.params)
    errs = []
    for _ in range(n_dirs):
        direction = {k: rng.standard_normal(v.shape) for k, v in base.items()}
        norm = math.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
        direction = {k: d / norm for k, d in direction.items()}
        analytic = sum(float(np.sum(grads[k].astype(np.float64) * direction[k])) for k in base)
        vals = []
        for sign in (1, -1):
            det.params = {k: base[k] + sign * eps * direction[k] for k in base}
            vals.append(total(det.loss_and_grads(frame, labels, np.random.default_rng(seed), need_grads=False)[0]))
        det.params = base
        numeric = (vals[0] - vals[1]) / (2 * eps)
        errs.append(abs(analytic - numeric) / max(abs(numeric), 1e-8))
    return max(errs)


class TestTrainingLoss:
    def test_finite_and_complete(self, frame, labels, scene):
        det = pl.Detector()
        losses, grads = det.loss_and_grads(frame, pl.training_labels(labels, frame, scene), np.random.default_rng(0))
        assert set(losses) == {"heatmap_loss", "rotation_loss", "refine_loss"}
        assert all(math.isfinite(v) and v > 0 for v in losses.values())
        assert grads.keys() == det.params.keys()
        assert all(g.dtype == np.float32 and g.shape == det.params[k].shape for k, g in grads.items())

    def test_no_labels(self, frame):
        losses, grads = pl.Detector().loss_and_grads(frame, [], np.random.default_rng(0))
        assert losses["rotation_loss"] == 0 and losses["refine_loss"] == 0
        assert all(np.isfinite(g).all() for g in grads.values())

    @pytest.mark.parametrize("use_rfp", [True, False])
    def test_directional_derivative(self, frame, labels, scene, use_rfp):
        cfg = pl.PipelineConfig(use_rfp=use_rfp, k=4 if not use_rfp else 32)
        det = pl.Detector(cfg)
        assert directional_check(det, frame, pl.training_labels(labels, frame, scene, cfg)) < 1e-6

    def test_frame_mismatch(self, labels):
        small = ek.render_frame(ek.gen_scene(1, 2), default_intrinsics(64, 64))
        with pytest.raises(pl.ResolutionError):
            pl.Detector().loss_and_grads(small, labels, np.random.default_rng(0))


def test_detection_is_dataclass(frame):
    out = pl.Detector().infer(frame)
    assert dataclasses.is_dataclass(out)
