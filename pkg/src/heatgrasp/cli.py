"""Command-line entry point: ``heatgrasp {gen-data,train,infer,eval,bench}``.

Exit codes: 0 ok, 2 unwritable or missing path, 3 training produced a NaN,
4 corrupt weight file, 5 frame resolution does not match the config.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import dataset, imageio
from . import evalkit as ek
from . import tensorcore as tc
from .pipeline import Detector, PipelineConfig, ResolutionError
from .rotation import grasps_to_json, load_grasps

EXIT_PATH = 2
EXIT_NAN = 3
EXIT_WEIGHTS = 4
EXIT_RESOLUTION = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _writable_file(path) -> Path:
    """Create the parent directory and probe that ``path`` can be written."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "ab"):
            pass
    except OSError as err:
        raise CliError(EXIT_PATH, f"cannot write {path}: {err.strerror or err}") from err
    return path


def _writable_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as err:
        raise CliError(EXIT_PATH, f"cannot write to {path}: {err.strerror or err}") from err
    return path


def _sidecar(weights) -> Path:
    return Path(str(weights) + ".config.json")


def _load_config(args, weights=None) -> PipelineConfig:
    if getattr(args, "config", None):
        return PipelineConfig.load(args.config)
    if weights is not None and _sidecar(weights).exists():
        return PipelineConfig.load(_sidecar(weights))
    return PipelineConfig()


def _load_detector(args, **overrides) -> Detector:
    cfg = _load_config(args, args.weights)
    if overrides:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), **overrides})
    try:
        params = tc.load_weights(args.weights)
    except FileNotFoundError as err:
        raise CliError(EXIT_PATH, f"weight file {args.weights} not found") from err
    except (tc.WeightFormatError, ValueError) as err:
        raise CliError(EXIT_WEIGHTS, f"corrupt weight file {args.weights}: {err}") from err
    try:
        return Detector(cfg, params)
    except tc.WeightFormatError as err:
        raise CliError(EXIT_WEIGHTS, f"weight file {args.weights} does not fit the config: {err}") from err


def _load_frame(path):
    try:
        return imageio.load_frame(path)
    except FileNotFoundError as err:
        raise CliError(EXIT_PATH, f"no frame in {path}: {err}") from err


# -- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _writable_dir(args.out)
    dirs = dataset.generate(out, args.scenes, args.objects, args.seed, progress=_log)
    _log(f"wrote {len(dirs)} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    from . import plots, training

    out = _writable_file(args.out)
    log_path = _writable_file(args.log or out.with_suffix(".loss.csv"))
    plot_path = None if args.no_plot else _writable_file(args.plot or out.with_suffix(".loss.png"))
    cfg = _load_config(args)
    if args.seed is not None:
        cfg = PipelineConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    try:
        samples = dataset.load_samples(args.data)
    except FileNotFoundError as err:
        raise CliError(EXIT_PATH, str(err)) from err
    det = Detector(cfg)
    tcfg = training.TrainConfig(epochs=args.epochs, lr=args.lr, momentum=args.momentum, clip_norm=args.clip,
                                max_steps=args.steps, seed=cfg.seed)

    def report(row):
        _log(f"epoch {row['epoch']:3d}  total {training.total_loss(row):.4f}  heatmap {row['heatmap_loss']:.4f}  "
             f"rotation {row['rotation_loss']:.4f}  refine {row['refine_loss']:.4f}")

    try:
        rows = training.train(det, samples, tcfg, log_path, progress=report)
    except training.TrainingDiverged as err:
        _log(f"training diverged: {err}; partial log kept in {log_path}")
        return EXIT_NAN
    tc.save_weights(out, det.params)
    _sidecar(out).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    if plot_path is not None:
        plots.loss_figure(rows, plot_path)
    if len(rows) > 1:
        _log(f"total loss {training.total_loss(rows[0]):.4f} -> {training.total_loss(rows[-1]):.4f}")
    _log(f"weights written to {out}")
    return 0


def _grasp_document(det: Detector, frame_dir: Path, tta_scales) -> tuple[dict, object]:
    frame = _load_frame(frame_dir)
    det.reset_counters()
    try:
        result = det.infer(frame, tuple(tta_scales or ()))
    except ResolutionError as err:
        raise CliError(EXIT_RESOLUTION, f"{frame_dir}: {err}") from err
    meta = {
        "config_hash": det.cfg.config_hash(),
        "frame_id": frame_dir.name,
        "timings_ms": {k: v * 1000.0 for k, v in result.timings.items()},
        "total_ms": sum(result.timings.values()) * 1000.0,
        "encoder_calls": det.encoder_calls,
        "region_encoder_calls": det.region_encoder_calls,
        "n_regions": len(result.centers),
    }
    grasps = json.loads(grasps_to_json(result.grasps))
    return {"metadata": meta, "grasps": grasps}, result


def cmd_infer(args) -> int:
    det = _load_detector(args)
    frame_dir = Path(args.frame)
    if args.batch:
        out = _writable_dir(args.out)
        try:
            dirs = dataset.scene_dirs(frame_dir)
        except FileNotFoundError as err:
            raise CliError(EXIT_PATH, str(err)) from err
        for d in dirs:
            doc, _ = _grasp_document(det, d, args.tta_scales)
            (out / f"{d.name}.json").write_text(json.dumps(doc, indent=1))
        _log(f"wrote {len(dirs)} grasp files to {out}")
        return 0
    out = _writable_file(args.out)
    hm_path = _writable_file(args.dump_heatmap) if args.dump_heatmap else None
    doc, result = _grasp_document(det, frame_dir, args.tta_scales)
    out.write_text(json.dumps(doc, indent=1))
    if hm_path is not None:
        imageio.write_heatmap_ppm(hm_path, result.heatmap)
    above = sum(g.score > 0.5 for g in result.grasps)
    _log(f"{len(result.grasps)} grasps ({above} above 0.5) in {doc['metadata']['total_ms']:.1f} ms -> {out}")
    return 0


def evaluate_dirs(grasps_dir, scenes_dir, nms_trans: float = 0.03, nms_rot_deg: float = 30.0) -> dict:
    """Per-scene AP for every ``<scene>.json`` in ``grasps_dir`` with a matching scene model."""
    grasps_dir, scenes_dir = Path(grasps_dir), Path(scenes_dir)
    if not grasps_dir.is_dir():
        raise FileNotFoundError(f"{grasps_dir} is not a directory")
    per_scene, skipped = {}, []
    for f in sorted(grasps_dir.glob("*.json")):
        scene_file = scenes_dir / f.stem / imageio.SCENE_NAME
        if not scene_file.exists():
            skipped.append({"grasp_file": f.name, "reason": "no matching scene"})
            continue
        scene = ek.SceneModel.from_dict(json.loads(scene_file.read_text()))
        try:
            grasps = load_grasps(f)
        except (ValueError, KeyError, TypeError) as err:
            skipped.append({"grasp_file": f.name, "reason": f"unreadable: {err}"})
            continue
        per_scene[f.stem] = ek.evaluate_scene(grasps, scene, nms_trans, math.radians(nms_rot_deg))
    return {"per_scene": per_scene, "map": ek.map_over_scenes([r["ap"] for r in per_scene.values()]), "skipped": skipped,
            "n_scenes": len(per_scene)}


def cmd_eval(args) -> int:
    from . import plots

    out = _writable_file(args.out)
    plot_path = None if args.no_plot else _writable_file(args.plot or out.with_suffix(".png"))
    try:
        report = evaluate_dirs(args.grasps_dir, args.scenes_dir)
    except FileNotFoundError as err:
        raise CliError(EXIT_PATH, str(err)) from err
    out.write_text(json.dumps(report, indent=1, sort_keys=True))
    if plot_path is not None:
        plots.ap_figure(report, plot_path)
    _log(f"mAP {report['map']:.4f} over {report['n_scenes']} scenes, {len(report['skipped'])} skipped")
    return 0


def cmd_bench(args) -> int:
    from . import bench, plots

    out = _writable_file(args.out) if args.out else None
    plot_path = _writable_file(args.plot) if args.plot else None
    overrides = {"use_rfp": False} if args.no_rfp else {}
    if args.weights:
        det = _load_detector(args, **overrides)
    else:
        cfg = _load_config(args)
        det = Detector(PipelineConfig.from_dict({**cfg.to_dict(), **overrides}))
    frames = dataset.load_samples(args.data) if args.data else None
    try:
        report = bench.run_bench(det, args.frames, args.threads, frame_list=[s.frame for s in frames or []] or None)
    except ResolutionError as err:
        raise CliError(EXIT_RESOLUTION, str(err)) from err
    for stage, st in report["stages"].items():
        print(f"{stage:9s} mean {st['mean_ms']:8.2f}  median {st['median_ms']:8.2f}  p95 {st['p95_ms']:8.2f} ms")
    e = report["end_to_end"]
    print(f"{'total':9s} mean {e['mean_ms']:8.2f}  median {e['median_ms']:8.2f}  p95 {e['p95_ms']:8.2f} ms  "
          f"(rfp {'on' if det.cfg.use_rfp else 'off'}, encoder runs per frame: {report['scene_encoder_calls']:g} scene, "
          f"{report['region_encoder_calls']:g} region)")
    if out is not None:
        out.write_text(json.dumps(report, indent=1))
    if plot_path is not None:
        plots.latency_figure(report, plot_path)
    return 0


# -- parser ----------------------------------------------------------------

def _frames_arg(value: str) -> int:
    n = int(value)
    if n < 10:
        raise argparse.ArgumentTypeError("need at least 10 frames")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heatgrasp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render and label synthetic scenes")
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--objects", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated data directory")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--clip", type=float, default=5.0, help="global gradient norm cap, 0 disables")
    t.add_argument("--steps", type=int, default=None, help="stop after this many updates")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.add_argument("--config", help="PipelineConfig JSON")
    t.add_argument("--out", required=True, help="weights file (.e3gw)")
    t.add_argument("--log", help="loss CSV (default: next to the weights)")
    t.add_argument("--plot", help="loss figure PNG (default: next to the weights)")
    t.add_argument("--no-plot", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="detect grasps in one frame directory")
    i.add_argument("--weights", required=True)
    i.add_argument("--frame", required=True, help="directory holding depth.pgm and rgb.ppm")
    i.add_argument("--out", required=True)
    i.add_argument("--config", help="PipelineConfig JSON (default: the weights' sidecar, else defaults)")
    i.add_argument("--dump-heatmap", help="write the location heatmap as a PPM")
    i.add_argument("--tta-scales", type=float, nargs="*", default=[], help="extra region-size multipliers")
    i.add_argument("--batch", action="store_true",
                   help="treat --frame as a data directory and write one <scene>.json per frame into --out")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="AP of grasp files against scene models")
    e.add_argument("--grasps-dir", required=True)
    e.add_argument("--scenes-dir", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--plot", help="AP figure PNG (default: next to the report)")
    e.add_argument("--no-plot", action="store_true")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="per-stage latency")
    b.add_argument("--weights", help="weights file (default: seeded initialization)")
    b.add_argument("--config")
    b.add_argument("--frames", type=_frames_arg, default=20)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--no-rfp", action="store_true", help="re-encode every region crop")
    b.add_argument("--data", help="take frames from a data directory instead of rendering")
    b.add_argument("--out", help="JSON report")
    b.add_argument("--plot", help="latency figure PNG")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        _log(f"error: {err}")
        return err.code


if __name__ == "__main__":
    sys.exit(main())
