"""Latency harness: warm-up, then per-stage and end-to-end statistics in milliseconds."""

from __future__ import annotations

import platform
import time
import warnings

import numpy as np
from threadpoolctl import threadpool_limits

from . import evalkit as ek
from .geometry import ImageFrame, default_intrinsics
from .pipeline import STAGES, Detector

WARMUP = 5
MIN_FRAMES = 10


def summarize_ms(samples_s) -> dict:
    ms = np.asarray(samples_s, dtype=np.float64) * 1000.0
    return {"mean_ms": float(ms.mean()), "median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95))}


def synthetic_frames(n: int, hw: tuple[int, int], seed: int = 0, n_objects: int = 5) -> list[ImageFrame]:
    """Rendered scenes seeded ``seed + i`` at the detector's input size."""
    intr = default_intrinsics(hw[1], hw[0])
    frames = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ek.scene.PlacementWarning)
        for i in range(n):
            frames.append(ek.render_frame(ek.gen_scene(seed + i, n_objects), intr))
    return frames


def run_bench(det: Detector, frames: int = 20, threads: int = 1, seed: int = 0,
              frame_list: list[ImageFrame] | None = None) -> dict:
    """Time ``frames`` inferences after ``WARMUP`` untimed ones.

    Frames cycle through ``frame_list`` (or freshly rendered scenes) so the
    candidate count varies as it would on real input.
    """
    if frames < MIN_FRAMES:
        raise ValueError(f"need at least {MIN_FRAMES} frames, got {frames}")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    pool = frame_list or synthetic_frames(min(frames, 20), det.cfg.input_hw, seed)
    per_stage = {s: [] for s in STAGES}
    e2e = []
    scene_calls, region_calls = [], []
    with threadpool_limits(limits=threads):
        for n in range(WARMUP + frames):
            frame = pool[n % len(pool)]
            det.reset_counters()
            t0 = time.perf_counter()
            out = det.infer(frame)
            dt = time.perf_counter() - t0
            if n < WARMUP:
                continue
            e2e.append(dt)
            # encoder_calls counts every encoder pass, region re-encodes included
            scene_calls.append(det.encoder_calls - det.region_encoder_calls)
            region_calls.append(det.region_encoder_calls)
            for s in STAGES:
                per_stage[s].append(out.timings[s])
    return {
        "frames": frames,
        "warmup": WARMUP,
        "threads": threads,
        "use_rfp": det.cfg.use_rfp,
        "input_hw": list(det.cfg.input_hw),
        "scene_encoder_calls": float(np.mean(scene_calls)),
        "region_encoder_calls": float(np.mean(region_calls)),
        "stages": {s: summarize_ms(per_stage[s]) for s in STAGES},
        "end_to_end": summarize_ms(e2e),
        "machine": machine_info(),
    }


def machine_info() -> dict:
    return {"processor": platform.processor() or platform.machine(), "python": platform.python_version(),
            "numpy": np.__version__}
