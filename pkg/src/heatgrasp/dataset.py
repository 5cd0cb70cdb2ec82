"""Scene directories on disk: ``scene.json``, ``depth.pgm``, ``rgb.ppm`` and ``labels.json``."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

from . import evalkit as ek
from . import imageio
from .geometry import CameraIntrinsics, GraspPose, ImageFrame, default_intrinsics
from .rotation import grasps_to_json, load_grasps


@dataclass
class Sample:
    name: str
    frame: ImageFrame
    labels: list[GraspPose]
    scene: ek.SceneModel | None = None


def scene_dir_name(i: int) -> str:
    return f"scene_{i:04d}"


def write_scene(directory, scene: ek.SceneModel, intr: CameraIntrinsics) -> None:
    """Render, label and write one scene; the four files are byte-deterministic."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    scene.save(directory / imageio.SCENE_NAME, intr)
    imageio.save_frame(directory, ek.render_frame(scene, intr))
    (directory / imageio.LABELS_NAME).write_text(grasps_to_json(ek.label_grasps(scene), indent=None))


def generate(out, n_scenes: int, n_objects: int, seed: int, intr: CameraIntrinsics | None = None,
             progress=None) -> list[Path]:
    """``n_scenes`` scenes seeded ``seed + i`` under ``out/scene_XXXX``."""
    if n_scenes < 0:
        raise ValueError("n_scenes must be >= 0")
    intr = intr or default_intrinsics()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i in range(n_scenes):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ek.scene.PlacementWarning)
            scene = ek.gen_scene(seed + i, n_objects)
        if caught and progress:
            progress(f"scene {i}: {caught[0].message}")
        d = out / scene_dir_name(i)
        write_scene(d, scene, intr)
        dirs.append(d)
    return dirs


def scene_dirs(root) -> list[Path]:
    """Sorted sub-directories of ``root`` that hold a frame."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if (p / imageio.DEPTH_NAME).exists())


def load_sample(directory) -> Sample:
    directory = Path(directory)
    frame = imageio.load_frame(directory)
    labels_file = directory / imageio.LABELS_NAME
    labels = load_grasps(labels_file) if labels_file.exists() else []
    scene_file = directory / imageio.SCENE_NAME
    scene = ek.SceneModel.from_dict(json.loads(scene_file.read_text())) if scene_file.exists() else None
    return Sample(directory.name, frame, labels, scene)


def load_samples(root) -> list[Sample]:
    return [load_sample(d) for d in scene_dirs(root)]
