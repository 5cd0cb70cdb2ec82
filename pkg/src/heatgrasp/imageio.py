"""Netpbm frame files: 16-bit PGM depth (millimeters) and 8-bit PPM color."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, ImageFrame, default_intrinsics

DEPTH_NAME = "depth.pgm"
RGB_NAME = "rgb.ppm"
SCENE_NAME = "scene.json"
LABELS_NAME = "labels.json"


def write_depth_pgm(path, depth_mm: np.ndarray) -> None:
    """(H, W) or (1, H, W) depth in mm, rounded and clipped to uint16."""
    d = np.asarray(depth_mm, dtype=np.float64).reshape(np.shape(depth_mm)[-2:])
    Image.fromarray(np.clip(np.round(d), 0, 65535).astype(np.uint16)).save(path, format="PPM")


def read_depth_pgm(path) -> np.ndarray:
    """(1, H, W) float32 millimeters."""
    with Image.open(path) as im:
        if im.mode not in ("I;16", "I", "L"):
            raise ValueError(f"{path}: expected a grayscale PGM, got mode {im.mode}")
        return np.asarray(im, dtype=np.float32)[None].copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_rgb_ppm(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(to_uint8(rgb)), mode="RGB").save(path, format="PPM")


def read_rgb_ppm(path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        return (np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def write_heatmap_ppm(path, values: np.ndarray) -> None:
    """Grayscale PPM of a heatmap in [0, 1], same extents as the map."""
    v = np.asarray(values, dtype=np.float64).reshape(np.shape(values)[-2:])
    write_rgb_ppm(path, np.repeat(v[None], 3, axis=0))


def save_frame(directory, frame: ImageFrame) -> None:
    directory = Path(directory)
    write_depth_pgm(directory / DEPTH_NAME, frame.depth)
    write_rgb_ppm(directory / RGB_NAME, frame.rgb)


def load_frame(directory, intrinsics: CameraIntrinsics | None = None) -> ImageFrame:
    """Frame from ``depth.pgm`` + ``rgb.ppm``.

    Intrinsics come from the argument, else from ``scene.json`` when it
    carries them, else the default camera for the image size.
    """
    directory = Path(directory)
    depth = read_depth_pgm(directory / DEPTH_NAME)
    rgb = read_rgb_ppm(directory / RGB_NAME)
    if rgb.shape[1:] != depth.shape[1:]:
        raise ValueError(f"{directory}: rgb {rgb.shape[1:]} and depth {depth.shape[1:]} extents differ")
    if intrinsics is None:
        scene_file = directory / SCENE_NAME
        if scene_file.exists():
            meta = json.loads(scene_file.read_text())
            if "intrinsics" in meta:
                intrinsics = CameraIntrinsics.from_dict(meta["intrinsics"])
    if intrinsics is None:
        intrinsics = default_intrinsics(depth.shape[2], depth.shape[1])
    return ImageFrame(rgb, depth, intrinsics)
