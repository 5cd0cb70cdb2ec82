"""Deterministic single-frame SGD training with a per-epoch CSV loss log."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .dataset import Sample
from .pipeline import Detector, training_labels

LOG_FIELDS = ("epoch", "heatmap_loss", "rotation_loss", "refine_loss")


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0  # global gradient norm cap, 0 disables
    max_steps: int | None = None  # stop after this many updates (for short determinism runs)
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")


def total_loss(row: dict) -> float:
    return float(row["heatmap_loss"] + row["rotation_loss"] + row["refine_loss"])


def clip_gradients(grads: dict, max_norm: float) -> dict:
    if max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = np.float32(max_norm / norm)
    return {k: g * scale for k, g in grads.items()}


def _mean_row(epoch: int, rows: list[dict]) -> dict:
    out = {"epoch": epoch}
    for key in LOG_FIELDS[1:]:
        out[key] = float(np.mean([r[key] for r in rows])) if rows else 0.0
    return out


def _check_finite(losses: dict, where: str) -> None:
    bad = [k for k, v in losses.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite {', '.join(bad)} at {where}")


class LossLog:
    """CSV writer that flushes every row so a crash keeps the partial log."""

    def __init__(self, path=None):
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = open(Path(path), "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            self._writer.writeheader()
            self._fh.flush()

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in LOG_FIELDS})
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def sample_labels(det: Detector, samples: list[Sample]) -> list[list]:
    """Training labels per sample, filtered once up front."""
    return [training_labels(s.labels, s.frame, s.scene, det.cfg) for s in samples]


def evaluate_losses(det: Detector, samples: list[Sample], rng: np.random.Generator, labels=None) -> dict:
    labels = labels if labels is not None else sample_labels(det, samples)
    rows = [det.loss_and_grads(s.frame, lab, rng, need_grads=False)[0] for s, lab in zip(samples, labels)]
    return _mean_row(0, rows)


def train(det: Detector, samples: list[Sample], cfg: TrainConfig, log_path=None, progress=None) -> list[dict]:
    """Train ``det`` in place and return the loss rows.

    With at least one epoch the log starts with an ``epoch 0`` row holding the
    losses of the initial weights over the training set; each later row is
    the mean over that epoch's updates. Zero epochs leave the weights and the
    log (header only) untouched.
    """
    log = LossLog(log_path)
    try:
        if cfg.epochs == 0 or not samples:
            return log.rows
        rng = np.random.default_rng(cfg.seed)
        labels = sample_labels(det, samples)
        first = evaluate_losses(det, samples, rng, labels)
        _check_finite(first, "initialization")
        log.append(first)
        velocity: dict = {}
        steps = 0
        for epoch in range(1, cfg.epochs + 1):
            rows = []
            for idx in rng.permutation(len(samples)):
                s = samples[idx]
                losses, grads = det.loss_and_grads(s.frame, labels[idx], rng)
                _check_finite(losses, f"epoch {epoch}, sample {s.name}")
                try:
                    det.params, velocity = tc.sgd_step(det.params, clip_gradients(grads, cfg.clip_norm), cfg.lr,
                                                       cfg.momentum, velocity)
                except FloatingPointError as err:
                    raise TrainingDiverged(str(err)) from err
                rows.append(losses)
                steps += 1
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
            row = _mean_row(epoch, rows)
            log.append(row)
            if progress:
                progress(row)
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        return log.rows
    finally:
        log.close()
