"""CSV reports and grayscale raster dumps of 2D fields."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .training import MetricsRecord


def write_history_csv(metrics: MetricsRecord, path) -> None:
    """Per-epoch training curves, one row per epoch."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "divergence"])
        for e, (tr, va, dv) in enumerate(
            zip(metrics.train_loss, metrics.val_loss, metrics.divergence)
        ):
            writer.writerow([e, f"{tr:.12e}", f"{va:.12e}", f"{dv:.12e}"])


def write_rollout_csv(metrics: MetricsRecord, path) -> None:
    """Per-rollout-step evaluation errors; header-only when empty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "relative_l2", "divergence"])
        for k, (err, dv) in enumerate(zip(metrics.step_error, metrics.step_divergence)):
            writer.writerow([k, f"{err:.12e}", f"{dv:.12e}"])


def _to_gray(plane: np.ndarray, lo: float, hi: float) -> Image.Image:
    span = hi - lo
    if span <= 0:
        data = np.zeros(plane.shape, dtype=np.uint8)
    else:
        data = np.clip((plane - lo) / span * 255.0, 0, 255).astype(np.uint8)
    return Image.fromarray(data, mode="L")


def save_triptych(prediction: np.ndarray, truth: np.ndarray, prefix) -> list[Path]:
    """Prediction, truth and absolute error as N x N grayscale PNGs.

    Prediction and truth share one intensity scale; the error panel is
    scaled by its own maximum (an all-zero raster when they coincide).
    """
    prediction = np.asarray(prediction, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if prediction.shape != truth.shape or prediction.ndim != 2:
        raise ValueError("triptych expects two equal-shape 2D arrays")
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    lo = float(min(prediction.min(), truth.min()))
    hi = float(max(prediction.max(), truth.max()))
    error = np.abs(prediction - truth)
    paths = []
    for tag, plane, bounds in (
        ("prediction", prediction, (lo, hi)),
        ("truth", truth, (lo, hi)),
        ("error", error, (0.0, float(error.max()))),
    ):
        path = prefix.with_name(prefix.name + f"_{tag}.png")
        _to_gray(plane, *bounds).save(path)
        paths.append(path)
    return paths
