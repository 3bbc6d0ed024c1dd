"""Endpoint / step-wise errors for toy runs and image statistics for samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .denoisers import Denoiser
from .errors import UndefinedMetricError, ValidationError
from .sampler import Trajectory

# Mean HSV saturation of the ImageNet test set, as reported for real images.
# Kept as a reference constant; it is not recomputed here.
IMAGENET_SATURATION = 0.32

ENDPOINT_MODES = ("nearest-point", "matched-reference")


def _stable(trajectories) -> list[Trajectory]:
    return [t for t in trajectories if not t.unstable]


def instability_rate(trajectories) -> float:
    trajectories = list(trajectories)
    if not trajectories:
        raise UndefinedMetricError("no trajectories")
    return sum(t.unstable for t in trajectories) / len(trajectories)


def endpoint_errors(trajectories, dataset: Dataset | None = None, mode: str = "nearest-point",
                    reference=None) -> np.ndarray:
    """Per-trajectory endpoint error of the stable trajectories.

    ``nearest-point``: distance to the closest dataset point.
    ``matched-reference``: distance to the endpoint of the reference
    trajectory with the same seed (typically an optimal-denoiser run).
    """
    stable = _stable(trajectories)
    if not stable:
        raise UndefinedMetricError("no stable trajectories to evaluate")
    ends = np.stack([t.endpoint for t in stable])
    if mode == "nearest-point":
        if dataset is None:
            raise ValidationError("nearest-point mode needs the dataset")
        return dataset.nearest(ends)[1]
    if mode == "matched-reference":
        if reference is None:
            raise ValidationError("matched-reference mode needs reference trajectories")
        by_seed = {t.seed: t for t in reference}
        missing = [t.seed for t in stable if t.seed not in by_seed]
        if missing:
            raise ValidationError(f"no reference trajectory for seeds {missing[:3]}")
        ref = np.stack([by_seed[t.seed].endpoint for t in stable])
        return np.linalg.norm(ends - ref, axis=-1)
    raise ValidationError(f"unknown endpoint mode {mode!r}; expected one of {ENDPOINT_MODES}")


def endpoint_error(trajectories, dataset: Dataset | None = None, mode: str = "nearest-point",
                   reference=None) -> float:
    """Mean endpoint error over stable trajectories (see :func:`endpoint_errors`)."""
    return float(np.mean(endpoint_errors(trajectories, dataset, mode, reference)))


def stepwise_errors(trajectories, oracle: Denoiser) -> np.ndarray:
    """``||eps~(x_i, sigma_i) - eps*(x_i, sigma_i)||`` per trajectory and step, final step excluded.

    The guided prediction is recovered from the recorded target as
    ``(x_i - y_hat_i) / sigma_i``. Steps where no prediction was recorded
    (after a trajectory froze) are NaN. Trajectories must share one schedule.
    """
    trajectories = list(trajectories)
    n = len(trajectories[0]) - 1
    sig = trajectories[0].sigma[:n]
    x = np.stack([t.x[:n] for t in trajectories], axis=1)
    y = np.stack([t.y_hat[:n] for t in trajectories], axis=1)
    cid = None
    if oracle.conditional:
        cid = np.array([t.class_id for t in trajectories], dtype=np.int64)
    out = np.full((len(trajectories), n), np.nan)
    for i in range(n):
        eps = (x[i] - y[i]) / sig[i]
        err = np.linalg.norm(eps - oracle.predict_noise(x[i], sig[i], cid), axis=-1)
        out[:, i] = np.where(np.all(np.isfinite(y[i]), axis=-1), err, np.nan)
    return out


def stepwise_predictor_error(trajectory: Trajectory, oracle: Denoiser) -> np.ndarray:
    """Step-wise error curve of a single trajectory (see :func:`stepwise_errors`)."""
    return stepwise_errors([trajectory], oracle)[0]


@dataclass
class TrajectoryReport:
    stepwise_error: np.ndarray | None
    endpoint_error: float
    endpoint_stderr: float
    instability_rate: float
    n: int
    n_unstable: int


def trajectory_report(trajectories, dataset: Dataset | None = None, oracle: Denoiser | None = None,
                      mode: str = "nearest-point", reference=None) -> TrajectoryReport:
    """Summary of an ensemble; unstable trajectories only enter the instability rate."""
    trajectories = list(trajectories)
    rate = instability_rate(trajectories)
    n_unstable = sum(t.unstable for t in trajectories)
    stable = _stable(trajectories)
    if stable:
        errs = endpoint_errors(stable, dataset, mode, reference)
        err = float(errs.mean())
        se = float(errs.std(ddof=1) / np.sqrt(len(errs))) if len(errs) > 1 else float("nan")
    else:
        err = se = float("nan")
    curve = None
    if oracle is not None and stable:
        curve = np.nanmean(stepwise_errors(stable, oracle), axis=0)
    return TrajectoryReport(curve, err, se, rate, len(trajectories), n_unstable)


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValidationError("empty image")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")
    return img


def saturation(image) -> float:
    """Mean HSV saturation ``(max - min) / max`` of an ``H x W x 3`` RGB image (0 where max is 0)."""
    img = _check_image(image)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValidationError(f"saturation needs an H x W x 3 image, got shape {img.shape}")
    hi, lo = img.max(axis=-1), img.min(axis=-1)
    s = np.where(hi > 0, (hi - lo) / np.where(hi > 0, hi, 1.0), 0.0)
    return float(s.mean())


def luma(image) -> np.ndarray:
    """Rec.601 luma; greyscale (2-D) input is returned unchanged."""
    img = _check_image(image)
    if img.ndim == 2:
        return img
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValidationError(f"expected H x W or H x W x 3 image, got shape {img.shape}")
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    # 0.299 r + 0.587 g + 0.114 b, arranged to be exact when r == g == b
    return r + 0.587 * (g - r) + 0.114 * (b - r)


def rms_contrast(image) -> float:
    """Population standard deviation of the greyscale intensities."""
    y = luma(image)
    m = y.mean()
    # Second pass removes the rounding error of the first mean, so a constant image gives exactly 0.
    m = m + (y - m).mean()
    return float(np.sqrt(np.mean((y - m) ** 2)))


@dataclass(frozen=True)
class ImageStats:
    saturation: float
    contrast: float


def image_stats(image) -> ImageStats:
    img = _check_image(image)
    sat = saturation(img) if img.ndim == 3 else 0.0
    return ImageStats(sat, rms_contrast(img))
