"""Sliding-window guidance on grid-structured data.

The negative prediction is built by running the positive predictor on
``N = m^2`` overlapping ``k x l`` crops placed with a fixed stride, pasting
each crop prediction back at its source position and averaging cells covered
by several windows. Because each crop only sees its own window, the negative
has no access to dependencies longer than the window.

The masked variant applies the guidance correction only on cells covered by
at least two windows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .data import Dataset, GridShape
from .denoisers import Denoiser, _as_input, _check_sigma, make_denoiser
from .errors import DegenerateMaskWarning, IncompatibleDenoiserError, PlanError, ShapeError, ValidationError
from .guidance import GuidanceRule, GuidanceTerm


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.height), slice(self.left, self.left + self.width)

    def fits(self, shape: GridShape) -> bool:
        return (self.top >= 0 and self.left >= 0 and self.height >= 1 and self.width >= 1
                and self.top + self.height <= shape.H and self.left + self.width <= shape.W)


@dataclass(frozen=True)
class WindowPlan:
    """Placement of ``N = m^2`` crops of size ``k x l`` on a grid."""

    shape: GridShape
    k: int
    l: int
    strides: tuple[int, int]
    rects: tuple[Rect, ...]

    @property
    def N(self) -> int:
        return len(self.rects)

    @property
    def stride(self) -> int:
        return self.strides[0]

    @property
    def overlap_ratio(self) -> float:
        """``1 - s/k`` along rows."""
        return 1.0 - self.strides[0] / self.k

    @property
    def overlap_ratios(self) -> tuple[float, float]:
        return 1.0 - self.strides[0] / self.k, 1.0 - self.strides[1] / self.l

    @cached_property
    def counts(self) -> np.ndarray:
        """Number of windows covering each cell."""
        counts = np.zeros((self.shape.H, self.shape.W), dtype=np.int64)
        for r in self.rects:
            counts[r.slices()] += 1
        counts.setflags(write=False)
        return counts


def _axis_stride(size: int, k: int, m: int, axis: str) -> int:
    if m == 1:
        if k != size:
            raise PlanError(f"a single window must cover the full {axis} ({size}), got crop {k}")
        return k
    if (size - k) % (m - 1):
        raise PlanError(f"non-integral stride along {axis}: ({size} - {k}) / ({m} - 1)")
    return (size - k) // (m - 1)


def plan_windows(shape: GridShape, k: int, N: int, l: int | None = None) -> WindowPlan:
    """Place ``N`` windows of ``k x l`` cells (``l`` defaults to ``k``).

    Windows sit at offsets ``i * s`` for ``i in 0..m-1`` per axis with
    ``s = (H - k) / (m - 1)``. A stride that is not an integer is an error;
    it is never rounded.
    """
    l = k if l is None else l
    m = math.isqrt(N) if N >= 1 else 0
    if N < 1 or m * m != N:
        raise PlanError(f"number of windows must be a perfect square, got N={N}")
    if not (1 <= k <= shape.H and 1 <= l <= shape.W):
        raise PlanError(f"crop {k}x{l} does not fit grid {shape.H}x{shape.W}")
    sh = _axis_stride(shape.H, k, m, "height")
    sw = _axis_stride(shape.W, l, m, "width")
    rects = tuple(Rect(i * sh, j * sw, k, l) for i in range(m) for j in range(m))
    return WindowPlan(shape, k, l, (sh, sw), rects)


@dataclass(frozen=True)
class OverlapField:
    counts: np.ndarray
    mask: np.ndarray

    def flat_mask(self, channels: int = 1) -> np.ndarray:
        """Mask expanded over channels and flattened to vector length."""
        return np.repeat(self.mask.reshape(-1), channels).astype(np.float64)


def overlap_field(plan: WindowPlan) -> OverlapField:
    counts = plan.counts.copy()
    if np.any(counts < 1):
        raise PlanError("windows leave cells uncovered")
    return OverlapField(counts, (counts >= 2).astype(np.int64))


def crop_dataset(dataset: Dataset, rect: Rect) -> Dataset:
    if dataset.shape is None:
        raise ValidationError("dataset has no grid shape")
    if not rect.fits(dataset.shape):
        raise ValidationError(f"{rect} lies outside grid {dataset.shape}")
    rows, cols = rect.slices()
    crops = dataset.shape.unflatten(dataset.points)[:, rows, cols, :]
    shape = GridShape(rect.height, rect.width, dataset.shape.channels)
    return Dataset(shape.flatten(crops), dataset.labels, shape)


def crop_restricted_denoiser(dataset: Dataset, rect: Rect, delta: float = 0.0,
                             conditional: bool = False) -> Denoiser:
    """Denoiser of the dataset cropped to ``rect``; it sees nothing outside the window."""
    return make_denoiser(crop_dataset(dataset, rect), delta, conditional)


class GridDenoiser(Denoiser):
    """Optimal or error-prone denoiser of a grid dataset that can also run on crops.

    :meth:`crop` returns the crop-restricted denoiser for a window; crop
    denoisers are built once per window and reused.
    """

    def __init__(self, dataset: Dataset, delta: float = 0.0, conditional: bool = False):
        if dataset.shape is None:
            raise ValidationError("GridDenoiser needs a dataset with a grid shape")
        self.dataset = dataset
        self.shape = dataset.shape
        self.delta = float(delta)
        self.conditional = conditional
        self.dim = dataset.d
        self._full = make_denoiser(dataset, delta, conditional)
        self._crops: dict[Rect, Denoiser] = {}

    def crop(self, rect: Rect) -> Denoiser:
        if rect not in self._crops:
            self._crops[rect] = crop_restricted_denoiser(self.dataset, rect, self.delta, self.conditional)
        return self._crops[rect]

    def denoise(self, x, sigma, class_id=None):
        return self._full.denoise(x, sigma, class_id)

    def predict_noise(self, x, sigma, class_id=None):
        return self._full.predict_noise(x, sigma, class_id)

    def __repr__(self):
        return f"GridDenoiser({self.shape}, n={self.dataset.n}, delta={self.delta})"


def _check_compatible(denoiser, plan: WindowPlan) -> None:
    if not callable(getattr(denoiser, "crop", None)):
        raise IncompatibleDenoiserError(f"{denoiser!r} cannot process crops")
    shape = getattr(denoiser, "shape", None)
    if shape is not None and shape != plan.shape:
        raise IncompatibleDenoiserError(f"denoiser grid {shape} does not match plan grid {plan.shape}")


def _window_average(denoiser, x, sigma, plan: WindowPlan, class_id, target: bool) -> np.ndarray:
    _check_compatible(denoiser, plan)
    sigma = _check_sigma(sigma)
    shape = plan.shape
    x = _as_input(x, shape.size)
    g = shape.unflatten(x)
    acc = np.zeros_like(g)
    counts = plan.counts
    for rect in plan.rects:
        rows, cols = rect.slices()
        sub = denoiser.crop(rect)
        crop_shape = GridShape(rect.height, rect.width, shape.channels)
        xc = crop_shape.flatten(g[..., rows, cols, :])
        try:
            pred = sub.denoise(xc, sigma, class_id) if target else sub.predict_noise(xc, sigma, class_id)
        except ShapeError as exc:
            raise IncompatibleDenoiserError(f"denoiser rejected crop {rect}: {exc}") from exc
        acc[..., rows, cols, :] += crop_shape.unflatten(pred)
    return shape.flatten(acc / counts[:, :, None])


def swg_negative(denoiser, x, sigma: float, plan: WindowPlan, class_id=None) -> np.ndarray:
    """Sliding-window noise prediction over the full grid.

    Each crop is denoised independently (no rescaling), predictions are added
    at their source positions and every cell is divided by its window count.
    """
    return _window_average(denoiser, x, sigma, plan, class_id, target=False)


def swg_target(denoiser, x, sigma: float, plan: WindowPlan, class_id=None) -> np.ndarray:
    """Window-averaged target prediction; ``(x - swg_target) / sigma`` equals :func:`swg_negative`."""
    return _window_average(denoiser, x, sigma, plan, class_id, target=True)


class SlidingWindowDenoiser(Denoiser):
    """The sliding-window negative predictor as a denoiser handle."""

    def __init__(self, base, plan: WindowPlan):
        _check_compatible(base, plan)
        self.base = base
        self.plan = plan
        self.dim = plan.shape.size
        self.conditional = getattr(base, "conditional", False)

    def denoise(self, x, sigma, class_id=None):
        return swg_target(self.base, x, sigma, self.plan, class_id)

    def predict_noise(self, x, sigma, class_id=None):
        return swg_negative(self.base, x, sigma, self.plan, class_id)

    def __repr__(self):
        return f"SlidingWindowDenoiser(k={self.plan.k}, N={self.plan.N}, base={self.base!r})"


def mswg_rule(pos, plan: WindowPlan, w: float, masked: bool = True, **kw) -> GuidanceRule:
    """Sliding-window guidance rule, restricted to multiply-covered cells if ``masked``.

    A masked rule over a plan without overlap has an all-zero mask and
    reduces to the positive predictor; a :class:`DegenerateMaskWarning` says so.
    """
    neg = SlidingWindowDenoiser(pos, plan)
    mask = None
    if masked:
        field = overlap_field(plan)
        if not field.mask.any():
            warnings.warn(f"plan k={plan.k}, N={plan.N} has no overlapping cells; "
                          "masked guidance reduces to the positive predictor",
                          DegenerateMaskWarning, stacklevel=2)
        mask = field.flat_mask(plan.shape.channels)
    name = kw.pop("name", "m-swg" if masked else "swg")
    return GuidanceRule(pos, (GuidanceTerm(neg, w),), mask=mask, name=name, **kw)


class ContextLimitedDenoiser(Denoiser):
    """A grid denoiser that partly ignores long-range context.

    Predicts ``(1 - leak) * full + leak * window_average`` where the window
    average is the sliding-window prediction of ``base`` over ``plan``. On a
    crop it behaves like ``base`` (a crop carries no long-range context to
    ignore). Sliding-window guidance with ``w = leak / (1 - leak)`` recovers
    ``base`` exactly, which makes it a test bed for the guidance correction.
    """

    def __init__(self, base: GridDenoiser, plan: WindowPlan, leak: float):
        if not 0.0 <= leak < 1.0:
            raise ValidationError(f"leak must lie in [0, 1), got {leak}")
        _check_compatible(base, plan)
        self.base = base
        self.plan = plan
        self.leak = float(leak)
        self.shape = base.shape
        self.dim = base.dim
        self.conditional = base.conditional

    def crop(self, rect: Rect) -> Denoiser:
        return self.base.crop(rect)

    def denoise(self, x, sigma, class_id=None):
        full = self.base.denoise(x, sigma, class_id)
        if self.leak == 0.0:
            return full
        return (1.0 - self.leak) * full + self.leak * swg_target(self.base, x, sigma, self.plan, class_id)

    def __repr__(self):
        return f"ContextLimitedDenoiser(leak={self.leak}, k={self.plan.k}, N={self.plan.N})"
