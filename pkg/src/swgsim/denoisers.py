"""Closed-form denoisers and noise predictors for finite datasets.

For a finite dataset ``{y_i}`` the Bayes-optimal denoiser is the posterior
mean ``y*(x, sigma) = sum_i y_i p(y_i | x, sigma)`` with Gaussian posterior
weights. The error-prone family replaces the data by the data convolved with
``N(0, delta^2)``; its posterior mean has the closed form::

    y_delta(x, sigma) = (x delta^2 + y*(x, sigma_t) sigma^2) / sigma_t^2,
    sigma_t^2 = sigma^2 + delta^2

so the ODE it induces lands on points scattered around each ``y_i`` with
standard deviation ``delta``.

All functions accept ``x`` of shape ``(d,)`` or ``(..., d)``.
"""

from __future__ import annotations

import math

import numpy as np

from .data import Dataset
from .errors import InvalidNoiseLevelError, MissingConditionError, ShapeError, ValidationError


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not sigma > 0.0:
        raise InvalidNoiseLevelError(f"noise level must be positive, got {sigma}")
    return sigma


def _as_input(x, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != d:
        raise ShapeError(f"expected trailing dimension {d}, got shape {x.shape}")
    return x


def _class_mask(dataset: Dataset, class_id, batch_shape: tuple) -> np.ndarray | None:
    """Boolean ``(..., n)`` mask of points allowed under ``class_id``, or None."""
    if class_id is None:
        return None
    if dataset.labels is None:
        raise ValidationError("class conditioning requires a labelled dataset")
    cid = np.asarray(class_id, dtype=np.int64)
    present = np.isin(cid, dataset.classes)
    if not np.all(present):
        missing = np.unique(cid[~present]) if cid.ndim else [int(cid)]
        raise ValidationError(f"classes {list(missing)} not present in dataset")
    if cid.ndim:
        cid = np.broadcast_to(cid, batch_shape)
    return dataset.labels == cid[..., None]


def posterior_weights(x, sigma: float, dataset: Dataset, class_id=None) -> np.ndarray:
    """Posterior ``p(y_i | x, sigma)`` over all dataset points.

    With ``class_id`` the posterior is restricted to points of that class and
    renormalised; other points get weight exactly zero. ``class_id`` may be an
    integer or an integer array broadcasting against ``x.shape[:-1]``.
    """
    sigma = _check_sigma(sigma)
    x = _as_input(x, dataset.d)
    diff = x[..., None, :] - dataset.points
    logits = -np.sum(diff * diff, axis=-1) / (2.0 * sigma * sigma)
    mask = _class_mask(dataset, class_id, x.shape[:-1])
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    logits = logits - np.max(logits, axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / np.sum(w, axis=-1, keepdims=True)


def optimal_denoiser(x, sigma: float, dataset: Dataset, class_id=None) -> np.ndarray:
    """Posterior mean of the (class-restricted) dataset given ``x`` at ``sigma``."""
    w = posterior_weights(x, sigma, dataset, class_id)
    return np.sum(w[..., :, None] * dataset.points, axis=-2)


def error_denoiser(x, sigma: float, dataset: Dataset, delta: float, class_id=None) -> np.ndarray:
    """Posterior mean under the data broadened by ``N(0, delta^2)``."""
    if not delta > 0.0:
        raise ValidationError("error_denoiser needs delta > 0; use optimal_denoiser for delta == 0")
    sigma = _check_sigma(sigma)
    x = _as_input(x, dataset.d)
    s2, d2 = sigma * sigma, delta * delta
    st2 = s2 + d2
    y_star = optimal_denoiser(x, math.sqrt(st2), dataset, class_id)
    return (x * d2 + y_star * s2) / st2


class Denoiser:
    """Pure evaluator ``(x, sigma, class_id) -> target prediction``.

    Subclasses implement :meth:`denoise`; the noise prediction defaults to the
    normalised residual ``(x - denoise(x)) / sigma``.
    """

    dim: int
    conditional: bool = False

    def denoise(self, x, sigma: float, class_id=None) -> np.ndarray:
        raise NotImplementedError

    def predict_noise(self, x, sigma: float, class_id=None) -> np.ndarray:
        sigma = _check_sigma(sigma)
        x = _as_input(x, self.dim)
        return (x - self.denoise(x, sigma, class_id)) / sigma

    def _resolve_class(self, class_id):
        if not self.conditional:
            return None
        if class_id is None:
            raise MissingConditionError(f"{type(self).__name__} is class-conditional; pass class_id")
        return class_id


class OptimalDenoiser(Denoiser):
    """Bayes-optimal denoiser of a finite dataset.

    A conditional instance restricts the posterior to the class passed at call time.
    """

    delta = 0.0

    def __init__(self, dataset: Dataset, conditional: bool = False):
        if conditional and dataset.labels is None:
            raise ValidationError("conditional denoiser needs a labelled dataset")
        self.dataset = dataset
        self.dim = dataset.d
        self.conditional = conditional

    def denoise(self, x, sigma, class_id=None):
        return optimal_denoiser(x, sigma, self.dataset, self._resolve_class(class_id))

    def __repr__(self):
        return f"OptimalDenoiser(n={self.dataset.n}, d={self.dim}, conditional={self.conditional})"


class ErrorProneDenoiser(Denoiser):
    """Optimal denoiser of the dataset broadened by ``N(0, delta^2)``; requires ``delta > 0``."""

    def __init__(self, dataset: Dataset, delta: float, conditional: bool = False):
        if not delta > 0.0:
            raise ValidationError("ErrorProneDenoiser needs delta > 0; use OptimalDenoiser")
        if conditional and dataset.labels is None:
            raise ValidationError("conditional denoiser needs a labelled dataset")
        self.dataset = dataset
        self.delta = float(delta)
        self.dim = dataset.d
        self.conditional = conditional

    def denoise(self, x, sigma, class_id=None):
        return error_denoiser(x, sigma, self.dataset, self.delta, self._resolve_class(class_id))

    def predict_noise(self, x, sigma, class_id=None):
        # sigma (x - y*(x, sigma_t)) / sigma_t^2: equal to (x - y_delta) / sigma
        # without the cancellation in x - y_delta at small sigma.
        sigma = _check_sigma(sigma)
        x = _as_input(x, self.dim)
        st2 = sigma * sigma + self.delta * self.delta
        y_star = optimal_denoiser(x, math.sqrt(st2), self.dataset, self._resolve_class(class_id))
        return sigma * (x - y_star) / st2

    def __repr__(self):
        return (f"ErrorProneDenoiser(n={self.dataset.n}, d={self.dim}, delta={self.delta}, "
                f"conditional={self.conditional})")


def make_denoiser(dataset: Dataset, delta: float = 0.0, conditional: bool = False) -> Denoiser:
    """Optimal denoiser for ``delta == 0``, error-prone otherwise."""
    if delta < 0:
        raise ValidationError(f"delta must be non-negative, got {delta}")
    if delta == 0:
        return OptimalDenoiser(dataset, conditional)
    return ErrorProneDenoiser(dataset, delta, conditional)


def noise_predictor(x, sigma: float, denoiser: Denoiser, class_id=None) -> np.ndarray:
    """Noise prediction ``(x - y_hat) / sigma`` of ``denoiser``."""
    return denoiser.predict_noise(x, sigma, class_id)
