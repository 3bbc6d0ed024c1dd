"""Guidance extrapolation rules.

A rule combines one positive predictor with any number of negative ones::

    eps = eps_pos + sum_i alpha_i w_i M_i * (eps_pos - eps_neg_i)

Classifier-free guidance is the single-term instance with a class-conditional
positive and an unconditional negative; weak-model guidance uses a degraded
copy of the positive model as the negative. The same combination is applied
in target (denoiser) space by the sampler; both forms agree because the noise
prediction is affine in the target prediction.

Internally the combination is evaluated as
``(1 + sum_i c_i) eps_pos - sum_i c_i eps_neg_i`` with ``c_i = alpha_i w_i M_i``.
That form returns ``eps_pos`` unchanged for ``w = 0`` and ``eps_neg``
unchanged for ``w = -1``, bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .denoisers import Denoiser
from .errors import DegenerateDirectionError, IncompatibleRuleError, ShapeError, ValidationError

DEGENERATE_NORM = 1e-14


class OptimalWeight:
    """Pointwise weight ``||eps_pos - eps*|| / ||eps_pos - eps_neg||``.

    Needs the optimal predictor ``oracle``, so it is only usable in
    simulations. Where the guidance direction vanishes the weight is taken as 0.
    """

    def __init__(self, oracle: Denoiser):
        self.oracle = oracle

    def __call__(self, x, sigma, eps_pos, eps_neg, class_id=None) -> np.ndarray:
        eps_star = self.oracle.predict_noise(x, sigma, class_id)
        num = np.linalg.norm(eps_pos - eps_star, axis=-1, keepdims=True)
        den = np.linalg.norm(eps_pos - eps_neg, axis=-1, keepdims=True)
        ok = den > DEGENERATE_NORM
        return np.where(ok, num / np.where(ok, den, 1.0), 0.0)

    def __repr__(self):
        return f"OptimalWeight({self.oracle!r})"


def _check_mask(mask, d: int) -> np.ndarray:
    m = np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.shape[0] != d:
        raise ShapeError(f"mask of length {m.shape[0]} for dimension {d}")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValidationError("mask entries must be 0 or 1")
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class GuidanceTerm:
    """One extrapolation term: a negative predictor, its weight and interpolation coefficient.

    ``weight`` is a float or an :class:`OptimalWeight`. ``mask`` (optional,
    length ``d``) restricts this term to the cells where it is 1.
    """

    negative: Denoiser
    weight: float | OptimalWeight
    alpha: float = 1.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not isinstance(self.weight, OptimalWeight):
            if not math.isfinite(self.weight):
                raise ValidationError(f"weight must be finite, got {self.weight}")
            object.__setattr__(self, "weight", float(self.weight))
        if self.mask is not None:
            object.__setattr__(self, "mask", _check_mask(self.mask, self.negative.dim))

    @property
    def is_zero(self) -> bool:
        return self.alpha == 0.0 or (not isinstance(self.weight, OptimalWeight) and self.weight == 0.0)


@dataclass(frozen=True)
class GuidanceRule:
    """Positive predictor plus guidance terms, an optional mask and step interval.

    ``interval`` is an inclusive ``(lo, hi)`` range of step indices counted
    from the high-noise end (step 0 is ``sigma_max``). Outside it the rule
    returns the positive prediction untouched.
    """

    positive: Denoiser
    terms: tuple[GuidanceTerm, ...] = ()
    mask: np.ndarray | None = None
    interval: tuple[int, int] | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        d = self.positive.dim
        for t in self.terms:
            if t.negative.dim != d:
                raise ShapeError(f"negative predictor has dimension {t.negative.dim}, positive has {d}")
        if self.mask is not None:
            object.__setattr__(self, "mask", _check_mask(self.mask, d))
        if self.interval is not None:
            lo, hi = (int(v) for v in self.interval)
            if lo < 0 or lo > hi:
                raise ValidationError(f"invalid step interval {self.interval}")
            object.__setattr__(self, "interval", (lo, hi))

    @property
    def dim(self) -> int:
        return self.positive.dim

    def is_active(self, step: int) -> bool:
        if self.interval is None:
            return True
        return self.interval[0] <= step <= self.interval[1]

    def check_steps(self, n_steps: int) -> None:
        if self.interval is not None and self.interval[1] >= n_steps:
            raise ValidationError(f"interval {self.interval} exceeds {n_steps} steps")

    @property
    def live_terms(self) -> tuple[GuidanceTerm, ...]:
        return tuple(t for t in self.terms if not t.is_zero)


def _combine(rule, x, sigma, class_id, pos, negs, space) -> np.ndarray:
    """Shared extrapolation in whichever space ``pos``/``negs`` live in.

    ``negs`` are ``(term, value, eps_pos, eps_neg)``: the term's value in the
    output space plus the noise-space values needed by pointwise weights.
    Constant weights use the affine form ``(1 + sum c) pos - sum c neg`` so that
    ``w = 0`` and ``w = -1`` are exact. Pointwise weights blow up as sigma -> 0
    while ``y_pos - y_neg`` cancels to nothing, so their correction is built
    from the noise-space difference instead.
    """
    total = 0.0
    acc = None
    extra = None
    for term, neg, eps_pos, eps_neg in negs:
        pointwise = isinstance(term.weight, OptimalWeight)
        w = term.weight(x, sigma, eps_pos, eps_neg, class_id) if pointwise else term.weight
        c = term.alpha * w
        if term.mask is not None:
            c = c * term.mask
        if pointwise:
            diff = eps_pos - eps_neg if space == "eps" else sigma * (eps_neg - eps_pos)
            extra = c * diff if extra is None else extra + c * diff
            continue
        total = total + c
        acc = c * neg if acc is None else acc + c * neg
    out = pos if acc is None else (1.0 + total) * pos - acc
    if extra is not None:
        out = out + extra
    if rule.mask is not None:
        out = np.where(rule.mask > 0, out, pos)
    return out


def _evaluate(rule: GuidanceRule, x, sigma: float, step: int, class_id, space: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != rule.dim:
        raise ShapeError(f"input of dimension {x.shape[-1]} for rule of dimension {rule.dim}")
    terms = rule.live_terms if rule.is_active(step) else ()
    needs_eps = space == "eps" or any(isinstance(t.weight, OptimalWeight) for t in terms)
    pos_eps = rule.positive.predict_noise(x, sigma, class_id) if needs_eps else None
    if space == "eps":
        pos = pos_eps
    else:
        pos = rule.positive.denoise(x, sigma, class_id)
    if not terms:
        return pos
    negs = []
    for t in terms:
        if space == "eps":
            neg = t.negative.predict_noise(x, sigma, class_id)
            negs.append((t, neg, pos_eps, neg))
        else:
            neg = t.negative.denoise(x, sigma, class_id)
            neg_eps = t.negative.predict_noise(x, sigma, class_id) if isinstance(t.weight, OptimalWeight) else None
            negs.append((t, neg, pos_eps, neg_eps))
    return _combine(rule, x, sigma, class_id, pos, negs, space)


def guided_predict(x, sigma: float, step: int, rule: GuidanceRule, class_id=None) -> np.ndarray:
    """Guided noise prediction at ``(x, sigma)`` for sampling step ``step``.

    Each predictor is evaluated once. Outside the rule's interval, or when all
    weights are zero, the positive prediction is returned as is.
    """
    return _evaluate(rule, x, sigma, step, class_id, "eps")


def guided_target(x, sigma: float, step: int, rule: GuidanceRule, class_id=None) -> np.ndarray:
    """Same extrapolation applied to target predictions: ``y_pos + w (y_pos - y_neg)``."""
    return _evaluate(rule, x, sigma, step, class_id, "target")


def optimal_weight(x, sigma: float, pos: Denoiser, neg: Denoiser, oracle: Denoiser, class_id=None):
    """Pointwise optimal guidance weight ``||eps_pos - eps*|| / ||eps_pos - eps_neg||``.

    Norms are Euclidean over the last axis. Raises
    :class:`DegenerateDirectionError` if the denominator is at most 1e-14.
    """
    eps_pos = pos.predict_noise(x, sigma, class_id)
    eps_neg = neg.predict_noise(x, sigma, class_id)
    eps_star = oracle.predict_noise(x, sigma, class_id)
    den = np.linalg.norm(eps_pos - eps_neg, axis=-1)
    if np.any(den <= DEGENERATE_NORM):
        raise DegenerateDirectionError("positive and negative predictions coincide; weight undefined")
    w = np.linalg.norm(eps_pos - eps_star, axis=-1) / den
    return float(w) if np.ndim(w) == 0 else w


def cfg_rule(conditional: Denoiser, unconditional: Denoiser, w: float, **kw) -> GuidanceRule:
    """Classifier-free guidance: conditional positive, unconditional negative."""
    return GuidanceRule(conditional, (GuidanceTerm(unconditional, w),), name=kw.pop("name", "cfg"), **kw)


def wmg_rule(positive: Denoiser, weak: Denoiser, w, **kw) -> GuidanceRule:
    """Weak-model guidance with a degraded negative predictor."""
    return GuidanceRule(positive, (GuidanceTerm(weak, w),), name=kw.pop("name", "wmg"), **kw)


def interpolate_rules(rules, tol: float = 1e-12) -> GuidanceRule:
    """Merge ``[(rule, alpha), ...]`` into one rule with alpha-scaled terms.

    All rules must share the positive predictor (by identity) and interval;
    the alphas must be non-negative and sum to one. Rule-level masks are moved
    onto the terms of their rule so each term keeps its own restriction.
    """
    rules = list(rules)
    if not rules:
        raise ValidationError("nothing to interpolate")
    alphas = np.array([a for _, a in rules], dtype=np.float64)
    if np.any(alphas < 0) or abs(alphas.sum() - 1.0) > tol:
        raise ValidationError(f"alphas {alphas.tolist()} do not form a convex combination")
    first = rules[0][0]
    terms = []
    for rule, alpha in rules:
        if rule.positive is not first.positive:
            raise IncompatibleRuleError("rules use different positive predictors")
        if rule.interval != first.interval:
            raise IncompatibleRuleError("rules use different step intervals")
        for t in rule.terms:
            mask = t.mask
            if rule.mask is not None:
                mask = rule.mask if mask is None else mask * rule.mask
            terms.append(GuidanceTerm(t.negative, t.weight, t.alpha * float(alpha), mask))
    return GuidanceRule(first.positive, tuple(terms), None, first.interval,
                        name="+".join(r.name or "rule" for r, _ in rules))
