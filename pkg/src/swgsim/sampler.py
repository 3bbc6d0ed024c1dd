"""Euler integration of the probability-flow ODE under a guidance rule."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidNoiseLevelError, ValidationError
from .guidance import GuidanceRule, guided_target

SCHEDULE_KINDS = ("linear-sigma", "power-rho")


@dataclass(frozen=True)
class NoiseSchedule:
    """Decreasing noise levels from ``sigma_max`` (t=1) to ``sigma_min`` (t=0).

    ``power-rho`` spaces ``sigma^(1/rho)`` uniformly, which concentrates steps
    at low noise; ``linear-sigma`` spaces sigma itself uniformly.
    """

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    n_steps: int = 40
    kind: str = "power-rho"
    rho: float = 7.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValidationError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.n_steps < 1:
            raise ValidationError("n_steps must be at least 1")
        if self.sigma_min < 0:
            raise ValidationError("sigma_min must be non-negative")
        if self.sigma_min >= self.sigma_max:
            raise ValidationError(f"sigma_min={self.sigma_min} must be below sigma_max={self.sigma_max}")
        if self.kind == "power-rho" and not self.rho > 0:
            raise ValidationError("rho must be positive")

    def times(self) -> np.ndarray:
        return 1.0 - np.arange(self.n_steps + 1) / self.n_steps


def discretize(schedule: NoiseSchedule) -> np.ndarray:
    """Noise levels ``sigma_0 = sigma_max > ... > sigma_N = sigma_min``."""
    frac = np.arange(schedule.n_steps + 1) / schedule.n_steps
    if schedule.kind == "linear-sigma":
        sig = schedule.sigma_max + frac * (schedule.sigma_min - schedule.sigma_max)
    else:
        inv = 1.0 / schedule.rho
        hi, lo = schedule.sigma_max ** inv, schedule.sigma_min ** inv
        sig = (hi + frac * (lo - hi)) ** schedule.rho
    sig[0], sig[-1] = schedule.sigma_max, schedule.sigma_min
    if np.any(np.diff(sig) >= 0):
        raise ValidationError("schedule is not strictly decreasing; increase spacing or reduce n_steps")
    return sig


@dataclass
class Trajectory:
    """States along one sampling run.

    Row ``i`` of ``x`` is the state at ``sigma[i]``; row ``i`` of ``y_hat`` is
    the guided target computed there (NaN on the final row, where nothing is
    evaluated, and on rows after the trajectory froze).
    """

    step: np.ndarray
    t: np.ndarray
    sigma: np.ndarray
    x: np.ndarray
    y_hat: np.ndarray
    seed: int
    class_id: int | None = None
    unstable: bool = False
    unstable_step: int = -1

    @property
    def endpoint(self) -> np.ndarray:
        return self.x[-1]

    def __len__(self):
        return len(self.step)


def derive_seed(base_seed: int, index: int) -> int:
    """Seed of trajectory ``index`` in an ensemble; independent of evaluation order."""
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def initial_state(seed: int, d: int, sigma_max: float) -> np.ndarray:
    return sigma_max * np.random.default_rng(seed).standard_normal(d)


def default_max_norm(schedule: NoiseSchedule, d: int) -> float:
    """States beyond this norm count as diverged: 100x the typical initial norm."""
    return 100.0 * schedule.sigma_max * math.sqrt(d)


def integrate(rule: GuidanceRule, sigmas: np.ndarray, x0: np.ndarray, class_id=None, max_norm=None):
    """Batched Euler integration over the given noise levels.

    ``x0`` has shape ``(B, d)``. Returns ``(xs, y_hats, unstable_step)`` with
    ``xs``/``y_hats`` of shape ``(N+1, B, d)`` and ``unstable_step[b] == -1``
    for trajectories that stayed finite and below ``max_norm``. A trajectory
    that diverges is frozen at its last good state.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    n = len(sigmas) - 1
    rule.check_steps(n)
    if np.any(sigmas[:-1] <= 0):
        raise InvalidNoiseLevelError("noise level reaches zero before the final step")
    x = np.array(x0, dtype=np.float64)
    B, d = x.shape
    xs = np.empty((n + 1, B, d))
    ys = np.full((n + 1, B, d), np.nan)
    frozen = np.full(B, -1, dtype=np.int64)
    xs[0] = x
    for i in range(n):
        s, s_next = sigmas[i], sigmas[i + 1]
        live = frozen < 0
        with np.errstate(over="ignore", invalid="ignore"):
            if live.all():
                y = guided_target(x, s, i, rule, class_id)
            else:
                y = np.full_like(x, np.nan)
                cid = class_id if class_id is None or np.ndim(class_id) == 0 else np.asarray(class_id)[live]
                y[live] = guided_target(x[live], s, i, rule, cid)
            step_dir = (x - y) / s
            x_next = x + (s_next - s) * step_dir
            ok = np.all(np.isfinite(x_next), axis=-1)
            if max_norm is not None:
                ok &= np.linalg.norm(x_next, axis=-1) <= max_norm
        bad = live & ~ok
        frozen[bad] = i + 1
        x = np.where((frozen >= 0)[:, None], x, x_next)
        ys[i] = y
        xs[i + 1] = x
    return xs, ys, frozen


def _class_array(policy, n: int, classes) -> list:
    if policy is None or policy == "none":
        return [None] * n
    if policy == "round-robin":
        if not classes:
            raise ValidationError("round-robin class policy needs a labelled dataset")
        return [int(classes[i % len(classes)]) for i in range(n)]
    if isinstance(policy, tuple) and len(policy) == 2 and policy[0] == "fixed":
        return [int(policy[1])] * n
    if isinstance(policy, str) and policy.startswith("fixed:"):
        return [int(policy.split(":", 1)[1])] * n
    raise ValidationError(f"unknown class policy {policy!r}")


def _rule_classes(rule: GuidanceRule):
    ds = getattr(rule.positive, "dataset", None)
    return ds.classes if ds is not None and ds.labels is not None else []


def _run(rule, schedule, seeds, classes, max_norm) -> list[Trajectory]:
    sig = discretize(schedule)
    t = schedule.times()
    d = rule.dim
    x0 = np.stack([initial_state(s, d, schedule.sigma_max) for s in seeds])
    if max_norm is None:
        max_norm = default_max_norm(schedule, d)
    cid = None if classes[0] is None else np.asarray(classes, dtype=np.int64)
    xs, ys, frozen = integrate(rule, sig, x0, cid, max_norm)
    steps = np.arange(schedule.n_steps + 1)
    out = []
    for b, seed in enumerate(seeds):
        out.append(Trajectory(steps, t, sig, xs[:, b].copy(), ys[:, b].copy(), int(seed),
                              classes[b], bool(frozen[b] >= 0), int(frozen[b])))
    return out


def euler_sample(rule: GuidanceRule, schedule: NoiseSchedule, seed: int, class_id: int | None = None,
                 max_norm: float | None = None) -> Trajectory:
    """Sample one trajectory with the Euler method.

    Starts from ``x_0 ~ N(0, sigma_max^2 I)`` drawn from ``seed`` and applies
    ``x_{i+1} = x_i + (sigma_{i+1} - sigma_i) (x_i - y~_i) / sigma_i`` with the
    guided target ``y~_i`` of ``rule``.
    """
    return _run(rule, schedule, [seed], [class_id], max_norm)[0]


def sample_ensemble(rule: GuidanceRule, schedule: NoiseSchedule, n: int, base_seed: int = 0,
                    class_policy="none", threads: int = 1, max_norm: float | None = None,
                    chunk: int = 256) -> list[Trajectory]:
    """``n`` independent trajectories with seeds ``derive_seed(base_seed, i)``.

    ``class_policy`` is ``"none"``, ``"round-robin"`` (cycling through the
    positive dataset's classes) or ``("fixed", c)``. Results do not depend on
    ``threads`` or ``chunk``.
    """
    if n < 1:
        raise ValidationError("ensemble size must be at least 1")
    seeds = [derive_seed(base_seed, i) for i in range(n)]
    classes = _class_array(class_policy, n, _rule_classes(rule))
    chunks = [(seeds[i:i + chunk], classes[i:i + chunk]) for i in range(0, n, chunk)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _run(rule, schedule, c[0], c[1], max_norm), chunks))
    else:
        parts = [_run(rule, schedule, s, c, max_norm) for s, c in chunks]
    return [traj for part in parts for traj in part]
