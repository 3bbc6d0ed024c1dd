"""Experiment configuration files (YAML) and their translation into rules.

Every section is validated before any sampling starts. Unknown keys, wrong
types and out-of-range values raise :class:`ConfigError` with the file name
and line of the offending key. The full schema is documented in README.md.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .data import Dataset, GridShape, corner_pair, gaussian_cloud, triangle
from .denoisers import Denoiser, make_denoiser
from .errors import ConfigError, DegenerateMaskWarning, SwgSimError
from .guidance import GuidanceRule, GuidanceTerm, OptimalWeight, interpolate_rules
from .sampler import SCHEDULE_KINDS, NoiseSchedule
from .swg import ContextLimitedDenoiser, GridDenoiser, SlidingWindowDenoiser, WindowPlan, overlap_field, plan_windows

METHODS = ("none", "cfg", "wmg", "optimal", "swg", "m-swg", "combined")
COMPONENT_METHODS = ("cfg", "wmg", "swg", "m-swg")
DATASET_KINDS = ("triangle", "cloud", "inline", "file", "corner-pair")
ENDPOINT_MODES = ("nearest-point", "matched-reference")


class _Map(dict):
    """Mapping that remembers the source line of itself and of each key."""

    line = 0

    def __init__(self):
        super().__init__()
        self.key_lines: dict = {}


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.line = node.start_mark.line + 1
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        if key in out:
            raise ConfigError(f"line {k_node.start_mark.line + 1}: duplicate key {key!r}")
        out[key] = loader.construct_object(v_node, deep=True)
        out.key_lines[key] = k_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)

_REQUIRED = object()


class _Section:
    """Typed, consuming reader over one mapping; leftover keys are errors."""

    def __init__(self, mapping, where: str, source: str, line: int = 0):
        if mapping is None:
            mapping = _Map()
        if not isinstance(mapping, dict):
            raise ConfigError(f"{source}:{line}: {where} must be a mapping")
        self.m, self.where, self.source = mapping, where, source
        self.line = getattr(mapping, "line", line)
        self.used: set = set()

    def line_of(self, key) -> int:
        return getattr(self.m, "key_lines", {}).get(key, self.line)

    def fail(self, key, msg):
        raise ConfigError(f"{self.source}:{self.line_of(key)}: {self.where}.{key}: {msg}")

    def has(self, key) -> bool:
        return key in self.m

    def get(self, key, kind=None, default=_REQUIRED, check=None, msg=""):
        self.used.add(key)
        if key not in self.m or self.m[key] is None:
            if default is _REQUIRED:
                raise ConfigError(f"{self.source}:{self.line}: {self.where}: missing required key {key!r}")
            return default
        v = self.m[key]
        if kind is float:
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                self.fail(key, f"expected a finite number, got {v!r}")
            v = float(v)
        elif kind is int:
            if isinstance(v, bool) or not isinstance(v, int):
                self.fail(key, f"expected an integer, got {v!r}")
        elif kind is bool:
            if not isinstance(v, bool):
                self.fail(key, f"expected true or false, got {v!r}")
        elif kind is str:
            if not isinstance(v, str):
                self.fail(key, f"expected a string, got {v!r}")
        elif isinstance(kind, tuple):
            if v not in kind:
                self.fail(key, f"expected one of {list(kind)}, got {v!r}")
        if check is not None and not check(v):
            self.fail(key, msg or f"invalid value {v!r}")
        return v

    def sub(self, key) -> "_Section":
        self.used.add(key)
        return _Section(self.m.get(key), f"{self.where}.{key}" if self.where else key, self.source,
                        self.line_of(key))

    def finish(self):
        for key in self.m:
            if key not in self.used:
                raise ConfigError(f"{self.source}:{self.line_of(key)}: {self.where}: unknown key {key!r}")


def _numbers(sec: _Section, key, default=_REQUIRED) -> list[float]:
    v = sec.get(key, default=default)
    if v is default and default is not _REQUIRED:
        return v
    vals = v if isinstance(v, list) else [v]
    if not vals:
        sec.fail(key, "sweep must not be empty")
    for x in vals:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            sec.fail(key, f"expected finite numbers, got {x!r}")
    return [float(x) for x in vals]


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    options: dict

    def build(self, base_dir: Path = Path(".")) -> Dataset:
        o = self.options
        if self.kind == "triangle":
            return triangle(o.get("radius", 1.0))
        if self.kind == "cloud":
            return gaussian_cloud(o["n"], o.get("std", 1.0), o.get("seed", 0), o.get("d", 2))
        if self.kind == "corner-pair":
            return corner_pair(o.get("H", 8), o.get("W", 8), o.get("patch", 3), o.get("amplitude", 1.0))
        if self.kind == "inline":
            shape = GridShape(*o["shape"]) if o.get("shape") else None
            return Dataset(np.asarray(o["points"], dtype=np.float64), o.get("labels"), shape)
        return Dataset.load(base_dir / o["path"])


@dataclass(frozen=True)
class DenoiserSpec:
    delta_pos: float = 0.1
    delta_neg: float | None = None
    leak: float = 0.0
    swg_k: int | None = None
    swg_l: int | None = None
    swg_N: int | None = None


@dataclass(frozen=True)
class GuidanceSpec:
    method: str
    weights: tuple[float, ...] = (0.0,)
    label: str = ""
    delta_neg: float | None = None
    interval: tuple[int, int] | None = None
    interval_from: str = "high-noise"
    mask: str | tuple[int, ...] = "none"
    masked: bool = True
    components: tuple[str, ...] = ()
    alphas: tuple[float, ...] = ()
    conditional: bool = False

    @property
    def name(self) -> str:
        return self.label or self.method


@dataclass(frozen=True)
class EnsembleSpec:
    n: int = 100
    seed: int = 0
    class_policy: str | None = None
    threads: int = 1
    max_norm: float | None = None


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"
    trajectories: int = 10
    svg: bool = True


@dataclass(frozen=True)
class MetricSpec:
    endpoint_mode: str = "nearest-point"
    stepwise: bool = True
    probe_sigma: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetSpec
    schedule: NoiseSchedule
    denoisers: DenoiserSpec
    guidance: tuple[GuidanceSpec, ...]
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    metrics: MetricSpec = field(default_factory=MetricSpec)
    base_dir: Path = Path(".")
    source: str = "<config>"

    def with_overrides(self, out=None, seed=None, threads=None) -> "ExperimentConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, dir=str(out)))
        if seed is not None:
            cfg = replace(cfg, ensemble=replace(cfg.ensemble, seed=int(seed)))
        if threads is not None:
            cfg = replace(cfg, ensemble=replace(cfg.ensemble, threads=int(threads)))
        return cfg

    def out_dir(self) -> Path:
        p = Path(self.output.dir)
        return p if p.is_absolute() else Path.cwd() / p


def _parse_dataset(sec: _Section, base_dir: Path) -> DatasetSpec:
    kind = sec.get("kind", DATASET_KINDS)
    o: dict = {}
    pos = lambda v: v > 0  # noqa: E731
    if kind == "triangle":
        o["radius"] = sec.get("radius", float, 1.0, pos, "must be positive")
    elif kind == "cloud":
        o["n"] = sec.get("n", int, check=pos, msg="must be positive")
        o["std"] = sec.get("std", float, 1.0, pos, "must be positive")
        o["seed"] = sec.get("seed", int, 0, lambda v: v >= 0, "must be non-negative")
        o["d"] = sec.get("d", int, 2, pos, "must be positive")
    elif kind == "corner-pair":
        o["H"] = sec.get("H", int, 8, pos, "must be positive")
        o["W"] = sec.get("W", int, o["H"], pos, "must be positive")
        o["patch"] = sec.get("patch", int, 3, pos, "must be positive")
        o["amplitude"] = sec.get("amplitude", float, 1.0, pos, "must be positive")
    elif kind == "inline":
        o["points"] = sec.get("points", check=lambda v: isinstance(v, list) and len(v) > 0,
                              msg="expected a non-empty list of points")
        o["labels"] = sec.get("labels", default=None, check=lambda v: isinstance(v, list),
                              msg="expected a list of integer labels")
        o["shape"] = sec.get("shape", default=None,
                             check=lambda v: isinstance(v, list) and len(v) in (2, 3)
                             and all(isinstance(i, int) and i > 0 for i in v),
                             msg="expected [H, W] or [H, W, channels]")
    else:
        o["path"] = sec.get("path", str)
        if not (base_dir / o["path"]).is_file():
            sec.fail("path", f"file not found: {base_dir / o['path']}")
    sec.finish()
    spec = DatasetSpec(kind, o)
    try:
        spec.build(base_dir)
    except (SwgSimError, ValueError, TypeError) as exc:
        raise ConfigError(f"{sec.source}:{sec.line}: dataset: {exc}") from exc
    return spec


def _parse_schedule(sec: _Section) -> NoiseSchedule:
    kw = dict(
        kind=sec.get("kind", SCHEDULE_KINDS, "power-rho"),
        n_steps=sec.get("n_steps", int, 40, lambda v: v >= 1, "must be at least 1"),
        sigma_min=sec.get("sigma_min", float, 0.002, lambda v: v >= 0, "must be non-negative"),
        sigma_max=sec.get("sigma_max", float, 80.0, lambda v: v > 0, "must be positive"),
        rho=sec.get("rho", float, 7.0, lambda v: v > 0, "must be positive"),
    )
    sec.finish()
    try:
        return NoiseSchedule(**kw)
    except SwgSimError as exc:
        raise ConfigError(f"{sec.source}:{sec.line}: schedule: {exc}") from exc


def _parse_denoisers(sec: _Section) -> DenoiserSpec:
    nonneg = lambda v: v >= 0  # noqa: E731
    spec = DenoiserSpec(
        delta_pos=sec.get("delta_pos", float, 0.1, nonneg, "must be non-negative"),
        delta_neg=sec.get("delta_neg", float, None, nonneg, "must be non-negative"),
        leak=sec.get("leak", float, 0.0, lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    )
    if sec.has("swg"):
        sw = sec.sub("swg")
        k = sw.get("k", int, check=lambda v: v >= 1, msg="must be positive")
        spec = replace(spec, swg_k=k, swg_N=sw.get("N", int, check=lambda v: v >= 1, msg="must be positive"),
                       swg_l=sw.get("l", int, None, lambda v: v >= 1, "must be positive"))
        sw.finish()
    sec.finish()
    return spec


def _parse_guidance(sec: _Section, n_steps: int) -> GuidanceSpec:
    method = sec.get("method", METHODS)
    weights = _numbers(sec, "w", [0.0] if method in ("none", "optimal") else _REQUIRED)
    interval = sec.get("interval", default=None,
                       check=lambda v: isinstance(v, list) and len(v) == 2 and all(
                           isinstance(i, int) and not isinstance(i, bool) for i in v),
                       msg="expected [lo, hi] step indices")
    interval_from = sec.get("interval_from", ("high-noise", "low-noise"), "high-noise")
    if interval is not None:
        lo, hi = interval
        if not 0 <= lo <= hi < n_steps:
            sec.fail("interval", f"need 0 <= lo <= hi < {n_steps} (number of steps)")
        if interval_from == "low-noise":
            lo, hi = n_steps - 1 - hi, n_steps - 1 - lo
        interval = (lo, hi)
    mask = sec.get("mask", default="none")
    if isinstance(mask, list):
        if not all(b in (0, 1) and not isinstance(b, bool) for b in mask):
            sec.fail("mask", "explicit masks must be lists of 0/1")
        mask = tuple(mask)
    elif mask not in ("none", "swg-overlap"):
        sec.fail("mask", "expected 'none', 'swg-overlap' or a list of 0/1")
    components, alphas = (), ()
    if method == "combined":
        components = tuple(sec.get("components", check=lambda v: isinstance(v, list) and len(v) >= 1
                                   and all(c in COMPONENT_METHODS for c in v),
                                   msg=f"expected a list drawn from {list(COMPONENT_METHODS)}"))
        alphas = tuple(_numbers(sec, "alphas"))
        if len(alphas) != len(components):
            sec.fail("alphas", "need one alpha per component")
        if any(a < 0 for a in alphas) or abs(sum(alphas) - 1.0) > 1e-12:
            sec.fail("alphas", "alphas must be non-negative and sum to 1")
    spec = GuidanceSpec(
        method=method,
        weights=tuple(weights),
        label=sec.get("label", str, ""),
        delta_neg=sec.get("delta_neg", float, None, lambda v: v >= 0, "must be non-negative"),
        interval=interval,
        interval_from=interval_from,
        mask=mask,
        masked=sec.get("masked", bool, method == "m-swg"),
        components=components,
        alphas=alphas,
        conditional=sec.get("conditional", bool, False),
    )
    if method == "cfg" or "cfg" in components:
        if sec.has("conditional") and not spec.conditional:
            sec.fail("conditional", "CFG always uses a class-conditional positive")
        spec = replace(spec, conditional=True)
    sec.finish()
    return spec


def _parse_ensemble(sec: _Section) -> EnsembleSpec:
    policy = sec.get("class_policy", str, None,
                     lambda v: v in ("none", "round-robin") or (v.startswith("fixed:") and v[6:].isdigit()),
                     "expected 'none', 'round-robin' or 'fixed:<class>'")
    spec = EnsembleSpec(
        n=sec.get("n", int, 100, lambda v: v >= 1, "must be at least 1"),
        seed=sec.get("seed", int, 0, lambda v: 0 <= v < 2 ** 64, "must be an unsigned 64-bit integer"),
        class_policy=policy,
        threads=sec.get("threads", int, 1, lambda v: v >= 1, "must be at least 1"),
        max_norm=sec.get("max_norm", float, None, lambda v: v > 0, "must be positive"),
    )
    sec.finish()
    return spec


def parse_config(text: str, source: str = "<config>", base_dir: Path | str = ".") -> ExperimentConfig:
    base_dir = Path(base_dir)
    try:
        doc = yaml.load(text, Loader=_Loader)  # noqa: S506 (safe loader subclass)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    top = _Section(doc, "", source, 1)
    name = top.get("name", str, Path(source).stem)
    dataset = _parse_dataset(top.sub("dataset"), base_dir)
    schedule = _parse_schedule(top.sub("schedule"))
    denoisers = _parse_denoisers(top.sub("denoisers"))
    top.used.add("guidance")
    raw = doc.get("guidance") if isinstance(doc, dict) else None
    if raw is None:
        raise ConfigError(f"{source}:{top.line}: missing required key 'guidance'")
    blocks = raw if isinstance(raw, list) else [raw]
    if not blocks:
        top.fail("guidance", "at least one guidance block is required")
    guidance = tuple(_parse_guidance(_Section(b, f"guidance[{i}]", source, top.line_of("guidance")),
                                     schedule.n_steps) for i, b in enumerate(blocks))
    ensemble = _parse_ensemble(top.sub("ensemble"))
    out = top.sub("output")
    output = OutputSpec(out.get("dir", str, "out"),
                        out.get("trajectories", int, 10, lambda v: v >= 0, "must be non-negative"),
                        out.get("svg", bool, True))
    out.finish()
    ms = top.sub("metrics")
    metrics = MetricSpec(ms.get("endpoint_mode", ENDPOINT_MODES, "nearest-point"),
                         ms.get("stepwise", bool, True),
                         ms.get("probe_sigma", float, 1.0, lambda v: v > 0, "must be positive"))
    ms.finish()
    top.finish()
    cfg = ExperimentConfig(name, dataset, schedule, denoisers, guidance, ensemble, output, metrics,
                           base_dir, source)
    _cross_check(cfg, top)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    return parse_config(path.read_text(), str(path), path.parent)


def _cross_check(cfg: ExperimentConfig, top: _Section) -> None:
    """Checks that need several sections at once; builds nothing expensive."""
    ds = cfg.dataset.build(cfg.base_dir)
    where = cfg.source
    needs_plan = any(g.method in ("swg", "m-swg") or "swg" in g.components or "m-swg" in g.components
                     or g.mask == "swg-overlap" for g in cfg.guidance) or cfg.denoisers.leak > 0
    if needs_plan:
        plan_for(cfg, ds)
    for i, g in enumerate(cfg.guidance):
        if g.conditional and ds.labels is None:
            raise ConfigError(f"{where}: guidance[{i}]: method needs a labelled dataset")
        if isinstance(g.mask, tuple) and len(g.mask) != ds.d:
            raise ConfigError(f"{where}: guidance[{i}].mask: length {len(g.mask)} != dimension {ds.d}")
    if cfg.ensemble.class_policy == "none" and any(g.conditional for g in cfg.guidance):
        raise ConfigError(f"{where}:{top.line_of('ensemble')}: ensemble.class_policy 'none' "
                          "is incompatible with class-conditional guidance")


def plan_for(cfg: ExperimentConfig, ds: Dataset) -> WindowPlan:
    d = cfg.denoisers
    if ds.shape is None:
        raise ConfigError(f"{cfg.source}: sliding-window settings need a grid dataset")
    if d.swg_k is None:
        raise ConfigError(f"{cfg.source}: denoisers.swg {{k, N}} is required for sliding-window guidance")
    try:
        return plan_windows(ds.shape, d.swg_k, d.swg_N, d.swg_l)
    except SwgSimError as exc:
        raise ConfigError(f"{cfg.source}: invalid window plan (H={ds.shape.H}, W={ds.shape.W}, "
                          f"k={d.swg_k}, N={d.swg_N}): {exc}") from exc


class RuleFactory:
    """Builds guidance rules for a validated config, sharing denoisers across rules."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dataset = cfg.dataset.build(cfg.base_dir)
        self.plan = plan_for(cfg, self.dataset) if self._grid_needed() else None
        self._cache: dict = {}

    def _grid_needed(self) -> bool:
        return self.dataset.shape is not None and self.cfg.denoisers.swg_k is not None

    def denoiser(self, delta: float, conditional: bool, leak: float = 0.0) -> Denoiser:
        key = (float(delta), bool(conditional), float(leak))
        if key not in self._cache:
            if self.plan is not None:
                den = GridDenoiser(self.dataset, delta, conditional)
                if leak > 0:
                    den = ContextLimitedDenoiser(den, self.plan, leak)
            else:
                den = make_denoiser(self.dataset, delta, conditional)
            self._cache[key] = den
        return self._cache[key]

    def positive(self, g: GuidanceSpec) -> Denoiser:
        d = self.cfg.denoisers
        return self.denoiser(d.delta_pos, g.conditional, d.leak)

    def oracle(self, g: GuidanceSpec) -> Denoiser:
        return self.denoiser(0.0, g.conditional)

    def delta_neg(self, g: GuidanceSpec, method: str) -> float:
        if g.delta_neg is not None:
            return g.delta_neg
        if self.cfg.denoisers.delta_neg is not None:
            return self.cfg.denoisers.delta_neg
        # Defaults: a weaker copy for weak-model guidance, the same quality for CFG.
        return 2.0 * self.cfg.denoisers.delta_pos if method in ("wmg", "optimal") else self.cfg.denoisers.delta_pos

    def _mask(self, g: GuidanceSpec):
        if g.mask == "swg-overlap":
            return overlap_field(self.plan).flat_mask(self.plan.shape.channels)
        if isinstance(g.mask, tuple):
            return np.asarray(g.mask, dtype=np.float64)
        return None

    def _term(self, g: GuidanceSpec, method: str, pos: Denoiser, w) -> tuple[GuidanceTerm, np.ndarray | None]:
        # Negatives are degraded copies of the positive, so they share its context leak.
        leak = self.cfg.denoisers.leak
        if method == "cfg":
            return GuidanceTerm(self.denoiser(self.delta_neg(g, "cfg"), False, leak), w), None
        if method in ("wmg", "optimal"):
            return GuidanceTerm(self.denoiser(self.delta_neg(g, method), g.conditional, leak), w), None
        if self.plan is None:
            raise ConfigError(f"{self.cfg.source}: {method} needs a grid dataset and denoisers.swg")
        mask = None
        if method == "m-swg" or (method == "swg" and g.masked):
            field_ = overlap_field(self.plan)
            if not field_.mask.any():
                warnings.warn(f"plan k={self.plan.k}, N={self.plan.N} has no overlapping cells "
                              f"(r={self.plan.overlap_ratio:g}); masked guidance reduces to the positive predictor",
                              DegenerateMaskWarning, stacklevel=3)
            mask = field_.flat_mask(self.plan.shape.channels)
        return GuidanceTerm(SlidingWindowDenoiser(pos, self.plan), w), mask

    def rule(self, g: GuidanceSpec, w: float) -> GuidanceRule:
        pos = self.positive(g)
        if g.method == "none":
            return GuidanceRule(pos, (), interval=g.interval, name=g.name)
        if g.method == "optimal":
            term, _ = self._term(g, "wmg", pos, OptimalWeight(self.oracle(g)))
            return GuidanceRule(pos, (term,), self._mask(g), g.interval, g.name)
        if g.method == "combined":
            parts = []
            for method, alpha in zip(g.components, g.alphas):
                term, mask = self._term(g, method, pos, w)
                parts.append((GuidanceRule(pos, (term,), mask, g.interval, method), alpha))
            merged = interpolate_rules(parts)
            return GuidanceRule(pos, merged.terms, self._mask(g), g.interval, g.name)
        term, mask = self._term(g, g.method, pos, w)
        explicit = self._mask(g)
        if explicit is not None:
            mask = explicit if mask is None else mask * explicit
        return GuidanceRule(pos, (term,), mask, g.interval, g.name)

    def class_policy(self, g: GuidanceSpec):
        policy = self.cfg.ensemble.class_policy
        if policy is None:
            policy = "round-robin" if g.conditional else "none"
        return policy
