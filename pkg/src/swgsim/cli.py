"""Command-line experiment runner.

Subcommands ``toy``, ``swg-demo`` and ``sweep`` take a YAML config; ``metrics``
takes image files or directories. Exit codes: 0 ok, 1 config error,
2 runtime error. The log level is read from ``SWGSIM_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io, svg
from .config import ExperimentConfig, GuidanceSpec, RuleFactory, load_config
from .errors import ConfigError, SwgSimError
from .guidance import GuidanceRule
from .metrics import image_stats, trajectory_report
from .sampler import discretize, sample_ensemble
from .swg import overlap_field, swg_negative

log = logging.getLogger("swgsim")

IMAGE_SUFFIXES = (".ppm", ".pgm", ".png")


def _w_label(g: GuidanceSpec, w: float):
    return "opt" if g.method == "optimal" else w


def _cell_dir(g: GuidanceSpec, w) -> str:
    return f"{g.name}_w{w if isinstance(w, str) else io.fmt(w)}"


class _Runner:
    """Runs guidance blocks of one config, caching oracle reference ensembles."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.factory = RuleFactory(cfg)
        self.dataset = self.factory.dataset
        self._refs: dict = {}

    def sample(self, rule: GuidanceRule, g: GuidanceSpec):
        e = self.cfg.ensemble
        return sample_ensemble(rule, self.cfg.schedule, e.n, e.seed, self.factory.class_policy(g),
                               e.threads, e.max_norm)

    def reference(self, g: GuidanceSpec):
        key = g.conditional
        if key not in self._refs:
            self._refs[key] = self.sample(GuidanceRule(self.factory.oracle(g)), g)
        return self._refs[key]

    def report(self, trajs, g: GuidanceSpec):
        m = self.cfg.metrics
        ref = self.reference(g) if m.endpoint_mode == "matched-reference" else None
        oracle = self.factory.oracle(g) if m.stepwise else None
        return trajectory_report(trajs, self.dataset, oracle, m.endpoint_mode, ref)

    def cells(self):
        for g in self.cfg.guidance:
            for w in g.weights:
                rule = self.factory.rule(g, w)
                trajs = self.sample(rule, g)
                rep = self.report(trajs, g)
                if rep.instability_rate > 0.5:
                    log.warning("%s at w=%s: %.0f%% of trajectories are unstable", g.name, w,
                                100 * rep.instability_rate)
                yield g, _w_label(g, w), trajs, rep


def _write_reports(out: Path, entries, sigmas, comments=()) -> list[Path]:
    paths = [io.write_report(out / "report.csv", entries, comments)]
    if any(r.stepwise_error is not None for _, _, r in entries):
        paths.append(io.write_stepwise(out / "stepwise.csv", entries, sigmas))
    return paths


def run_toy(cfg: ExperimentConfig) -> list[Path]:
    """Trajectory CSVs, endpoint ensembles, reports and one SVG panel per (method, w)."""
    runner = _Runner(cfg)
    if runner.dataset.d != 2:
        raise ConfigError(f"{cfg.source}: the toy runner needs a 2-D dataset, got d={runner.dataset.d}")
    out = cfg.out_dir()
    written, entries = [], []
    for g, w, trajs, rep in runner.cells():
        cell = out / _cell_dir(g, w)
        for i, t in enumerate(trajs[:cfg.output.trajectories]):
            written.append(io.write_trajectory(cell / "trajectories" / f"traj_{i:04d}.csv", t))
        written.append(io.write_ensemble(cell / "ensemble.csv", trajs, runner.dataset))
        if cfg.output.svg:
            title = f"{g.name}  w={w}  err={rep.endpoint_error:.4f}"
            written.append(svg.trajectory_panel(cell / "panel.svg", trajs, runner.dataset.points, title))
        entries.append((g.name, w, rep))
    written += _write_reports(out, entries, discretize(cfg.schedule))
    return written


def run_sweep(cfg: ExperimentConfig) -> list[Path]:
    """Report CSVs over every (method, w) cell plus an error-vs-w plot."""
    runner = _Runner(cfg)
    out = cfg.out_dir()
    entries = [(g.name, w, rep) for g, w, _, rep in runner.cells()]
    written = _write_reports(out, entries, discretize(cfg.schedule))
    if cfg.output.svg:
        series: dict = {}
        for name, w, rep in entries:
            if not isinstance(w, str):
                xs, ys = series.setdefault(name, ([], []))
                xs.append(w)
                ys.append(rep.endpoint_error)
        if series:
            written.append(svg.line_plot(out / "sweep.svg", series, cfg.name, ylabel=cfg.metrics.endpoint_mode))
    return written


def plan_header(plan) -> str:
    sh, sw = plan.strides
    rh, rw = plan.overlap_ratios
    return (f"grid={plan.shape.H}x{plan.shape.W} k={plan.k} l={plan.l} N={plan.N} "
            f"s={sh} r={rh:.6g}" + ("" if (sh, rh) == (sw, rw) else f" s_w={sw} r_w={rw:.6g}"))


def run_swg_demo(cfg: ExperimentConfig) -> list[Path]:
    """Overlap counts and mask grids, a probe dump of the window-averaged
    prediction, per-trajectory endpoint comparison and a report over w."""
    runner = _Runner(cfg)
    plan = runner.factory.plan
    if plan is None:
        raise ConfigError(f"{cfg.source}: swg-demo needs a grid dataset and denoisers.swg {{k, N}}")
    out = cfg.out_dir()
    header = plan_header(plan)
    log.info("window plan: %s", header)
    field = overlap_field(plan)
    written = [io.write_grid_csv(out / "counts.csv", field.counts), io.write_pgm(out / "counts.pgm", field.counts),
               io.write_grid_csv(out / "mask.csv", field.mask), io.write_pgm(out / "mask.pgm", field.mask, 1)]

    # Probe: first dataset image plus noise at probe_sigma.
    g0 = cfg.guidance[0]
    pos = runner.factory.positive(g0)
    sigma = cfg.metrics.probe_sigma
    rng = np.random.default_rng(cfg.ensemble.seed)
    x = runner.dataset.points[0] + sigma * rng.standard_normal(runner.dataset.d)
    cid = int(runner.dataset.labels[0]) if g0.conditional else None
    eps_pos = plan.shape.unflatten(pos.predict_noise(x, sigma, cid))
    eps_neg = plan.shape.unflatten(swg_negative(pos, x, sigma, plan, cid))
    rows = []
    for i in range(plan.shape.H):
        for j in range(plan.shape.W):
            for c in range(plan.shape.channels):
                rows.append([i, j, c, field.counts[i, j], field.mask[i, j], eps_pos[i, j, c], eps_neg[i, j, c]])
    written.append(io.write_rows(out / "eps_neg.csv", ["row", "col", "channel", "count", "mask", "eps_pos",
                                                         "eps_neg"], rows, [header, f"sigma={sigma!r}"]))

    entries, comp = [], []
    blocks = [(GuidanceSpec("none", (0.0,), label="unguided", conditional=g0.conditional), 0.0)]
    blocks += [(g, w) for g in cfg.guidance for w in g.weights]
    for g, w in blocks:
        trajs = runner.sample(runner.factory.rule(g, w), g)
        rep = runner.report(trajs, g)
        wl = _w_label(g, w)
        entries.append((g.name, wl, rep))
        ref = {t.seed: t.endpoint for t in runner.reference(g)}
        for t in trajs:
            if t.unstable:
                comp.append([g.name, wl, t.seed, t.class_id, None, None, None, True])
                continue
            idx, dist = runner.dataset.nearest(t.endpoint)
            comp.append([g.name, wl, t.seed, t.class_id, int(idx), float(dist),
                         float(np.linalg.norm(t.endpoint - ref[t.seed])), False])
    written.append(io.write_rows(out / "comparison.csv", ["method", "w", "seed", "class", "nearest", "error",
                                                           "matched_error", "unstable"], comp, [header]))
    written += _write_reports(out, entries, discretize(cfg.schedule), [header])
    return written


def _expand(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        else:
            files.append(p)
    return files


def run_metrics(paths, out: str | Path) -> tuple[Path, int]:
    """Per-image saturation and RMS contrast plus a mean row.

    Unreadable files get an error row. Returns the CSV path and the number of
    images that were read successfully.
    """
    files = _expand(paths)
    rows, ok = [], []
    for f in files:
        try:
            st = image_stats(io.read_image(f))
        except (OSError, SwgSimError, ValueError) as exc:
            log.error("%s: %s", f, exc)
            rows.append([str(f), None, None, str(exc)])
            continue
        ok.append(st)
        rows.append([str(f), st.saturation, st.contrast, ""])
    if ok:
        rows.append(["mean", float(np.mean([s.saturation for s in ok])),
                     float(np.mean([s.contrast for s in ok])), f"{len(ok)}/{len(files)} images"])
    path = io.write_rows(Path(out) / "image_stats.csv", ["path", "saturation", "rms_contrast", "error"], rows)
    return path, len(ok)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swgsim", description="Guidance simulations on finite-dataset diffusion models.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("toy", "trajectory experiments on 2-D point sets"),
                       ("swg-demo", "sliding-window guidance on a grid dataset"),
                       ("sweep", "report over every (method, w) cell")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, help="YAML experiment config")
        s.add_argument("--out", help="output directory (overrides output.dir)")
        s.add_argument("--seed", type=int, help="base seed (overrides ensemble.seed)")
        s.add_argument("--threads", type=int, help="worker threads (overrides ensemble.threads)")
    m = sub.add_parser("metrics", help="saturation and RMS contrast of images")
    m.add_argument("paths", nargs="+", help="image files or directories (PPM/PGM, PNG with Pillow)")
    m.add_argument("--out", default="out", help="output directory")
    m.add_argument("--config", help=argparse.SUPPRESS)
    m.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    m.add_argument("--threads", type=int, help=argparse.SUPPRESS)
    return p


RUNNERS = {"toy": run_toy, "swg-demo": run_swg_demo, "sweep": run_sweep}


def _setup_logging() -> None:
    level = os.environ.get("SWGSIM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "metrics":
            path, n_ok = run_metrics(args.paths, args.out)
            print(path)
            return 0 if n_ok else 2
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config).with_overrides(args.out, args.seed, args.threads)
        written = RUNNERS[args.command](cfg)
        log.info("wrote %d files to %s", len(written), cfg.out_dir())
        print(cfg.out_dir())
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SwgSimError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
