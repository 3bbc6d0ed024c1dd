"""CSV artifacts, netpbm images and grid dumps.

Floats are written with ``repr`` so files are byte-identical across reruns
and round-trip exactly.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ValidationError
from .metrics import TrajectoryReport
from .sampler import Trajectory

# Extra-metric columns kept empty so externally computed values can be joined.
RESERVED_COLUMNS = ("fid", "fdd", "inception_score")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_rows(path: str | Path, header, rows, comments=()) -> Path:
    """Write a CSV; ``comments`` become leading ``# ...`` lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([c if isinstance(c, str) else fmt(c) for c in row])
    return path


def read_rows(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_trajectory(path, traj: Trajectory) -> Path:
    d = traj.x.shape[1]
    header = (["step", "t", "sigma"] + [f"x_{j}" for j in range(d)]
              + [f"yhat_{j}" for j in range(d)] + ["unstable"])
    rows = []
    for i in range(len(traj)):
        frozen = traj.unstable and i >= traj.unstable_step
        rows.append([traj.step[i], traj.t[i], traj.sigma[i], *traj.x[i], *traj.y_hat[i], frozen])
    return write_rows(path, header, rows)


def write_ensemble(path, trajectories, dataset: Dataset | None = None) -> Path:
    """One row per trajectory: seed, class, endpoint, nearest point index and distance."""
    trajectories = list(trajectories)
    d = trajectories[0].x.shape[1]
    header = ["seed", "class"] + [f"end_{j}" for j in range(d)] + ["nearest", "error", "unstable"]
    rows = []
    for t in trajectories:
        if dataset is not None and not t.unstable:
            idx, dist = dataset.nearest(t.endpoint)
            near, err = int(idx), float(dist)
        else:
            near, err = None, None
        rows.append([t.seed, t.class_id, *t.endpoint, near, err, t.unstable])
    return write_rows(path, header, rows)


REPORT_HEADER = ["method", "w", "n", "n_unstable", "instability_rate", "endpoint_error",
                 "endpoint_stderr", "note", *RESERVED_COLUMNS]


def report_note(rep: TrajectoryReport) -> str:
    return "unstable-dominated" if rep.instability_rate > 0.5 else ""


def report_row(method: str, w, rep: TrajectoryReport) -> list:
    return [method, w, rep.n, rep.n_unstable, rep.instability_rate, rep.endpoint_error,
            rep.endpoint_stderr, report_note(rep), *([""] * len(RESERVED_COLUMNS))]


def write_report(path, entries, comments=()) -> Path:
    """``entries`` is an iterable of ``(method, w, TrajectoryReport)``."""
    return write_rows(path, REPORT_HEADER, [report_row(m, w, r) for m, w, r in entries], comments)


def write_stepwise(path, entries, sigmas) -> Path:
    """Step-wise predictor error curves keyed by ``(method, w)``."""
    rows = []
    for method, w, rep in entries:
        if rep.stepwise_error is None:
            continue
        for i, e in enumerate(rep.stepwise_error):
            rows.append([method, w, i, sigmas[i], e])
    return write_rows(path, ["method", "w", "step", "sigma", "error"], rows)


def write_grid_csv(path, grid) -> Path:
    grid = np.asarray(grid)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        for row in grid:
            wr.writerow([fmt(v) for v in row])
    return path


def write_pgm(path, grid, maxval: int | None = None) -> Path:
    """Write a non-negative integer grid as a binary PGM (P5)."""
    g = np.asarray(grid)
    if g.ndim != 2 or np.any(g < 0):
        raise ValidationError("PGM needs a non-negative 2-D grid")
    maxval = int(maxval if maxval is not None else max(int(g.max()), 1))
    if maxval > 255:
        raise ValidationError("only 8-bit PGM output is supported")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n{maxval}\n".encode("ascii")
    path.write_bytes(header + g.astype(np.uint8).tobytes())
    return path


def _netpbm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError("truncated netpbm header")
        tokens.append(int(data[start:pos]))
    return tokens, pos + 1


def read_netpbm(path) -> np.ndarray:
    """Read a binary PPM (P6) or PGM (P5) into floats in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValidationError(f"{path}: not a binary PPM/PGM file")
    (w, h, maxval), pos = _netpbm_tokens(data, 3)
    if not 0 < maxval < 65536:
        raise ValidationError(f"{path}: bad maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * ch
    raw = np.frombuffer(data, dtype=dtype, count=n, offset=pos) if len(data) - pos >= n * dtype.itemsize else None
    if raw is None:
        raise ValidationError(f"{path}: truncated pixel data")
    img = raw.astype(np.float64) / maxval
    return img.reshape(h, w, 3) if ch == 3 else img.reshape(h, w)


def write_ppm(path, image, maxval: int = 255) -> Path:
    """Write an ``H x W x 3`` float image in [0, 1] as binary PPM (P6)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValidationError("PPM needs an H x W x 3 image")
    if img.min() < 0 or img.max() > 1:
        raise ValidationError("image values must lie in [0, 1]")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    q = np.rint(img * maxval).astype(dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii") + q.tobytes())
    return path


def read_image(path) -> np.ndarray:
    """Netpbm always; PNG only when Pillow is installed (``pip install swgsim[png]``)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError:
            raise ValidationError("PNG support needs Pillow; install the 'png' extra") from None
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        return arr / 255.0
    return read_netpbm(path)
