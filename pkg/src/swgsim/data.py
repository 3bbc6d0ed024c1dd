"""Finite datasets and grid-shape annotations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError


@dataclass(frozen=True)
class GridShape:
    """Spatial layout of a flat vector: ``H x W`` cells with ``channels`` values each.

    Flattening is row-major over ``(H, W, channels)``.
    """

    H: int
    W: int
    channels: int = 1

    def __post_init__(self):
        if self.H < 1 or self.W < 1 or self.channels < 1:
            raise ValidationError(f"grid dimensions must be positive, got {self}")

    @property
    def size(self) -> int:
        return self.H * self.W * self.channels

    def unflatten(self, x: np.ndarray) -> np.ndarray:
        """View ``(..., d)`` as ``(..., H, W, channels)``."""
        x = np.asarray(x)
        if x.shape[-1] != self.size:
            raise ShapeError(f"vector of length {x.shape[-1]} does not match grid {self}")
        return x.reshape(x.shape[:-1] + (self.H, self.W, self.channels))

    def flatten(self, g: np.ndarray) -> np.ndarray:
        g = np.asarray(g)
        return g.reshape(g.shape[:-3] + (self.size,))


@dataclass(frozen=True)
class Dataset:
    """A finite point set in R^d, optionally labelled and optionally grid-structured."""

    points: np.ndarray
    labels: np.ndarray | None = None
    shape: GridShape | None = None
    _class_index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.ndim != 2 or pts.shape[0] == 0 or pts.shape[1] == 0:
            raise ShapeError(f"points must be a non-empty (n, d) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("dataset points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if labels.shape[0] != pts.shape[0]:
                raise ShapeError(f"{labels.shape[0]} labels for {pts.shape[0]} points")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
            for c in np.unique(labels):
                self._class_index[int(c)] = np.flatnonzero(labels == c)
        if self.shape is not None and self.shape.size != pts.shape[1]:
            raise ShapeError(f"grid {self.shape} does not match dimension {pts.shape[1]}")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def classes(self) -> list[int]:
        return sorted(self._class_index)

    def class_members(self, class_id: int) -> np.ndarray:
        """Indices of the points carrying ``class_id``."""
        if self.labels is None:
            raise ValidationError("dataset has no labels")
        try:
            return self._class_index[int(class_id)]
        except KeyError:
            raise ValidationError(f"class {class_id} not present in dataset") from None

    def nearest(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Index of, and distance to, the nearest point for each row of ``x``."""
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None, :] - self.points
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        idx = np.argmin(dist, axis=-1)
        return idx, np.take_along_axis(dist, idx[..., None], axis=-1)[..., 0]

    def to_json(self) -> str:
        doc = {"d": self.d, "points": self.points.tolist()}
        if self.labels is not None:
            doc["labels"] = self.labels.tolist()
        if self.shape is not None:
            doc["shape"] = [self.shape.H, self.shape.W, self.shape.channels]
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        doc = json.loads(text)
        if not isinstance(doc, dict) or "points" not in doc:
            raise ValidationError("dataset document needs a 'points' list")
        unknown = set(doc) - {"d", "points", "labels", "shape"}
        if unknown:
            raise ValidationError(f"unknown dataset keys: {sorted(unknown)}")
        shape = GridShape(*doc["shape"]) if doc.get("shape") else None
        ds = cls(np.asarray(doc["points"], dtype=np.float64), doc.get("labels"), shape)
        if "d" in doc and int(doc["d"]) != ds.d:
            raise ShapeError(f"declared d={doc['d']} but points have dimension {ds.d}")
        return ds

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_json(Path(path).read_text())


def triangle(radius: float = 1.0) -> Dataset:
    """Three equidistant points on a circle of ``radius``, one class each.

    Vertices sit at 90, 210 and 330 degrees.
    """
    angles = np.deg2rad([90.0, 210.0, 330.0])
    pts = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return Dataset(pts, labels=[0, 1, 2])


def gaussian_cloud(n: int, std: float = 1.0, seed: int = 0, d: int = 2) -> Dataset:
    """``n`` points drawn from N(0, std^2 I_d); unlabelled."""
    rng = np.random.default_rng(seed)
    return Dataset(std * rng.standard_normal((n, d)))


def corner_pair(H: int = 8, W: int = 8, patch: int = 3, amplitude: float = 1.0) -> Dataset:
    """Two grid images that agree everywhere except in two opposite corners.

    Image 0 carries ``+amplitude`` in both the top-left and bottom-right
    ``patch x patch`` corners, image 1 carries ``-amplitude`` in both. The
    corner contents are only consistent with each other, so a sample mixing
    the sign of the two corners lies off the data distribution.
    """
    if 2 * patch > min(H, W):
        raise ValidationError("corners overlap; use a smaller patch")
    imgs = np.zeros((2, H, W))
    for i, sign in enumerate((1.0, -1.0)):
        imgs[i, :patch, :patch] = sign * amplitude
        imgs[i, H - patch:, W - patch:] = sign * amplitude
    return Dataset(imgs.reshape(2, -1), labels=[0, 1], shape=GridShape(H, W))
