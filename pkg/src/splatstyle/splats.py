"""Gaussian splat data model and spatial operations.

Canonical per-splat layout is a 14-float row:

    [x, y, z, qw, qx, qy, qz, ls0, ls1, ls2, r, g, b, o]

with unit-norm quaternions, log-domain scales (ls), colors and opacity
already activated into [0, 1]. All operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySelectionError, ShapeError, SizeError

CH_POS = slice(0, 3)
CH_QUAT = slice(3, 7)
CH_LOGSCALE = slice(7, 10)
CH_COLOR = slice(10, 13)
CH_OPACITY = slice(13, 14)
CH_GEOMETRY = slice(0, 10)
CH_APPEARANCE = slice(10, 14)
N_CHANNELS = 14


@dataclass(frozen=True)
class Splat:
    """One Gaussian primitive. `scale` is the activated (positive) scale."""

    centroid: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    color: np.ndarray
    opacity: float

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def to_row(self) -> np.ndarray:
        return np.concatenate(
            [self.centroid, self.rotation, self.log_scale, self.color, [self.opacity]]
        ).astype(np.float32)


@dataclass(frozen=True)
class AABB:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float32))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float32))
        if self.min.shape != (3,) or self.max.shape != (3,):
            raise ShapeError("AABB corners must be 3-vectors", self.min.shape, self.max.shape)
        if np.any(self.min > self.max):
            raise ShapeError(f"AABB min > max: {self.min.tolist()} vs {self.max.tolist()}")

    def contains(self, points: np.ndarray) -> np.ndarray:
        return np.all((points >= self.min) & (points <= self.max), axis=-1)


class SplatSet:
    """An ordered collection of splats backed by an (N, 14) float32 array."""

    def __init__(self, data: np.ndarray, asset_id: str = ""):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 2 or data.shape[1] != N_CHANNELS:
            raise ShapeError("SplatSet expects (N, 14) data", data.shape)
        if data.shape[0] < 1:
            raise SizeError("SplatSet needs at least one splat")
        self.data = data
        self.asset_id = asset_id

    def __len__(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SplatSet)
            and self.asset_id == other.asset_id
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    @property
    def centroids(self) -> np.ndarray:
        return self.data[:, CH_POS]

    @property
    def quaternions(self) -> np.ndarray:
        return self.data[:, CH_QUAT]

    @property
    def log_scales(self) -> np.ndarray:
        return self.data[:, CH_LOGSCALE]

    @property
    def colors(self) -> np.ndarray:
        return self.data[:, CH_COLOR]

    @property
    def opacities(self) -> np.ndarray:
        return self.data[:, 13]

    @property
    def bbox(self) -> AABB:
        return AABB(self.centroids.min(axis=0), self.centroids.max(axis=0))

    def splat(self, i: int) -> Splat:
        row = self.data[i]
        return Splat(row[CH_POS].copy(), row[CH_QUAT].copy(), row[CH_LOGSCALE].copy(),
                     row[CH_COLOR].copy(), float(row[13]))

    def with_data(self, data: np.ndarray, asset_id: str | None = None) -> "SplatSet":
        return SplatSet(data, self.asset_id if asset_id is None else asset_id)

    @staticmethod
    def from_attributes(centroids, quaternions, log_scales, colors, opacities,
                        asset_id: str = "") -> "SplatSet":
        parts = [np.asarray(centroids, dtype=np.float32).reshape(-1, 3),
                 np.asarray(quaternions, dtype=np.float32).reshape(-1, 4),
                 np.asarray(log_scales, dtype=np.float32).reshape(-1, 3),
                 np.asarray(colors, dtype=np.float32).reshape(-1, 3),
                 np.asarray(opacities, dtype=np.float32).reshape(-1, 1)]
        return SplatSet(np.concatenate(parts, axis=1), asset_id)


def normalize_quaternions(q: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    q = np.asarray(q, dtype=np.float32)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    norm = np.where(norm < eps, 1.0, norm)
    return (q / norm).astype(np.float32)


@dataclass
class GroupedSplats:
    """FPS centers plus per-center KNN membership and channel partitions."""

    group_centers: np.ndarray          # (p, 3)
    member_indices: np.ndarray         # (p, k) into the downsampled set
    groups: np.ndarray                 # (p, k, 14)
    group_radii: np.ndarray = field(default=None)  # (p,) max member distance

    @property
    def geometry_groups(self) -> np.ndarray:
        return self.groups[:, :, CH_GEOMETRY]

    @property
    def appearance_groups(self) -> np.ndarray:
        return self.groups[:, :, CH_APPEARANCE]

    @property
    def p(self) -> int:
        return self.group_centers.shape[0]

    @property
    def k(self) -> int:
        return self.member_indices.shape[1]


def downsample_random(s: SplatSet, n_target: int, seed: int) -> SplatSet:
    """Uniform sample without replacement, output sorted by original index."""
    n = len(s)
    if not 1 <= n_target <= n:
        raise SizeError(f"n_target {n_target} outside [1, {n}]")
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(n, size=n_target, replace=False))
    return s.with_data(s.data[keep].copy())


def farthest_point_sample(centroids: np.ndarray, p: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Greedy FPS over (N, 3) points; returns (centers (p, 3), indices (p,)).

    The first point is a seeded uniform draw; each later pick maximizes the
    minimum distance to the selected set, ties broken by lowest index.
    """
    pts = np.asarray(centroids, dtype=np.float64)
    n = pts.shape[0]
    if p > n:
        raise SizeError(f"p {p} exceeds point count {n}")
    rng = np.random.default_rng(seed)
    selected = np.empty(p, dtype=np.int64)
    selected[0] = int(rng.integers(n))
    min_d2 = np.sum((pts - pts[selected[0]]) ** 2, axis=1)
    for i in range(1, p):
        best = int(np.argmax(min_d2))  # argmax returns the lowest index on ties
        selected[i] = best
        d2 = np.sum((pts - pts[best]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return pts[selected].astype(np.float32), selected


def knn_group(s_hat: SplatSet, centers: np.ndarray, k: int) -> GroupedSplats:
    """For each center pick its k nearest splats by centroid distance.

    Ties break on the lower splat index. A splat may appear in several
    groups; the channel partition views are populated on the result.
    """
    n = len(s_hat)
    if k > n:
        raise SizeError(f"k {k} exceeds splat count {n}")
    centers = np.asarray(centers, dtype=np.float32).reshape(-1, 3)
    pts = s_hat.centroids.astype(np.float64)
    c = centers.astype(np.float64)
    # (p, n) squared distances; desk-scale sizes keep this dense form cheap.
    d2 = ((c[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    # Stable sort keeps the lowest original index first among exact ties.
    member = np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)
    groups = s_hat.data[member]
    radii = np.sqrt(np.take_along_axis(d2, member, axis=1).max(axis=1)).astype(np.float32)
    return GroupedSplats(centers, member, groups, radii)


def crop_bbox(s: SplatSet, box: AABB) -> SplatSet:
    """Keep splats whose centroids fall inside the box (inclusive bounds)."""
    mask = box.contains(s.centroids)
    if not mask.any():
        raise EmptySelectionError(box)
    return s.with_data(s.data[mask].copy())
