"""
Geometry kernels: farthest point sampling, Chamfer weighting, axis-aligned boxes
and the invertible flip/scale transform used by strong augmentation.

Every function here is a pure function of its inputs. Random draws only happen
through generators passed in by the caller.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidArgumentError

CHAMFER_REDUCTIONS = ("mean", "sum")
SCALE_RANGE = (0.85, 1.15)


def as_points(points) -> np.ndarray:
    """Return ``points`` as a float64 (n, 3) array; an empty input becomes (0, 3)."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidArgumentError(f"expected an (n, 3) point array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Aabb:
    """Axis-aligned box given by its center and positive extents."""

    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(center)) and np.all(np.isfinite(size))):
            raise InvalidArgumentError("box parameters must be finite")
        if np.any(size <= 0):
            raise InvalidArgumentError(f"box extents must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)

    @property
    def min_corner(self) -> np.ndarray:
        return self.center - self.size / 2.0

    @property
    def max_corner(self) -> np.ndarray:
        return self.center + self.size / 2.0

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def to_array(self) -> np.ndarray:
        """Pack as ``[cx, cy, cz, sx, sy, sz]``."""
        return np.concatenate([self.center, self.size])

    @classmethod
    def from_array(cls, values) -> "Aabb":
        values = np.asarray(values, dtype=np.float64)
        return cls(values[:3], values[3:6])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Aabb):
            return NotImplemented
        return bool(np.array_equal(self.center, other.center)
                    and np.array_equal(self.size, other.size))

    def __repr__(self) -> str:
        return f"Aabb(center={self.center.tolist()}, size={self.size.tolist()})"


@dataclass(frozen=True)
class AugRecord:
    """Flip/scale parameters of one strong augmentation.

    The transform is ``p -> scale * (±x, ±y, z)``; it is a bijection on R^3.
    """

    flip_x: bool = False
    flip_y: bool = False
    scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise InvalidArgumentError(f"scale must be positive, got {self.scale}")

    @property
    def factors(self) -> np.ndarray:
        signs = np.array([-1.0 if self.flip_x else 1.0,
                          -1.0 if self.flip_y else 1.0,
                          1.0])
        return signs * self.scale


def farthest_point_sample(points, k: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest point sampling.

    Starts at ``start_index`` and repeatedly takes the point maximizing the
    minimum squared distance to the points already taken. Ties go to the
    smallest index; already-taken points are never taken again, so duplicate
    coordinates still yield distinct indices.
    """
    pts = as_points(points)
    n = len(pts)
    if n == 0:
        raise InvalidArgumentError("farthest point sampling needs a nonempty point set")
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    if not 0 <= start_index < n:
        raise InvalidArgumentError(f"start index {start_index} out of range for {n} points")

    selected = np.empty(k, dtype=np.int64)
    selected[0] = start_index
    min_dist = np.sum((pts - pts[start_index]) ** 2, axis=1)
    min_dist[start_index] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(min_dist))
        selected[i] = nxt
        np.minimum(min_dist, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_dist)
        min_dist[nxt] = -1.0
    return selected


def nearest_sq_distances(p, q) -> np.ndarray:
    """For every point of ``p``, the squared distance to its nearest point in ``q``."""
    return cdist(as_points(p), as_points(q), "sqeuclidean").min(axis=1)


def chamfer_distance_sq(p, q, reduction: str = "mean") -> float:
    """Symmetric squared Chamfer distance between two nonempty point sets."""
    p = as_points(p)
    q = as_points(q)
    if len(p) == 0 or len(q) == 0:
        raise InvalidArgumentError("Chamfer distance needs two nonempty point sets")
    if reduction not in CHAMFER_REDUCTIONS:
        raise InvalidArgumentError(f"unknown Chamfer reduction {reduction!r}")
    d = cdist(p, q, "sqeuclidean")
    forward = d.min(axis=1)
    backward = d.min(axis=0)
    if reduction == "sum":
        return float(forward.sum() + backward.sum())
    return float(forward.mean() + backward.mean())


def normalize_point_count(points, m0: int, rng: np.random.Generator) -> np.ndarray:
    """Bring a point set to exactly ``m0`` points.

    Smaller sets keep every point and are topped up with points re-drawn from
    themselves; larger sets are reduced by FPS from a random start.
    """
    pts = as_points(points)
    n = len(pts)
    if n == 0:
        raise InvalidArgumentError("cannot normalize an empty point set")
    if m0 < 1:
        raise InvalidArgumentError(f"M0 must be >= 1, got {m0}")
    if n < m0:
        extra = rng.integers(0, n, size=m0 - n)
        return np.concatenate([pts, pts[extra]], axis=0)
    if n > m0:
        start = int(rng.integers(0, n))
        return pts[farthest_point_sample(pts, m0, start)]
    return pts.copy()


def geometry_weight(p_t, p_s, m0: int, w_threshold: float = 0.0,
                    reduction: str = "mean",
                    rng: Optional[np.random.Generator] = None) -> float:
    """exp(-Chamfer) similarity of two proposals' interior points.

    An empty side yields ``w_threshold``. Both sides are normalized with
    generators built from the same drawn key, so identical inputs are reduced
    identically and score exactly 1.
    """
    if not 0.0 <= w_threshold <= 1.0:
        raise InvalidArgumentError(f"W_threshold must be in [0, 1], got {w_threshold}")
    p_t = as_points(p_t)
    p_s = as_points(p_s)
    if len(p_t) == 0 or len(p_s) == 0:
        return float(w_threshold)
    key = int(rng.integers(0, 2 ** 63 - 1)) if rng is not None else 0
    norm_t = normalize_point_count(p_t, m0, np.random.default_rng(key))
    norm_s = normalize_point_count(p_s, m0, np.random.default_rng(key))
    return float(np.exp(-chamfer_distance_sq(norm_t, norm_s, reduction)))


def aabb_iou(a: Aabb, b: Aabb) -> float:
    """Volume IoU of two axis-aligned boxes."""
    overlap = np.minimum(a.max_corner, b.max_corner) - np.maximum(a.min_corner, b.min_corner)
    inter = float(np.prod(np.clip(overlap, 0.0, None)))
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def aabb_overlaps(a: Aabb, b: Aabb) -> bool:
    """True iff the boxes share positive volume; touching faces do not count."""
    overlap = np.minimum(a.max_corner, b.max_corner) - np.maximum(a.min_corner, b.min_corner)
    return bool(np.all(overlap > 0))


def box_array_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 6) and (m, 6) packed box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 6)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 6)
    lo_a = boxes_a[:, None, :3] - boxes_a[:, None, 3:] / 2
    hi_a = boxes_a[:, None, :3] + boxes_a[:, None, 3:] / 2
    lo_b = boxes_b[None, :, :3] - boxes_b[None, :, 3:] / 2
    hi_b = boxes_b[None, :, :3] + boxes_b[None, :, 3:] / 2
    overlap = np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)
    inter = np.prod(overlap, axis=-1)
    vol_a = np.prod(boxes_a[:, 3:], axis=-1)[:, None]
    vol_b = np.prod(boxes_b[:, 3:], axis=-1)[None, :]
    union = vol_a + vol_b - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def points_in_box_mask(cloud, box: Aabb) -> np.ndarray:
    pts = as_points(cloud)
    return np.all((pts >= box.min_corner) & (pts <= box.max_corner), axis=1)


def crop_points_in_box(cloud, box: Aabb) -> Tuple[np.ndarray, np.ndarray]:
    """Points inside the closed box and their source indices, in cloud order."""
    pts = as_points(cloud)
    indices = np.flatnonzero(points_in_box_mask(pts, box))
    return pts[indices], indices


def apply_transform(cloud, aug: AugRecord) -> np.ndarray:
    """Map scene-frame points into the strongly augmented frame."""
    return as_points(cloud) * aug.factors


def inverse_transform(cloud, aug: AugRecord) -> np.ndarray:
    """Map augmented-frame points back to the scene frame."""
    return as_points(cloud) / aug.factors


def transform_box(box: Aabb, aug: AugRecord) -> Aabb:
    """The box covering the transformed contents of ``box``."""
    # Flips keep extents; only the scale stretches them.
    return Aabb(box.center * aug.factors, box.size * aug.scale)


def inverse_transform_box(box: Aabb, aug: AugRecord) -> Aabb:
    return Aabb(box.center / aug.factors, box.size / aug.scale)
