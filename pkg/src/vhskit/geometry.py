"""Keypoint geometry, the vertebral heart score, and the three-class rule.

Six landmarks describe a thoracic radiograph: A and B span the long axis of
the heart (carina to apex), C and D the short axis, and E and F the
vertebral segment that normalizes heart size. Coordinates are normalized to
[0, 1] by image width and height, which makes the score and the confidence
threshold resolution independent.

The score is ``6 * (|AB| + |CD|) / |EF|`` and maps to three diagnostic
classes: below 8.2 is small, 8.2 through 10 inclusive is normal, above 10
is enlarged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DegenerateVertebraError, GeometryError, InvalidScoreError

VHS_FACTOR = 6.0
SMALL_MAX = 8.2
LARGE_MIN = 10.0
# Below one millionth of the image extent a vertebral segment is
# physically meaningless; the score division is guarded at this length.
EF_EPSILON = 1e-6

POINT_NAMES = ("a", "b", "c", "d", "e", "f")


class HeartClass(IntEnum):
    SMALL = 0
    NORMAL = 1
    LARGE = 2


@dataclass(frozen=True)
class Keypoint:
    """One anatomical landmark in normalized image coordinates."""

    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


class KeypointSet:
    """The six landmarks A..F, stored as a read-only (6, 2) float array.

    Flattens to a 12-vector in fixed (Ax, Ay, Bx, ..., Fy) order, which is
    also the order of the regressor's output units.
    """

    __slots__ = ("points",)

    def __init__(self, points, validate_range: bool = True):
        arr = np.asarray(points, dtype=np.float64)
        if arr.shape != (6, 2):
            raise GeometryError(f"expected 6 keypoints of 2 coordinates, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise GeometryError("keypoint coordinates must be finite")
        if validate_range and ((arr < 0.0).any() or (arr > 1.0).any()):
            raise GeometryError("keypoint coordinates must lie in [0, 1]")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "points", arr)

    def __setattr__(self, name, value):
        raise AttributeError("KeypointSet is immutable")

    @classmethod
    def from_points(cls, a, b, c, d, e, f, validate_range: bool = True) -> "KeypointSet":
        rows = [p.as_array() if isinstance(p, Keypoint) else np.asarray(p, dtype=np.float64) for p in (a, b, c, d, e, f)]
        return cls(np.stack(rows), validate_range=validate_range)

    @classmethod
    def from_flat(cls, flat, validate_range: bool = True) -> "KeypointSet":
        arr = np.asarray(flat, dtype=np.float64)
        if arr.shape != (12,):
            raise GeometryError(f"expected a flat 12-vector, got shape {arr.shape}")
        return cls(arr.reshape(6, 2), validate_range=validate_range)

    def flatten(self) -> np.ndarray:
        return self.points.reshape(12).copy()

    def _point(self, i: int) -> Keypoint:
        return Keypoint(float(self.points[i, 0]), float(self.points[i, 1]))

    @property
    def a(self) -> Keypoint:
        return self._point(0)

    @property
    def b(self) -> Keypoint:
        return self._point(1)

    @property
    def c(self) -> Keypoint:
        return self._point(2)

    @property
    def d(self) -> Keypoint:
        return self._point(3)

    @property
    def e(self) -> Keypoint:
        return self._point(4)

    @property
    def f(self) -> Keypoint:
        return self._point(5)

    def __eq__(self, other):
        return isinstance(other, KeypointSet) and np.array_equal(self.points, other.points)

    def __repr__(self):
        return f"KeypointSet({self.points.tolist()})"


def _as_xy(p) -> np.ndarray:
    if isinstance(p, Keypoint):
        return p.as_array()
    arr = np.asarray(p, dtype=np.float64)
    if arr.shape != (2,):
        raise GeometryError(f"expected a 2-coordinate point, got shape {arr.shape}")
    return arr


def distance(p, q) -> float:
    """Euclidean distance between two keypoints.

    Symmetric, non-negative, zero iff the points coincide.
    """
    pa, qa = _as_xy(p), _as_xy(q)
    if not (np.isfinite(pa).all() and np.isfinite(qa).all()):
        raise GeometryError("distance requires finite coordinates")
    return float(math.hypot(pa[0] - qa[0], pa[1] - qa[1]))


def calc_vhs(keypoints) -> float:
    """Vertebral heart score of a keypoint set: 6 * (|AB| + |CD|) / |EF|.

    Raises DegenerateVertebraError when |EF| <= EF_EPSILON rather than
    returning an unbounded score.
    """
    if isinstance(keypoints, KeypointSet):
        flat = keypoints.points.reshape(12)
    else:
        arr = np.asarray(keypoints, dtype=np.float64)
        if arr.shape == (6, 2):
            flat = arr.reshape(12)
        elif arr.shape == (12,):
            flat = arr
        else:
            raise GeometryError(f"expected a KeypointSet, (6, 2) or (12,) array, got shape {arr.shape}")
    return vhs_from_flat(flat)


def vhs_from_flat(flat, ef_floor: float | None = None) -> float:
    """Score from a flat 12-vector.

    With the default ``ef_floor=None`` a vertebral segment at or below
    EF_EPSILON raises; passing a floor instead clamps the denominator, which
    is how raw (unclamped) model outputs are scored during training.
    """
    arr = np.asarray(flat, dtype=np.float64)
    if arr.shape != (12,):
        raise GeometryError(f"expected a flat 12-vector, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise GeometryError("score requires finite coordinates")
    pts = arr.reshape(6, 2)
    dab = math.hypot(*(pts[0] - pts[1]))
    dcd = math.hypot(*(pts[2] - pts[3]))
    def_ = math.hypot(*(pts[4] - pts[5]))
    if ef_floor is None:
        if def_ <= EF_EPSILON:
            raise DegenerateVertebraError(
                f"vertebral segment length {def_:.3e} is at or below {EF_EPSILON:.0e}"
            )
        denom = def_
    else:
        denom = max(def_, ef_floor)
    return VHS_FACTOR * (dab + dcd) / denom


def classify(vhs: float) -> HeartClass:
    """Three-class heart-size rule; boundaries 8.2 and 10 both map to NORMAL."""
    v = float(vhs)
    if not math.isfinite(v):
        raise InvalidScoreError(f"heart score must be finite, got {v!r}")
    if v < SMALL_MAX:
        return HeartClass.SMALL
    if v <= LARGE_MIN:
        return HeartClass.NORMAL
    return HeartClass.LARGE


def classify_batch(scores: np.ndarray) -> np.ndarray:
    """Vectorized three-way rule; boundary scores fall in the middle class."""
    v = np.asarray(scores, dtype=np.float64)
    if v.size and not np.all(np.isfinite(v)):
        raise InvalidScoreError("non-finite score in batch")
    return np.where(v > LARGE_MIN, 2, np.where(v < SMALL_MAX, 0, 1)).astype(np.int64)


def vhs_and_class(keypoints) -> tuple[float, HeartClass]:
    v = calc_vhs(keypoints)
    return v, classify(v)


def _segment_lengths(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    ab = pts[:, 0, :] - pts[:, 1, :]
    cd = pts[:, 2, :] - pts[:, 3, :]
    ef = pts[:, 4, :] - pts[:, 5, :]
    dab = np.sqrt((ab * ab).sum(axis=1))
    dcd = np.sqrt((cd * cd).sum(axis=1))
    def_ = np.sqrt((ef * ef).sum(axis=1))
    return dab, dcd, def_, np.stack([ab, cd, ef], axis=1)


def vhs_batch(flat: np.ndarray, ef_floor: float = EF_EPSILON) -> np.ndarray:
    """Scores for a (B, 12) array of flat keypoint vectors, EF clamped below ef_floor."""
    pts = np.asarray(flat, dtype=np.float64).reshape(-1, 6, 2)
    dab, dcd, def_, _ = _segment_lengths(pts)
    return VHS_FACTOR * (dab + dcd) / np.maximum(def_, ef_floor)


def vhs_batch_with_grad(flat: np.ndarray, ef_floor: float = EF_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Scores and their gradients w.r.t. the 12 coordinates, for a (B, 12) array.

    Subgradient conventions: a zero-length axis contributes a zero gradient,
    and once the EF denominator clamps at ef_floor its gradient is zero.
    """
    arr = np.asarray(flat, dtype=np.float64).reshape(-1, 12)
    pts = arr.reshape(-1, 6, 2)
    dab, dcd, def_, vecs = _segment_lengths(pts)
    denom = np.maximum(def_, ef_floor)
    scores = VHS_FACTOR * (dab + dcd) / denom

    def unit(vec, length):
        safe = np.where(length > 0.0, length, 1.0)[:, None]
        return np.where(length[:, None] > 0.0, vec / safe, 0.0)

    u_ab = unit(vecs[:, 0], dab)
    u_cd = unit(vecs[:, 1], dcd)
    u_ef = unit(vecs[:, 2], def_)

    grad = np.zeros_like(pts)
    scale = (VHS_FACTOR / denom)[:, None]
    grad[:, 0, :] = scale * u_ab
    grad[:, 1, :] = -scale * u_ab
    grad[:, 2, :] = scale * u_cd
    grad[:, 3, :] = -scale * u_cd
    active = (def_ > ef_floor)[:, None]
    ef_scale = (VHS_FACTOR * (dab + dcd) / (denom * denom))[:, None]
    grad[:, 4, :] = np.where(active, -ef_scale * u_ef, 0.0)
    grad[:, 5, :] = -grad[:, 4, :]
    return scores, grad.reshape(-1, 12)
