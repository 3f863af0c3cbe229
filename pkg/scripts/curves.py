"""
Cubic 3D Bezier geometry for sketches.

A sketch is an ordered sequence of cubic Bezier curves, each defined by four
3D control points in canvas units (nominal range [-0.8, 0.8]). Everything in
this module is an immutable value or a pure function, so it is safe to share
across rollout worker threads.

Usage:
    from scripts.curves import BezierCurve, Point3, Sketch, evaluate

    curve = BezierCurve.from_points([(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)])
    evaluate(curve, 0.5)  # Point3(x=0.5, y=0.75, z=0.0)
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

# Sub-pixel at 512 px over a 1.6-wide canvas
DEFAULT_DEGENERACY_EPSILON = 1e-3
DEFAULT_SIMILARITY_SAMPLES = 16


class CurveDomainError(ValueError):
    """Raised when a curve parameter falls outside its valid domain."""
    pass


# --------------------------------------------------------------------------- #
# Value types
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class Point3:
    """A finite point in canvas units."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ('x', 'y', 'z'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"Point3.{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    def clamped(self, bound: float) -> Point3:
        """Clamp every component into [-bound, bound]."""
        return Point3(*(min(bound, max(-bound, c)) for c in self.as_tuple()))


@dataclass(frozen=True)
class BezierCurve:
    """Cubic Bezier curve with ordered control points p0..p3."""

    p0: Point3
    p1: Point3
    p2: Point3
    p3: Point3

    @classmethod
    def from_points(cls, points: Sequence[Sequence[float]]) -> BezierCurve:
        if len(points) != 4:
            raise ValueError(f"A cubic Bezier needs exactly 4 control points, got {len(points)}")
        return cls(*(p if isinstance(p, Point3) else Point3(*p) for p in points))

    @property
    def points(self) -> tuple[Point3, Point3, Point3, Point3]:
        return (self.p0, self.p1, self.p2, self.p3)

    def map(self, fn: Callable[[Point3], Point3]) -> BezierCurve:
        """Apply a point transform to every control point."""
        return BezierCurve(*(fn(p) for p in self.points))

    def as_array(self) -> np.ndarray:
        return np.array([p.as_tuple() for p in self.points], dtype=np.float64)


@dataclass(frozen=True)
class Sketch:
    """Ordered sequence of curves; order follows the emitted action sequence."""

    curves: tuple[BezierCurve, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'curves', tuple(self.curves))

    @property
    def curve_count(self) -> int:
        return len(self.curves)

    def map(self, fn: Callable[[Point3], Point3]) -> Sketch:
        return Sketch(tuple(c.map(fn) for c in self.curves))

    def control_points(self) -> np.ndarray:
        """All control points as an (N*4, 3) array."""
        if not self.curves:
            return np.zeros((0, 3), dtype=np.float64)
        return np.concatenate([c.as_array() for c in self.curves])


# --------------------------------------------------------------------------- #
# Evaluation
# --------------------------------------------------------------------------- #

def evaluate(curve: BezierCurve, t: float) -> Point3:
    """Evaluate the Bernstein form at parameter t.

    Raises:
        CurveDomainError: If t is outside [0, 1]
    """
    if not 0.0 <= t <= 1.0:
        raise CurveDomainError(f"Bezier parameter must be in [0, 1], got {t!r}")

    u = 1.0 - t
    b0 = u * u * u
    b1 = 3.0 * u * u * t
    b2 = 3.0 * u * t * t
    b3 = t * t * t
    p0, p1, p2, p3 = curve.points
    return Point3(
        b0 * p0.x + b1 * p1.x + b2 * p2.x + b3 * p3.x,
        b0 * p0.y + b1 * p1.y + b2 * p2.y + b3 * p3.y,
        b0 * p0.z + b1 * p1.z + b2 * p2.z + b3 * p3.z,
    )


def sample_polyline(curve: BezierCurve, segments: int) -> list[Point3]:
    """Sample segments+1 points at the uniform grid k/segments."""
    if segments < 1:
        raise CurveDomainError(f"segments must be >= 1, got {segments}")
    return [evaluate(curve, k / segments) for k in range(segments + 1)]


def _lerp(a: Point3, b: Point3, t: float) -> Point3:
    return Point3(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t, a.z + (b.z - a.z) * t)


def split(curve: BezierCurve, t: float = 0.5) -> tuple[BezierCurve, BezierCurve]:
    """Subdivide a curve at t with de Casteljau's construction.

    Returns the left (0..t) and right (t..1) halves; both are cubic Beziers
    that together trace the original curve.
    """
    if not 0.0 <= t <= 1.0:
        raise CurveDomainError(f"split parameter must be in [0, 1], got {t!r}")

    p0, p1, p2, p3 = curve.points
    p01 = _lerp(p0, p1, t)
    p12 = _lerp(p1, p2, t)
    p23 = _lerp(p2, p3, t)
    p012 = _lerp(p01, p12, t)
    p123 = _lerp(p12, p23, t)
    mid = _lerp(p012, p123, t)
    return BezierCurve(p0, p01, p012, mid), BezierCurve(mid, p123, p23, p3)


# --------------------------------------------------------------------------- #
# Analytics
# --------------------------------------------------------------------------- #

def is_degenerate(curve: BezierCurve, epsilon: float = DEFAULT_DEGENERACY_EPSILON) -> bool:
    """True iff every pair of control points is closer than epsilon."""
    if epsilon <= 0:
        raise CurveDomainError(f"epsilon must be > 0, got {epsilon!r}")
    spread = max(math.dist(a.as_tuple(), b.as_tuple())
                 for a, b in itertools.combinations(curve.points, 2))
    return spread < epsilon


def degenerate_fraction(sketch: Sketch, epsilon: float = DEFAULT_DEGENERACY_EPSILON) -> float:
    """Fraction of curves that are degenerate; 0.0 for an empty sketch."""
    if not sketch.curves:
        return 0.0
    return sum(is_degenerate(c, epsilon) for c in sketch.curves) / sketch.curve_count


def _sample_array(curves: Iterable[BezierCurve], samples: int) -> np.ndarray:
    """Sample every curve on the same t grid, shape (N, samples, 3)."""
    t = np.linspace(0.0, 1.0, samples)[:, None]
    u = 1.0 - t
    weights = np.hstack([u ** 3, 3 * u * u * t, 3 * u * t * t, t ** 3])  # (S, 4)
    controls = np.stack([c.as_array() for c in curves])  # (N, 4, 3)
    return np.einsum('sk,nkd->nsd', weights, controls)


def pairwise_curve_similarity(sketch: Sketch,
                              samples_per_curve: int = DEFAULT_SIMILARITY_SAMPLES) -> float:
    """Mean over unordered curve pairs of 1/(1+d).

    d is the mean Euclidean distance between corresponding samples of the two
    curves. Sketches with fewer than 2 curves score 0.0.
    """
    if samples_per_curve < 2:
        raise CurveDomainError(f"samples_per_curve must be >= 2, got {samples_per_curve}")
    n = sketch.curve_count
    if n < 2:
        return 0.0

    samples = _sample_array(sketch.curves, samples_per_curve)
    total = 0.0
    for i in range(n - 1):
        dist = np.linalg.norm(samples[i + 1:] - samples[i], axis=2).mean(axis=1)
        total += float(np.sum(1.0 / (1.0 + dist)))
    return total / (n * (n - 1) / 2)
