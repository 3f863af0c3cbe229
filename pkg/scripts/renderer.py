"""
Multi-view software rasterizer for 3D Bezier sketches.

Renders a sketch from 16 fixed pinhole cameras (two elevation rings of 8
azimuths) into 512x512 RGBA float rasters, and writes them as PNG files
named view_{pose_index:02}.png.

Rasterization:
- each curve is flattened adaptively in screen space (de Casteljau split
  until projected control points are within 0.25 px of the chord, max depth 12)
- segments are composited nearest-first by mean segment depth using
  front-to-back transmittance, so later (farther) strokes only show through
  what nearer strokes left uncovered
- strokes are 2.0 px wide with a 1 px linear coverage falloff at the edges

Output is bit-identical regardless of how many threads render the views.
"""

from __future__ import annotations

import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
from PIL import Image

from scripts.curves import BezierCurve, Point3, Sketch, split

logger = logging.getLogger(__name__)

VIEW_COUNT = 16
DEFAULT_FOCAL_PX = 907.32
DEFAULT_CANVAS = 512
DEFAULT_RADIUS = 2.5
DEFAULT_ELEVATIONS = (20.0, -10.0)
AZIMUTH_STEP = 45.0

NEAR_PLANE = 1e-3
FLATNESS_PX = 0.25
MAX_SUBDIVISION_DEPTH = 12


class ExportError(OSError):
    """PNG could not be written or read; carries the offending path."""

    def __init__(self, path: Path, reason: str):
        self.path = Path(path)
        self.reason = reason
        super().__init__(f"PNG I/O failed for {self.path}: {reason}")


def view_filename(pose_index: int) -> str:
    return f"view_{pose_index:02}.png"


# --------------------------------------------------------------------------- #
# Cameras
# --------------------------------------------------------------------------- #

class Projection(NamedTuple):
    u: float
    v: float
    depth: float


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera looking at a target, Z-up by default."""

    position: Point3
    look_at: Point3 = Point3(0.0, 0.0, 0.0)
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)
    focal_px: float = DEFAULT_FOCAL_PX
    width: int = DEFAULT_CANVAS
    height: int = DEFAULT_CANVAS

    def __post_init__(self):
        if self.position == self.look_at:
            raise ValueError("Camera position must differ from look_at")
        if self.focal_px <= 0:
            raise ValueError(f"focal_px must be > 0, got {self.focal_px}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Canvas must be positive, got {self.width}x{self.height}")
        forward = np.subtract(self.look_at.as_tuple(), self.position.as_tuple())
        if np.linalg.norm(np.cross(_normalize(forward), _normalize(np.asarray(self.up, float)))) < 1e-9:
            raise ValueError("Camera up vector is parallel to the view direction")

    @property
    def center(self) -> tuple[float, float]:
        return (self.width / 2.0, self.height / 2.0)

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera right, up and forward unit vectors in world space."""
        return _camera_basis(self.position.as_tuple(), self.look_at.as_tuple(), tuple(self.up))


@lru_cache(maxsize=256)
def _camera_basis(position, look_at, up):
    forward = _normalize(np.subtract(look_at, position).astype(np.float64))
    right = _normalize(np.cross(forward, np.asarray(up, dtype=np.float64)))
    cam_up = np.cross(right, forward)
    for v in (right, cam_up, forward):
        v.flags.writeable = False
    return right, cam_up, forward


@dataclass(frozen=True)
class CameraRig:
    poses: tuple[CameraPose, ...]

    def __post_init__(self):
        object.__setattr__(self, 'poses', tuple(self.poses))
        if len(self.poses) != VIEW_COUNT:
            raise ValueError(f"A rig needs exactly {VIEW_COUNT} poses, got {len(self.poses)}")


def project(point: Point3, pose: CameraPose) -> Optional[Projection]:
    """Project a world point to pixel coordinates.

    Returns None when the point lies behind the near plane.
    """
    right, cam_up, forward = pose.basis()
    d = np.subtract(point.as_tuple(), pose.position.as_tuple())
    z = float(d @ forward)
    if z <= NEAR_PLANE:
        return None
    x = float(d @ right)
    y = float(d @ cam_up)
    cx, cy = pose.center
    return Projection(cx + pose.focal_px * x / z, cy - pose.focal_px * y / z, z)


def bounds_in_frame(pose: CameraPose, bound: float) -> bool:
    """True iff all 8 corners of the [-bound, bound] cube land on the canvas."""
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (-1, 1):
                p = project(Point3(sx * bound, sy * bound, sz * bound), pose)
                if p is None or not (0 <= p.u <= pose.width and 0 <= p.v <= pose.height):
                    return False
    return True


@lru_cache(maxsize=32)
def _check_framing(radius: float, focal_px: float, width: int, height: int, bound: float) -> None:
    pose = CameraPose(Point3(radius, 0.0, 0.0), focal_px=focal_px, width=width, height=height)
    if not bounds_in_frame(pose, bound):
        logger.warning(
            "Rig radius %.2f with focal %.2f px does not frame the [-%.1f, %.1f] cube; "
            "strokes near the bounds may fall outside the canvas", radius, focal_px, bound, bound)


def default_rig(radius: float = DEFAULT_RADIUS,
                elevations: Sequence[float] = DEFAULT_ELEVATIONS,
                focal_px: float = DEFAULT_FOCAL_PX,
                canvas: int = DEFAULT_CANVAS,
                bound: float = 0.8) -> CameraRig:
    """Two elevation rings x 8 azimuths at 45 degree spacing, all aimed at the origin.

    Pose index = ring * 8 + k with azimuth 45*k degrees.
    """
    if not radius > 0:
        raise ValueError(f"Rig radius must be > 0, got {radius}")
    if len(elevations) != 2:
        raise ValueError(f"A 16-view rig needs exactly 2 elevation rings, got {len(elevations)}")

    poses = []
    for elevation in elevations:
        el = math.radians(elevation)
        for k in range(VIEW_COUNT // 2):
            az = math.radians(AZIMUTH_STEP * k)
            position = Point3(radius * math.cos(el) * math.cos(az),
                              radius * math.cos(el) * math.sin(az),
                              radius * math.sin(el))
            poses.append(CameraPose(position, focal_px=focal_px, width=canvas, height=canvas))

    _check_framing(float(radius), float(focal_px), canvas, canvas, float(bound))
    return CameraRig(tuple(poses))


# --------------------------------------------------------------------------- #
# Views
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class StrokeStyle:
    width_px: float = 2.0
    color: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 1.0)
    background: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)


@dataclass(frozen=True, eq=False)
class RenderedView:
    """Read-only float RGBA raster in [0, 1], shape (height, width, 4)."""

    pixels: np.ndarray
    pose_index: int
    stroke_style: StrokeStyle = field(default_factory=StrokeStyle)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 4:
            raise ValueError(f"Expected an HxWx4 raster, got shape {self.pixels.shape}")
        if not 0 <= self.pose_index < VIEW_COUNT:
            raise ValueError(f"pose_index must be in [0, {VIEW_COUNT}), got {self.pose_index}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("Pixel channels must lie in [0, 1]")
        self.pixels.flags.writeable = False

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def inked_mask(self) -> np.ndarray:
        """Pixels that differ from the background."""
        bg = np.asarray(self.stroke_style.background)
        return np.any(self.pixels != bg, axis=2)


# --------------------------------------------------------------------------- #
# Rasterization
# --------------------------------------------------------------------------- #

def _point_segment_distance(p, a, b) -> float:
    dx, dy = b[0] - a[0], b[1] - a[1]
    length2 = dx * dx + dy * dy
    if length2 == 0.0:
        return math.hypot(p[0] - a[0], p[1] - a[1])
    t = max(0.0, min(1.0, ((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / length2))
    return math.hypot(p[0] - (a[0] + t * dx), p[1] - (a[1] + t * dy))


def _flatten(curve: BezierCurve, pose: CameraPose) -> list[tuple[Projection, Projection]]:
    """Screen-space segments for one curve, in parameter order."""
    projected = [project(p, pose) for p in curve.points]
    if all(p is None for p in projected):
        return []

    segments = []
    stack = [(curve, projected, 0)]
    while stack:
        piece, proj, depth = stack.pop()
        if depth < MAX_SUBDIVISION_DEPTH:
            if any(p is None for p in proj):
                flat = False
            else:
                a, b = proj[0][:2], proj[3][:2]
                flat = max(_point_segment_distance(proj[1][:2], a, b),
                           _point_segment_distance(proj[2][:2], a, b)) < FLATNESS_PX
            if not flat:
                left, right = split(piece)
                stack.append((right, [project(p, pose) for p in right.points], depth + 1))
                stack.append((left, [project(p, pose) for p in left.points], depth + 1))
                continue
        if proj[0] is not None and proj[3] is not None:
            segments.append((proj[0], proj[3]))
    return segments


def _stamp_segment(accum: np.ndarray, transmit: np.ndarray, a: Projection, b: Projection,
                   style: StrokeStyle) -> None:
    """Composite one anti-aliased segment behind what is already drawn."""
    height, width = transmit.shape
    reach = style.width_px / 2.0 + 0.5
    col0 = max(0, math.floor(min(a.u, b.u) - reach))
    col1 = min(width, math.ceil(max(a.u, b.u) + reach) + 1)
    row0 = max(0, math.floor(min(a.v, b.v) - reach))
    row1 = min(height, math.ceil(max(a.v, b.v) + reach) + 1)
    if col0 >= col1 or row0 >= row1:
        return

    px = np.arange(col0, col1, dtype=np.float64)[None, :] + 0.5
    py = np.arange(row0, row1, dtype=np.float64)[:, None] + 0.5
    dx, dy = b.u - a.u, b.v - a.v
    length2 = dx * dx + dy * dy
    if length2 == 0.0:
        t = 0.0
    else:
        t = np.clip(((px - a.u) * dx + (py - a.v) * dy) / length2, 0.0, 1.0)
    dist = np.hypot(px - (a.u + t * dx), py - (a.v + t * dy))
    alpha = np.clip(reach - dist, 0.0, 1.0) * style.color[3]

    window = transmit[row0:row1, col0:col1]
    weight = window * alpha
    accum[row0:row1, col0:col1, :3] += weight[..., None] * np.asarray(style.color[:3])
    accum[row0:row1, col0:col1, 3] += weight
    window *= 1.0 - alpha


def render_view(sketch: Sketch, pose: CameraPose, pose_index: int,
                style: StrokeStyle = StrokeStyle()) -> RenderedView:
    """Rasterize a sketch from one pose."""
    segments = []
    for curve in sketch.curves:
        segments.extend(_flatten(curve, pose))
    # Nearest first; ties keep emission order
    order = sorted(range(len(segments)),
                   key=lambda i: ((segments[i][0].depth + segments[i][1].depth) / 2.0, i))

    accum = np.zeros((pose.height, pose.width, 4), dtype=np.float64)
    transmit = np.ones((pose.height, pose.width), dtype=np.float64)
    for i in order:
        _stamp_segment(accum, transmit, segments[i][0], segments[i][1], style)

    pixels = accum + transmit[..., None] * np.asarray(style.background, dtype=np.float64)
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return RenderedView(pixels=pixels, pose_index=pose_index, stroke_style=style)


def render(sketch: Sketch, rig: CameraRig, jobs: int = 1,
           style: StrokeStyle = StrokeStyle()) -> list[RenderedView]:
    """Render all 16 views; view i comes from rig.poses[i]."""
    if jobs <= 1:
        return [render_view(sketch, pose, i, style) for i, pose in enumerate(rig.poses)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda item: render_view(sketch, item[1], item[0], style),
                             enumerate(rig.poses)))


# --------------------------------------------------------------------------- #
# PNG I/O
# --------------------------------------------------------------------------- #

def to_rgba8(view: RenderedView) -> np.ndarray:
    return np.round(view.pixels * 255.0).astype(np.uint8)


def encode_png(view: RenderedView) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(to_rgba8(view)).save(buffer, format='PNG')
    return buffer.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    """Decode PNG bytes into a float RGBA raster in [0, 1]."""
    with Image.open(io.BytesIO(data)) as image:
        return np.asarray(image.convert('RGBA'), dtype=np.float64) / 255.0


def export_png(view: RenderedView, path: Path) -> Path:
    """Write a view as PNG.

    Raises:
        ExportError: If the file cannot be written
    """
    path = Path(path)
    try:
        path.write_bytes(encode_png(view))
    except OSError as e:
        raise ExportError(path, e.strerror or str(e)) from e
    return path


def export_views(views: Sequence[RenderedView], out_dir: Path) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [export_png(v, out_dir / view_filename(v.pose_index)) for v in views]


def load_png(path: Path, pose_index: int = 0) -> RenderedView:
    """Read a PNG back as a view (used for reference images and round trips)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ExportError(path, e.strerror or str(e)) from e
    return RenderedView(pixels=decode_png(data), pose_index=pose_index)
