"""Tests for the multi-view rasterizer (scripts/renderer.py).

Geometry checks use analytic projections; image checks compare rendered
rasters against each other (symmetry, rotation, thread count) rather than
against stored golden images.
"""

import math
import random

import numpy as np
import pytest

from scripts.curves import BezierCurve, Point3, Sketch
from scripts.renderer import (
    DEFAULT_FOCAL_PX,
    VIEW_COUNT,
    CameraPose,
    CameraRig,
    ExportError,
    RenderedView,
    StrokeStyle,
    bounds_in_frame,
    decode_png,
    default_rig,
    encode_png,
    export_png,
    export_views,
    load_png,
    project,
    render,
    render_view,
    to_rgba8,
    view_filename,
)
from sketch_builders import cube, straight

AA_TOLERANCE = 2 / 255


@pytest.fixture(scope='module')
def rig():
    return default_rig()


@pytest.fixture(scope='module')
def cube_views(rig):
    return render(cube(), rig)


def _white_view(pose_index=0):
    return RenderedView(np.ones((512, 512, 4)), pose_index)


# --------------------------------------------------------------------------- #
# Cameras
# --------------------------------------------------------------------------- #

@pytest.mark.unit
class TestCameraPose:
    def test_rejects_position_at_target(self):
        """A camera sitting on its look-at point has no view direction"""
        with pytest.raises(ValueError):
            CameraPose(Point3(0, 0, 0))

    def test_rejects_up_parallel_to_view(self):
        """Up vector parallel to the view direction should be rejected"""
        with pytest.raises(ValueError):
            CameraPose(Point3(0, 0, 2.5))

    @pytest.mark.parametrize("kwargs", [{'focal_px': 0.0}, {'width': 0}, {'height': -1}])
    def test_rejects_bad_intrinsics(self, kwargs):
        with pytest.raises(ValueError):
            CameraPose(Point3(2.5, 0, 0), **kwargs)

    def test_rig_needs_sixteen_poses(self, rig):
        """A rig must have exactly 16 poses"""
        with pytest.raises(ValueError):
            CameraRig(rig.poses[:15])


@pytest.mark.unit
class TestDefaultRig:
    """Two rings of 8 cameras around the origin"""

    def test_pose_zero(self, rig):
        """Pose 0 sits at azimuth 0 on the upper ring"""
        el = math.radians(20.0)
        p = rig.poses[0].position
        assert p.as_tuple() == pytest.approx((2.5 * math.cos(el), 0.0, 2.5 * math.sin(el)), abs=1e-12)

    def test_all_poses_at_radius(self):
        """Every camera should be at the configured radius"""
        rig = default_rig(radius=3.1, elevations=(35.0, -5.0))
        assert len(rig.poses) == VIEW_COUNT
        for pose in rig.poses:
            assert math.dist(pose.position.as_tuple(), (0, 0, 0)) == pytest.approx(3.1, abs=1e-12)
            assert pose.look_at == Point3(0, 0, 0)
            assert pose.up == (0.0, 0.0, 1.0)

    def test_ring_azimuth_spacing(self, rig):
        """Each ring has 8 cameras 45 degrees apart"""
        for ring in (0, 1):
            azimuths = [math.degrees(math.atan2(p.position.y, p.position.x)) % 360
                        for p in rig.poses[ring * 8:ring * 8 + 8]]
            for k in range(8):
                assert azimuths[k] == pytest.approx(45.0 * k, abs=1e-9)

    def test_elevation_rings(self, rig):
        """Poses 0-7 are on the first elevation, 8-15 on the second"""
        for i, expected in ((0, 20.0), (7, 20.0), (8, -10.0), (15, -10.0)):
            p = rig.poses[i].position
            assert math.degrees(math.asin(p.z / 2.5)) == pytest.approx(expected, abs=1e-9)

    def test_deterministic(self):
        assert default_rig() == default_rig()

    @pytest.mark.parametrize("radius", [0.0, -1.0])
    def test_invalid_radius(self, radius):
        with pytest.raises(ValueError):
            default_rig(radius=radius)

    def test_needs_two_elevations(self):
        with pytest.raises(ValueError):
            default_rig(elevations=(20.0,))


# --------------------------------------------------------------------------- #
# Projection
# --------------------------------------------------------------------------- #

def _homogeneous_projection(pose: CameraPose) -> np.ndarray:
    """Independent look-at view matrix and intrinsics as one 3x4 matrix."""
    eye = np.array(pose.position.as_tuple())
    f = np.array(pose.look_at.as_tuple()) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, pose.up)
    r /= np.linalg.norm(r)
    u = np.cross(r, f)
    view = np.eye(4)
    view[0, :3], view[1, :3], view[2, :3] = r, -u, f
    view[:3, 3] = -view[:3, :3] @ eye
    k = np.array([[pose.focal_px, 0, pose.width / 2, 0],
                  [0, pose.focal_px, pose.height / 2, 0],
                  [0, 0, 1, 0]])
    return k @ view


@pytest.mark.unit
class TestProject:
    """Pinhole projection"""

    def test_origin_hits_principal_point(self, rig):
        """The origin should project to the image centre from every pose"""
        for pose in rig.poses:
            p = project(Point3(0, 0, 0), pose)
            assert (p.u, p.v) == pytest.approx((256.0, 256.0), abs=1e-9)
            assert p.depth == pytest.approx(2.5, abs=1e-12)

    def test_one_pixel_along_camera_right(self, rig):
        """Moving depth/focal along camera right should shift u by one pixel"""
        pose = rig.poses[3]
        right, _, _ = pose.basis()
        shift = right * 2.5 / DEFAULT_FOCAL_PX
        p = project(Point3(*shift), pose)
        assert (p.u, p.v) == pytest.approx((257.0, 256.0), abs=1e-9)

    def test_behind_camera(self):
        """Points on or behind the camera plane do not project"""
        pose = CameraPose(Point3(2.5, 0, 0))
        assert project(Point3(3.0, 0, 0), pose) is None
        assert project(Point3(2.5, 0.3, 0), pose) is None  # on the camera plane

    def test_bounds_in_frame(self):
        """The framing check should accept a small cube and reject the full canvas cube"""
        pose = CameraPose(Point3(2.5, 0, 0))
        assert bounds_in_frame(pose, 0.4)
        assert not bounds_in_frame(pose, 0.8)

    @pytest.mark.integration
    def test_matches_homogeneous_pipeline(self, rig):
        """Projection should match a 4x4 homogeneous matrix pipeline on random points"""
        rng = random.Random(11)
        matrices = [_homogeneous_projection(p) for p in rig.poses]
        worst = 0.0
        for _ in range(10_000):
            i = rng.randrange(VIEW_COUNT)
            point = Point3(*(rng.uniform(-0.8, 0.8) for _ in range(3)))
            got = project(point, rig.poses[i])
            h = matrices[i] @ np.array([*point.as_tuple(), 1.0])
            expected = h[:2] / h[2]
            worst = max(worst, abs(got.u - expected[0]), abs(got.v - expected[1]))
        assert worst < 1e-6


# --------------------------------------------------------------------------- #
# Rendering
# --------------------------------------------------------------------------- #

@pytest.mark.unit
class TestRender:
    """Anti-aliased rasterization of all 16 views"""

    def test_view_count_and_size(self, cube_views):
        """Rendering gives 16 views of 512x512 RGBA in pose order"""
        assert len(cube_views) == VIEW_COUNT
        assert [v.pose_index for v in cube_views] == list(range(VIEW_COUNT))
        for view in cube_views:
            assert view.pixels.shape == (512, 512, 4)
            assert 0.0 <= view.pixels.min() and view.pixels.max() <= 1.0
            assert view.inked_mask().sum() > 0

    def test_empty_sketch_is_white(self, rig):
        """An empty sketch renders as pure background"""
        for view in render(Sketch(), rig):
            assert np.all(view.pixels == 1.0)
            assert view.inked_mask().sum() == 0

    def test_views_are_read_only(self, cube_views):
        """Rendered pixel buffers cannot be modified"""
        with pytest.raises(ValueError):
            cube_views[0].pixels[0, 0, 0] = 0.0

    def test_stroke_colour(self, cube_views):
        """Fully covered pixels take the stroke colour"""
        darkest = cube_views[0].pixels[..., 0].min()
        assert darkest == pytest.approx(0.1, abs=1e-9)

    def test_deterministic_and_thread_independent(self, rig, cube_views):
        """Output is bit-identical across runs and worker counts"""
        again = render(cube(), rig, jobs=1)
        threaded = render(cube(), rig, jobs=8)
        for a, b, c in zip(cube_views, again, threaded):
            assert np.array_equal(a.pixels, b.pixels)
            assert np.array_equal(a.pixels, c.pixels)

    def test_straight_line_silhouette(self, rig):
        """A straight line should render as a horizontal band of the expected length"""
        a, b = Point3(-0.5, 0, 0), Point3(0.5, 0, 0)
        pose = rig.poses[2]  # azimuth 90
        view = render_view(Sketch((straight(a.as_tuple(), b.as_tuple()),)), pose, 2)
        pa, pb = project(a, pose), project(b, pose)
        assert pa.v == pytest.approx(pb.v, abs=1e-9)  # horizontal on screen

        rows, cols = np.nonzero(view.pixels[..., 0] < 0.5)
        assert len(rows) > 0
        centres = np.stack([cols + 0.5, rows + 0.5], axis=1)
        d = np.array([pb.u - pa.u, pb.v - pa.v])
        t = np.clip(((centres - [pa.u, pa.v]) @ d) / (d @ d), 0.0, 1.0)
        deviation = np.linalg.norm(centres - ([pa.u, pa.v] + t[:, None] * d), axis=1)
        assert deviation.max() < 1.5
        assert cols.min() <= min(pa.u, pb.u) + 1.5 and cols.max() >= max(pa.u, pb.u) - 1.5

    def test_mirror_symmetric_sketch(self, rig):
        """A y-mirrored sketch renders as the mirrored views"""
        def mirror(p):
            return Point3(p.x, -p.y, p.z)

        line = straight((0.5, 0.3, 0.0), (-0.2, -0.3, 0.4))
        edge = straight((0.3, 0.1, -0.4), (0.1, 0.5, 0.2))
        sketch = Sketch((line, line.map(mirror), edge, edge.map(mirror)))
        views = render(sketch, rig)
        for ring in (0, 1):
            for k in (1, 2, 3):
                left = views[ring * 8 + k].pixels
                right = views[ring * 8 + (8 - k)].pixels
                assert np.abs(left - np.flip(right, axis=1)).max() <= AA_TOLERANCE

    def test_rotation_shifts_view_order(self, rig):
        """Rotating by 45 degrees about z should shift views by one ring position"""
        c, s = math.cos(math.radians(45)), math.sin(math.radians(45))
        base = Sketch(cube().curves + (straight((0.0, 0.0, 0.0), (0.6, 0.2, 0.1)),))
        rotated = base.map(lambda p: Point3(c * p.x - s * p.y, s * p.x + c * p.y, p.z))
        original, turned = render(base, rig), render(rotated, rig)
        for ring in (0, 1):
            for k in range(8):
                a = original[ring * 8 + k].pixels
                b = turned[ring * 8 + (k + 1) % 8].pixels
                assert np.abs(a - b).max() <= AA_TOLERANCE

    def test_coverage_monotone(self, rig, cube_views):
        """Removing a curve never inks more pixels"""
        fewer = render(Sketch(cube().curves[:-1]), rig)
        for smaller, full in zip(fewer, cube_views):
            assert full.inked_mask().sum() >= smaller.inked_mask().sum()

    def test_curve_behind_camera_is_skipped(self):
        """A curve entirely behind the camera leaves the view blank"""
        pose = CameraPose(Point3(2.5, 0, 0))
        behind = BezierCurve.from_points([[3.0, 0, 0], [3.1, 0.1, 0], [3.2, 0.1, 0], [3.3, 0, 0]])
        view = render_view(Sketch((behind,)), pose, 0)
        assert view.inked_mask().sum() == 0

    def test_curve_crossing_near_plane(self):
        """A curve crossing the near plane is clipped, not dropped"""
        pose = CameraPose(Point3(2.5, 0, 0))
        crossing = straight((0.0, 0.1, 0.0), (3.0, 0.1, 0.0))
        view = render_view(Sketch((crossing,)), pose, 0)
        assert view.inked_mask().sum() > 0

    def test_custom_style(self, rig):
        """Wider strokes should ink more pixels"""
        style = StrokeStyle(width_px=4.0)
        thin = render_view(cube(), rig.poses[0], 0)
        thick = render_view(cube(), rig.poses[0], 0, style)
        assert thick.inked_mask().sum() > thin.inked_mask().sum()

    def test_view_validation(self):
        with pytest.raises(ValueError):
            RenderedView(np.ones((4, 4, 3)), 0)
        with pytest.raises(ValueError):
            RenderedView(np.ones((4, 4, 4)), VIEW_COUNT)
        with pytest.raises(ValueError):
            RenderedView(np.full((4, 4, 4), 1.5), 0)


# --------------------------------------------------------------------------- #
# PNG I/O
# --------------------------------------------------------------------------- #

@pytest.mark.unit
class TestPng:
    """PNG encode, decode and export"""

    def test_white_view_decodes_to_255(self):
        decoded = decode_png(encode_png(_white_view()))
        assert decoded.shape == (512, 512, 4)
        assert np.all(np.round(decoded * 255) == 255)

    def test_round_trip(self, cube_views):
        """PNG encode then decode should reproduce the 8-bit pixels exactly"""
        view = cube_views[4]
        decoded = decode_png(encode_png(view))
        assert np.array_equal(np.round(decoded * 255).astype(np.uint8), to_rgba8(view))

    def test_byte_deterministic(self, cube_views):
        """The same view always encodes to the same bytes"""
        assert encode_png(cube_views[0]) == encode_png(cube_views[0])

    def test_export_views(self, tmp_path, cube_views):
        """Views export as view_00.png to view_15.png"""
        paths = export_views(cube_views, tmp_path / 'views')
        assert [p.name for p in paths] == [view_filename(i) for i in range(VIEW_COUNT)]
        assert paths[15].name == 'view_15.png'
        loaded = load_png(paths[5], pose_index=5)
        assert loaded.pixels.shape == (512, 512, 4)
        assert np.array_equal(to_rgba8(loaded), to_rgba8(cube_views[5]))

    def test_export_to_missing_directory(self, tmp_path):
        """Writing into a missing directory should raise ExportError naming the path"""
        target = tmp_path / 'missing' / 'view_00.png'
        with pytest.raises(ExportError) as exc:
            export_png(_white_view(), target)
        assert exc.value.path == target

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ExportError):
            load_png(tmp_path / 'nope.png')
