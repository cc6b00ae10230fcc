import numpy as np
import pytest
from PIL import Image

from reginit.errors import FormatError, InvalidArgumentError
from reginit.geometry import CameraGeometry, PoseParams
from reginit.projector import (
    DetectorImage,
    ProjectionConfig,
    add_noise,
    export_png16,
    load_image,
    normalize_minmax,
    pixel_centers,
    ray_for_pixel,
    render_drr,
    render_stack,
    save_image,
)
from reginit.volume import PhantomSpec, Volume, make_phantom

RAW = ProjectionConfig(n_samples_per_ray=256, normalize_output=False)


def single_voxel_volume(n=33, spacing=2.0):
    data = np.zeros((n, n, n), np.float32)
    data[n // 2, n // 2, n // 2] = 1.0
    return Volume(data, spacing)


def small_blob(n=33, spacing=2.0, radius_vox=2.5):
    i = np.arange(n) - n // 2
    X, Y, Z = np.meshgrid(i, i, i, indexing="ij")
    return Volume((X**2 + Y**2 + Z**2 <= radius_vox**2).astype(np.float32), spacing)


def intensity_centroid(img):
    rows, cols = np.indices(img.shape)
    return np.array([(rows * img).sum(), (cols * img).sum()]) / img.sum()


class TestRays:
    def test_detector_center_on_axis(self, cam):
        src, _ = ray_for_pixel(cam, 0, 0)
        np.testing.assert_array_equal(src, [0, 0, -800])
        # the point midway between the four central pixel centers
        pts = []
        for r, c in [(63, 63), (63, 64), (64, 63), (64, 64)]:
            s, d = ray_for_pixel(cam, r, c)
            pts.append(s + d * (1020.0 / d[2]))
        center = np.mean(pts, axis=0)
        np.testing.assert_allclose(center, [0, 0, 220], atol=1e-9)
        direction = (center - src) / np.linalg.norm(center - src)
        np.testing.assert_allclose(direction, [0, 0, 1], atol=1e-12)

    def test_corner_offset(self, cam):
        s, d = ray_for_pixel(cam, 0, 0)
        hit = s + d * (1020.0 / d[2])
        assert abs(hit[0]) == pytest.approx(63.5 * 2.176, abs=1e-9)
        assert abs(hit[1]) == pytest.approx(138.176, abs=1e-9)
        assert hit[0] < 0 and hit[1] > 0  # column 0 is left, row 0 is top

    def test_unit_directions(self, cam):
        for r in range(0, 128, 9):
            for c in range(0, 128, 7):
                assert abs(np.linalg.norm(ray_for_pixel(cam, r, c)[1]) - 1.0) < 1e-12

    @pytest.mark.parametrize("rc", [(-1, 0), (0, 128), (128, 0)])
    def test_out_of_range(self, cam, rc):
        with pytest.raises(InvalidArgumentError):
            ray_for_pixel(cam, *rc)

    def test_pixel_centers_agree_with_rays(self):
        cam = CameraGeometry(detector_rows=6, detector_cols=4, pixel_spacing_mm=3.0)
        xs, ys = pixel_centers(cam)
        s, d = ray_for_pixel(cam, 5, 1)
        hit = s + d * (cam.source_to_detector_mm / d[2])
        np.testing.assert_allclose(hit[:2], [xs[1], ys[5]], atol=1e-9)


class TestRenderOracles:
    def test_empty_volume(self, cam):
        v = Volume(np.zeros((16, 16, 16), np.float32), 2.0)
        img = render_drr(v, PoseParams(rx=5), cam)
        assert np.all(img.data == 0)
        assert np.all(render_drr(v, PoseParams(), cam, RAW).data == 0)

    def test_single_voxel_at_iso_center(self, cam):
        img = render_drr(single_voxel_volume(), PoseParams(), cam, RAW).data
        r, c = np.unravel_index(np.argmax(img), img.shape)
        assert r in (63, 64) and c in (63, 64)
        rows, cols = np.indices(img.shape)
        far = np.maximum(np.abs(rows - 63.5), np.abs(cols - 63.5)) > 4
        assert np.all(img[far] == 0)
        assert img.max() > 0

    def test_in_plane_translation_magnification(self, cam):
        v = small_blob()
        a = render_drr(v, PoseParams(), cam, RAW).data
        b = render_drr(v, PoseParams(tx=20.0), cam, RAW).data
        shift = intensity_centroid(b) - intensity_centroid(a)
        expected = 20.0 * (1020.0 / 800.0) / 2.176
        assert abs(shift[1] - expected) < 1.0
        assert abs(shift[0]) < 1e-6
        # +y in the world is up on the detector, i.e. towards row 0
        c = render_drr(v, PoseParams(ty=20.0), cam, RAW).data
        assert intensity_centroid(c)[0] - intensity_centroid(a)[0] == pytest.approx(-expected, abs=1.0)

    def test_depth_translation_changes_magnification(self, cam):
        v = small_blob(radius_vox=6)
        near = render_drr(v, PoseParams(tz=-100.0), cam, RAW).data
        far = render_drr(v, PoseParams(tz=100.0), cam, RAW).data
        assert (near > 0).sum() > (far > 0).sum()

    def test_linearity_in_the_volume(self, small_cam):
        rng = np.random.default_rng(4)
        v1 = Volume(rng.uniform(0, 1, (20, 20, 20)).astype(np.float32), 6.0)
        v2 = make_phantom(20, 6.0, PhantomSpec(seed=2))
        alpha, beta = 0.75, 2.5
        v12 = Volume(alpha * v1.data.astype(np.float64) + beta * v2.data.astype(np.float64), 6.0)
        pose = PoseParams(12, -7, 30, 5, -4, 10)
        lhs = render_drr(v12, pose, small_cam, RAW).data
        rhs = alpha * render_drr(v1, pose, small_cam, RAW).data + beta * render_drr(v2, pose, small_cam, RAW).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))

    def test_half_turn_about_the_beam_axis(self, phantom, cam, fast_projection):
        cfg = ProjectionConfig(fast_projection.n_samples_per_ray, normalize_output=False)
        a = render_drr(phantom, PoseParams(), cam, cfg).data
        b = render_drr(phantom, PoseParams(rz=-180.0), cam, cfg).data
        rms = np.sqrt(np.mean((b - a[::-1, ::-1]) ** 2))
        assert rms <= 1e-4 * a.max()

    def test_deterministic(self, phantom, cam, fast_projection):
        p = PoseParams(3, 4, 5, 6, 7, 8)
        assert render_drr(phantom, p, cam, fast_projection) == render_drr(phantom, p, cam, fast_projection)

    def test_stack_matches_single_renders(self, small_phantom, small_cam):
        poses = [PoseParams(), PoseParams(rx=10), PoseParams(tz=-20)]
        stack = render_stack(small_phantom, poses, small_cam)
        for img, p in zip(stack, poses):
            np.testing.assert_array_equal(img, render_drr(small_phantom, p, small_cam).data)

    def test_normalized_output_range(self, small_phantom, small_cam):
        img = render_drr(small_phantom, PoseParams(rz=33), small_cam).data
        assert img.min() == 0.0 and img.max() == 1.0

    def test_support_clipping_is_exact(self, small_cam):
        # the same object padded with extra empty space renders identically
        v = make_phantom(20, 6.0, PhantomSpec(seed=4))
        big = np.zeros((30, 30, 30), np.float32)
        big[5:25, 5:25, 5:25] = v.data
        vb = Volume(big, 6.0)
        for pose in [PoseParams(), PoseParams(20, -10, 5, 3, 2, -8)]:
            a = render_drr(v, pose, small_cam, RAW).data
            b = render_drr(vb, pose, small_cam, ProjectionConfig(int(256 * 1.5), normalize_output=False)).data
            # same step length (bounding chord scales with the volume), so only sample positions differ
            assert np.max(np.abs(a - b)) < 0.02 * a.max()


class TestSmoothness:
    # forward differences are first order, so successive step halvings shrink the error by ~2;
    # steps must exceed the voxel-scale kinks of trilinear interpolation to be in that regime
    @pytest.mark.parametrize("axis,h", [(0, 1.0), (1, 1.0), (2, 1.0), (3, 4.0), (4, 4.0), (5, 4.0)])
    def test_richardson_ratio(self, phantom, cam, axis, h):
        cfg = ProjectionConfig(256, normalize_output=False)
        base = np.array([5.0, -3.0, 8.0, 4.0, -6.0, 10.0])

        def img(delta):
            p = base.copy()
            p[axis] += delta
            return render_drr(phantom, PoseParams.from_array(p), cam, cfg).data

        i0 = img(0.0)
        d = {s: (img(s) - i0) / s for s in (h, h / 2, h / 4)}
        dominant = np.abs(d[h / 4]) >= np.quantile(np.abs(d[h / 4]), 0.99)
        num = np.linalg.norm((d[h] - d[h / 2])[dominant])
        den = np.linalg.norm((d[h / 2] - d[h / 4])[dominant])
        assert 1.7 <= num / den <= 2.3


class TestImagesOnDisk:
    def test_round_trip(self, tmp_path):
        img = DetectorImage(np.random.default_rng(0).uniform(0, 1, (5, 7)), 1.25)
        save_image(img, tmp_path / "im")
        back = load_image(tmp_path / "im")
        assert back.shape == (5, 7)
        np.testing.assert_array_equal(back.data, img.data.astype(np.float32))
        assert back.pixel_spacing_mm == 1.25

    def test_stored_with_unit_depth(self, tmp_path):
        import json

        save_image(DetectorImage(np.zeros((3, 4))), tmp_path / "im")
        header = json.loads((tmp_path / "im.json").read_text())
        assert header["dims"] == [4, 3, 1]
        assert header["kind"] == "detector_image"

    def test_rejects_volume_files(self, tmp_path):
        from reginit.volume import save_volume

        save_volume(Volume(np.zeros((3, 3, 3), np.float32), 1.0), tmp_path / "v")
        with pytest.raises(FormatError):
            load_image(tmp_path / "v")

    def test_png16(self, tmp_path):
        data = np.linspace(0, 3, 12).reshape(3, 4)
        path = export_png16(DetectorImage(data), tmp_path / "im.png")
        with Image.open(path) as im:
            arr = np.array(im)
        assert arr.shape == (3, 4)
        assert arr.min() == 0 and arr.max() == 65535
        assert arr[0, 1] < arr[0, 2]


class TestSmallPieces:
    def test_config_minimum_samples(self):
        with pytest.raises(InvalidArgumentError):
            ProjectionConfig(n_samples_per_ray=31)

    def test_normalize_constant_is_zero(self):
        np.testing.assert_array_equal(normalize_minmax(np.full((3, 3), 7.0)), 0.0)

    def test_detector_image_validation(self):
        with pytest.raises(InvalidArgumentError):
            DetectorImage(np.zeros(5))
        with pytest.raises(InvalidArgumentError):
            DetectorImage(np.array([[np.nan]]))

    def test_add_noise(self):
        img = DetectorImage(np.zeros((50, 50)))
        assert add_noise(img, 0.0, np.random.default_rng(0)) is img
        noisy = add_noise(img, 0.1, np.random.default_rng(0))
        assert 0.08 < noisy.data.std() < 0.12
        assert noisy == add_noise(img, 0.1, np.random.default_rng(0))
