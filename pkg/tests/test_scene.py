import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nevrf.errors import BehindCameraError, DegenerateViewError, FormatError
from nevrf.scene import (
    Camera,
    Ray,
    angular_difference,
    generate_ray,
    generate_rays,
    in_image_bounds,
    iter_groups,
    load_image,
    load_manifest,
    project_point,
    project_points,
    save_image,
    write_manifest,
    load_frame,
)
from conftest import random_camera


def identity_camera(f=1.0, c=(0.0, 0.0), width=4, height=4):
    K = np.array([[f, 0, c[0]], [0, f, c[1]], [0, 0, 1.0]])
    return Camera(intrinsics=K, extrinsics=np.eye(4), width=width, height=height)


class TestCameraInvariants:
    def test_rejects_non_orthonormal_rotation(self):
        T = np.eye(4)
        T[0, 1] = 0.3
        with pytest.raises(ValueError):
            Camera(intrinsics=np.eye(3), extrinsics=T, width=4, height=4)

    def test_rejects_nonpositive_focal(self):
        K = np.diag([-1.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            Camera(intrinsics=K, extrinsics=np.eye(4), width=4, height=4)

    def test_center_inverts_extrinsics(self, rng):
        cam = random_camera(rng)
        xc = cam.rotation @ cam.center + cam.translation
        assert np.allclose(xc, 0.0, atol=1e-12)


class TestProjectPoint:
    def test_optical_axis(self):
        cam = identity_camera()
        pixel, depth = project_point(cam, np.array([0.0, 0.0, 1.0]))
        assert np.allclose(pixel, [0.0, 0.0])
        assert depth == pytest.approx(1.0)

    def test_behind_camera_raises(self):
        cam = identity_camera()
        with pytest.raises(BehindCameraError):
            project_point(cam, np.array([0.0, 0.0, -1.0]))

    def test_matches_homogeneous_matrix_oracle(self, rng):
        # oracle: an independently composed 4x4 homogeneous projection
        for _ in range(1000):
            cam = random_camera(rng)
            x = rng.normal(scale=0.5, size=3)
            K4 = np.eye(4)
            K4[:3, :3] = cam.intrinsics
            P = K4 @ cam.extrinsics
            h = P @ np.append(x, 1.0)
            if h[2] <= 1e-6:
                continue
            expect = h[:2] / h[2]
            pixel, depth = project_point(cam, x)
            assert np.allclose(pixel, expect, atol=1e-9)
            assert depth == pytest.approx(h[2], abs=1e-9)

    def test_batched_matches_scalar(self, rng):
        cam = random_camera(rng)
        pts = rng.normal(scale=0.5, size=(64, 3))
        pixels, depths, ok = project_points(cam, pts)
        for i in range(len(pts)):
            if ok[i]:
                p, d = project_point(cam, pts[i])
                assert np.allclose(pixels[i], p, atol=1e-12)
                assert depths[i] == pytest.approx(d)


class TestGenerateRay:
    def test_principal_point_gives_forward_axis(self, rng):
        cam = random_camera(rng)
        pp = cam.intrinsics[:2, 2]
        ray = generate_ray(cam, pp)
        assert np.allclose(ray.direction, cam.forward, atol=1e-12)

    def test_round_trip_at_distance_two(self, rng):
        for _ in range(200):
            cam = random_camera(rng)
            pixel = np.array(
                [rng.uniform(0, cam.width), rng.uniform(0, cam.height)]
            )
            ray = generate_ray(cam, pixel)
            p2, _ = project_point(cam, ray.point_at(2.0))
            assert np.allclose(p2, pixel, atol=1e-4)

    def test_corner_pixel_hand_computed(self):
        # 4x4 image, f=2, principal point at image center (2,2):
        # corner pixel (0,0) unprojects along ((0-2)/2, (0-2)/2, 1)
        cam = identity_camera(f=2.0, c=(2.0, 2.0), width=4, height=4)
        ray = generate_ray(cam, (0.0, 0.0))
        d = np.array([-1.0, -1.0, 1.0])
        d = d / np.linalg.norm(d)
        assert np.allclose(ray.direction, d, atol=1e-9)
        assert np.allclose(ray.origin, 0.0, atol=1e-12)

    def test_batched_matches_scalar(self, rng):
        cam = random_camera(rng)
        pixels = rng.uniform(0, [cam.width, cam.height], size=(32, 2))
        origins, dirs = generate_rays(cam, pixels)
        for i in range(len(pixels)):
            ray = generate_ray(cam, pixels[i])
            assert np.allclose(origins[i], ray.origin, atol=1e-12)
            assert np.allclose(dirs[i], ray.direction, atol=1e-12)


class TestAngularDifference:
    def test_aligned_camera_gives_zero(self):
        ray = Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))
        cam = identity_camera()  # center at origin... move it back along -z
        T = np.eye(4)
        T[2, 3] = 2.0  # center at (0,0,-2)
        cam = Camera(intrinsics=np.eye(3), extrinsics=T, width=4, height=4)
        point = np.array([0.0, 0.0, 1.0])
        assert angular_difference(ray, point, cam) == pytest.approx(0.0, abs=1e-12)

    def test_perpendicular_gives_half_pi(self):
        ray = Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]))
        point = np.array([0.0, 0.0, 1.0])
        # camera centered so that center->point is +x
        T = np.eye(4)
        T[:3, 3] = -np.linalg.inv(np.eye(3)) @ np.array([-1.0, 0.0, 1.0])
        cam = Camera(intrinsics=np.eye(3), extrinsics=T, width=4, height=4)
        assert angular_difference(ray, point, cam) == pytest.approx(
            np.pi / 2, abs=1e-9
        )

    def test_matches_dot_product_oracle(self, rng):
        for _ in range(1000):
            cam = random_camera(rng)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            ray = Ray(origin=rng.normal(size=3), direction=d)
            point = rng.normal(scale=0.5, size=3)
            v = point - cam.center
            expect = np.arccos(
                np.clip(np.dot(d, v / np.linalg.norm(v)), -1.0, 1.0)
            )
            got = angular_difference(ray, point, cam)
            assert got == pytest.approx(expect, abs=1e-9)

    def test_degenerate_view_raises(self, rng):
        cam = random_camera(rng)
        ray = Ray(origin=np.zeros(3), direction=np.array([1.0, 0.0, 0.0]))
        with pytest.raises(DegenerateViewError):
            angular_difference(ray, cam.center, cam)

    def test_rigid_invariance(self, rng):
        # rotating the full configuration leaves the angle unchanged
        from scipy.spatial.transform import Rotation

        for _ in range(100):
            cam = random_camera(rng)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            ray = Ray(origin=rng.normal(size=3), direction=d)
            point = rng.normal(scale=0.5, size=3)
            base = angular_difference(ray, point, cam)

            R = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
            t = rng.normal(size=3)
            G = np.eye(4)
            G[:3, :3] = R
            G[:3, 3] = t
            cam2 = Camera(
                intrinsics=cam.intrinsics,
                extrinsics=cam.extrinsics @ np.linalg.inv(G),
                width=cam.width,
                height=cam.height,
            )
            ray2 = Ray(origin=R @ ray.origin + t, direction=R @ d)
            moved = angular_difference(ray2, R @ point + t, cam2)
            assert moved == pytest.approx(base, abs=1e-7)


class TestRayInvariants:
    def test_rejects_non_unit_direction(self):
        with pytest.raises(ValueError):
            Ray(origin=np.zeros(3), direction=np.array([1.0, 1.0, 0.0]))

    def test_rejects_bad_interval(self):
        d = np.array([1.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            Ray(origin=np.zeros(3), direction=d, near=2.0, far=1.0)


@settings(max_examples=50, deadline=None)
@given(
    px=st.floats(0.01, 31.99),
    py=st.floats(0.01, 23.99),
    seed=st.integers(0, 2**31 - 1),
)
def test_projection_round_trip_property(px, py, seed):
    cam = random_camera(np.random.default_rng(seed))
    ray = generate_ray(cam, (px, py))
    for d in (0.5, 1.0, 3.0):
        p, _ = project_point(cam, ray.point_at(d))
        assert np.allclose(p, [px, py], atol=1e-4)
        assert in_image_bounds(cam, p[None])[0]


class TestImageIO:
    @pytest.mark.parametrize("ext", ["png", "ppm"])
    def test_round_trip_8bit_exact(self, tmp_path, rng, ext):
        img = rng.integers(0, 256, size=(9, 7, 3)).astype(np.float32) / 255.0
        path = str(tmp_path / f"img.{ext}")
        save_image(path, img)
        back = load_image(path)
        assert back.shape == (9, 7, 3)
        assert np.array_equal(back, img)

    def test_values_scaled_to_unit_range(self, tmp_path):
        img = np.ones((4, 4, 3))
        path = str(tmp_path / "white.png")
        save_image(path, img)
        back = load_image(path)
        assert back.max() == 1.0 and back.min() == 1.0


class TestManifest:
    def _write_dataset(self, tmp_path, rng, n_frames=4, n_views=3):
        cams = [random_camera(rng, width=8, height=6) for _ in range(n_views)]
        paths = []
        for t in range(n_frames):
            row = []
            for v in range(n_views):
                rel = f"im_{t}_{v}.png"
                save_image(
                    str(tmp_path / rel), rng.uniform(0, 1, (6, 8, 3))
                )
                row.append(rel)
            paths.append(row)
        return write_manifest(
            str(tmp_path), [-1, -1, -1], [1, 1, 1], cams, paths
        ), cams

    def test_round_trip(self, tmp_path, rng):
        manifest, cams = self._write_dataset(tmp_path, rng)
        ds = load_manifest(manifest)
        assert ds.n_frames == 4 and ds.n_views == 3
        assert np.allclose(ds.bbox_min, [-1, -1, -1])
        for a, b in zip(ds.cameras, cams):
            assert np.allclose(a.intrinsics, b.intrinsics)
            assert np.allclose(a.extrinsics, b.extrinsics)
        frame = load_frame(ds, 2)
        assert frame.time_index == 2
        assert frame.n_views == 3

    def test_iter_groups_streams_consecutively(self, tmp_path, rng):
        manifest, _ = self._write_dataset(tmp_path, rng, n_frames=5)
        ds = load_manifest(manifest)
        groups = list(iter_groups(ds, group_size=2))
        assert [len(g) for g in groups] == [2, 2, 1]
        assert groups[1].group_start == 2
        assert [f.time_index for f in groups[1].frames] == [2, 3]

    def test_bad_manifest_rejected(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text('{"bbox": [0, 0, 0], "cameras": [], "frames": []}')
        with pytest.raises(FormatError):
            load_manifest(str(p))
