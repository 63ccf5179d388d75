import math

import numpy as np
import pytest

from jointdiff import evalkit as e
from jointdiff import geometry as g
from jointdiff import scenesim as s


@pytest.fixture(scope="module")
def cfg():
    return s.SimConfig()


@pytest.fixture(scope="module")
def record(cfg):
    return s.make_record(3, cfg)


class TestDAS:
    def test_scale_invariance(self, cfg):
        """A reference at a global depth scale keeps the error proportional."""
        rig, spec = cfg.camera_rig(), cfg.lidar_spec()
        rec = s.make_record(1, cfg)
        base = e.das(rec.range_image, rec.depth_gt, rig, spec)
        scaled = e.das(rec.range_image, rec.depth_gt * 3.0, rig, spec)
        assert scaled == pytest.approx(base / 3.0, rel=1e-9)

    def test_proportional_reference_is_zero(self, cfg):
        """Reference depths painted from the points themselves, scaled by 2.5, leave no error."""
        rig, spec = cfg.camera_rig(), cfg.lidar_spec()
        rec = s.make_record(2, cfg)
        pts, _ = g.range_image_to_points(rec.range_image)
        # one point per landing pixel so no pixel is written twice
        keep = np.zeros(len(pts), dtype=bool)
        ref = np.full((4, 32, 64), np.inf)
        seen = set()
        for v, cam in enumerate(rig):
            u, vv, d, ok = g.project_points(pts, cam)
            for i in np.flatnonzero(ok):
                cell = (v, int(vv[i]), int(u[i]))
                if cell in seen:
                    continue
                seen.add(cell)
                ref[cell] = 2.5 * d[i]
        # only points that own their pixel in every view they land in
        for i in range(len(pts)):
            keep[i] = all(
                not ok or ref[v, int(vv), int(uu)] == pytest.approx(2.5 * d, rel=1e-12)
                for v, cam in enumerate(rig)
                for uu, vv, d, ok in [g.project_to_camera(pts[i], cam)]
            )
        sub = g.points_to_range_image(pts[keep], np.full(int(keep.sum()), 0.5), spec)
        sub_pts, _ = g.range_image_to_points(sub)
        np.testing.assert_allclose(np.sort(sub_pts, 0), np.sort(pts[keep], 0), atol=1e-9)
        assert keep.sum() > 100
        assert e.das(sub, ref, rig, spec) == pytest.approx(0.0, abs=1e-12)

    def test_three_point_oracle(self, cfg):
        """Hand-computed median-ratio error for three returns straight ahead of camera 0."""
        rig, spec = cfg.camera_rig(), cfg.lidar_spec()
        cam = rig[0]
        fwd = cam.rotation[2]
        yaw = np.arctan2(fwd[1], fwd[0])
        col = int(np.argmin(np.abs(spec.bin_center_azimuths() - yaw)))
        row = int(np.argmin(np.abs(spec.beam_elevations)))
        cells = [(row, col - 2, 5.0), (row, col, 8.0), (row + 1, col + 3, 12.0)]
        img = g.RangeImage.empty(spec)
        for r, c_, dist in cells:
            img.values[r, c_] = (dist / spec.r_max, 0.5)
        ref = np.full((4, 32, 64), np.inf)
        ref_depths = [4.0, 10.0, 11.0]
        proj = []
        for (r, c_, dist), rd in zip(cells, ref_depths):
            theta = spec.bin_center_azimuths()[c_]
            phi = spec.beam_elevations[r]
            stored = float(np.float32(dist / spec.r_max)) * spec.r_max
            p = stored * np.array([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)])
            pc = cam.rotation @ p + cam.translation
            u = cam.intrinsics[0, 0] * pc[0] / pc[2] + cam.intrinsics[0, 2]
            v = cam.intrinsics[1, 1] * pc[1] / pc[2] + cam.intrinsics[1, 2]
            assert 0 <= u < cam.width and 0 <= v < cam.height
            for other in rig.cameras[1:]:
                assert not g.project_to_camera(p, other)[3]
            ref[0, int(v), int(u)] = rd
            proj.append(1.0 / pc[2])
        refd = [1.0 / rd for rd in ref_depths]
        scale = sorted(r_ / p_ for r_, p_ in zip(refd, proj))[1]
        expected = sum(abs(scale * p_ - r_) for p_, r_ in zip(proj, refd)) / 3
        assert expected > 1e-3
        assert e.das(img, ref, rig, spec) == pytest.approx(expected, abs=1e-9)

    def test_undefined_when_nothing_lands(self, cfg):
        rig, spec = cfg.camera_rig(), cfg.lidar_spec()
        assert e.das(g.RangeImage.empty(spec), np.ones((4, 32, 64)), rig, spec) is None

    def test_ground_truth_is_small(self, cfg, record):
        assert e.das(record.range_image, record.depth_gt, record.rig, record.lidar) < 0.05


class TestDistributions:
    def test_bev_normalized_and_order_invariant(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-25, 25, size=(500, 3))
        h = e.bev_histogram(pts)
        assert h.shape == (16, 16) and h.sum() == pytest.approx(1.0, abs=1e-12) and h.min() >= 0
        np.testing.assert_array_equal(h, e.bev_histogram(pts[::-1]))
        flat = pts.copy()
        flat[:, 2] = 7.0
        np.testing.assert_array_equal(h, e.bev_histogram(flat))
        assert not e.bev_histogram(np.zeros((0, 3))).any()
        assert not e.bev_histogram(np.array([[30.0, 0.0, 0.0]])).any()

    def test_mmd_identical_sets(self):
        rng = np.random.default_rng(1)
        hists = [rng.dirichlet(np.ones(256)) for _ in range(40)]
        assert abs(e.mmd(hists, hists)) <= 1e-6

    def test_mmd_symmetry(self):
        rng = np.random.default_rng(2)
        a = [rng.dirichlet(np.ones(16)) for _ in range(10)]
        b = [rng.dirichlet(np.ones(16) * 3) for _ in range(10)]
        assert e.mmd(a, b) == e.mmd(b, a)
        c = b[:7]
        assert e.mmd(a, c) == pytest.approx(e.mmd(c, a), abs=1e-15)
        assert e.jsd(a, b) == pytest.approx(e.jsd(b, a), abs=1e-15)

    def test_mmd_double_loop_oracle(self):
        rng = np.random.default_rng(3)
        a = [rng.dirichlet(np.ones(4)) for _ in range(3)]
        b = [rng.dirichlet(np.ones(4) * 0.5) for _ in range(3)]
        pooled = a + b
        dists = sorted(math.dist(pooled[i], pooled[j]) for i in range(6) for j in range(i + 1, 6))
        sigma = dists[7]    # 15 pairwise distances: the median is the 8th
        k = lambda x, y: math.exp(-math.dist(x, y) ** 2 / (2 * sigma ** 2))  # noqa: E731
        total = 0.0
        for i in range(3):
            for j in range(3):
                if i != j:
                    total += k(a[i], a[j]) + k(b[i], b[j]) - k(a[i], b[j]) - k(a[j], b[i])
        assert e.mmd(a, b) == pytest.approx(total / 6, abs=1e-9)
        # unequal sizes: standard unbiased estimator
        c = b[:2]
        pooled = a + c
        dists = sorted(math.dist(pooled[i], pooled[j]) for i in range(5) for j in range(i + 1, 5))
        sig = (dists[4] + dists[5]) / 2
        k = lambda x, y: math.exp(-math.dist(x, y) ** 2 / (2 * sig ** 2))  # noqa: E731
        xx = sum(k(a[i], a[j]) for i in range(3) for j in range(3) if i != j) / 6
        yy = sum(k(c[i], c[j]) for i in range(2) for j in range(2) if i != j) / 2
        xy = sum(k(x, y) for x in a for y in c) / 6
        assert e.mmd(a, c) == pytest.approx(xx + yy - 2 * xy, abs=1e-9)

    def test_jsd_extremes(self):
        p = np.zeros(256)
        p[:128] = 1 / 128
        q = np.zeros(256)
        q[128:] = 1 / 128
        assert e.jsd([p, p], [p]) == pytest.approx(0.0, abs=1e-12)
        assert e.jsd([p], [q]) == pytest.approx(math.log(2), abs=1e-8)

    def test_empty_rejected(self):
        with pytest.raises(e.EmptySetError):
            e.mmd([], [np.zeros(4)])
        with pytest.raises(e.EmptySetError):
            e.jsd([np.zeros(4)], [])

    def test_luminance_features(self):
        imgs = np.ones((2, 4, 32, 64, 3)) * 0.5
        f = e.luminance_features(imgs)
        assert f.shape == (2, 4 * 64)
        np.testing.assert_allclose(f, 0.5)


class TestOverlap:
    def test_self_consistent(self, cfg):
        for seed in range(6):
            rec = s.make_record(seed, cfg)
            assert e.overlap_consistency(rec.images, rec.rig, rec.depth_gt) >= 0.98

    def test_noise_view_degrades(self, record):
        base = e.overlap_consistency(record.images, record.rig, record.depth_gt)
        noisy = record.images.copy()
        noisy[2] = np.random.default_rng(0).uniform(size=noisy[2].shape)
        assert e.overlap_consistency(noisy, record.rig, record.depth_gt) < base

    def test_ground_only_scene(self, cfg):
        rig = cfg.camera_rig()
        scene = s.SceneSpec(0, -1.8, [], ("day", "clear"), np.array([0.0, 0.0, 1.0]))
        imgs, depth = s.render_views(scene, rig)
        score = e.overlap_consistency(imgs, rig, depth)
        assert score is not None and score >= 0.98

    def test_undefined_without_overlap(self, cfg):
        rig = s.SimConfig(hfov_deg=60.0).camera_rig()
        depth = np.full((4, 32, 64), 1e-3)     # everything a millimetre away: nothing reaches a neighbour
        assert e.overlap_consistency(np.zeros((4, 32, 64, 3)), rig, depth) is None


class TestReport:
    def test_report_keys(self, tmp_path):
        path = tmp_path / "report.txt"
        e.write_report({"das": 0.1, "mmd": 1e-4, "jsd": 0.05, "overlap": None, "n_scenes": 4}, path)
        back = e.read_report(path)
        assert list(back) == ["das", "mmd", "jsd", "overlap", "n_scenes"]
        assert back["overlap"] == "undefined" and float(back["mmd"]) == 1e-4
