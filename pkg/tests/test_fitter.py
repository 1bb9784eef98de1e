import numpy as np
import pytest

from rayblend.compositor import overlay_raw
from rayblend.fitter import (ConfigError, FitConfig, FitDivergence, crop_view, fit,
                             fit_pair_with_overlay, render_image, zoom_view)
from rayblend.head import HeadConfig
from rayblend.losses import LossError, compute_loss, psnr
from rayblend.raster import render_forward
from rayblend.scene import Camera, DescriptorSet, FitDataset, PointCloud, Scene, TargetKind
from rayblend.synthetic import orbit_cameras, render_dataset, two_layer_scene


class TestLoss:
    def test_identical(self):
        img = np.random.default_rng(0).random((4, 4, 4))
        loss, grad = compute_loss(img, img)
        assert loss == 0 and not grad.any()

    def test_channel_mean(self):
        pred = np.array([[[1.0, 0.0, 0.0, 1.0]]])
        loss, _ = compute_loss(pred, np.array([[[0.0, 0.0, 0.0, 1.0]]]), "l1", beta=0.0)
        assert loss == pytest.approx(1 / 3)

    def test_alpha_term(self):
        pred = np.array([[[0.2, 0.3, 0.4, 0.5]]])
        target = np.array([[[0.2, 0.3, 0.4, 1.0]]])
        loss, grad = compute_loss(pred, target, "l1", beta=10.0)
        assert loss == pytest.approx(5.0)
        assert grad[0, 0, 3] == pytest.approx(-10.0)

    def test_rgb_needs_background(self):
        with pytest.raises(LossError):
            compute_loss(np.zeros((2, 2, 4)), np.zeros((2, 2, 3)))

    def test_size_mismatch(self):
        with pytest.raises(LossError):
            compute_loss(np.zeros((2, 2, 4)), np.zeros((2, 3, 4)))

    @pytest.mark.parametrize("kind", ["l1", "l2"])
    @pytest.mark.parametrize("rgb_target", [False, True])
    def test_gradient_matches_fd(self, kind, rgb_target):
        rng = np.random.default_rng(1)
        pred = rng.random((3, 3, 4))
        target = rng.random((3, 3, 3 if rgb_target else 4))
        bg = rng.random((3, 3, 3)) if rgb_target else None
        _, grad = compute_loss(pred, target, kind, 0.7, bg)
        h = 1e-6
        for idx in np.ndindex(pred.shape):
            p1, p2 = pred.copy(), pred.copy()
            p1[idx] += h
            p2[idx] -= h
            fd = (compute_loss(p1, target, kind, 0.7, bg)[0]
                  - compute_loss(p2, target, kind, 0.7, bg)[0]) / (2 * h)
            assert grad[idx] == pytest.approx(fd, abs=1e-6)

    def test_psnr(self):
        assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)


class TestConfig:
    def test_text_round_trip(self):
        cfg = FitConfig(iterations=7, learning_rate=0.5, use_jitter=True, loss_rgb="l2",
                        holdout="a,b")
        text = cfg.to_text()
        assert "# " in text
        assert FitConfig.from_text(text) == cfg

    def test_overrides_and_errors(self):
        cfg = FitConfig.from_text("iterations = 3  # short\n", iterations=9)
        assert cfg.iterations == 9
        with pytest.raises(ConfigError):
            FitConfig.from_text("no_such_key = 1")
        with pytest.raises(ConfigError):
            FitConfig.from_text("iterations = lots")
        with pytest.raises(ConfigError):
            FitConfig(learning_rate=0)
        with pytest.raises(ConfigError):
            FitConfig(beta=-1)
        with pytest.raises(ConfigError):
            FitConfig(zoom_min=2, zoom_max=1)

    def test_holdout_ids(self):
        assert FitConfig(holdout=" v1, v2 ,").holdout_ids == ["v1", "v2"]


def _single_point(raw_alpha=0.1):
    values = np.zeros((1, 8))
    values[0, -1] = raw_alpha
    scene = Scene(PointCloud([[0.0, 0.0, 2.0]]), DescriptorSet(values))
    cam = Camera(np.eye(3), np.zeros(3), (4, 4), (1.5, 1.5), (3, 3))
    return scene, cam


def _red_target():
    target = np.zeros((3, 3, 4))
    target[1, 1] = [1, 0, 0, 1]
    return target


class TestFit:
    def test_zero_iterations(self):
        scene, cam = _single_point()
        out, report = fit(scene, FitDataset([(cam, _red_target())]), FitConfig(iterations=0))
        np.testing.assert_array_equal(out.descriptors.values, scene.descriptors.values)
        assert report.losses == []

    def test_does_not_mutate_input(self):
        scene, cam = _single_point()
        before = scene.descriptors.values.copy()
        fit(scene, FitDataset([(cam, _red_target())]), FitConfig(iterations=5, pyramid_levels=0))
        np.testing.assert_array_equal(scene.descriptors.values, before)

    def test_single_point_converges(self):
        scene, cam = _single_point()
        cfg = FitConfig(iterations=600, pyramid_levels=0, loss_rgb="l2", learning_rate=0.02)
        out, report = fit(scene, FitDataset([(cam, _red_target())]), cfg)
        rgba, _, _ = render_image(out, cam, report.head, 0, 50)
        assert np.abs(rgba[1, 1] - [1, 0, 0, 1]).max() < 0.02
        assert len(report.losses) == 600

    def test_single_point_linear_head(self):
        scene, cam = _single_point()
        cfg = FitConfig(iterations=800, pyramid_levels=0, loss_rgb="l2", head_mode="linear",
                        learning_rate=0.02, head_learning_rate=0.01)
        out, report = fit(scene, FitDataset([(cam, _red_target())]), cfg)
        rgba, _, _ = render_image(out, cam, report.head, 0, 50)
        assert np.abs(rgba[1, 1] - [1, 0, 0, 1]).max() < 0.02

    def test_descent_sanity(self):
        scene, cam = _single_point(0.3)
        cfg = FitConfig(iterations=200, pyramid_levels=0, loss_rgb="l2", optimizer="sgd",
                        learning_rate=0.5, beta=0.0)
        _, report = fit(scene, FitDataset([(cam, _red_target())]), cfg)
        tail = np.array(report.losses[10:])
        assert (np.diff(tail) <= 1e-15).all()
        assert tail[-1] < tail[0]

    def test_deterministic(self):
        scene = two_layer_scene(120)
        data = render_dataset(scene, orbit_cameras(3, (16, 16)), 2, 8)
        init = Scene.initialize(scene.cloud, rng=np.random.default_rng(5))
        cfg = FitConfig(iterations=15, pyramid_levels=2, max_ray_len=8, crop_size=8,
                        use_jitter=True, seed=11)
        a, ra = fit(init, data, cfg)
        b, rb = fit(init, data, cfg)
        assert ra.losses == rb.losses
        np.testing.assert_array_equal(a.descriptors.values, b.descriptors.values)

    def test_jitter_learns_mu(self):
        scene = two_layer_scene(120)
        data = render_dataset(scene, orbit_cameras(2, (16, 16)), 1, 8)
        cfg = FitConfig(iterations=20, pyramid_levels=1, max_ray_len=8, use_jitter=True,
                        jitter_prob=1.0)
        out, report = fit(scene, data, cfg)
        assert out.jitter_exponent != 1.0 and out.jitter_exponent >= 0.0
        assert report.mu == [out.jitter_exponent]

    def test_rgb_target_with_background(self):
        scene, cam = _single_point(1.0)
        bg = np.full((3, 3, 3), 0.5)
        target = np.full((3, 3, 3), 0.5)
        target[1, 1] = [0.0, 1.0, 0.0]
        data = FitDataset([(cam, target)], TargetKind.RGB)
        with pytest.raises(ConfigError):
            fit(scene, data, FitConfig(iterations=1))
        cfg = FitConfig(iterations=400, pyramid_levels=0, loss_rgb="l2", learning_rate=0.03)
        out, report = fit(scene, data, cfg, background=bg)
        assert report.losses[-1] < 0.01 * report.losses[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        scene, cam = _single_point()
        cfg = FitConfig(iterations=50, pyramid_levels=0, optimizer="sgd", learning_rate=1e308,
                        loss_rgb="l2")
        with pytest.raises(FitDivergence) as err:
            fit(scene, FitDataset([(cam, _red_target())]), cfg)
        assert err.value.report.diverged
        assert "non-finite" in err.value.report.message


class TestViews:
    def test_crop_consistency(self):
        rng = np.random.default_rng(3)
        scene = two_layer_scene(400)
        cam = orbit_cameras(1, (32, 32))[0]
        head = HeadConfig()
        full, _, _ = render_image(scene, cam, head, 2, 16)
        target = render_image(two_layer_scene(400, rng=np.random.default_rng(8)), cam, head,
                              2, 16)[0]
        for _ in range(5):
            ccam, ctarget = crop_view(cam, target, (16, 16), 4, rng)
            crop, _, _ = render_image(scene, ccam, head, 2, 16)
            x0, y0 = int(cam.principal[0] - ccam.principal[0]), int(cam.principal[1] - ccam.principal[1])
            window = full[y0:y0 + 16, x0:x0 + 16]
            np.testing.assert_allclose(crop, window, atol=1e-6)
            assert compute_loss(crop, ctarget)[0] == pytest.approx(
                compute_loss(window, ctarget)[0], abs=1e-6)

    def test_zoom_scales_intrinsics(self):
        cam = Camera(np.eye(3), np.zeros(3), (10, 12), (4, 5), (8, 10))
        zcam, img = zoom_view(cam, np.zeros((10, 8, 4)), 2.0)
        assert zcam.focal == (20, 24) and zcam.principal == (8, 10) and zcam.canvas == (16, 20)
        assert img.shape == (20, 16, 4)

    def test_zoom_of_rendered_target_is_consistent(self):
        scene = Scene(PointCloud([[0.0, 0.0, 1.0]]), DescriptorSet([[1.0, 1.0, 1.0, 5.0]]))
        cam = Camera(np.eye(3), np.zeros(3), (4, 4), (4.5, 4.5), (8, 8))
        target = render_image(scene, cam, HeadConfig(), 0, 4)[0]
        zcam, ztarget = zoom_view(cam, target, 2.0)
        z = render_image(scene, zcam, HeadConfig(), 0, 4)[0]
        hit = np.nonzero(z[..., 3])
        assert len(hit[0]) == 1
        np.testing.assert_array_equal(ztarget[hit], z[hit])


def _pixel_scene(col, rgb, alpha):
    values = np.zeros((1, 4))
    values[0, -1] = 0.1
    scene = Scene(PointCloud([[col, 0.0, 1.0]]), DescriptorSet(values))
    gt = np.array([[*rgb, np.arctanh(alpha)]])
    return scene, Scene(scene.cloud, DescriptorSet(gt))


class TestOverlayFit:
    def test_two_single_point_scenes(self):
        cam = Camera(np.eye(3), np.zeros(3), (1, 1), (1.0, 0.5), (2, 1))
        # scene a lands in column 1, scene b in column 0
        init_a, gt_a = _pixel_scene(0.5, (0.9, 0.2, 0.1), 0.7)
        init_b, gt_b = _pixel_scene(-0.5, (0.1, 0.3, 0.8), 0.6)
        data_a = render_dataset(gt_a, [cam], 0, 4)
        data_b = render_dataset(gt_b, [cam], 0, 4)
        cfg = FitConfig(iterations=1500, pyramid_levels=0, use_overlay=True, loss_rgb="l2",
                        learning_rate=0.01, seed=2)
        a, b, report = fit_pair_with_overlay(init_a, init_b, data_a, data_b, cfg)
        head = report.head
        for front, back in ((a, a), (a, b), (b, a), (b, b)):
            gf = gt_a if front is a else gt_b
            gb = gt_a if back is a else gt_b
            pred = head.forward([overlay_raw(render_forward(front, cam, 0, 4).images[0],
                                             render_forward(back, cam, 0, 4).images[0])])[0]
            want = head.forward([overlay_raw(render_forward(gf, cam, 0, 4).images[0],
                                             render_forward(gb, cam, 0, 4).images[0])])[0]
            assert compute_loss(pred, want, "l2")[0] < 1e-3

    def test_requires_overlay_flag(self):
        scene, cam = _single_point()
        data = FitDataset([(cam, _red_target())])
        with pytest.raises(ConfigError):
            fit_pair_with_overlay(scene, scene, data, data, FitConfig(iterations=1))
