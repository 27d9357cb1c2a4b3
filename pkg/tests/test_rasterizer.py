import numpy as np
import pytest

from clipsplat.core import Camera, Gaussian, GaussianSet, inverse_sigmoid
from clipsplat.rasterizer import (
    ALPHA_CLAMP,
    BLUR_FLOOR,
    project,
    render,
    render_backward,
)

from conftest import central_difference, random_scene, rel_error


def axis_camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, width=64, height=64):
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  world_to_cam=np.hstack([np.eye(3), np.zeros((3, 1))]))


def single(center, log_scale=(-2.0, -2.0, -2.0), opacity_logit=0.0, color=(1.0, 0.0, 0.0)):
    sh = np.zeros((1, 3))
    sh[0] = (np.asarray(color) - 0.5) / 0.28209479177387814
    return Gaussian(center=center, rotation=(1, 0, 0, 0), log_scale=log_scale,
                    opacity_logit=opacity_logit, sh=sh)


class TestProject:
    def test_on_axis_projection(self):
        s = project(single((0.0, 0.0, 2.0)), axis_camera())
        np.testing.assert_allclose(s.mean2d, [32.0, 32.0], atol=1e-12)
        assert s.depth == pytest.approx(2.0)

    def test_isotropic_cov_scales_with_focal(self):
        f = 100.0
        s = project(single((0.0, 0.0, 1.0), log_scale=(0.0, 0.0, 0.0)), axis_camera(fx=f, fy=f))
        cov = s.cov2d - BLUR_FLOOR * np.eye(2)
        np.testing.assert_allclose(cov, f**2 * np.eye(2), rtol=1e-12)

    def test_behind_camera_culled(self):
        assert project(single((0.0, 0.0, -1.0)), axis_camera()) is None
        assert project(single((0.0, 0.0, 0.005)), axis_camera()) is None


class TestRenderForward:
    def test_empty_pixels_show_background(self):
        g = single((0.0, 0.0, 2.0), log_scale=(-3.5, -3.5, -3.5))
        out = render(GaussianSet.from_gaussians([g]), axis_camera(), background=(0.2, 0.4, 0.6))
        np.testing.assert_allclose(out.image[0, 0], [0.2, 0.4, 0.6])
        assert out.accum_alpha[0, 0] == 0.0
        assert out.contrib_count[0, 0] == 0

    def test_alpha_clamp_at_center(self):
        # cx = cy = 32.5 puts the projection exactly on a pixel center
        cam = axis_camera(cx=32.5, cy=32.5)
        g = single((0.0, 0.0, 2.0), opacity_logit=inverse_sigmoid(0.9995), color=(1.0, 0.0, 0.0))
        bg = np.array([0.0, 0.5, 0.0])
        out = render(GaussianSet.from_gaussians([g]), cam, background=bg)
        center = out.image[32, 32]
        expected = ALPHA_CLAMP * np.array([1.0, 0.0, 0.0]) + (1 - ALPHA_CLAMP) * bg
        np.testing.assert_allclose(center, expected, atol=1e-12)

    def test_two_overlapping_half_alpha_splats(self):
        cam = axis_camera(cx=32.5, cy=32.5)
        g1 = single((0.0, 0.0, 2.0), opacity_logit=0.0)
        g2 = single((0.0, 0.0, 2.0), opacity_logit=0.0)
        out = render(GaussianSet.from_gaussians([g1, g2]), cam)
        assert out.accum_alpha[32, 32] == pytest.approx(0.75, abs=1e-12)
        assert out.contrib_count[32, 32] == 2

    def test_determinism_bit_identical(self):
        gset, cam = random_scene(7, n=12, width=32, height=32, fd_safe=False)
        a = render(gset, cam, background=(0.1, 0.1, 0.1))
        b = render(gset, cam, background=(0.1, 0.1, 0.1))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.accum_alpha, b.accum_alpha)
        assert np.array_equal(a.contrib_count, b.contrib_count)

    def test_thread_count_does_not_change_output(self):
        gset, cam = random_scene(8, n=10, width=48, height=48, fd_safe=False)
        a = render(gset, cam, threads=1)
        b = render(gset, cam, threads=4)
        assert np.array_equal(a.image, b.image)

    def test_output_ranges(self):
        gset, cam = random_scene(9, n=10, fd_safe=False)
        out = render(gset, cam, background=(0.3, 0.3, 0.3))
        assert np.all(np.isfinite(out.image))
        assert np.all((out.image >= 0.0) & (out.image <= 1.0))
        assert np.all((out.accum_alpha >= 0.0) & (out.accum_alpha <= 1.0))

    def test_transmittance_monotone(self):
        # accumulated coverage can only grow as splats are added front to back
        gset, cam = random_scene(10, n=8, fd_safe=False)
        partial_prev = np.zeros((cam.height, cam.width))
        order = np.argsort(gset.centers[:, 2])
        for count in range(1, len(gset) + 1):
            idx = order[:count]
            sub = GaussianSet(
                centers=gset.centers[idx],
                rotations=gset.rotations[idx],
                log_scales=gset.log_scales[idx],
                opacity_logits=gset.opacity_logits[idx],
                sh=gset.sh[idx],
            )
            out = render(sub, cam)
            assert np.all(out.accum_alpha >= partial_prev - 1e-12)
            partial_prev = out.accum_alpha


def loss_and_grad(gset, cam, weights, deform=None, background=(0.05, 0.1, 0.15)):
    out = render(gset, cam, deform, background)
    loss = float(np.sum(out.image * weights))
    grads = render_backward(gset, cam, deform, background, weights)
    return loss, grads


class TestRenderBackward:
    def test_zero_upstream_gives_zero_grads(self):
        gset, cam = random_scene(3)
        grads = render_backward(gset, cam, None, (0, 0, 0), np.zeros((16, 16, 3)))
        for arr in (grads.centers, grads.rotations, grads.log_scales,
                    grads.opacity_logits, grads.sh):
            assert np.all(arr == 0.0)

    def test_culled_gaussian_gets_zero_grad(self, rng):
        gset, cam = random_scene(4)
        gset.centers[2] = (0.0, 0.0, -3.0)  # behind the camera
        weights = rng.normal(size=(16, 16, 3))
        grads = render_backward(gset, cam, None, (0, 0, 0), weights)
        assert np.all(grads.centers[2] == 0.0)
        assert np.all(grads.sh[2] == 0.0)
        assert grads.opacity_logits[2] == 0.0

    def test_upstream_shape_checked(self):
        gset, cam = random_scene(5)
        with pytest.raises(ValueError):
            render_backward(gset, cam, None, (0, 0, 0), np.zeros((8, 8, 3)))

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_match_finite_differences(self, seed):
        gset, cam = random_scene(seed, n=5, width=16, height=16, sh_degree=1)
        rng = np.random.default_rng(seed + 999)
        weights = rng.normal(size=(16, 16, 3))

        def loss():
            return float(np.sum(render(gset, cam).image * weights))

        grads = render_backward(gset, cam, None, (0, 0, 0), weights)
        arrays = [
            (gset.centers, grads.centers),
            (gset.rotations, grads.rotations),
            (gset.log_scales, grads.log_scales),
            (gset.opacity_logits, grads.opacity_logits),
            (gset.sh, grads.sh),
        ]
        checked = 0
        for param, grad in arrays:
            flat_param = param.reshape(-1)
            flat_grad = grad.reshape(-1)
            n_probe = min(12, flat_param.size)
            for i in rng.choice(flat_param.size, size=n_probe, replace=False):
                num = central_difference(loss, flat_param, i)
                err = rel_error(flat_grad[i], num)
                assert err < 1e-3, (
                    f"seed {seed}: param index {i} analytic {flat_grad[i]:.8g} "
                    f"vs numeric {num:.8g} (rel {err:.2e})"
                )
                checked += 1
        assert checked >= 50

    def test_gradients_with_deformation_deltas(self, rng):
        gset, cam = random_scene(21, n=4)
        n = len(gset)
        deform = (
            rng.normal(0, 0.01, (n, 3)),
            rng.normal(0, 0.01, (n, 4)),
            rng.normal(0, 0.01, (n, 3)),
        )
        weights = rng.normal(size=(16, 16, 3))

        def loss():
            return float(np.sum(render(gset, cam, deform).image * weights))

        grads = render_backward(gset, cam, deform, (0, 0, 0), weights)
        np.testing.assert_array_equal(grads.delta_center, grads.centers)
        np.testing.assert_array_equal(grads.delta_rotation, grads.rotations)
        np.testing.assert_array_equal(grads.delta_log_scale, grads.log_scales)
        for arr, g in ((deform[0], grads.delta_center), (deform[1], grads.delta_rotation),
                       (deform[2], grads.delta_log_scale)):
            flat_param = arr.reshape(-1)
            flat_grad = g.reshape(-1)
            for i in rng.choice(flat_param.size, size=6, replace=False):
                num = central_difference(loss, flat_param, i)
                assert rel_error(flat_grad[i], num) < 1e-3

    def test_gradients_degree3_sh(self, rng):
        gset, cam = random_scene(31, n=3, sh_degree=3)
        weights = rng.normal(size=(16, 16, 3))

        def loss():
            return float(np.sum(render(gset, cam).image * weights))

        grads = render_backward(gset, cam, None, (0, 0, 0), weights)
        flat_param = gset.sh.reshape(-1)
        flat_grad = grads.sh.reshape(-1)
        for i in rng.choice(flat_param.size, size=16, replace=False):
            num = central_difference(loss, flat_param, i)
            assert rel_error(flat_grad[i], num) < 1e-3
        # the view-direction path couples SH to the centers
        flat_param = gset.centers.reshape(-1)
        flat_grad = grads.centers.reshape(-1)
        for i in range(flat_param.size):
            num = central_difference(loss, flat_param, i)
            assert rel_error(flat_grad[i], num) < 1e-3
