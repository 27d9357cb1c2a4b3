import math

import numpy as np
import pytest

from clipsplat.errors import DegenerateInputError
from clipsplat.metrics import (
    SSIM_C1,
    FlowField,
    bilinear_warp,
    psnr,
    q_edit,
    read_flo,
    recon_loss,
    ssim,
    warp_ssim,
    write_flo,
)
from clipsplat.synthetic import translation_video

from conftest import central_difference, rel_error


class TestPsnr:
    def test_formula_spot_value(self, rng):
        a = rng.uniform(0.2, 0.8, (16, 16, 3))
        b = a + 0.1  # MSE exactly 0.01
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_identical_images_inf(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        assert psnr(a, a) == math.inf

    def test_unit_error_zero_db(self):
        a = np.zeros((8, 8, 3))
        b = np.ones((8, 8, 3))
        assert psnr(a, b) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric(self, rng):
        a = rng.uniform(size=(12, 12, 3))
        b = rng.uniform(size=(12, 12, 3))
        assert psnr(a, b) == pytest.approx(psnr(b, a), abs=1e-12)


class TestSsim:
    def test_self_similarity_is_one(self, rng):
        for _ in range(5):
            a = rng.uniform(size=(24, 24, 3))
            assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_constant_shift_luminance_term(self):
        # constant images: only the luminance ratio survives
        a = np.full((16, 16, 3), 0.75)
        b = np.full((16, 16, 3), 0.25)
        expected = (2 * 0.75 * 0.25 + SSIM_C1) / (0.75**2 + 0.25**2 + SSIM_C1)
        assert ssim(a, b) == pytest.approx(expected, abs=1e-12)
        assert ssim(a, b) < 1.0

    def test_independent_noise_scores_near_zero(self):
        for seed in range(100):
            r = np.random.default_rng(seed)
            a = r.uniform(size=(64, 64))
            b = r.uniform(size=(64, 64))
            assert abs(ssim(a, b)) < 0.2

    def test_symmetric(self, rng):
        a = rng.uniform(size=(20, 20, 3))
        b = rng.uniform(size=(20, 20, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-10

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


class TestReconLoss:
    def test_identical_images(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        lv = recon_loss(a, a.copy())
        assert lv.total == pytest.approx(0.0, abs=1e-12)
        assert lv.l1 == 0.0
        assert lv.dssim == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(lv.gradient, 0.0, atol=1e-12)

    def test_uniform_offset_l1(self, rng):
        a = rng.uniform(0.2, 0.7, (16, 16, 3))
        lv = recon_loss(a + 0.1, a)
        assert lv.l1 == pytest.approx(0.1, abs=1e-12)

    def test_total_mixes_components(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        b = rng.uniform(size=(16, 16, 3))
        lv = recon_loss(a, b, lam=0.2)
        assert lv.total == pytest.approx(0.8 * lv.l1 + 0.2 * lv.dssim, abs=1e-12)

    def test_empty_mask_rejected(self, rng):
        a = rng.uniform(size=(16, 16, 3))
        with pytest.raises(DegenerateInputError):
            recon_loss(a, a, mask=np.zeros((16, 16)))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        pred = rng.uniform(0.1, 0.9, (32, 32, 3))
        target = rng.uniform(0.1, 0.9, (32, 32, 3))

        for lam in (0.0, 1.0, 0.2):  # isolates l1, dssim, then the mix
            grad = recon_loss(pred, target, lam=lam).gradient

            def loss():
                return recon_loss(pred, target, lam=lam).total

            flat = pred.reshape(-1)
            gflat = grad.reshape(-1)
            for i in rng.choice(flat.size, size=25, replace=False):
                num = central_difference(loss, flat, i)
                assert rel_error(gflat[i], num) < 1e-3, f"lam={lam}, i={i}"

    def test_masked_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(43)
        pred = rng.uniform(0.1, 0.9, (16, 16, 3))
        target = rng.uniform(0.1, 0.9, (16, 16, 3))
        mask = (rng.uniform(size=(16, 16)) > 0.4).astype(float)
        grad = recon_loss(pred, target, mask=mask).gradient

        def loss():
            return recon_loss(pred, target, mask=mask).total

        flat = pred.reshape(-1)
        gflat = grad.reshape(-1)
        for i in rng.choice(flat.size, size=20, replace=False):
            num = central_difference(loss, flat, i)
            assert rel_error(gflat[i], num) < 1e-3


class TestWarpSsim:
    def test_static_video_zero_flow(self, rng):
        base = rng.uniform(size=(32, 32, 3))
        frames = [base.copy() for _ in range(4)]
        zero = FlowField(u=np.zeros((32, 32)), v=np.zeros((32, 32)), valid=np.ones((32, 32), bool))
        assert warp_ssim(frames, [zero] * 3) == pytest.approx(1.0, abs=1e-12)

    def test_exact_translation_with_true_flow(self, rng):
        base = rng.uniform(size=(48, 48, 3))
        frames, flows = translation_video(base, shift=5, n_frames=4)
        assert warp_ssim(frames, flows) == pytest.approx(1.0, abs=1e-9)

    def test_wrong_flow_scores_lower(self, rng):
        base = rng.uniform(size=(48, 48, 3))
        frames, flows = translation_video(base, shift=5, n_frames=4)
        zero = [FlowField(u=np.zeros((48, 48)), v=np.zeros((48, 48)),
                          valid=np.ones((48, 48), bool)) for _ in range(3)]
        assert warp_ssim(frames, zero) < warp_ssim(frames, flows)

    def test_length_mismatch_rejected(self, rng):
        frames = [rng.uniform(size=(16, 16, 3)) for _ in range(3)]
        zero = FlowField(u=np.zeros((16, 16)), v=np.zeros((16, 16)), valid=np.ones((16, 16), bool))
        with pytest.raises(ValueError):
            warp_ssim(frames, [zero])

    def test_bilinear_warp_identity(self, rng):
        img = rng.uniform(size=(16, 16, 3))
        zero = FlowField(u=np.zeros((16, 16)), v=np.zeros((16, 16)), valid=np.ones((16, 16), bool))
        warped, valid = bilinear_warp(img, zero)
        np.testing.assert_allclose(warped, img)
        assert np.all(valid)

    def test_out_of_bounds_marked_invalid(self, rng):
        img = rng.uniform(size=(8, 8, 3))
        flow = FlowField(u=np.full((8, 8), 5.0), v=np.zeros((8, 8)), valid=np.ones((8, 8), bool))
        _, valid = bilinear_warp(img, flow)
        assert not valid[:, 4:].any()
        assert valid[:, :3].all()


class TestQEdit:
    def test_reference_product(self):
        assert q_edit(26.835, 0.872) == pytest.approx(23.4, abs=0.01)

    def test_identity_and_zero(self):
        assert q_edit(17.3, 1.0) == pytest.approx(17.3)
        assert q_edit(0.0, 0.77) == 0.0


class TestFloIO:
    def test_round_trip(self, tmp_path, rng):
        u = rng.normal(size=(12, 20))
        v = rng.normal(size=(12, 20))
        valid = rng.uniform(size=(12, 20)) > 0.2
        flow = FlowField(u=u, v=v, valid=valid)
        write_flo(tmp_path / "f.flo", flow)
        back = read_flo(tmp_path / "f.flo")
        np.testing.assert_allclose(back.u[valid], u[valid].astype(np.float32))
        np.testing.assert_allclose(back.v[valid], v[valid].astype(np.float32))
        np.testing.assert_array_equal(back.valid, valid)

    def test_magic_is_pieh(self, tmp_path):
        flow = FlowField(u=np.zeros((4, 4)), v=np.zeros((4, 4)), valid=np.ones((4, 4), bool))
        write_flo(tmp_path / "f.flo", flow)
        assert (tmp_path / "f.flo").read_bytes()[:4] == b"PIEH"

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.flo").write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(ValueError):
            read_flo(tmp_path / "bad.flo")

    def test_truncated_rejected(self, tmp_path, rng):
        flow = FlowField(u=np.zeros((6, 6)), v=np.zeros((6, 6)), valid=np.ones((6, 6), bool))
        write_flo(tmp_path / "f.flo", flow)
        data = (tmp_path / "f.flo").read_bytes()
        (tmp_path / "cut.flo").write_bytes(data[: len(data) // 2])
        with pytest.raises(ValueError):
            read_flo(tmp_path / "cut.flo")
