import numpy as np
import pytest

from clipsplat.core import Camera
from clipsplat.decomposition import (
    MaskedVideo,
    SfmResult,
    init_background_points,
    max_pairwise_distance,
    parse_colmap_text,
    read_manifest,
    split_clips,
    synthetic_provider,
    write_colmap_text,
    write_manifest,
)
from clipsplat.errors import ColmapParseError, DecompositionError, DegenerateInputError
from clipsplat.synthetic import make_scene


def tiny_video(n):
    frame = np.zeros((8, 8, 3))
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 2:6] = True
    return MaskedVideo(frames=[frame.copy() for _ in range(n)],
                       masks=[mask.copy() for _ in range(n)])


def provider_for(n_frames, schedule=None):
    scene = make_scene(n_frames=n_frames, n_fg=12, n_bg=10, width=16, height=16)
    return synthetic_provider(scene, failure_schedule=schedule, n_points=8)


class TestSplitClips:
    def test_always_success_28_frames(self):
        video = tiny_video(28)
        manifest = split_clips(video, provider_for(28), k=10)
        spans = [(c.first, c.last) for c in manifest.clips]
        assert spans == [(0, 9), (9, 18), (18, 27)]
        assert manifest.overlaps == [1, 1]

    def test_blackswan_failure_schedule(self):
        # clip 0 needs 7 extra frames (17 total), later clips one extra (11)
        video = tiny_video(50)
        schedule = {0: 7, 1: 1, 2: 1, 3: 1}
        manifest = split_clips(video, provider_for(50, schedule), k=10)
        sizes = [c.n_frames for c in manifest.clips]
        assert sizes == [17, 11, 11, 11, 4]
        assert manifest.overlaps == [1, 1, 1, 1]

    def test_short_video_single_clip(self):
        video = tiny_video(5)
        manifest = split_clips(video, provider_for(5), k=10)
        assert [(c.first, c.last) for c in manifest.clips] == [(0, 4)]
        assert manifest.overlaps == []

    def test_tail_merges_into_previous_clip(self):
        # the 4-frame tail always fails, the merged rerun succeeds
        video = tiny_video(14)
        provider = provider_for(14, {1: 1})

        def flaky(video_, first, last):
            if first == 9 and last == 13:
                return SfmResult.failure("tail rejected")
            return provider(video_, first, last)

        manifest = split_clips(video, flaky, k=10)
        assert [(c.first, c.last) for c in manifest.clips] == [(0, 13)]

    def test_unrecoverable_failure_names_range(self):
        video = tiny_video(12)

        def always_fail(video_, first, last):
            return SfmResult.failure("no")

        with pytest.raises(DecompositionError) as err:
            split_clips(video, always_fail, k=10)
        assert err.value.first == 0
        assert err.value.last == 11

    def test_random_schedules_keep_invariants(self):
        rng = np.random.default_rng(0)
        for trial in range(60):
            n = int(rng.integers(12, 40))
            schedule = {
                int(c): int(rng.integers(0, 6))
                for c in rng.choice(8, size=int(rng.integers(0, 4)), replace=False)
            }
            video = tiny_video(n)
            try:
                manifest = split_clips(video, provider_for(n, schedule), k=10)
            except DecompositionError:
                continue  # legitimately unrecoverable schedule
            manifest.validate()
            assert manifest.clips[0].first == 0
            assert manifest.clips[-1].last == n - 1

    def test_deterministic(self):
        video = tiny_video(30)
        m1 = split_clips(video, provider_for(30, {1: 2}), k=10)
        m2 = split_clips(video, provider_for(30, {1: 2}), k=10)
        assert [(c.first, c.last) for c in m1.clips] == [(c.first, c.last) for c in m2.clips]

    def test_provider_range_check(self):
        provider = provider_for(10)
        with pytest.raises(ValueError):
            provider(tiny_video(10), 5, 12)


class TestColmapText:
    def fixture_sfm(self, n=4):
        rng = np.random.default_rng(5)
        cams = []
        for i in range(n):
            cams.append(Camera.look_at(
                eye=rng.normal(0, 0.1, 3) - (0, 0, 2), target=(0, 0, 0.0),
                fx=61.25, fy=60.5, width=32, height=24, frame_index=i,
            ))
        points = rng.normal(0, 1, (15, 3))
        colors = rng.integers(0, 256, (15, 3)).astype(np.uint8)
        return SfmResult(points=points, colors=colors, cameras=cams, success=True)

    def test_round_trip(self, tmp_path):
        sfm = self.fixture_sfm()
        write_colmap_text(tmp_path, sfm)
        back = parse_colmap_text(tmp_path)
        assert back.success
        np.testing.assert_allclose(back.points, sfm.points, atol=1e-12)
        np.testing.assert_array_equal(back.colors, sfm.colors)
        assert len(back.cameras) == len(sfm.cameras)
        for a, b in zip(back.cameras, sfm.cameras):
            assert a.frame_index == b.frame_index
            assert (a.fx, a.fy, a.cx, a.cy) == (b.fx, b.fy, b.cx, b.cy)
            np.testing.assert_allclose(a.world_to_cam, b.world_to_cam, atol=1e-9)

    def test_points_line_parsing(self, tmp_path):
        (tmp_path / "cameras.txt").write_text("1 PINHOLE 8 8 10 10 4 4\n")
        (tmp_path / "images.txt").write_text("1 1 0 0 0 0 0 4 1 00000.png\n\n")
        (tmp_path / "points3D.txt").write_text(
            "# comment\n1 0.5 1.0 2.0 255 0 0 0.75 1 0\n"
        )
        sfm = parse_colmap_text(tmp_path)
        assert sfm.success
        np.testing.assert_allclose(sfm.points[0], [0.5, 1.0, 2.0])
        np.testing.assert_array_equal(sfm.colors[0], [255, 0, 0])

    def test_identity_quaternion_translation(self, tmp_path):
        (tmp_path / "cameras.txt").write_text("1 PINHOLE 8 8 10 10 4 4\n")
        (tmp_path / "images.txt").write_text("1 1 0 0 0 0 0 4 1 00000.png\n\n")
        (tmp_path / "points3D.txt").write_text("1 0 0 1 10 20 30 0\n")
        cam = parse_colmap_text(tmp_path).cameras[0]
        np.testing.assert_allclose(
            cam.world_to_cam, np.hstack([np.eye(3), [[0], [0], [4]]]), atol=1e-12
        )

    def test_empty_points_is_failure(self, tmp_path):
        (tmp_path / "cameras.txt").write_text("1 PINHOLE 8 8 10 10 4 4\n")
        (tmp_path / "images.txt").write_text("1 1 0 0 0 0 0 4 1 00000.png\n\n")
        (tmp_path / "points3D.txt").write_text("# nothing here\n")
        sfm = parse_colmap_text(tmp_path)
        assert not sfm.success
        assert "no points" in sfm.reason

    def test_unknown_model_is_failure(self, tmp_path):
        (tmp_path / "cameras.txt").write_text("1 OPENCV_FISHEYE 8 8 1 1 1 1 0 0 0 0\n")
        (tmp_path / "images.txt").write_text("1 1 0 0 0 0 0 4 1 00000.png\n\n")
        (tmp_path / "points3D.txt").write_text("1 0 0 1 10 20 30 0\n")
        sfm = parse_colmap_text(tmp_path)
        assert not sfm.success
        assert "OPENCV_FISHEYE" in sfm.reason

    def test_malformed_field_reports_line(self, tmp_path):
        (tmp_path / "cameras.txt").write_text("1 PINHOLE 8 8 10 10 4 4\n")
        (tmp_path / "images.txt").write_text("1 1 0 0 0 0 0 4 1 00000.png\n\n")
        (tmp_path / "points3D.txt").write_text("# ok\n1 0.5 oops 2.0 255 0 0 0\n")
        with pytest.raises(ColmapParseError) as err:
            parse_colmap_text(tmp_path)
        assert err.value.line == 2

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ColmapParseError):
            parse_colmap_text(tmp_path)


class TestBackgroundPoints:
    def test_two_point_rule(self):
        pts, _ = init_background_points(np.array([[0.0, 0, 0], [2.0, 0, 0]]),
                                        n_bkg=500, radius_mult=3.0, seed=1)
        center = np.array([1.0, 0, 0])
        radii = np.linalg.norm(pts - center, axis=1)
        np.testing.assert_allclose(radii, 6.0, atol=1e-6)

    def test_points_lie_on_sphere(self, rng):
        fg = rng.normal(0, 1, (20, 3))
        pts, colors = init_background_points(fg, n_bkg=300, seed=2)
        center = fg.mean(axis=0)
        radius = 3.0 * max_pairwise_distance(fg)
        np.testing.assert_allclose(np.linalg.norm(pts - center, axis=1), radius, atol=1e-6)
        np.testing.assert_array_equal(colors, 0.5)

    def test_sampling_is_centered(self, rng):
        fg = rng.normal(0, 1, (10, 3))
        center = fg.mean(axis=0)
        radius = 3.0 * max_pairwise_distance(fg)
        means = []
        for seed in range(20):
            pts, _ = init_background_points(fg, n_bkg=1000, seed=seed)
            means.append(np.linalg.norm(pts.mean(axis=0) - center))
        assert np.mean(means) < 0.1 * radius

    def test_max_distance_matches_bruteforce(self, rng):
        pts = rng.normal(0, 2, (40, 3))
        best = 0.0
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                best = max(best, float(np.linalg.norm(pts[i] - pts[j])))
        assert max_pairwise_distance(pts) == pytest.approx(best, rel=1e-12)

    def test_degenerate_input_rejected(self):
        with pytest.raises(DegenerateInputError):
            init_background_points(np.zeros((1, 3)))


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        video = tiny_video(28)
        manifest = split_clips(video, provider_for(28), k=10)
        dirs = []
        for j, clip in enumerate(manifest.clips):
            sub = f"sfm/clip_{j}"
            write_colmap_text(tmp_path / sub, clip.sfm)
            dirs.append(sub)
        write_manifest(tmp_path / "manifest.txt", manifest, dirs, seed=3)
        back = read_manifest(tmp_path / "manifest.txt")
        assert [(c.first, c.last) for c in back.clips] == [(c.first, c.last) for c in manifest.clips]
        assert back.overlaps == manifest.overlaps
        assert back.k == manifest.k
        assert back.n_frames == manifest.n_frames
        assert "# seed 3" in (tmp_path / "manifest.txt").read_text()
