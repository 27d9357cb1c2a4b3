"""Spatial/temporal decomposition of a masked video into SfM clips.

The video is split progressively: each clip starts with k candidate frames
and grows one frame at a time until the structure-from-motion provider
succeeds. Consecutive clips share overlap frames. Providers are pluggable:
a COLMAP text-output reader for real reconstructions and a synthetic
ground-truth provider for tests and demos. Also builds the spherical random
point cloud that initializes background Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Camera, quaternion_to_rotation
from .errors import ColmapParseError, DecompositionError, DegenerateInputError

DEFAULT_CLIP_LEN = 10
DEFAULT_OVERLAP = 1


@dataclass
class MaskedVideo:
    """Video frames plus per-frame binary foreground masks."""

    frames: list                 # (H, W, 3) float arrays in [0, 1]
    masks: list                  # (H, W) bool arrays
    class_label: str = ""

    def __post_init__(self):
        if len(self.frames) != len(self.masks):
            raise ValueError("frame and mask counts differ")
        for f, m in zip(self.frames, self.masks):
            if f.shape[:2] != m.shape:
                raise ValueError("mask resolution does not match its frame")

    def __len__(self):
        return len(self.frames)


@dataclass
class SfmResult:
    points: np.ndarray | None     # (P, 3) float64
    colors: np.ndarray | None     # (P, 3) uint8
    cameras: list | None          # Camera per frame, ordered by frame
    success: bool
    reason: str = ""

    @classmethod
    def failure(cls, reason: str) -> "SfmResult":
        return cls(points=None, colors=None, cameras=None, success=False, reason=reason)

    def validate(self, n_frames: int):
        if self.success:
            if self.points is None or len(self.points) == 0:
                raise ValueError("successful SfM result must carry points")
            if self.cameras is None or len(self.cameras) != n_frames:
                raise ValueError("successful SfM result needs one camera per frame")


@dataclass
class Clip:
    first: int
    last: int
    sfm: SfmResult

    @property
    def n_frames(self) -> int:
        return self.last - self.first + 1


@dataclass
class ClipManifest:
    clips: list                  # list of Clip
    overlaps: list               # overlap with previous clip, len == len(clips)-1
    k: int
    n_frames: int

    def owning_clip(self, frame: int) -> int:
        """Earliest clip containing the frame."""
        for j, c in enumerate(self.clips):
            if c.first <= frame <= c.last:
                return j
        raise ValueError(f"frame {frame} not covered by any clip")

    def validate(self):
        if not self.clips:
            raise ValueError("manifest has no clips")
        if self.clips[0].first != 0 or self.clips[-1].last != self.n_frames - 1:
            raise ValueError("clips do not span the full frame range")
        for j in range(1, len(self.clips)):
            prev, cur = self.clips[j - 1], self.clips[j]
            if cur.first > prev.last:
                raise ValueError(f"gap between clips {j - 1} and {j}")
            if prev.last - cur.first + 1 < 1:
                raise ValueError(f"clips {j - 1} and {j} do not overlap")
        if len(self.overlaps) != len(self.clips) - 1:
            raise ValueError("overlap list length mismatch")
        for j, ov in enumerate(self.overlaps):
            expect = self.clips[j].last - self.clips[j + 1].first + 1
            if ov != expect:
                raise ValueError(f"recorded overlap {ov} != actual {expect}")


def split_clips(
    video: MaskedVideo,
    provider,
    k: int = DEFAULT_CLIP_LEN,
    overlap: int = DEFAULT_OVERLAP,
) -> ClipManifest:
    """Progressively partition the video into SfM-validated clips.

    `provider(video, first, last)` must return an SfmResult for the inclusive
    frame range. Each clip starts with k candidate frames and grows until the
    provider succeeds; the next clip starts `overlap` frames before the
    current clip's end. A short tail keeps its own clip when the provider
    accepts it and is merged into the previous clip otherwise.
    """
    n = len(video)
    if n < 2:
        raise DegenerateInputError("need at least two frames to decompose")
    if k < 2:
        raise ValueError("k must be at least 2")
    clips: list[Clip] = []
    start = 0
    while start < n:
        end = min(start + k - 1, n - 1)
        result = provider(video, start, end)
        while not result.success and end < n - 1:
            end += 1
            result = provider(video, start, end)
        if not result.success:
            # Reached the end of the video still failing: merge into the
            # previous clip and give the provider one more chance.
            if not clips:
                raise DecompositionError(
                    f"decomposition failed on frames [{start}, {end}]",
                    first=start,
                    last=end,
                )
            merged_first = clips[-1].first
            merged = provider(video, merged_first, n - 1)
            if not merged.success:
                raise DecompositionError(
                    f"decomposition failed on frames [{merged_first}, {n - 1}] "
                    f"after tail merge",
                    first=merged_first,
                    last=n - 1,
                )
            merged.validate(n - merged_first)
            clips[-1] = Clip(first=merged_first, last=n - 1, sfm=merged)
            break
        result.validate(end - start + 1)
        clips.append(Clip(first=start, last=end, sfm=result))
        if end == n - 1:
            break
        start = end - (overlap - 1)
    overlaps = [clips[j - 1].last - clips[j].first + 1 for j in range(1, len(clips))]
    manifest = ClipManifest(clips=clips, overlaps=overlaps, k=k, n_frames=n)
    manifest.validate()
    return manifest


# ---------------------------------------------------------------------------
# Synthetic provider

class ScriptedProvider:
    """SfM provider backed by a synthetic ground-truth scene.

    Returns exact cameras and a seeded subsample of the true foreground
    surface, with an optional per-clip failure schedule (clip ordinal ->
    number of initially failing attempts) to exercise the splitting logic.
    """

    def __init__(self, scene, failure_schedule=None, n_points: int = 64, seed: int = 0):
        self.scene = scene
        self.schedule = dict(failure_schedule or {})
        self.n_points = n_points
        self.seed = seed
        self._attempts: dict[int, int] = {}
        self._ordinals: dict[int, int] = {}

    def __call__(self, video: MaskedVideo, first: int, last: int) -> SfmResult:
        n = len(video)
        if not (0 <= first <= last < n):
            raise ValueError(f"requested range [{first}, {last}] outside video of {n} frames")
        if first not in self._ordinals:
            self._ordinals[first] = len(self._ordinals)
        ordinal = self._ordinals[first]
        attempt = self._attempts.get(first, 0)
        self._attempts[first] = attempt + 1
        if attempt < self.schedule.get(ordinal, 0):
            return SfmResult.failure(f"scripted failure {attempt + 1} for clip {ordinal}")
        points, colors = self.scene.foreground_points(first, self.n_points, seed=self.seed + first)
        cameras = [self.scene.camera(i) for i in range(first, last + 1)]
        return SfmResult(points=points, colors=colors, cameras=cameras, success=True)


def synthetic_provider(scene, failure_schedule=None, n_points: int = 64, seed: int = 0):
    """Build a ScriptedProvider over a synthetic ground-truth scene."""
    return ScriptedProvider(scene, failure_schedule, n_points=n_points, seed=seed)


# ---------------------------------------------------------------------------
# COLMAP text format

def _parse_fields(line: str, path, lineno, types):
    parts = line.split()
    out = []
    for i, t in enumerate(types):
        try:
            out.append(t(parts[i]))
        except (ValueError, IndexError) as exc:
            raise ColmapParseError(
                f"{path}:{lineno}: malformed field {i} in {line!r}", path=str(path), line=lineno
            ) from exc
    return out


def _data_lines(path: Path):
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield lineno, line


def parse_colmap_text(directory) -> SfmResult:
    """Parse cameras.txt / images.txt / points3D.txt into an SfmResult.

    Supports PINHOLE and SIMPLE_PINHOLE camera models; anything else yields a
    failure result. Images are ordered by name; a numeric stem becomes the
    frame index.
    """
    directory = Path(directory)
    cam_path = directory / "cameras.txt"
    img_path = directory / "images.txt"
    pts_path = directory / "points3D.txt"
    for p in (cam_path, img_path, pts_path):
        if not p.exists():
            raise ColmapParseError(f"missing {p}", path=str(p))

    intrinsics = {}
    for lineno, line in _data_lines(cam_path):
        parts = line.split()
        cam_id, model = _parse_fields(line, cam_path, lineno, [int, str])
        if model == "PINHOLE":
            w, h, fx, fy, cx, cy = _parse_fields(
                " ".join(parts[2:]), cam_path, lineno, [int, int, float, float, float, float]
            )
        elif model == "SIMPLE_PINHOLE":
            w, h, f, cx, cy = _parse_fields(
                " ".join(parts[2:]), cam_path, lineno, [int, int, float, float, float]
            )
            fx = fy = f
        else:
            return SfmResult.failure(f"unsupported camera model {model!r}")
        intrinsics[cam_id] = (fx, fy, cx, cy, w, h)

    entries = []
    expecting_points_line = False
    for lineno, raw in enumerate(img_path.read_text().splitlines(), start=1):
        line = raw.strip()
        if line.startswith("#"):
            continue
        if expecting_points_line:
            # Observations line; may be empty when the image has none.
            expecting_points_line = False
            continue
        if not line:
            continue
        vals = _parse_fields(
            line, img_path, lineno,
            [int, float, float, float, float, float, float, float, int],
        )
        name = line.split()[9] if len(line.split()) > 9 else ""
        _, qw, qx, qy, qz, tx, ty, tz, cam_id = vals
        entries.append((name, (qw, qx, qy, qz), (tx, ty, tz), cam_id, lineno))
        expecting_points_line = True

    entries.sort(key=lambda e: e[0])
    cameras = []
    for pos, (name, q, t, cam_id, lineno) in enumerate(entries):
        if cam_id not in intrinsics:
            raise ColmapParseError(
                f"{img_path}:{lineno}: unknown camera id {cam_id}", path=str(img_path), line=lineno
            )
        fx, fy, cx, cy, w, h = intrinsics[cam_id]
        R = quaternion_to_rotation(np.array(q))
        w2c = np.hstack([R, np.array(t)[:, None]])
        stem = Path(name).stem
        frame_index = int(stem) if stem.isdigit() else pos
        cameras.append(
            Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
                   world_to_cam=w2c, frame_index=frame_index)
        )

    points = []
    colors = []
    for lineno, line in _data_lines(pts_path):
        vals = _parse_fields(line, pts_path, lineno, [int, float, float, float, int, int, int])
        points.append(vals[1:4])
        colors.append(vals[4:7])
    if not points:
        return SfmResult.failure("no points registered")
    return SfmResult(
        points=np.asarray(points, dtype=np.float64),
        colors=np.asarray(colors, dtype=np.uint8),
        cameras=cameras,
        success=True,
    )


def write_colmap_text(directory, sfm: SfmResult):
    """Write an SfmResult back out in COLMAP's text export layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not sfm.success:
        raise ValueError("cannot serialize a failed SfM result")

    cam_lines = ["# Camera list with one line of data per camera:",
                 "#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]"]
    keyed = {}
    cam_ids = []
    for cam in sfm.cameras:
        key = (cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
        if key not in keyed:
            keyed[key] = len(keyed) + 1
            cam_lines.append(
                f"{keyed[key]} PINHOLE {cam.width} {cam.height} "
                f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g}"
            )
        cam_ids.append(keyed[key])
    (directory / "cameras.txt").write_text("\n".join(cam_lines) + "\n")

    img_lines = ["# Image list with two lines of data per image:",
                 "#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME",
                 "#   POINTS2D[] as (X, Y, POINT3D_ID)"]
    for i, cam in enumerate(sfm.cameras):
        q = _rotation_to_quaternion(cam.rotation)
        t = cam.translation
        name = f"{cam.frame_index:05d}.png"
        img_lines.append(
            f"{i + 1} {q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g} "
            f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g} {cam_ids[i]} {name}"
        )
        img_lines.append("")
    (directory / "images.txt").write_text("\n".join(img_lines) + "\n")

    pts_lines = ["# 3D point list with one line of data per point:",
                 "#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]"]
    for i, (p, c) in enumerate(zip(sfm.points, sfm.colors)):
        pts_lines.append(
            f"{i + 1} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
            f"{int(c[0])} {int(c[1])} {int(c[2])} 0"
        )
    (directory / "points3D.txt").write_text("\n".join(pts_lines) + "\n")


def _rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for an orthonormal rotation matrix."""
    K = np.array([
        [R[0, 0] - R[1, 1] - R[2, 2], 0, 0, 0],
        [R[0, 1] + R[1, 0], R[1, 1] - R[0, 0] - R[2, 2], 0, 0],
        [R[0, 2] + R[2, 0], R[1, 2] + R[2, 1], R[2, 2] - R[0, 0] - R[1, 1], 0],
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1], R[0, 0] + R[1, 1] + R[2, 2]],
    ]) / 3.0
    vals, vecs = np.linalg.eigh(K)
    q = vecs[[3, 0, 1, 2], np.argmax(vals)]
    if q[0] < 0:
        q = -q
    return q


class ColmapDirProvider:
    """Provider over precomputed COLMAP text exports, one directory per
    attempted frame range named '<first>_<last>'."""

    def __init__(self, root):
        self.root = Path(root)

    def __call__(self, video: MaskedVideo, first: int, last: int) -> SfmResult:
        sub = self.root / f"{first}_{last}"
        if not sub.is_dir():
            return SfmResult.failure(f"no reconstruction for frames [{first}, {last}]")
        return parse_colmap_text(sub)


# ---------------------------------------------------------------------------
# Background initialization

def max_pairwise_distance(points: np.ndarray, approximate: bool = False) -> float:
    """Largest pairwise Euclidean distance; exact O(n^2) by default with a
    bounding-box-diagonal approximation for large clouds."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        raise DegenerateInputError("need at least two points")
    if approximate:
        return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    return float(np.sqrt(d2.max()))


def init_background_points(
    fg_points: np.ndarray,
    n_bkg: int = 60000,
    radius_mult: float = 3.0,
    seed: int = 0,
    approximate_extent: bool = False,
):
    """Area-uniform random points on a sphere surrounding the foreground.

    The sphere is centered on the foreground centroid with radius
    radius_mult times the maximum pairwise foreground distance. Returns
    (points (n, 3), colors (n, 3) mid-gray).
    """
    fg_points = np.asarray(fg_points, dtype=np.float64)
    if len(fg_points) < 2:
        raise DegenerateInputError("background sphere needs at least two foreground points")
    center = fg_points.mean(axis=0)
    radius = radius_mult * max_pairwise_distance(fg_points, approximate=approximate_extent)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_bkg, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    points = center + radius * dirs
    colors = np.full((n_bkg, 3), 0.5)
    return points, colors


# ---------------------------------------------------------------------------
# Manifest serialization

def write_manifest(path, manifest: ClipManifest, sfm_dirs, seed: int = 0):
    """One clip per line: 'clip <j> <first> <last> <overlap_with_prev> <sfm_dir>'."""
    lines = [f"# seed {seed}", f"# k {manifest.k}", f"# frames {manifest.n_frames}"]
    for j, clip in enumerate(manifest.clips):
        ov = manifest.overlaps[j - 1] if j > 0 else 0
        lines.append(f"clip {j} {clip.first} {clip.last} {ov} {sfm_dirs[j]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path, load_sfm: bool = True) -> ClipManifest:
    path = Path(path)
    k = DEFAULT_CLIP_LEN
    n_frames = None
    clips = []
    overlaps = []
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "k":
                k = int(parts[1])
            if len(parts) == 2 and parts[0] == "frames":
                n_frames = int(parts[1])
            continue
        parts = line.split()
        if parts[0] != "clip" or len(parts) != 6:
            raise ValueError(f"{path}: bad manifest line {line!r}")
        j, first, last, ov = int(parts[1]), int(parts[2]), int(parts[3]), int(parts[4])
        sfm_dir = parts[5]
        sfm = (
            parse_colmap_text(path.parent / sfm_dir)
            if load_sfm
            else SfmResult.failure("not loaded")
        )
        clips.append(Clip(first=first, last=last, sfm=sfm))
        if j > 0:
            overlaps.append(ov)
    if n_frames is None:
        n_frames = clips[-1].last + 1 if clips else 0
    manifest = ClipManifest(clips=clips, overlaps=overlaps, k=k, n_frames=n_frames)
    if load_sfm:
        manifest.validate()
    return manifest
