"""Desk-scale synthetic scenes with exact cameras, masks, and optical flow.

A scene is a ground-truth pair of Gaussian sets: a foreground patch on a
fronto-parallel plane translating with constant velocity, and a static
textured background plane behind it. Frames are rendered with the package's
own rasterizer, masks come from foreground-only coverage, and the known
planar motion yields exact per-pixel flow for temporal metrics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion

from .core import Camera, GaussianSet, Role, inverse_sigmoid, SH_C0
from .decomposition import MaskedVideo
from .metrics import FlowField
from .rasterizer import render


@dataclass
class SyntheticScene:
    fg: GaussianSet            # foreground at frame 0
    bg: GaussianSet
    fg_velocity: np.ndarray    # (3,) world units per frame, in-plane
    fg_depth: float
    bg_depth: float
    n_frames: int
    width: int
    height: int
    fx: float
    fy: float

    def camera(self, i: int) -> Camera:
        if not (0 <= i < self.n_frames):
            raise ValueError(f"frame {i} outside [0, {self.n_frames})")
        return Camera.look_at(
            eye=(0.0, 0.0, 0.0),
            target=(0.0, 0.0, 1.0),
            fx=self.fx,
            fy=self.fy,
            width=self.width,
            height=self.height,
            frame_index=i,
        )

    def _fg_at(self, i: int) -> GaussianSet:
        moved = self.fg.copy()
        moved.centers = moved.centers + self.fg_velocity * i
        return moved

    def combined(self, i: int) -> GaussianSet:
        fg = self._fg_at(i)
        return GaussianSet(
            centers=np.vstack([fg.centers, self.bg.centers]),
            rotations=np.vstack([fg.rotations, self.bg.rotations]),
            log_scales=np.vstack([fg.log_scales, self.bg.log_scales]),
            opacity_logits=np.concatenate([fg.opacity_logits, self.bg.opacity_logits]),
            sh=np.vstack([fg.sh, self.bg.sh]),
            role=Role.FRG,
            clip_id=0,
        )

    def frame(self, i: int) -> np.ndarray:
        return render(self.combined(i), self.camera(i)).image

    def mask(self, i: int) -> np.ndarray:
        out = render(self._fg_at(i), self.camera(i))
        return out.accum_alpha > 0.5

    def video(self) -> MaskedVideo:
        frames = [self.frame(i) for i in range(self.n_frames)]
        masks = [self.mask(i) for i in range(self.n_frames)]
        return MaskedVideo(frames=frames, masks=masks, class_label="synthetic")

    def foreground_points(self, frame: int, n: int, seed: int = 0):
        """Seeded subsample of the true foreground surface at one frame."""
        centers = self.fg.centers + self.fg_velocity * frame
        colors01 = np.clip(self.fg.sh[:, 0, :] * SH_C0 + 0.5, 0.0, 1.0)
        if n >= len(centers):
            idx = np.arange(len(centers))
        else:
            idx = np.random.default_rng(seed).choice(len(centers), size=n, replace=False)
        return centers[idx].copy(), (colors01[idx] * 255).astype(np.uint8)

    def flow(self, i: int, border: int = 2) -> FlowField:
        """Exact flow from frame i to i+1 for the two known planes.

        The camera is static, so background flow is zero and foreground flow
        is the projected per-frame velocity. Pixels near mask boundaries in
        either frame are marked invalid (mixed coverage)."""
        du_fg = self.fx * self.fg_velocity[0] / self.fg_depth
        dv_fg = self.fy * self.fg_velocity[1] / self.fg_depth
        m0 = self.mask(i)
        m1 = self.mask(i + 1)
        u = np.where(m0, du_fg, 0.0)
        v = np.where(m0, dv_fg, 0.0)
        r = np.ones((2 * border + 1, 2 * border + 1), dtype=bool)
        fg_core = binary_erosion(m0, r) & binary_erosion(m1, r)
        bg_core = ~binary_dilation(m0, r) & ~binary_dilation(m1, r)
        return FlowField(u=u, v=v, valid=fg_core | bg_core)

    def flows(self):
        return [self.flow(i) for i in range(self.n_frames - 1)]


def make_scene(
    n_frames: int = 30,
    width: int = 64,
    height: int = 64,
    n_fg: int = 40,
    n_bg: int = 120,
    seed: int = 0,
    fg_velocity=(0.02, 0.004, 0.0),
    fg_depth: float = 2.0,
    bg_depth: float = 5.0,
    texture_amplitude: float = 0.3,
) -> SyntheticScene:
    """Build the standard moving-foreground / textured-background fixture."""
    rng = np.random.default_rng(seed)
    fx = fy = width * 70.0 / 64.0

    half_fg = 0.4 * fg_depth * (width / 2.0) / fx
    total_shift = np.asarray(fg_velocity, dtype=np.float64) * (n_frames - 1)
    fg_pts = np.empty((n_fg, 3))
    fg_pts[:, 0] = rng.uniform(-half_fg, half_fg, n_fg)
    fg_pts[:, 1] = rng.uniform(-half_fg, half_fg, n_fg)
    fg_pts[:, 2] = fg_depth
    fg_pts[:, 0] -= total_shift[0] / 2.0  # keep the path centered in view
    fg_pts[:, 1] -= total_shift[1] / 2.0

    spacing_fg = 2.0 * half_fg / max(np.sqrt(n_fg), 1.0)
    fg_colors = 0.5 + texture_amplitude * rng.uniform(-1.0, 1.0, (n_fg, 3))
    fg_colors[:, 0] = np.clip(fg_colors[:, 0] + 0.15, 0.0, 1.0)  # warm tint

    half_bg = 1.05 * bg_depth * (width / 2.0) / fx
    bg_pts = np.empty((n_bg, 3))
    bg_pts[:, 0] = rng.uniform(-half_bg, half_bg, n_bg)
    bg_pts[:, 1] = rng.uniform(-half_bg, half_bg, n_bg)
    bg_pts[:, 2] = bg_depth
    spacing_bg = 2.0 * half_bg / max(np.sqrt(n_bg), 1.0)
    bg_colors = 0.5 + texture_amplitude * rng.uniform(-1.0, 1.0, (n_bg, 3))

    def build(points, colors, scale, role):
        n = len(points)
        sh = np.zeros((n, 1, 3))
        sh[:, 0, :] = (np.clip(colors, 0.02, 0.98) - 0.5) / SH_C0
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return GaussianSet(
            centers=points,
            rotations=rot,
            log_scales=np.full((n, 3), np.log(scale)),
            opacity_logits=np.full(n, inverse_sigmoid(0.98)),
            sh=sh,
            role=role,
        )

    return SyntheticScene(
        fg=build(fg_pts, fg_colors, 0.65 * spacing_fg, Role.FRG),
        bg=build(bg_pts, bg_colors, 0.8 * spacing_bg, Role.BKG),
        fg_velocity=np.asarray(fg_velocity, dtype=np.float64),
        fg_depth=fg_depth,
        bg_depth=bg_depth,
        n_frames=n_frames,
        width=width,
        height=height,
        fx=fx,
        fy=fy,
    )


def translation_video(base: np.ndarray, shift: int, n_frames: int):
    """Frames where frame i is the base image shifted right by shift*i pixels
    (zero fill), plus the exact constant flow between consecutive frames."""
    base = np.asarray(base, dtype=np.float64)
    h, w = base.shape[:2]
    frames = []
    for i in range(n_frames):
        f = np.zeros_like(base)
        s = shift * i
        if s < w:
            f[:, s:] = base[:, : w - s]
        frames.append(f)
    flows = [
        FlowField(u=np.full((h, w), float(shift)), v=np.zeros((h, w)), valid=np.ones((h, w), bool))
        for _ in range(n_frames - 1)
    ]
    return frames, flows
