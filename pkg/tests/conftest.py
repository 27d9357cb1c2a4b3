"""Shared fixtures: random scenes sized for finite-difference checking.

Scene parameters are drawn away from the rasterizer's non-smooth points
(alpha clamp, per-pixel skip threshold, color clamp) so central differences
at h = 1e-4 probe the same smooth branch as the analytic gradients.
"""

import numpy as np
import pytest

from clipsplat.core import Camera, GaussianSet, Role
from clipsplat.rasterizer import (
    ALPHA_CLAMP,
    ALPHA_SKIP,
    NEAR_PLANE,
    _Projected,
    _tile_alphas,
    _tile_pixels,
)


def scene_is_fd_safe(gset, cam, deform=None, guard=1e-4):
    """True when no evaluated quantity sits near a non-smooth point.

    The compositing has hard thresholds (skip below 1/255, clamp at 0.99,
    color clamp, depth ordering); a finite-difference probe crossing one of
    them sees a jump instead of the smooth-branch slope."""
    proj = _Projected(gset, cam, deform)
    if proj.count != len(gset):
        return False
    if np.min(proj.depth) < NEAR_PLANE + 0.1:
        return False
    depths = np.sort(proj.depth)
    if depths.size > 1 and np.min(np.diff(depths)) < 1e-3:
        return False
    pre_color = np.einsum("nk,nkc->nc", proj.basis, gset.sh[proj.index]) + 0.5
    if np.min(pre_color) < 1e-3 or np.max(pre_color) > 1.0 - 1e-3:
        return False
    for ty in range(proj.tiles_y):
        for tx in range(proj.tiles_x):
            members = proj.tile_members(tx, ty)
            if members.size == 0:
                continue
            pts, _ = _tile_pixels(tx, ty, cam.width, cam.height)
            _, _, _, raw = _tile_alphas(proj, members, pts)
            if np.any(np.abs(raw - ALPHA_SKIP) < guard):
                return False
            if np.any(np.abs(raw - ALPHA_CLAMP) < guard):
                return False
    return True


def random_scene(seed, n=5, width=16, height=16, sh_degree=1, fd_safe=True):
    for attempt in range(200):
        gset, cam = _draw_scene(seed + 10000 * attempt, n, width, height, sh_degree)
        if not fd_safe or scene_is_fd_safe(gset, cam):
            return gset, cam
    raise RuntimeError(f"no fd-safe scene found for seed {seed}")


def _draw_scene(seed, n, width, height, sh_degree):
    rng = np.random.default_rng(seed)
    k = (sh_degree + 1) ** 2
    centers = np.empty((n, 3))
    centers[:, 0] = rng.uniform(-0.45, 0.45, n)
    centers[:, 1] = rng.uniform(-0.45, 0.45, n)
    centers[:, 2] = rng.uniform(1.6, 3.0, n)
    rotations = rng.normal(0.0, 1.0, (n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.05), np.log(0.25), (n, 3))
    # sigma in (0.08, 0.33): below both the 0.99 clamp and the 3-sigma
    # footprint truncation level, so the composite stays smooth.
    opacity_logits = rng.uniform(-2.5, -0.7, n)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rng.uniform(-0.6, 0.6, (n, 3))
    if k > 1:
        sh[:, 1:, :] = rng.uniform(-0.08, 0.08, (n, k - 1, 3))
    gset = GaussianSet(
        centers=centers,
        rotations=rotations,
        log_scales=log_scales,
        opacity_logits=opacity_logits,
        sh=sh,
        role=Role.FRG,
    )
    f = width * 24.0 / 16.0
    cam = Camera.look_at(
        eye=(0.0, 0.0, 0.0),
        target=(0.0, 0.0, 1.0),
        fx=f,
        fy=f,
        width=width,
        height=height,
    )
    return gset, cam


def rel_error(analytic, numeric, floor=1e-6):
    denom = max(abs(analytic), abs(numeric), floor)
    return abs(analytic - numeric) / denom


def central_difference(fn, array, index, h=1e-4):
    old = array[index]
    array[index] = old + h
    hi = fn()
    array[index] = old - h
    lo = fn()
    array[index] = old
    return (hi - lo) / (2.0 * h)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
