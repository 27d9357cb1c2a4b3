"""Differentiable tile-based splatting of 3D Gaussians to an RGB image.

Forward: EWA projection of each Gaussian to a 2D splat, then front-to-back
alpha compositing per 16x16 tile with splats sorted by (depth, source index).
Backward: the full analytic chain through compositing, the Gaussian exponent,
the perspective Jacobian, the 3D covariance, and SH color evaluation. The
backward pass recomputes the forward per tile instead of storing per-pixel
contributor lists.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import (
    Camera,
    Gaussian,
    GaussianSet,
    quaternion_rotation_backward,
    quaternion_to_rotation,
    sh_basis,
    sh_basis_grad,
    sigmoid,
)

TILE_SIZE = 16
BLUR_FLOOR = 0.3          # px^2 added to the 2D covariance diagonal
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
NEAR_PLANE = 0.01
FOOTPRINT_SIGMAS = 3.0


@dataclass
class Splat2D:
    """Projected footprint of one Gaussian."""

    mean2d: np.ndarray      # (2,) pixels
    cov2d: np.ndarray       # (2, 2) pixels^2, blur floor applied
    depth: float            # camera-space z
    color: np.ndarray       # (3,) RGB
    alpha_base: float       # sigmoid(opacity_logit)
    source_index: int


@dataclass
class RenderOutput:
    image: np.ndarray          # (H, W, 3) in [0, 1]
    accum_alpha: np.ndarray    # (H, W) in [0, 1]
    contrib_count: np.ndarray  # (H, W) int


@dataclass
class RenderGrads:
    """Gradients for every Gaussian parameter (zero for culled Gaussians)."""

    centers: np.ndarray         # (N, 3)
    rotations: np.ndarray       # (N, 4)
    log_scales: np.ndarray      # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, K, 3)
    delta_center: np.ndarray | None = None
    delta_rotation: np.ndarray | None = None
    delta_log_scale: np.ndarray | None = None


def _effective_params(gset: GaussianSet, deform):
    centers = gset.centers
    rotations = gset.rotations
    log_scales = gset.log_scales
    if deform is not None:
        dx, dr, ds = deform
        centers = centers + dx
        rotations = rotations + dr
        log_scales = log_scales + ds
    return centers, rotations, log_scales


class _Projected:
    """Per-Gaussian projection state shared by forward and backward."""

    def __init__(self, gset: GaussianSet, cam: Camera, deform):
        centers, rotations, log_scales = _effective_params(gset, deform)
        n = len(gset)
        W = cam.rotation
        t = cam.translation

        p_cam = centers @ W.T + t
        vis = p_cam[:, 2] > NEAR_PLANE
        idx = np.where(vis)[0]
        self.index = idx
        self.n_total = n
        if idx.size == 0:
            self.count = 0
            return

        pc = p_cam[idx]
        x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
        self.p_cam = pc
        self.mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=-1)
        self.depth = z

        # Perspective Jacobian of (u, v) w.r.t. camera-space position.
        J = np.zeros((idx.size, 2, 3))
        J[:, 0, 0] = cam.fx / z
        J[:, 0, 2] = -cam.fx * x / z**2
        J[:, 1, 1] = cam.fy / z
        J[:, 1, 2] = -cam.fy * y / z**2
        self.J = J

        q_raw = rotations[idx]
        self.q_raw = q_raw
        R = quaternion_to_rotation(q_raw)
        self.R = R
        self.exp2s = np.exp(2.0 * log_scales[idx])
        Sigma = np.einsum("nij,nj,nkj->nik", R, self.exp2s, R)
        self.Sigma = Sigma
        JW = np.einsum("nij,jk->nik", J, W)
        self.JW = JW
        cov = np.einsum("nij,njk,nlk->nil", JW, Sigma, JW)
        cov[:, 0, 0] += BLUR_FLOOR
        cov[:, 1, 1] += BLUR_FLOOR
        self.cov2d = cov

        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        if np.any(det <= 0.0):
            raise RuntimeError("singular 2D covariance after blur floor")
        self.det = det
        inv = np.empty_like(cov)
        inv[:, 0, 0] = cov[:, 1, 1] / det
        inv[:, 1, 1] = cov[:, 0, 0] / det
        inv[:, 0, 1] = -cov[:, 0, 1] / det
        inv[:, 1, 0] = -cov[:, 1, 0] / det
        self.inv_cov = inv

        mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
        lam_max = mid + np.sqrt(np.maximum(mid**2 - det, 0.0))
        self.radius = np.ceil(FOOTPRINT_SIGMAS * np.sqrt(lam_max))

        campos = cam.position
        v = centers[idx] - campos
        vlen = np.linalg.norm(v, axis=-1)
        vlen = np.maximum(vlen, 1e-12)
        self.view_vec = v
        self.view_len = vlen
        self.view_dir = v / vlen[:, None]

        degree = gset.sh_degree
        self.degree = degree
        self.basis = sh_basis(self.view_dir, degree)
        raw = np.einsum("nk,nkc->nc", self.basis, gset.sh[idx]) + 0.5
        self.color = np.clip(raw, 0.0, 1.0)
        self.color_open = (raw > 0.0) & (raw < 1.0)

        self.sigma = sigmoid(gset.opacity_logits[idx])
        self.count = idx.size

        # Inclusive tile ranges of each footprint, clipped to the image.
        x0 = np.floor((self.mean2d[:, 0] - self.radius) / TILE_SIZE).astype(int)
        x1 = np.floor((self.mean2d[:, 0] + self.radius) / TILE_SIZE).astype(int)
        y0 = np.floor((self.mean2d[:, 1] - self.radius) / TILE_SIZE).astype(int)
        y1 = np.floor((self.mean2d[:, 1] + self.radius) / TILE_SIZE).astype(int)
        ntx = (cam.width + TILE_SIZE - 1) // TILE_SIZE
        nty = (cam.height + TILE_SIZE - 1) // TILE_SIZE
        self.tiles_x = ntx
        self.tiles_y = nty
        self.tx0 = np.clip(x0, 0, ntx - 1)
        self.tx1 = np.clip(x1, 0, ntx - 1)
        self.ty0 = np.clip(y0, 0, nty - 1)
        self.ty1 = np.clip(y1, 0, nty - 1)
        self.off_image = (x1 < 0) | (x0 >= ntx) | (y1 < 0) | (y0 >= nty)

    def tile_members(self, tx: int, ty: int) -> np.ndarray:
        """Visible-splat indices touching tile (tx, ty), depth sorted."""
        m = (
            ~self.off_image
            & (self.tx0 <= tx)
            & (tx <= self.tx1)
            & (self.ty0 <= ty)
            & (ty <= self.ty1)
        )
        members = np.where(m)[0]
        if members.size == 0:
            return members
        order = np.lexsort((self.index[members], self.depth[members]))
        return members[order]


def project(g: Gaussian, cam: Camera, source_index: int = 0) -> Splat2D | None:
    """Project a single Gaussian; returns None when culled by the near plane."""
    gset = GaussianSet.from_gaussians([g])
    proj = _Projected(gset, cam, None)
    if proj.count == 0:
        return None
    return Splat2D(
        mean2d=proj.mean2d[0].copy(),
        cov2d=proj.cov2d[0].copy(),
        depth=float(proj.depth[0]),
        color=proj.color[0].copy(),
        alpha_base=float(proj.sigma[0]),
        source_index=source_index,
    )


def _tile_pixels(tx, ty, width, height):
    """Pixel center coordinates and the (row, col) window of a tile."""
    px0 = tx * TILE_SIZE
    py0 = ty * TILE_SIZE
    px1 = min(px0 + TILE_SIZE, width)
    py1 = min(py0 + TILE_SIZE, height)
    xs = np.arange(px0, px1) + 0.5
    ys = np.arange(py0, py1) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    return pts, (py0, py1, px0, px1)


def _tile_alphas(proj, members, pts):
    """Per-splat-per-pixel alpha, the exponent factor, and inv_cov * d."""
    mean = proj.mean2d[members]
    dx = pts[None, :, 0] - mean[:, 0, None]                    # (S, P)
    dy = pts[None, :, 1] - mean[:, 1, None]
    ic = proj.inv_cov[members]
    ia = ic[:, 0, 0, None]
    ib = ic[:, 0, 1, None]
    icc = ic[:, 1, 1, None]
    ldx = ia * dx + ib * dy
    ldy = ib * dx + icc * dy
    power = -0.5 * (dx * ldx + dy * ldy)
    G = np.exp(power)
    raw = proj.sigma[members][:, None] * G
    alpha = np.minimum(raw, ALPHA_CLAMP)
    alpha = np.where(alpha < ALPHA_SKIP, 0.0, alpha)
    return alpha, G, (ldx, ldy), raw


def _transmittance(alpha):
    """T[s, p] = prod_{h<s} (1 - alpha[h, p]), plus the final product."""
    om = 1.0 - alpha
    cp = np.cumprod(om, axis=0)
    T = np.empty_like(alpha)
    T[0] = 1.0
    if alpha.shape[0] > 1:
        T[1:] = cp[:-1]
    return T, cp[-1]


def _forward_tile(proj, cam, background, tx, ty):
    pts, window = _tile_pixels(tx, ty, cam.width, cam.height)
    members = proj.tile_members(tx, ty)
    npix = pts.shape[0]
    if members.size == 0:
        img = np.tile(background, (npix, 1))
        return window, img, np.zeros(npix), np.zeros(npix, dtype=np.int64)
    alpha, _, _, _ = _tile_alphas(proj, members, pts)
    T, t_final = _transmittance(alpha)
    w = alpha * T
    img = w.T @ proj.color[members] + background[None, :] * t_final[:, None]
    accum = 1.0 - t_final
    count = np.sum(alpha > 0.0, axis=0)
    return window, img, accum, count


def render(
    gset: GaussianSet,
    cam: Camera,
    deform=None,
    background=(0.0, 0.0, 0.0),
    threads: int = 1,
) -> RenderOutput:
    """Render a GaussianSet through a camera with front-to-back compositing.

    `deform` is an optional (delta_center, delta_rotation, delta_log_scale)
    triple of per-Gaussian arrays applied before projection. Deterministic:
    splats are ordered by (depth, source index) and tiles are reduced in a
    fixed order regardless of thread count.
    """
    background = np.asarray(background, dtype=np.float64)
    proj = _Projected(gset, cam, deform)
    H, W = cam.height, cam.width
    image = np.empty((H, W, 3))
    accum = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int64)

    if proj.count == 0:
        image[:] = background
        return RenderOutput(image=image, accum_alpha=accum, contrib_count=count)

    tiles = [(tx, ty) for ty in range(proj.tiles_y) for tx in range(proj.tiles_x)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _forward_tile(proj, cam, background, *t), tiles))
    else:
        results = [_forward_tile(proj, cam, background, tx, ty) for tx, ty in tiles]

    for (py0, py1, px0, px1), img, acc, cnt in results:
        w = px1 - px0
        h = py1 - py0
        image[py0:py1, px0:px1] = img.reshape(h, w, 3)
        accum[py0:py1, px0:px1] = acc.reshape(h, w)
        count[py0:py1, px0:px1] = cnt.reshape(h, w)
    return RenderOutput(image=image, accum_alpha=accum, contrib_count=count)


def _backward_tile(proj, cam, background, upstream, tx, ty):
    """2D-level gradients for one tile.

    Returns per-visible-splat accumulators (mean2d, cov2d abc, color, sigma)
    restricted to the tile members, or None when the tile is empty.
    """
    pts, (py0, py1, px0, px1) = _tile_pixels(tx, ty, cam.width, cam.height)
    members = proj.tile_members(tx, ty)
    if members.size == 0:
        return None
    up = upstream[py0:py1, px0:px1].reshape(-1, 3)             # (P, 3)

    alpha, G, (ldx, ldy), raw = _tile_alphas(proj, members, pts)
    T, t_final = _transmittance(alpha)
    w = alpha * T                                              # (S, P)
    colors = proj.color[members]                               # (S, 3)

    # Suffix color after each splat: sum_{h>s} c_h w_h + bg * T_final.
    cw = w[:, :, None] * colors[:, None, :]                    # (S, P, 3)
    suffix = np.cumsum(cw[::-1], axis=0)[::-1]                 # inclusive from s
    after = suffix - cw + background[None, None, :] * t_final[None, :, None]

    live = (alpha > 0.0) & (raw < ALPHA_CLAMP)  # alpha depends on sigma, G here

    # dC/dalpha_s = c_s T_s - after_s / (1 - alpha_s)
    dC_dalpha = colors[:, None, :] * T[:, :, None] - after / (1.0 - alpha)[:, :, None]
    dL_dalpha = np.where(live, np.sum(dC_dalpha * up[None, :, :], axis=-1), 0.0)

    grad_color = w @ up
    grad_sigma = np.sum(dL_dalpha * G, axis=1)
    dL_dpower = dL_dalpha * proj.sigma[members][:, None] * G

    grad_mean2d = np.stack(
        [np.sum(dL_dpower * ldx, axis=1), np.sum(dL_dpower * ldy, axis=1)], axis=-1
    )
    # d(power)/d(cov2d) = 0.5 (inv_cov d)(inv_cov d)^T per pixel.
    grad_cov = np.stack(
        [
            0.5 * np.sum(dL_dpower * ldx * ldx, axis=1),
            np.sum(dL_dpower * ldx * ldy, axis=1),
            0.5 * np.sum(dL_dpower * ldy * ldy, axis=1),
        ],
        axis=-1,
    )
    return members, grad_mean2d, grad_cov, grad_color, grad_sigma


def render_backward(
    gset: GaussianSet,
    cam: Camera,
    deform,
    background,
    upstream: np.ndarray,
    threads: int = 1,
) -> RenderGrads:
    """Analytic gradients of sum(upstream * image) w.r.t. all parameters.

    `upstream` is the (H, W, 3) gradient of the loss w.r.t. the rendered
    image. Culled and per-pixel-skipped contributions receive exactly zero
    gradient, matching the forward pass.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError(
            f"upstream gradient shape {upstream.shape} does not match "
            f"({cam.height}, {cam.width}, 3)"
        )
    background = np.asarray(background, dtype=np.float64)
    n = len(gset)
    k = gset.sh.shape[1]
    grads = RenderGrads(
        centers=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        log_scales=np.zeros((n, 3)),
        opacity_logits=np.zeros(n),
        sh=np.zeros((n, k, 3)),
    )
    proj = _Projected(gset, cam, deform)
    if proj.count == 0:
        if deform is not None:
            grads.delta_center = grads.centers.copy()
            grads.delta_rotation = grads.rotations.copy()
            grads.delta_log_scale = grads.log_scales.copy()
        return grads

    m = proj.count
    g_mean2d = np.zeros((m, 2))
    g_cov = np.zeros((m, 3))  # (a, b, c) of the symmetric 2x2
    g_color = np.zeros((m, 3))
    g_sigma = np.zeros(m)

    tiles = [(tx, ty) for ty in range(proj.tiles_y) for tx in range(proj.tiles_x)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda t: _backward_tile(proj, cam, background, upstream, *t), tiles)
            )
    else:
        results = [_backward_tile(proj, cam, background, upstream, tx, ty) for tx, ty in tiles]

    # Fixed-order reduction keeps results identical for any thread count;
    # members are unique within a tile so indexed adds are safe.
    for res in results:
        if res is None:
            continue
        members, gm, gc, gcol, gs = res
        g_mean2d[members] += gm
        g_cov[members] += gc
        g_color[members] += gcol
        g_sigma[members] += gs

    # ---- chain from 2D quantities to 3D parameters (vectorized per splat) ----
    W = cam.rotation
    Jc = proj.J

    # Opacity.
    sig = proj.sigma
    g_logit = g_sigma * sig * (1.0 - sig)

    # SH and view-direction path from color.
    masked = np.where(proj.color_open, g_color, 0.0)           # (m, 3)
    g_sh = proj.basis[:, :, None] * masked[:, None, :]         # (m, K, 3)
    bgrad = sh_basis_grad(proj.view_dir, proj.degree)          # (m, K, 3->dir)
    coeff = np.einsum("nkc,nc->nk", gset.sh[proj.index], masked)
    g_dir = np.einsum("nk,nkd->nd", coeff, bgrad)
    # dir = v / |v|
    dirs = proj.view_dir
    g_view = (g_dir - dirs * np.sum(g_dir * dirs, axis=-1, keepdims=True)) / proj.view_len[:, None]

    # cov2d = (J W) Sigma (J W)^T; U is the symmetric-consistent 2x2 gradient.
    U = np.empty((m, 2, 2))
    U[:, 0, 0] = g_cov[:, 0]
    U[:, 0, 1] = 0.5 * g_cov[:, 1]
    U[:, 1, 0] = 0.5 * g_cov[:, 1]
    U[:, 1, 1] = g_cov[:, 2]

    JW = proj.JW
    Sigma = proj.Sigma
    # dL/d(JW) = 2 U (JW) Sigma  (U, Sigma symmetric).
    dL_dJW = 2.0 * np.einsum("nij,njk,nkl->nil", U, JW, Sigma)
    dL_dJ = np.einsum("nik,jk->nij", dL_dJW, W)
    # dL/dSigma = (JW)^T U (JW).
    GSig = np.einsum("nji,njk,nkl->nil", JW, U, JW)

    # Sigma = R D R^T with D = diag(exp(2s)).
    R = proj.R
    sym = GSig + np.transpose(GSig, (0, 2, 1))
    dL_dR = np.einsum("nij,njk,nk->nik", sym, R, proj.exp2s)
    dD = np.einsum("nji,njk,nkl->nil", R, GSig, R)
    g_logscale = 2.0 * proj.exp2s * np.einsum("nii->ni", dD)
    g_quat = quaternion_rotation_backward(proj.q_raw, dL_dR)

    # Position path: mean2d rows of J plus the J-entry dependence on p_cam.
    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    g_pcam = np.einsum("nij,ni->nj", Jc, g_mean2d)
    g_pcam[:, 0] += dL_dJ[:, 0, 2] * (-cam.fx / z**2)
    g_pcam[:, 1] += dL_dJ[:, 1, 2] * (-cam.fy / z**2)
    g_pcam[:, 2] += (
        dL_dJ[:, 0, 0] * (-cam.fx / z**2)
        + dL_dJ[:, 1, 1] * (-cam.fy / z**2)
        + dL_dJ[:, 0, 2] * (2.0 * cam.fx * x / z**3)
        + dL_dJ[:, 1, 2] * (2.0 * cam.fy * y / z**3)
    )
    g_center = g_pcam @ W + g_view

    idx = proj.index
    grads.centers[idx] = g_center
    grads.rotations[idx] = g_quat
    grads.log_scales[idx] = g_logscale
    grads.opacity_logits[idx] = g_logit
    grads.sh[idx] = g_sh
    if deform is not None:
        # Effective params are plain sums, so deltas share the same gradients.
        grads.delta_center = grads.centers.copy()
        grads.delta_rotation = grads.rotations.copy()
        grads.delta_log_scale = grads.log_scales.copy()
    return grads
