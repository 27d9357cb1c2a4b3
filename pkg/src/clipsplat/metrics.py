"""Reconstruction losses and video quality metrics.

The training loss mixes L1 with structural dissimilarity and carries its own
analytic gradient. Evaluation metrics cover PSNR, SSIM, flow-warped SSIM for
temporal consistency, and the product combiner with an external text score.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import correlate2d

from .errors import DegenerateInputError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LOSS_LAMBDA = 0.2

FLO_MAGIC = 202021.25
FLO_INVALID = 1e9


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()

def _gaussian_window_1d(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    return g / g.sum()

_WINDOW = _gaussian_window()
_WINDOW_1D = _gaussian_window_1d()


@dataclass
class LossValue:
    total: float
    l1: float
    dssim: float
    gradient: np.ndarray  # d(total)/d(pred), same shape as pred


@dataclass
class FlowField:
    """Dense optical flow in pixels, frame i -> i+1, plus a validity mask."""

    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.valid is None:
            self.valid = np.ones(self.u.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)


def _valid_corr(img):
    # The Gaussian window is separable: two 1D passes.
    tmp = correlate2d(img, _WINDOW_1D[None, :], mode="valid")
    return correlate2d(tmp, _WINDOW_1D[:, None], mode="valid")


def _adjoint_corr(grad):
    # Adjoint of the valid cross-correlation: full correlation with the
    # (symmetric) window.
    tmp = correlate2d(grad, _WINDOW_1D[None, :], mode="full")
    return correlate2d(tmp, _WINDOW_1D[:, None], mode="full")


def _ssim_channel(a, b, with_grad=False):
    """SSIM map for one channel; optionally d(mean map)/da as well."""
    ua = _valid_corr(a)
    ub = _valid_corr(b)
    vaa = _valid_corr(a * a)
    vbb = _valid_corr(b * b)
    vab = _valid_corr(a * b)
    sa = vaa - ua * ua
    sb = vbb - ub * ub
    sab = vab - ua * ub
    A1 = 2.0 * ua * ub + SSIM_C1
    A2 = 2.0 * sab + SSIM_C2
    B1 = ua * ua + ub * ub + SSIM_C1
    B2 = sa + sb + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    if not with_grad:
        return smap, None
    npix = smap.size
    # Partials of mean(S) w.r.t. the convolution outputs, grouped so that at
    # a == b every term cancels exactly (A1 == B1 and A2 == B2 bitwise there,
    # keeping the fixed point of the loss exact under Adam).
    gS = np.full_like(smap, 1.0 / npix)
    r = gS * smap
    q = r / A2
    d_vab = 2.0 * q
    d_vaa = -(r / B2)
    d_ua = gS * 2.0 * (ub * (A2 - A1) - smap * ua * (B2 - B1)) / (B1 * B2)
    grad_a = _adjoint_corr(d_ua) + 2.0 * a * _adjoint_corr(d_vaa) + b * _adjoint_corr(d_vab)
    return smap, grad_a


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity, averaged over channels and the valid window grid."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    vals = [np.mean(_ssim_channel(a[:, :, c], b[:, :, c])[0]) for c in range(a.shape[2])]
    return float(np.mean(vals))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def recon_loss(
    pred: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray | None = None,
    lam: float = LOSS_LAMBDA,
) -> LossValue:
    """(1-lam) * L1 + lam * (1 - SSIM) with the exact gradient w.r.t. pred.

    An optional (H, W) weight mask in [0, 1] restricts the L1 term; the
    structural term always sees the full images.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        wsum = mask.sum()
        if wsum == 0.0:
            raise DegenerateInputError("loss mask is all zeros")
        w = mask[:, :, None]
        l1 = float(np.sum(w * np.abs(diff)) / (wsum * pred.shape[2]))
        g_l1 = np.sign(diff) * w / (wsum * pred.shape[2])
    else:
        l1 = float(np.mean(np.abs(diff)))
        g_l1 = np.sign(diff) / diff.size

    svals = []
    g_ssim = np.zeros_like(pred)
    for c in range(pred.shape[2]):
        smap, ga = _ssim_channel(pred[:, :, c], target[:, :, c], with_grad=True)
        svals.append(np.mean(smap))
        g_ssim[:, :, c] = ga
    nchan = pred.shape[2]
    dssim = float(1.0 - np.mean(svals))
    grad = (1.0 - lam) * g_l1 + lam * (-g_ssim / nchan)
    total = (1.0 - lam) * l1 + lam * dssim
    return LossValue(total=total, l1=l1, dssim=dssim, gradient=grad)


def bilinear_warp(image: np.ndarray, flow: FlowField):
    """Backward-warp `image` by the flow: out(p) = image(p + flow(p)).

    Returns (warped, valid) where valid excludes out-of-bounds samples and
    pixels the flow itself marks invalid.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = flow.u.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = xs + flow.u
    sy = ys + flow.v
    valid = flow.valid & (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[:, :, None]
    fy = (sy - y0)[:, :, None]
    out = (
        image[y0, x0] * (1 - fx) * (1 - fy)
        + image[y0, x1] * fx * (1 - fy)
        + image[y1, x0] * (1 - fx) * fy
        + image[y1, x1] * fx * fy
    )
    return out, valid


def _masked_ssim(a, b, pixel_valid):
    """Mean SSIM over windows whose pixels are all valid."""
    ones = np.ones_like(_WINDOW)
    cover = correlate2d(pixel_valid.astype(np.float64), ones, mode="valid")
    window_ok = cover >= ones.size - 0.5
    if not np.any(window_ok):
        raise DegenerateInputError("no fully valid SSIM window after warping")
    vals = []
    for c in range(a.shape[2]):
        smap, _ = _ssim_channel(a[:, :, c], b[:, :, c])
        vals.append(np.mean(smap[window_ok]))
    return float(np.mean(vals))


def warp_ssim(frames, flows) -> float:
    """Temporal consistency: mean SSIM between each frame and the next frame
    warped back by the source video's flow, over valid pixels."""
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    if len(flows) != len(frames) - 1:
        raise ValueError(
            f"{len(frames)} frames need {len(frames) - 1} flows, got {len(flows)}"
        )
    scores = []
    for i in range(len(frames) - 1):
        warped, valid = bilinear_warp(np.asarray(frames[i + 1], dtype=np.float64), flows[i])
        scores.append(_masked_ssim(np.asarray(frames[i], dtype=np.float64), warped, valid))
    return float(np.mean(scores))


def q_edit(clip_score_text: float, warp_ssim_score: float) -> float:
    """Joint editing score: text-alignment score times temporal consistency."""
    return float(clip_score_text) * float(warp_ssim_score)


def read_flo(path) -> FlowField:
    """Read a Middlebury .flo file (magic 'PIEH', little-endian float32)."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated .flo file")
    magic, w, h = struct.unpack("<fii", data[:12])
    if abs(magic - FLO_MAGIC) > 1e-3:
        raise ValueError(f"{path}: bad .flo magic {magic!r}")
    expect = 12 + 8 * w * h
    if len(data) < expect:
        raise ValueError(f"{path}: expected {expect} bytes, found {len(data)}")
    uv = np.frombuffer(data[12:expect], dtype="<f4").reshape(h, w, 2)
    u = uv[:, :, 0].astype(np.float64)
    v = uv[:, :, 1].astype(np.float64)
    valid = (np.abs(u) < FLO_INVALID) & (np.abs(v) < FLO_INVALID)
    return FlowField(u=u, v=v, valid=valid)


def write_flo(path, flow: FlowField):
    path = Path(path)
    h, w = flow.u.shape
    u = flow.u.astype("<f4")
    v = flow.v.astype("<f4")
    if not np.all(flow.valid):
        u = np.where(flow.valid, u, np.float32(2e9))
        v = np.where(flow.valid, v, np.float32(2e9))
    uv = np.stack([u, v], axis=-1)
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(uv.astype("<f4").tobytes())
