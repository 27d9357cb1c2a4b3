"""Stage-1 optimization: per-clip foreground/background Gaussians, their
deformation fields, and per-frame merge weights, trained jointly against the
L1 + DSSIM reconstruction loss with a hand-rolled Adam.

Also owns scene persistence: Gaussians go to binary little-endian PLY files
with the usual splat property names, deformation fields and merge-weight
logits to versioned binary sidecars, all bit-exact on round trip.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import GaussianSet, Role, sigmoid
from .decomposition import (
    ClipManifest,
    MaskedVideo,
    init_background_points,
    read_manifest,
    write_colmap_text,
    write_manifest,
)
from .deformation import DeformationField, HashEncoding, time_normalize
from .errors import SceneFormatError, TrainingDivergedError
from .metrics import recon_loss
from .rasterizer import render, render_backward

BLACK = np.zeros(3)


@dataclass
class AlphaMap:
    """Per-frame pixel-wise merge weights stored as logits (0 -> weight 0.5)."""

    values: np.ndarray  # (H, W) logits
    frame_index: int

    @classmethod
    def initial(cls, height: int, width: int, frame_index: int) -> "AlphaMap":
        return cls(values=np.zeros((height, width)), frame_index=frame_index)

    @property
    def weights(self) -> np.ndarray:
        return sigmoid(self.values)


def merge_views(frg: np.ndarray, bkg: np.ndarray, alpha: AlphaMap) -> np.ndarray:
    """Pixel-wise convex combination of the two renders by sigmoid(logits)."""
    if frg.shape != bkg.shape or frg.shape[:2] != alpha.values.shape:
        raise ValueError(
            f"shape mismatch: frg {frg.shape}, bkg {bkg.shape}, alpha {alpha.values.shape}"
        )
    w = alpha.weights[:, :, None]
    return w * frg + (1.0 - w) * bkg


def merge_views_backward(frg, bkg, alpha: AlphaMap, upstream):
    """Gradients of the merge w.r.t. both images and the alpha logits."""
    w = alpha.weights
    wc = w[:, :, None]
    d_frg = upstream * wc
    d_bkg = upstream * (1.0 - wc)
    d_logits = np.sum(upstream * (frg - bkg), axis=2) * w * (1.0 - w)
    return d_frg, d_bkg, d_logits


# ---------------------------------------------------------------------------
# Optimizer

def exponential_lr(initial: float, final: float, max_steps: int):
    def lr(step: int) -> float:
        t = min(max(step / max(max_steps, 1), 0.0), 1.0)
        return initial * (final / initial) ** t
    return lr


class Adam:
    """Adam over named parameter arrays updated in place."""

    def __init__(self, params: dict, lrs: dict, beta1=0.9, beta2=0.999, eps=1e-15):
        self.params = params
        self.lrs = lrs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, g in grads.items():
            if name not in self.params:
                continue
            lr = self.lrs[name]
            if callable(lr):
                lr = lr(self.step_count)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap_rows(self, prefix: str, index_map: np.ndarray):
        """Rebuild moment rows after densification for arrays under `prefix`.

        index_map[i] is the old row feeding new row i, or -1 for fresh rows
        (zero moments)."""
        for name in list(self.params.keys()):
            if not name.startswith(prefix):
                continue
            for store in (self.m, self.v):
                old = store[name]
                new = np.zeros((len(index_map),) + old.shape[1:], dtype=old.dtype)
                keep = index_map >= 0
                new[keep] = old[index_map[keep]]
                store[name] = new


# ---------------------------------------------------------------------------
# Scene model

@dataclass
class ClipModel:
    clip_id: int
    first: int
    last: int
    frg: GaussianSet
    bkg: GaussianSet | None
    frg_deform: DeformationField | None
    bkg_deform: DeformationField | None
    cameras: list


@dataclass
class SceneModel:
    manifest: ClipManifest
    clips: list
    alphas: list                  # AlphaMap per frame
    config: dict = field(default_factory=dict)

    def clip(self, clip_id: int) -> ClipModel:
        return self.clips[clip_id]


@dataclass
class TrainConfig:
    iterations: int = 3000
    lam: float = 0.2
    seed: int = 0
    sh_degree: int = 1
    n_bkg: int = 60000
    radius_mult: float = 3.0
    lr_center_init: float = 1.6e-4
    lr_center_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_deform: float = 1.6e-3
    # Each frame's merge map only sees iterations / n_frames updates, so the
    # logits need large steps to sharpen within a desk-scale budget.
    lr_alpha: float = 0.4
    densify: bool = False
    densify_every: int = 100
    densify_warmup: int = 500
    densify_stop_frac: float = 0.7
    densify_grad_threshold: float = 2e-4
    densify_split_scale: float = 0.05
    prune_opacity: float = 0.005
    log_every: int = 50
    threads: int = 1
    deform_levels: int = 8
    deform_features: int = 2
    deform_log2_table: int = 15
    deform_base_res: int = 8
    deform_growth: float = 1.5
    deform_hidden: int = 64
    use_deformation: bool = True
    use_background: bool = True


def _domain_box(points: np.ndarray, margin: float = 0.05):
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = np.maximum(hi - lo, 1e-3)
    return lo - margin * extent, hi + margin * extent


def _make_deform(points, clip_id, seed, cfg: TrainConfig) -> DeformationField:
    lo, hi = _domain_box(points)
    enc = HashEncoding(
        levels=cfg.deform_levels,
        features_per_level=cfg.deform_features,
        log2_table_size=cfg.deform_log2_table,
        base_resolution=cfg.deform_base_res,
        growth=cfg.deform_growth,
    )
    return DeformationField.create(
        lo, hi, clip_id=clip_id, seed=seed, encoding=enc, hidden=cfg.deform_hidden
    )


def build_scene(manifest: ClipManifest, video: MaskedVideo, cfg: TrainConfig) -> SceneModel:
    """Initialize per-clip Gaussian sets, deformation fields, and merge maps."""
    h, w = video.frames[0].shape[:2]
    clips = []
    for j, clip in enumerate(manifest.clips):
        sfm = clip.sfm
        fg_pts = np.asarray(sfm.points, dtype=np.float64)
        fg_cols = np.asarray(sfm.colors, dtype=np.float64) / 255.0
        frg = GaussianSet.from_points(
            fg_pts, fg_cols, role=Role.FRG, clip_id=j, sh_degree=cfg.sh_degree
        )
        bkg = None
        if cfg.use_background:
            bk_pts, bk_cols = init_background_points(
                fg_pts, n_bkg=cfg.n_bkg, radius_mult=cfg.radius_mult, seed=cfg.seed + j
            )
            bkg = GaussianSet.from_points(
                bk_pts, bk_cols, role=Role.BKG, clip_id=j, sh_degree=cfg.sh_degree
            )
        frg_deform = bkg_deform = None
        if cfg.use_deformation:
            frg_deform = _make_deform(frg.centers, j, cfg.seed * 1000 + 2 * j, cfg)
            if bkg is not None:
                bkg_deform = _make_deform(bkg.centers, j, cfg.seed * 1000 + 2 * j + 1, cfg)
        clips.append(
            ClipModel(
                clip_id=j,
                first=clip.first,
                last=clip.last,
                frg=frg,
                bkg=bkg,
                frg_deform=frg_deform,
                bkg_deform=bkg_deform,
                cameras=list(sfm.cameras),
            )
        )
    alphas = [AlphaMap.initial(h, w, i) for i in range(len(video))]
    return SceneModel(manifest=manifest, clips=clips, alphas=alphas, config={})


# ---------------------------------------------------------------------------
# Densification

@dataclass
class DensifyResult:
    gaussians: GaussianSet
    index_map: np.ndarray  # new row -> old row, -1 for freshly sampled rows
    cloned: int
    split: int
    pruned: int


def densify_and_prune(
    gset: GaussianSet,
    grad_norms: np.ndarray,
    grad_threshold: float,
    split_scale: float,
    prune_opacity: float = 0.005,
    rng: np.random.Generator | None = None,
) -> DensifyResult:
    """Clone small high-gradient Gaussians, split large ones (scales / 1.6),
    prune nearly transparent ones."""
    rng = rng or np.random.default_rng(0)
    n = len(gset)
    scales = np.exp(gset.log_scales).max(axis=1)
    hot = np.asarray(grad_norms) > grad_threshold
    clone = hot & (scales <= split_scale)
    split = hot & (scales > split_scale)
    keep = ~split

    parts = {
        "centers": [gset.centers[keep]],
        "rotations": [gset.rotations[keep]],
        "log_scales": [gset.log_scales[keep]],
        "opacity_logits": [gset.opacity_logits[keep]],
        "sh": [gset.sh[keep]],
    }
    index_map = [np.where(keep)[0]]

    clone_idx = np.where(clone & keep)[0]
    if clone_idx.size:
        parts["centers"].append(gset.centers[clone_idx])
        parts["rotations"].append(gset.rotations[clone_idx])
        parts["log_scales"].append(gset.log_scales[clone_idx])
        parts["opacity_logits"].append(gset.opacity_logits[clone_idx])
        parts["sh"].append(gset.sh[clone_idx])
        index_map.append(clone_idx)

    split_idx = np.where(split)[0]
    if split_idx.size:
        from .core import covariance_from_arrays

        cov = covariance_from_arrays(gset.rotations[split_idx], gset.log_scales[split_idx])
        chol = np.linalg.cholesky(cov)
        for _ in range(2):
            noise = rng.standard_normal((split_idx.size, 3))
            centers = gset.centers[split_idx] + np.einsum("nij,nj->ni", chol, noise)
            parts["centers"].append(centers)
            parts["rotations"].append(gset.rotations[split_idx])
            parts["log_scales"].append(gset.log_scales[split_idx] - np.log(1.6))
            parts["opacity_logits"].append(gset.opacity_logits[split_idx])
            parts["sh"].append(gset.sh[split_idx])
            index_map.append(np.full(split_idx.size, -1, dtype=np.int64))

    new = GaussianSet(
        centers=np.concatenate(parts["centers"]),
        rotations=np.concatenate(parts["rotations"]),
        log_scales=np.concatenate(parts["log_scales"]),
        opacity_logits=np.concatenate(parts["opacity_logits"]),
        sh=np.concatenate(parts["sh"]),
        role=gset.role,
        clip_id=gset.clip_id,
    )
    imap = np.concatenate(index_map)

    alive = sigmoid(new.opacity_logits) >= prune_opacity
    pruned = int(np.sum(~alive))
    if pruned and np.any(alive):
        new = GaussianSet(
            centers=new.centers[alive],
            rotations=new.rotations[alive],
            log_scales=new.log_scales[alive],
            opacity_logits=new.opacity_logits[alive],
            sh=new.sh[alive],
            role=gset.role,
            clip_id=gset.clip_id,
        )
        imap = imap[alive]
    return DensifyResult(
        gaussians=new,
        index_map=imap,
        cloned=int(clone_idx.size),
        split=int(split_idx.size),
        pruned=pruned,
    )


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    trace: list          # (iteration, l1, dssim, total) every log_every steps
    totals: np.ndarray   # loss at every iteration


def _set_params(prefix: str, gset: GaussianSet) -> dict:
    return {
        f"{prefix}.centers": gset.centers,
        f"{prefix}.rotations": gset.rotations,
        f"{prefix}.log_scales": gset.log_scales,
        f"{prefix}.opacity_logits": gset.opacity_logits,
        f"{prefix}.sh": gset.sh,
    }


def _set_lrs(prefix: str, cfg: TrainConfig, iterations: int) -> dict:
    return {
        f"{prefix}.centers": exponential_lr(cfg.lr_center_init, cfg.lr_center_final, iterations),
        f"{prefix}.rotations": cfg.lr_rotation,
        f"{prefix}.log_scales": cfg.lr_scale,
        f"{prefix}.opacity_logits": cfg.lr_opacity,
        f"{prefix}.sh": cfg.lr_sh,
    }


def _deform_entries(prefix: str, fld: DeformationField, cfg: TrainConfig):
    params = {f"{prefix}.{k}": v for k, v in fld.params().items()}
    lrs = {k: cfg.lr_deform for k in params}
    return params, lrs


def train_clip(
    scene: SceneModel,
    clip_id: int,
    video: MaskedVideo,
    iterations: int,
    cfg: TrainConfig | None = None,
) -> TrainResult:
    """Optimize one clip in place; overlap frames are supervised here even if
    a neighboring clip also trains them."""
    cfg = cfg or TrainConfig()
    clip = scene.clip(clip_id)
    rng = np.random.default_rng((cfg.seed, clip_id))
    n_frames = clip.last - clip.first + 1
    dual = clip.bkg is not None

    def build_optimizer():
        params = dict(_set_params("frg", clip.frg))
        lrs = dict(_set_lrs("frg", cfg, iterations))
        if dual:
            params.update(_set_params("bkg", clip.bkg))
            lrs.update(_set_lrs("bkg", cfg, iterations))
        if clip.frg_deform is not None:
            p, l = _deform_entries("frg_deform", clip.frg_deform, cfg)
            params.update(p)
            lrs.update(l)
        if clip.bkg_deform is not None:
            p, l = _deform_entries("bkg_deform", clip.bkg_deform, cfg)
            params.update(p)
            lrs.update(l)
        if dual:
            for i in range(clip.first, clip.last + 1):
                params[f"alpha.{i}"] = scene.alphas[i].values
                lrs[f"alpha.{i}"] = cfg.lr_alpha
        return Adam(params, lrs)

    opt = build_optimizer()
    trace = []
    totals = np.empty(iterations)
    grad_accum = np.zeros(len(clip.frg))
    grad_count = np.zeros(len(clip.frg))

    for it in range(iterations):
        frame = clip.first + int(rng.integers(0, n_frames))
        t = time_normalize(frame, (clip.first, clip.last))
        cam = clip.cameras[frame - clip.first]
        gt = np.asarray(video.frames[frame], dtype=np.float64)
        fmask = np.asarray(video.masks[frame], dtype=np.float64)

        frg_delta = frg_cache = None
        if clip.frg_deform is not None:
            frg_delta, frg_cache = clip.frg_deform.forward(clip.frg.centers, t)
        frg_out = render(clip.frg, cam, frg_delta, BLACK, threads=cfg.threads)

        grads = {}
        if dual:
            bkg_delta = bkg_cache = None
            if clip.bkg_deform is not None:
                bkg_delta, bkg_cache = clip.bkg_deform.forward(clip.bkg.centers, t)
            bkg_out = render(clip.bkg, cam, bkg_delta, BLACK, threads=cfg.threads)
            alpha = scene.alphas[frame]
            merged = merge_views(frg_out.image, bkg_out.image, alpha)

            loss_frg = recon_loss(frg_out.image, gt * fmask[:, :, None], lam=cfg.lam)
            loss_bkg = recon_loss(bkg_out.image, gt, lam=cfg.lam)
            loss_mrg = recon_loss(merged, gt, lam=cfg.lam)
            for name, lv in (("frg", loss_frg), ("bkg", loss_bkg), ("merged", loss_mrg)):
                if not np.isfinite(lv.total):
                    raise TrainingDivergedError(
                        f"non-finite {name} loss at iteration {it}", iteration=it, component=name
                    )
            l1 = loss_frg.l1 + loss_bkg.l1 + loss_mrg.l1
            dssim = loss_frg.dssim + loss_bkg.dssim + loss_mrg.dssim
            total = loss_frg.total + loss_bkg.total + loss_mrg.total

            d_frg_m, d_bkg_m, d_alpha = merge_views_backward(
                frg_out.image, bkg_out.image, alpha, loss_mrg.gradient
            )
            up_frg = loss_frg.gradient + d_frg_m
            up_bkg = loss_bkg.gradient + d_bkg_m
            grads[f"alpha.{frame}"] = d_alpha

            bg_grad = render_backward(
                clip.bkg, cam, bkg_delta, BLACK, up_bkg, threads=cfg.threads
            )
            grads.update(
                {
                    "bkg.centers": bg_grad.centers,
                    "bkg.rotations": bg_grad.rotations,
                    "bkg.log_scales": bg_grad.log_scales,
                    "bkg.opacity_logits": bg_grad.opacity_logits,
                    "bkg.sh": bg_grad.sh,
                }
            )
            if clip.bkg_deform is not None:
                dgrads, _ = clip.bkg_deform.backward(
                    bkg_cache,
                    bg_grad.delta_center,
                    bg_grad.delta_rotation,
                    bg_grad.delta_log_scale,
                )
                grads.update({f"bkg_deform.{k}": v for k, v in dgrads.items()})
        else:
            loss_frg = recon_loss(frg_out.image, gt, lam=cfg.lam)
            if not np.isfinite(loss_frg.total):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {it}", iteration=it, component="frg"
                )
            l1, dssim, total = loss_frg.l1, loss_frg.dssim, loss_frg.total
            up_frg = loss_frg.gradient

        fg_grad = render_backward(clip.frg, cam, frg_delta, BLACK, up_frg, threads=cfg.threads)
        grads.update(
            {
                "frg.centers": fg_grad.centers,
                "frg.rotations": fg_grad.rotations,
                "frg.log_scales": fg_grad.log_scales,
                "frg.opacity_logits": fg_grad.opacity_logits,
                "frg.sh": fg_grad.sh,
            }
        )
        if clip.frg_deform is not None:
            dgrads, _ = clip.frg_deform.backward(
                frg_cache, fg_grad.delta_center, fg_grad.delta_rotation, fg_grad.delta_log_scale
            )
            grads.update({f"frg_deform.{k}": v for k, v in dgrads.items()})

        opt.step(grads)
        totals[it] = total
        if it % cfg.log_every == 0:
            trace.append((it, l1, dssim, total))

        norms = np.linalg.norm(fg_grad.centers, axis=1)
        grad_accum += norms
        grad_count += norms > 0

        if (
            cfg.densify
            and cfg.densify_warmup <= it < cfg.densify_stop_frac * iterations
            and it % cfg.densify_every == 0
            and it > 0
        ):
            mean_grad = grad_accum / np.maximum(grad_count, 1)
            result = densify_and_prune(
                clip.frg,
                mean_grad,
                cfg.densify_grad_threshold,
                cfg.densify_split_scale,
                cfg.prune_opacity,
                rng=rng,
            )
            clip.frg = result.gaussians
            opt.remap_rows("frg.", result.index_map)
            for key, arr in _set_params("frg", clip.frg).items():
                opt.params[key] = arr
            grad_accum = np.zeros(len(clip.frg))
            grad_count = np.zeros(len(clip.frg))

    return TrainResult(trace=trace, totals=totals)


def train_scene(scene: SceneModel, video: MaskedVideo, cfg: TrainConfig) -> list:
    """Train all clips sequentially in index order."""
    results = []
    for j in range(len(scene.clips)):
        results.append(train_clip(scene, j, video, cfg.iterations, cfg))
    return results


def render_frame(scene: SceneModel, frame: int, threads: int = 1) -> np.ndarray:
    """Render one frame through its owning clip (earlier clip on overlaps)."""
    j = scene.manifest.owning_clip(frame)
    clip = scene.clip(j)
    t = time_normalize(frame, (clip.first, clip.last))
    cam = clip.cameras[frame - clip.first]
    frg_delta = None
    if clip.frg_deform is not None:
        frg_delta, _ = clip.frg_deform.forward(clip.frg.centers, t)
    frg_img = render(clip.frg, cam, frg_delta, BLACK, threads=threads).image
    if clip.bkg is None:
        return frg_img
    bkg_delta = None
    if clip.bkg_deform is not None:
        bkg_delta, _ = clip.bkg_deform.forward(clip.bkg.centers, t)
    bkg_img = render(clip.bkg, cam, bkg_delta, BLACK, threads=threads).image
    return merge_views(frg_img, bkg_img, scene.alphas[frame])


def reconstruct_video(scene: SceneModel, threads: int = 1) -> list:
    """Sequentially render every frame of the trained scene."""
    return [render_frame(scene, i, threads=threads) for i in range(scene.manifest.n_frames)]


# ---------------------------------------------------------------------------
# Persistence

PLY_VERSION = 1
_SIDE_MAGIC_ALPHA = b"CSAL"
_SIDE_MAGIC_DEFORM = b"CSDF"
_SIDECAR_VERSION = 1


def write_gaussian_ply(path, gset: GaussianSet, seed: int = 0):
    """Binary little-endian PLY with splat-convention property names."""
    n = len(gset)
    k = gset.sh.shape[1]
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (k - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    header = ["ply", "format binary_little_endian 1.0", f"comment seed {seed}",
              f"element vertex {n}"]
    header += [f"property double {nm}" for nm in names]
    header.append("end_header")

    rest = gset.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)  # channel-major
    rows = np.hstack(
        [
            gset.centers,
            gset.sh[:, 0, :],
            rest,
            gset.opacity_logits[:, None],
            gset.log_scales,
            gset.rotations,
        ]
    ).astype("<f8")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rows.tobytes())


def read_gaussian_ply(path, role=Role.FRG, clip_id=0) -> GaussianSet:
    path = Path(path)
    data = path.read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise SceneFormatError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header[1]:
        raise SceneFormatError(f"{path}: unsupported PLY format line {header[1]!r}")
    n = None
    names = []
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        elif line.startswith("property double"):
            names.append(line.split()[2])
        elif line.startswith("property"):
            raise SceneFormatError(f"{path}: unsupported property type in {line!r}")
    if n is None:
        raise SceneFormatError(f"{path}: missing vertex element")
    body = data[end + len(b"end_header\n"):]
    expect = n * len(names) * 8
    if len(body) < expect:
        raise SceneFormatError(f"{path}: truncated body ({len(body)} < {expect} bytes)")
    rows = np.frombuffer(body[:expect], dtype="<f8").reshape(n, len(names))
    col = {nm: i for i, nm in enumerate(names)}
    n_rest = sum(1 for nm in names if nm.startswith("f_rest_"))
    k = n_rest // 3 + 1
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = rows[:, [col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]]]
    if k > 1:
        rest = rows[:, [col[f"f_rest_{i}"] for i in range(3 * (k - 1))]]
        sh[:, 1:, :] = rest.reshape(n, 3, k - 1).transpose(0, 2, 1)
    return GaussianSet(
        centers=rows[:, [col["x"], col["y"], col["z"]]].copy(),
        rotations=rows[:, [col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]]].copy(),
        log_scales=rows[:, [col["scale_0"], col["scale_1"], col["scale_2"]]].copy(),
        opacity_logits=rows[:, col["opacity"]].copy(),
        sh=sh,
        role=role,
        clip_id=clip_id,
    )


def _pack_array(f, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    f.write(struct.pack("<i", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<q", d))
    f.write(arr.tobytes())


def _unpack_array(buf, offset):
    (ndim,) = struct.unpack_from("<i", buf, offset)
    offset += 4
    shape = []
    for _ in range(ndim):
        (d,) = struct.unpack_from("<q", buf, offset)
        offset += 8
        shape.append(d)
    count = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
    return arr, offset + count * 8


def _write_deform_record(f, fld: DeformationField | None):
    f.write(struct.pack("<i", 0 if fld is None else 1))
    if fld is None:
        return
    enc = fld.encoding
    f.write(
        struct.pack(
            "<iiiidii",
            enc.levels,
            enc.features_per_level,
            enc.log2_table_size,
            enc.base_resolution,
            enc.growth,
            fld.hidden,
            fld.n_layers,
        )
    )
    _pack_array(f, fld.domain_lo)
    _pack_array(f, fld.domain_hi)
    for t in enc.tables:
        _pack_array(f, t)
    for i in range(fld.n_layers):
        _pack_array(f, fld.mlp[f"w{i}"])
        _pack_array(f, fld.mlp[f"b{i}"])


def _read_deform_record(buf, offset, clip_id):
    (flag,) = struct.unpack_from("<i", buf, offset)
    offset += 4
    if flag == 0:
        return None, offset
    levels, feats, log2t, base, growth, hidden, n_layers = struct.unpack_from(
        "<iiiidii", buf, offset
    )
    offset += struct.calcsize("<iiiidii")
    lo, offset = _unpack_array(buf, offset)
    hi, offset = _unpack_array(buf, offset)
    enc = HashEncoding(
        levels=levels,
        features_per_level=feats,
        log2_table_size=log2t,
        base_resolution=base,
        growth=growth,
    )
    tables = []
    for _ in range(levels):
        t, offset = _unpack_array(buf, offset)
        tables.append(t)
    enc.tables = tables
    fld = DeformationField(
        encoding=enc, domain_lo=lo, domain_hi=hi, clip_id=clip_id, hidden=hidden
    )
    fld.n_layers = n_layers
    mlp = {}
    for i in range(n_layers):
        mlp[f"w{i}"], offset = _unpack_array(buf, offset)
        mlp[f"b{i}"], offset = _unpack_array(buf, offset)
    fld.mlp = mlp
    return fld, offset


def save_scene(scene: SceneModel, path, seed: int = 0):
    """Persist the full stage-1 state under a directory; bit-exact on reload."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sfm_dirs = []
    for j, clip in enumerate(scene.manifest.clips):
        sub = f"sfm/clip_{j}"
        write_colmap_text(path / sub, clip.sfm)
        sfm_dirs.append(sub)
    write_manifest(path / "manifest.txt", scene.manifest, sfm_dirs, seed=seed)

    for j, cm in enumerate(scene.clips):
        write_gaussian_ply(path / f"clip_{j}_frg.ply", cm.frg, seed=seed)
        if cm.bkg is not None:
            write_gaussian_ply(path / f"clip_{j}_bkg.ply", cm.bkg, seed=seed)
        with open(path / f"clip_{j}_deform.bin", "wb") as f:
            f.write(_SIDE_MAGIC_DEFORM)
            f.write(struct.pack("<i", _SIDECAR_VERSION))
            _write_deform_record(f, cm.frg_deform)
            _write_deform_record(f, cm.bkg_deform)

    alphas = scene.alphas
    with open(path / "alphas.bin", "wb") as f:
        f.write(_SIDE_MAGIC_ALPHA)
        h, w = alphas[0].values.shape
        f.write(struct.pack("<iiii", _SIDECAR_VERSION, len(alphas), h, w))
        for a in alphas:
            f.write(a.values.astype("<f8").tobytes())

    lines = [f"seed = {seed}"]
    for key, val in sorted(scene.config.items()):
        lines.append(f"{key} = {val}")
    (path / "config.txt").write_text("\n".join(lines) + "\n")


def load_scene(path) -> SceneModel:
    path = Path(path)
    manifest = read_manifest(path / "manifest.txt")
    clips = []
    for j, clip in enumerate(manifest.clips):
        frg = read_gaussian_ply(path / f"clip_{j}_frg.ply", role=Role.FRG, clip_id=j)
        bkg_path = path / f"clip_{j}_bkg.ply"
        bkg = read_gaussian_ply(bkg_path, role=Role.BKG, clip_id=j) if bkg_path.exists() else None
        buf = (path / f"clip_{j}_deform.bin").read_bytes()
        if buf[:4] != _SIDE_MAGIC_DEFORM:
            raise SceneFormatError(f"{path / f'clip_{j}_deform.bin'}: bad magic")
        (version,) = struct.unpack_from("<i", buf, 4)
        if version != _SIDECAR_VERSION:
            raise SceneFormatError(
                f"{path / f'clip_{j}_deform.bin'}: version {version} != {_SIDECAR_VERSION}"
            )
        frg_deform, offset = _read_deform_record(buf, 8, j)
        bkg_deform, _ = _read_deform_record(buf, offset, j)
        clips.append(
            ClipModel(
                clip_id=j,
                first=clip.first,
                last=clip.last,
                frg=frg,
                bkg=bkg,
                frg_deform=frg_deform,
                bkg_deform=bkg_deform,
                cameras=list(clip.sfm.cameras),
            )
        )

    apath = path / "alphas.bin"
    buf = apath.read_bytes()
    if buf[:4] != _SIDE_MAGIC_ALPHA:
        raise SceneFormatError(f"{apath}: bad magic")
    version, n, h, w = struct.unpack_from("<iiii", buf, 4)
    if version != _SIDECAR_VERSION:
        raise SceneFormatError(f"{apath}: version {version} != {_SIDECAR_VERSION}")
    need = 20 + n * h * w * 8
    if len(buf) < need:
        raise SceneFormatError(f"{apath}: truncated ({len(buf)} < {need} bytes)")
    alphas = []
    off = 20
    for i in range(n):
        vals = np.frombuffer(buf, dtype="<f8", count=h * w, offset=off).reshape(h, w).copy()
        alphas.append(AlphaMap(values=vals, frame_index=i))
        off += h * w * 8

    config = {}
    cfg_path = path / "config.txt"
    if cfg_path.exists():
        for line in cfg_path.read_text().splitlines():
            if "=" in line:
                key, val = line.split("=", 1)
                config[key.strip()] = val.strip()
    return SceneModel(manifest=manifest, clips=clips, alphas=alphas, config=config)
