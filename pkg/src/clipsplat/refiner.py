"""Stage-2 refinement: freeze geometry and deformation, re-optimize color,
opacity, and merge weights against externally edited frames.

The recursive-and-ensembled orchestration splits the editor's denoising
budget into phases and, within each phase, fine-tunes against edits produced
at several guidance scales; the re-rendered frames seed the next phase.
Editors are abstract providers; a seeded synthetic flicker editor and a
subprocess/file-contract wrapper are included.
"""

from __future__ import annotations

import hashlib
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deformation import time_normalize
from .errors import EditorError, TrainingDivergedError
from .metrics import recon_loss
from .rasterizer import render, render_backward
from .training import (
    Adam,
    BLACK,
    SceneModel,
    merge_views,
    merge_views_backward,
    reconstruct_video,
)


@dataclass
class EditBatch:
    """Edited frame sequences, one per guidance scale, from a single phase."""

    variants: list               # (guidance_scale, frames) pairs
    phase: int = 1
    prompt: str = ""

    def __post_init__(self):
        if not self.variants:
            raise ValueError("edit batch needs at least one variant")
        n = len(self.variants[0][1])
        shape = np.asarray(self.variants[0][1][0]).shape
        for scale, frames in self.variants:
            if len(frames) != n:
                raise ValueError("edit variants differ in length")
            if np.asarray(frames[0]).shape != shape:
                raise ValueError("edit variants differ in resolution")


@dataclass
class RefineConfig:
    iterations: int = 1000
    n_r: int = 2
    guidance_scales: tuple | None = None  # None -> provider's declared axis
    train_alpha: bool = True
    lam: float = 0.2
    lr_sh: float = 2.5e-3
    # Gentler than stage 1: near a fixed point Adam steps are noise-sized,
    # and these keep the drift below the 8-bit quantization level.
    lr_opacity: float = 5e-3
    lr_alpha: float = 5e-3
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.n_r < 1:
            raise ValueError("n_r must be at least 1")
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")


@dataclass
class RefineResult:
    scene: SceneModel
    frames: list
    initial_loss: float
    final_loss: float


def geometry_digest(scene: SceneModel) -> str:
    """Hash of every frozen parameter: centers, rotations, scales, and the
    deformation fields. Stage-2 must leave this unchanged."""
    h = hashlib.sha256()
    for cm in scene.clips:
        for gs in (cm.frg, cm.bkg):
            if gs is None:
                continue
            h.update(gs.centers.tobytes())
            h.update(gs.rotations.tobytes())
            h.update(gs.log_scales.tobytes())
        for fld in (cm.frg_deform, cm.bkg_deform):
            if fld is None:
                continue
            for key in sorted(fld.params()):
                h.update(fld.params()[key].tobytes())
            h.update(fld.domain_lo.tobytes())
            h.update(fld.domain_hi.tobytes())
    return h.hexdigest()


def _normalize_batch(edited) -> EditBatch:
    if isinstance(edited, EditBatch):
        return edited
    return EditBatch(variants=[(1.0, list(edited))], phase=1)


def _mean_batch_loss(scene: SceneModel, batch: EditBatch, lam: float, threads: int) -> float:
    frames = reconstruct_video(scene, threads=threads)
    vals = []
    for _, seq in batch.variants:
        for i, f in enumerate(frames):
            vals.append(recon_loss(f, np.asarray(seq[i], dtype=np.float64), lam=lam).total)
    return float(np.mean(vals))


def refine_single_phase(scene: SceneModel, edited, config: RefineConfig | None = None) -> RefineResult:
    """Fine-tune SH, opacity, and (optionally) merge weights toward the
    edited frames; everything positional stays bit-identical.

    With a multi-variant EditBatch each step samples (frame, variant)
    uniformly, which realizes the guidance-scale ensemble."""
    config = config or RefineConfig()
    batch = _normalize_batch(edited)
    n = scene.manifest.n_frames
    if len(batch.variants[0][1]) != n:
        raise ValueError(
            f"edited sequence has {len(batch.variants[0][1])} frames, scene has {n}"
        )
    shape = np.asarray(batch.variants[0][1][0]).shape
    h, w = scene.alphas[0].values.shape
    if shape != (h, w, 3):
        raise ValueError(f"edited frames {shape} do not match scene resolution {(h, w, 3)}")

    params = {}
    lrs = {}
    for j, cm in enumerate(scene.clips):
        params[f"clip{j}.frg.sh"] = cm.frg.sh
        params[f"clip{j}.frg.opacity"] = cm.frg.opacity_logits
        lrs[f"clip{j}.frg.sh"] = config.lr_sh
        lrs[f"clip{j}.frg.opacity"] = config.lr_opacity
        if cm.bkg is not None:
            params[f"clip{j}.bkg.sh"] = cm.bkg.sh
            params[f"clip{j}.bkg.opacity"] = cm.bkg.opacity_logits
            lrs[f"clip{j}.bkg.sh"] = config.lr_sh
            lrs[f"clip{j}.bkg.opacity"] = config.lr_opacity
    if config.train_alpha:
        for i, a in enumerate(scene.alphas):
            params[f"alpha.{i}"] = a.values
            lrs[f"alpha.{i}"] = config.lr_alpha
    opt = Adam(params, lrs)

    initial_loss = _mean_batch_loss(scene, batch, config.lam, config.threads)
    # Separate streams so the frame/clip schedule is independent of the
    # variant count: an all-equal ensemble reduces exactly to one variant.
    rng = np.random.default_rng((config.seed, batch.phase))
    rng_variant = np.random.default_rng((config.seed, batch.phase, 7))

    containing = [
        [j for j, cm in enumerate(scene.clips) if cm.first <= i <= cm.last] for i in range(n)
    ]

    for it in range(config.iterations):
        frame = int(rng.integers(0, n))
        variant = int(rng_variant.integers(0, len(batch.variants)))
        owners = containing[frame]
        j = owners[int(rng.integers(0, len(owners)))] if len(owners) > 1 else owners[0]
        cm = scene.clips[j]
        target = np.asarray(batch.variants[variant][1][frame], dtype=np.float64)
        t = time_normalize(frame, (cm.first, cm.last))
        cam = cm.cameras[frame - cm.first]

        frg_delta = None
        if cm.frg_deform is not None:
            frg_delta, _ = cm.frg_deform.forward(cm.frg.centers, t)
        frg_img = render(cm.frg, cam, frg_delta, BLACK, threads=config.threads).image
        grads = {}
        if cm.bkg is not None:
            bkg_delta = None
            if cm.bkg_deform is not None:
                bkg_delta, _ = cm.bkg_deform.forward(cm.bkg.centers, t)
            bkg_img = render(cm.bkg, cam, bkg_delta, BLACK, threads=config.threads).image
            alpha = scene.alphas[frame]
            merged = merge_views(frg_img, bkg_img, alpha)
            loss = recon_loss(merged, target, lam=config.lam)
            if not np.isfinite(loss.total):
                raise TrainingDivergedError(
                    f"non-finite refine loss at iteration {it}", iteration=it, component="merged"
                )
            d_frg, d_bkg, d_alpha = merge_views_backward(frg_img, bkg_img, alpha, loss.gradient)
            if config.train_alpha:
                grads[f"alpha.{frame}"] = d_alpha
            bg = render_backward(cm.bkg, cam, bkg_delta, BLACK, d_bkg, threads=config.threads)
            grads[f"clip{j}.bkg.sh"] = bg.sh
            grads[f"clip{j}.bkg.opacity"] = bg.opacity_logits
            up_frg = d_frg
        else:
            loss = recon_loss(frg_img, target, lam=config.lam)
            if not np.isfinite(loss.total):
                raise TrainingDivergedError(
                    f"non-finite refine loss at iteration {it}", iteration=it, component="frg"
                )
            up_frg = loss.gradient
        fg = render_backward(cm.frg, cam, frg_delta, BLACK, up_frg, threads=config.threads)
        grads[f"clip{j}.frg.sh"] = fg.sh
        grads[f"clip{j}.frg.opacity"] = fg.opacity_logits
        opt.step(grads)

    final_loss = _mean_batch_loss(scene, batch, config.lam, config.threads)
    frames = reconstruct_video(scene, threads=config.threads)
    return RefineResult(
        scene=scene, frames=frames, initial_loss=initial_loss, final_loss=final_loss
    )


def refine_recursive_ensembled(
    scene: SceneModel, provider, prompt: str, config: RefineConfig | None = None
) -> RefineResult:
    """Phase-split, multi-guidance refinement over an editor provider.

    Each phase requests edits of the current frames at total_steps / n_r
    denoising steps for every guidance scale, fine-tunes on the batch, and
    feeds the re-rendered frames to the next phase."""
    config = config or RefineConfig()
    scales = config.guidance_scales or provider.guidance_axis
    steps = max(provider.total_steps // config.n_r, 1)
    per_phase = max(config.iterations // config.n_r, 1)
    current = reconstruct_video(scene, threads=config.threads)
    result = None
    for phase in range(1, config.n_r + 1):
        variants = []
        for s in scales:
            try:
                edited = provider.edit(current, prompt, steps, s, config.seed)
            except EditorError:
                raise
            except Exception as exc:
                raise EditorError(f"editor failed in phase {phase}: {exc}", phase=phase) from exc
            variants.append((s, edited))
        batch = EditBatch(variants=variants, phase=phase, prompt=prompt)
        phase_cfg = RefineConfig(
            iterations=per_phase,
            n_r=config.n_r,
            guidance_scales=config.guidance_scales,
            train_alpha=config.train_alpha,
            lam=config.lam,
            lr_sh=config.lr_sh,
            lr_opacity=config.lr_opacity,
            lr_alpha=config.lr_alpha,
            seed=config.seed,
            threads=config.threads,
        )
        result = refine_single_phase(scene, batch, phase_cfg)
        current = result.frames
    return result


# ---------------------------------------------------------------------------
# Providers

class FlickerEditor:
    """Deterministic stand-in for a zero-shot video editor.

    Applies a parametric affine color transform whose strength grows with
    both the fraction of denoising steps consumed and the guidance scale,
    plus a seeded per-frame color jitter that injects temporal flicker."""

    def __init__(
        self,
        color_matrix=None,
        color_bias=(0.05, -0.02, 0.08),
        flicker_amplitude: float = 0.08,
        seed: int = 0,
        total_steps: int = 50,
        guidance_axis=(0.5, 1.0, 2.0),
    ):
        if color_matrix is None:
            # Mild hue rotation mixed toward its channel mean.
            color_matrix = np.array(
                [[0.7, 0.3, 0.0], [0.0, 0.7, 0.3], [0.3, 0.0, 0.7]]
            )
        self.color_matrix = np.asarray(color_matrix, dtype=np.float64)
        self.color_bias = np.asarray(color_bias, dtype=np.float64)
        self.flicker_amplitude = float(flicker_amplitude)
        self.seed = seed
        self.total_steps = total_steps
        self.guidance_axis = tuple(guidance_axis)

    def edit(self, frames, prompt, steps, guidance_scale, seed):
        u = min(steps / self.total_steps, 1.0) * guidance_scale
        out = []
        for i, frame in enumerate(frames):
            frame = np.asarray(frame, dtype=np.float64)
            styled = frame @ self.color_matrix.T + self.color_bias
            mixed = (1.0 - u) * frame + u * styled
            rng = np.random.default_rng(
                (self.seed, seed, i, steps, int(round(guidance_scale * 1e6)))
            )
            jitter = self.flicker_amplitude * rng.standard_normal(3)
            out.append(np.clip(mixed + jitter, 0.0, 1.0))
        return out


def synthetic_flicker_editor(
    style=None, flicker_amplitude: float = 0.08, seed: int = 0, **kwargs
) -> FlickerEditor:
    """Build a FlickerEditor; `style` optionally overrides the color matrix."""
    return FlickerEditor(
        color_matrix=style, flicker_amplitude=flicker_amplitude, seed=seed, **kwargs
    )


class SubprocessEditor:
    """File-contract editor: frames plus a plain-text request go to a work
    directory, the command is run as `cmd <input_dir> <output_dir>
    <request_file>`, and edited frames are read back."""

    def __init__(self, command, guidance_axis=(0.5, 1.0, 2.0), total_steps: int = 50,
                 workdir=None):
        self.command = list(command)
        self.guidance_axis = tuple(guidance_axis)
        self.total_steps = total_steps
        self.workdir = workdir

    def edit(self, frames, prompt, steps, guidance_scale, seed):
        from .images import read_frame_dir, write_frames

        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            tmp = Path(tmp)
            in_dir = tmp / "input"
            out_dir = tmp / "output"
            in_dir.mkdir()
            out_dir.mkdir()
            write_frames(in_dir, frames)
            request = tmp / "request.txt"
            request.write_text(
                f"prompt = {prompt}\nsteps = {steps}\n"
                f"guidance_scale = {guidance_scale}\nseed = {seed}\n"
            )
            proc = subprocess.run(
                self.command + [str(in_dir), str(out_dir), str(request)],
                capture_output=True,
                text=True,
            )
            if proc.returncode != 0:
                raise EditorError(
                    f"editor command failed ({proc.returncode}): {proc.stderr.strip()}"
                )
            edited = read_frame_dir(out_dir)
            if len(edited) != len(frames):
                raise EditorError(
                    f"editor returned {len(edited)} frames, expected {len(frames)}"
                )
            return edited
