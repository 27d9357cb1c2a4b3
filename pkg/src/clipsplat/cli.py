"""Command-line pipeline: decompose, reconstruct, render, refine, metrics.

Configuration is flat `key = value` text with # comments; command-line flags
override config keys. Exit codes: 0 ok, 64 usage, 2 decomposition failure,
3 training divergence, 4 I/O or format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import shlex
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import images
from .decomposition import (
    ColmapDirProvider,
    MaskedVideo,
    read_manifest,
    split_clips,
    synthetic_provider,
    write_colmap_text,
    write_manifest,
)
from .errors import (
    ClipSplatError,
    ColmapParseError,
    DecompositionError,
    SceneFormatError,
    TrainingDivergedError,
)
from .metrics import psnr, q_edit, read_flo, ssim, warp_ssim
from .refiner import RefineConfig, SubprocessEditor, refine_recursive_ensembled, refine_single_phase
from .synthetic import make_scene
from .training import (
    TrainConfig,
    build_scene,
    load_scene,
    reconstruct_video,
    save_scene,
    train_scene,
)

EXIT_OK = 0
EXIT_USAGE = 64
EXIT_DECOMPOSITION = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


class UsageError(Exception):
    pass


@dataclass
class PipelineConfig:
    frames_dir: str = ""
    masks_dir: str = ""
    flows_dir: str = ""
    scene_dir: str = ""
    edits_dir: str = ""
    out_dir: str = ""
    provider: str = "synthetic"
    scene_desc: str = ""
    sfm_dir: str = ""
    k: int = 10
    overlap: int = 1
    n_bkg: int = 60000
    radius_mult: float = 3.0
    sh_degree: int = 1
    iterations: int = 3000
    refine_iterations: int = 1000
    n_r: int = 2
    guidance_scales: str = ""
    seed: int = 0
    lam: float = 0.2
    threads: int = 1
    scale: float = 1.0
    densify: bool = False
    prompt: str = ""
    clip_score: float = -1.0
    editor_cmd: str = ""
    re: bool = False
    train_alpha: bool = True

    def validate(self):
        for name in ("k", "overlap", "n_bkg", "sh_degree", "iterations",
                     "refine_iterations", "n_r", "threads"):
            if getattr(self, name) <= 0:
                raise UsageError(f"config key {name} must be positive")

    def scaled_iterations(self) -> int:
        return max(int(round(self.iterations * self.scale)), 1)

    def scales_tuple(self):
        if not self.guidance_scales:
            return None
        return tuple(float(s) for s in self.guidance_scales.split(",") if s.strip())


_BOOL_KEYS = {"densify", "re", "train_alpha"}


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = dataclasses.replace(base) if base else PipelineConfig()
    fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        current = getattr(cfg, key)
        if key in _BOOL_KEYS:
            setattr(cfg, key, val.lower() in ("1", "true", "yes", "on"))
        elif isinstance(current, int):
            setattr(cfg, key, int(val))
        elif isinstance(current, float):
            setattr(cfg, key, float(val))
        else:
            setattr(cfg, key, val)
    return cfg


def serialize_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in dataclasses.fields(PipelineConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def load_config(path, base=None) -> PipelineConfig:
    return parse_config_text(Path(path).read_text(), base=base)


def _require(cfg: PipelineConfig, *names):
    for name in names:
        val = getattr(cfg, name)
        if not val:
            raise UsageError(f"--{name.replace('_', '-')} is required for this command")
        if name.endswith("_dir") and name not in ("out_dir", "scene_dir") and not Path(val).is_dir():
            raise UsageError(f"{name} {val!r} is not a directory")


def _load_video(cfg: PipelineConfig) -> MaskedVideo:
    frames = images.read_frame_dir(cfg.frames_dir)
    masks = images.read_mask_dir(cfg.masks_dir)
    return MaskedVideo(frames=frames, masks=masks)


def _train_config(cfg: PipelineConfig) -> TrainConfig:
    return TrainConfig(
        iterations=cfg.scaled_iterations(),
        lam=cfg.lam,
        seed=cfg.seed,
        sh_degree=cfg.sh_degree,
        n_bkg=cfg.n_bkg,
        radius_mult=cfg.radius_mult,
        densify=cfg.densify,
        threads=cfg.threads,
    )


def cmd_decompose(cfg: PipelineConfig) -> int:
    _require(cfg, "frames_dir", "masks_dir", "scene_dir")
    video = _load_video(cfg)
    if cfg.provider == "synthetic":
        _require(cfg, "scene_desc")
        desc = json.loads(Path(cfg.scene_desc).read_text())
        provider = synthetic_provider(make_scene(**desc), seed=cfg.seed)
    elif cfg.provider == "colmap-text-dir":
        _require(cfg, "sfm_dir")
        provider = ColmapDirProvider(cfg.sfm_dir)
    else:
        raise UsageError(f"unknown provider {cfg.provider!r}")
    manifest = split_clips(video, provider, k=cfg.k, overlap=cfg.overlap)

    scene_dir = Path(cfg.scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    sfm_dirs = []
    for j, clip in enumerate(manifest.clips):
        sub = f"sfm/clip_{j}"
        write_colmap_text(scene_dir / sub, clip.sfm)
        sfm_dirs.append(sub)
    write_manifest(scene_dir / "manifest.txt", manifest, sfm_dirs, seed=cfg.seed)

    sizes = [c.n_frames for c in manifest.clips]
    print(f"clips: {len(manifest.clips)}")
    print(f"sizes: {' '.join(str(s) for s in sizes)}")
    print(f"overlaps: {' '.join(str(o) for o in manifest.overlaps)}")
    return EXIT_OK


def cmd_reconstruct(cfg: PipelineConfig) -> int:
    _require(cfg, "frames_dir", "masks_dir", "scene_dir")
    scene_dir = Path(cfg.scene_dir)
    manifest_path = scene_dir / "manifest.txt"
    if not manifest_path.exists():
        raise UsageError(f"no manifest at {manifest_path}; run decompose first")
    video = _load_video(cfg)
    manifest = read_manifest(manifest_path)
    tcfg = _train_config(cfg)
    scene = build_scene(manifest, video, tcfg)
    results = train_scene(scene, video, tcfg)
    scene.config = {"iterations": tcfg.iterations, "sh_degree": cfg.sh_degree,
                    "n_bkg": cfg.n_bkg, "lam": cfg.lam}
    save_scene(scene, scene_dir, seed=cfg.seed)
    lines = ["iteration,l1,dssim,total"]
    for j, res in enumerate(results):
        for it, l1, dssim, total in res.trace:
            lines.append(f"{j * tcfg.iterations + it},{l1:.8f},{dssim:.8f},{total:.8f}")
    (scene_dir / "loss_trace.csv").write_text(f"# seed {cfg.seed}\n" + "\n".join(lines) + "\n")
    print(f"trained {len(scene.clips)} clips for {tcfg.iterations} iterations each")
    return EXIT_OK


def cmd_render(cfg: PipelineConfig) -> int:
    _require(cfg, "scene_dir", "out_dir")
    scene = load_scene(cfg.scene_dir)
    frames = reconstruct_video(scene, threads=cfg.threads)
    images.write_frames(cfg.out_dir, frames, seed=cfg.seed)
    print(f"rendered {len(frames)} frames to {cfg.out_dir}")
    return EXIT_OK


def cmd_refine(cfg: PipelineConfig) -> int:
    _require(cfg, "scene_dir", "out_dir")
    scene = load_scene(cfg.scene_dir)
    rcfg = RefineConfig(
        iterations=max(int(round(cfg.refine_iterations * cfg.scale)), 1),
        n_r=cfg.n_r,
        guidance_scales=cfg.scales_tuple(),
        train_alpha=cfg.train_alpha,
        lam=cfg.lam,
        seed=cfg.seed,
        threads=cfg.threads,
    )
    if cfg.re or cfg.editor_cmd:
        if not cfg.editor_cmd:
            raise UsageError("recursive-ensembled refinement needs --editor-cmd")
        provider = SubprocessEditor(shlex.split(cfg.editor_cmd))
        result = refine_recursive_ensembled(scene, provider, cfg.prompt, rcfg)
        target = None
    else:
        _require(cfg, "edits_dir")
        edited = images.read_frame_dir(cfg.edits_dir)
        result = refine_single_phase(scene, edited, rcfg)
        target = edited
    out_dir = Path(cfg.out_dir)
    images.write_frames(out_dir, result.frames, seed=cfg.seed)
    report = [f"# seed {cfg.seed}", "name,value,units"]
    report.append(f"initial_loss,{result.initial_loss:.8f},unitless")
    report.append(f"final_loss,{result.final_loss:.8f},unitless")
    if target is not None:
        # compare the frames as written: both sides live in 8-bit files
        l1 = float(
            np.mean(
                [
                    np.abs(images.from_uint8(images.to_uint8(f)) - t).mean()
                    for f, t in zip(result.frames, target)
                ]
            )
        )
        report.append(f"mean_l1,{l1:.8f},unitless")
    (out_dir / "report.csv").write_text("\n".join(report) + "\n")
    print(f"refined {len(result.frames)} frames; final loss {result.final_loss:.6f}")
    return EXIT_OK


def _fmt(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return f"{value:.9f}"


def cmd_metrics(cfg: PipelineConfig) -> int:
    _require(cfg, "frames_dir", "edits_dir", "out_dir")
    ref = images.read_frame_dir(cfg.frames_dir)
    cand = images.read_frame_dir(cfg.edits_dir)
    if len(ref) != len(cand):
        raise UsageError(f"frame counts differ: {len(ref)} vs {len(cand)}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# seed {cfg.seed}", "name,frame,value,units"]
    for i, (a, b) in enumerate(zip(ref, cand)):
        lines.append(f"psnr,{i:05d},{_fmt(psnr(a, b))},dB")
        lines.append(f"ssim,{i:05d},{_fmt(ssim(a, b))},unitless")
    if cfg.flows_dir:
        flow_files = sorted(Path(cfg.flows_dir).glob("*.flo"))
        if len(flow_files) != len(cand) - 1:
            raise UsageError(
                f"{len(cand)} frames need {len(cand) - 1} flows, found {len(flow_files)}"
            )
        flows = [read_flo(p) for p in flow_files]
        ws = warp_ssim(cand, flows)
        lines.append(f"warpssim,video,{_fmt(ws)},unitless")
        if cfg.clip_score >= 0:
            lines.append(f"qedit,video,{_fmt(q_edit(cfg.clip_score, ws))},unitless")
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out_dir / 'metrics.csv'}")
    return EXIT_OK


def cmd_make_demo(cfg: PipelineConfig) -> int:
    _require(cfg, "out_dir")
    out = Path(cfg.out_dir)
    desc = {
        "n_frames": 28,
        "width": 64,
        "height": 64,
        "n_fg": 40,
        "n_bg": 120,
        "seed": cfg.seed,
    }
    scene = make_scene(**desc)
    video = scene.video()
    images.write_frames(out / "frames", video.frames, seed=cfg.seed)
    images.write_masks(out / "masks", video.masks, seed=cfg.seed)
    flows_dir = out / "flows"
    flows_dir.mkdir(parents=True, exist_ok=True)
    from .metrics import write_flo

    for i, flow in enumerate(scene.flows()):
        write_flo(flows_dir / f"{i:05d}.flo", flow)
    (out / "scene.json").write_text(json.dumps(desc, indent=2) + "\n")
    print(f"wrote demo video ({desc['n_frames']} frames) under {out}")
    return EXIT_OK


_COMMANDS = {
    "decompose": cmd_decompose,
    "reconstruct": cmd_reconstruct,
    "render": cmd_render,
    "refine": cmd_refine,
    "metrics": cmd_metrics,
    "make-demo": cmd_make_demo,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="clipsplat", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key = value config file")
        for f in dataclasses.fields(PipelineConfig):
            flag = "--" + f.name.replace("_", "-")
            if f.name in _BOOL_KEYS:
                p.add_argument(flag, default=None, choices=["true", "false"])
            else:
                p.add_argument(flag, default=None)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = PipelineConfig()
        if args.config:
            if not Path(args.config).is_file():
                raise UsageError(f"config file {args.config!r} not found")
            cfg = load_config(args.config, base=cfg)
        overrides = []
        for f in dataclasses.fields(PipelineConfig):
            val = getattr(args, f.name)
            if val is not None:
                overrides.append(f"{f.name} = {val}")
        if overrides:
            cfg = parse_config_text("\n".join(overrides), base=cfg)
        cfg.validate()
        return _COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DecompositionError as exc:
        print(f"decomposition failed: {exc}", file=sys.stderr)
        return EXIT_DECOMPOSITION
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SceneFormatError, ColmapParseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ClipSplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
