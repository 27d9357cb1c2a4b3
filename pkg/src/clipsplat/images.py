"""Frame and mask I/O: 8-bit PNG via Pillow plus a dependency-free binary
PPM path. Frames are float64 RGB in [0, 1] in memory; files are named with
zero-padded 5-digit indices."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

FRAME_EXTENSIONS = (".png", ".ppm", ".pgm")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(data: np.ndarray) -> np.ndarray:
    return np.asarray(data, dtype=np.float64) / 255.0


def write_image(path, image: np.ndarray, seed=None):
    path = Path(path)
    data = to_uint8(image)
    if path.suffix == ".ppm":
        h, w = data.shape[:2]
        if data.ndim == 2:
            data = np.repeat(data[:, :, None], 3, axis=2)
        comment = f"# seed {seed}\n" if seed is not None else ""
        with open(path, "wb") as f:
            f.write(f"P6\n{comment}{w} {h}\n255\n".encode("ascii"))
            f.write(data.tobytes())
        return
    kwargs = {}
    if seed is not None:
        from PIL import PngImagePlugin

        info = PngImagePlugin.PngInfo()
        info.add_text("seed", str(seed))
        kwargs["pnginfo"] = info
    if data.ndim == 2:
        Image.fromarray(data, mode="L").save(path, **kwargs)
    else:
        Image.fromarray(data, mode="RGB").save(path, **kwargs)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".ppm":
        data = path.read_bytes()
        if not data.startswith(b"P6"):
            raise ValueError(f"{path}: only binary P6 PPM is supported")
        fields = []
        pos = 2
        while len(fields) < 3:
            while pos < len(data) and data[pos : pos + 1].isspace():
                pos += 1
            if data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
                continue
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(int(data[start:pos]))
        pos += 1  # single whitespace after maxval
        w, h, maxval = fields
        pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
        return pix.reshape(h, w, 3).astype(np.float64) / maxval
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return from_uint8(arr[:, :, :3])


def read_mask(path) -> np.ndarray:
    """8-bit grayscale mask file; values above 127 are foreground."""
    path = Path(path)
    if path.suffix in (".ppm", ".pgm"):
        img = read_image(path)
        gray = img.mean(axis=2)
        return gray > (127.5 / 255.0)
    arr = np.asarray(Image.open(path).convert("L"))
    return arr > 127


def list_frames(directory) -> list:
    directory = Path(directory)
    files = sorted(
        p for p in directory.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS
    )
    if not files:
        raise FileNotFoundError(f"no frame files in {directory}")
    return files


def read_frame_dir(directory) -> list:
    return [read_image(p) for p in list_frames(directory)]


def read_mask_dir(directory) -> list:
    return [read_mask(p) for p in list_frames(directory)]


def write_frames(directory, frames, ext: str = ".png", seed=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        write_image(directory / f"{i:05d}{ext}", frame, seed=seed)


def write_masks(directory, masks, ext: str = ".png", seed=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(masks):
        write_image(directory / f"{i:05d}{ext}", mask.astype(np.float64), seed=seed)
