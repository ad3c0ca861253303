"""PFM/PNG readers and writers plus the sequence manifest format.

Manifest layout (one ``key = value`` per line, ``#`` comments)::

    focal_x = 300
    focal_y = 300
    principal_x = 128
    principal_y = 128
    width = 256
    height = 256
    frame_rate = 30
    frame = meshes/frame_0000.obj images/frame_0000.png [gt/depth_0000.pfm]

``frame`` lines are ordered; paths are relative to the manifest's directory.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Intrinsics
from .errors import InputError

INTRINSIC_KEYS = ("focal_x", "focal_y", "principal_x", "principal_y", "width", "height")


# --------------------------------------------------------------------------- PFM

def write_pfm(path, data) -> None:
    """Little-endian PFM (scale -1.0), bottom row first; 2-D -> ``Pf``, (H, W, 3) -> ``PF``."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise InputError(f"PFM supports (H, W) or (H, W, 3) arrays, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"Pf", b"PF"):
            raise InputError(f"{path}: not a PFM file")
        dims = fh.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise InputError(f"{path}: malformed PFM header")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(fh.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == b"PF" else 1
        raw = fh.read()
    count = w * h * channels
    if len(raw) < count * 4:
        raise InputError(f"{path}: truncated PFM data")
    data = np.frombuffer(raw, dtype=dtype, count=count).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


# --------------------------------------------------------------------------- PNG

def write_mask(path, mask) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def write_image(path, image) -> None:
    """RGB image in [0, 1]; ``.pfm`` keeps float precision, anything else is 8-bit."""
    image = np.asarray(image, dtype=float)
    if str(path).lower().endswith(".pfm"):
        write_pfm(path, image)
        return
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    if str(path).lower().endswith(".pfm"):
        img = read_pfm(path).astype(float)
        return img if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)
    return np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0


def downsample(image, factor: int) -> np.ndarray:
    """Block-average by an integer factor along both image axes."""
    if factor == 1:
        return np.asarray(image, dtype=float)
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise InputError(f"{w}x{h} image is not divisible by {factor}")
    shape = (h // factor, factor, w // factor, factor) + image.shape[2:]
    return image.reshape(shape).mean(axis=(1, 3))


# --------------------------------------------------------------------------- manifest

@dataclass
class FrameEntry:
    mesh: Path
    image: Path
    gt_depth: Path | None = None


@dataclass
class Manifest:
    intrinsics: Intrinsics
    frames: list = field(default_factory=list)
    frame_rate: float = 30.0
    root: Path = Path(".")

    def resolve(self, p) -> Path:
        return self.root / p


def parse_key_values(text: str, source: str = "<text>") -> list[tuple[str, str, int]]:
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise InputError(f"{source}:{lineno}: empty key")
        items.append((key, value, lineno))
    return items


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    values, frames, rate = {}, [], 30.0
    for key, value, lineno in parse_key_values(text, str(path)):
        try:
            if key in INTRINSIC_KEYS:
                values[key] = float(value)
            elif key == "frame_rate":
                rate = float(value)
            elif key == "frame":
                parts = value.split()
                if len(parts) not in (2, 3):
                    raise InputError(f"{path}:{lineno}: frame needs mesh and image paths")
                frames.append(FrameEntry(Path(parts[0]), Path(parts[1]),
                                         Path(parts[2]) if len(parts) == 3 else None))
            else:
                raise InputError(f"{path}:{lineno}: unknown manifest key {key!r}")
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
    missing = [k for k in INTRINSIC_KEYS if k not in values]
    if missing:
        raise InputError(f"{path}: missing intrinsics {', '.join(missing)}")
    if not frames:
        raise InputError(f"{path}: no frames listed")
    K = Intrinsics(values["focal_x"], values["focal_y"], values["principal_x"], values["principal_y"],
                   int(values["width"]), int(values["height"]))
    return Manifest(K, frames, rate, path.parent)


def format_intrinsics(K: Intrinsics) -> str:
    cast = {"width": int, "height": int}
    return "".join(f"{k} = {cast.get(k, float)(getattr(K, k))!r}\n" for k in INTRINSIC_KEYS)


def write_manifest(path, manifest: Manifest) -> None:
    lines = ["# nrdepth sequence manifest\n", format_intrinsics(manifest.intrinsics),
             f"frame_rate = {float(manifest.frame_rate)!r}\n"]
    for f in manifest.frames:
        parts = [f.mesh.as_posix(), f.image.as_posix()]
        if f.gt_depth is not None:
            parts.append(f.gt_depth.as_posix())
        lines.append("frame = " + " ".join(parts) + "\n")
    Path(path).write_text("".join(lines))


def read_intrinsics_file(path) -> Intrinsics:
    vals = {k: float(v) for k, v, _ in parse_key_values(Path(path).read_text(), str(path)) if k in INTRINSIC_KEYS}
    missing = [k for k in INTRINSIC_KEYS if k not in vals]
    if missing:
        raise InputError(f"{path}: missing intrinsics {', '.join(missing)}")
    return Intrinsics(vals["focal_x"], vals["focal_y"], vals["principal_x"], vals["principal_y"],
                      int(vals["width"]), int(vals["height"]))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
