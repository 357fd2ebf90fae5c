"""Portable-pixmap dumps of original image, prompt and adapted image."""

import re
from pathlib import Path

import numpy as np


def write_ppm(path, image):
    """Write an H x W x 3 array in [0, 1] as a binary P6 pixmap."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    h, w, _ = img.shape
    data = np.round(img * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_ppm(path):
    blob = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if m is None:
        raise ValueError(f"{path} is not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    # exactly one whitespace byte separates the header from the raster
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def normalize_prompt(values):
    """Min-max scale prompt values to [0, 1]; a flat prompt maps to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo < 1e-12:
        return np.full(v.shape, 0.5)
    return (v - lo) / (hi - lo)


def prompt_panel(prompt, side=64):
    v = normalize_prompt(prompt.values)
    rep = max(1, side // v.shape[0])
    return v.repeat(rep, axis=0).repeat(rep, axis=1)


def dump_triplet(stem, original, prompt, adapted):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    write_ppm(stem.with_name(stem.name + "_original.ppm"), original)
    if prompt is not None:
        write_ppm(stem.with_name(stem.name + "_prompt.ppm"), prompt_panel(prompt, side=original.shape[0]))
    write_ppm(stem.with_name(stem.name + "_adapted.ppm"), adapted)
