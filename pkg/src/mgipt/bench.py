"""Synthetic two-structure segmentation scenes and style-shifted domains.

Each scene is a textured background carrying an outer ellipse with a brighter
inner ellipse strictly inside it, a stand-in for optic disc / cup images.
Domains A..E apply increasingly strong intensity-only styles; A is the
identity (source) style. Images are H x W x 3 in [0, 1], masks H x W x 2
with channels (outer, inner).
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import fourier

IMAGE_MAGIC = b"IMGT"
MASK_MAGIC = b"MSKT"
DOMAINS = ("A", "B", "C", "D", "E")
LOW_FREQ_BLOCK = 9


class DataFormatError(ValueError):
    pass


@dataclass
class Ellipse:
    cy: float
    cx: float
    ay: float
    ax: float
    angle: float

    def inside(self, yy, xx, margin=0.0):
        c, s = np.cos(self.angle), np.sin(self.angle)
        dy, dx = yy - self.cy, xx - self.cx
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / (self.ax - margin)) ** 2 + (v / (self.ay - margin)) ** 2 <= 1.0

    def boundary(self, n=64):
        t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        c, s = np.cos(self.angle), np.sin(self.angle)
        u, v = self.ax * np.cos(t), self.ay * np.sin(t)
        return self.cy + s * u + c * v, self.cx + c * u - s * v


@dataclass
class SceneSpec:
    size: int
    outer: Ellipse
    inner: Ellipse
    texture_seed: int
    has_outer: bool = True
    has_inner: bool = True
    fov_center: tuple = (32.0, 32.0)
    fov_radius: float = 64.0
    background: tuple = (0.55, 0.28, 0.16)
    disc_gain: tuple = (0.30, 0.30, 0.22)
    cup_gain: tuple = (0.12, 0.22, 0.26)


def sample_scene(rng, size=64, p_no_outer=0.1, p_no_inner=0.2):
    """Draw a scene whose inner ellipse lies strictly inside the outer one.

    A fraction of scenes omits the inner structure, or both structures.
    """
    has_outer = rng.random() >= p_no_outer
    has_inner = has_outer and rng.random() >= p_no_inner
    while True:
        ay = rng.uniform(0.17, 0.27) * size
        ax = ay * rng.uniform(0.8, 1.2)
        outer = Ellipse(
            cy=size / 2 + rng.uniform(-0.12, 0.12) * size,
            cx=size / 2 + rng.uniform(-0.12, 0.12) * size,
            ay=ay, ax=ax, angle=rng.uniform(0, np.pi),
        )
        ratio = rng.uniform(0.35, 0.65)
        inner = Ellipse(
            cy=outer.cy + rng.uniform(-0.15, 0.15) * ay,
            cx=outer.cx + rng.uniform(-0.15, 0.15) * ay,
            ay=ratio * ay, ax=ratio * ay * rng.uniform(0.8, 1.2),
            angle=rng.uniform(0, np.pi),
        )
        by, bx = inner.boundary()
        if np.all(outer.inside(by, bx, margin=1.0)):
            jitter = rng.uniform(-0.05, 0.05, size=3)
            bg = tuple(np.clip(np.array([0.55, 0.28, 0.16]) + jitter, 0.05, 0.95))
            # dark field-of-view border of random extent that never clips the outer ellipse
            reach = np.hypot(outer.cy - size / 2, outer.cx - size / 2) + max(outer.ay, outer.ax) + 2.0
            radius = rng.uniform(max(reach, 0.4 * size), 0.8 * size)
            fov = (size / 2 + rng.uniform(-0.15, 0.15) * size, size / 2 + rng.uniform(-0.15, 0.15) * size)
            by, bx = outer.boundary()
            if np.all(np.hypot(by - fov[0], bx - fov[1]) < radius - 2.0):
                return SceneSpec(size, outer, inner, int(rng.integers(2**31)), has_outer, has_inner,
                                 fov, radius, background=bg)


def scene_masks(spec):
    yy, xx = np.mgrid[0:spec.size, 0:spec.size] + 0.5
    outer = spec.outer.inside(yy, xx) & spec.has_outer
    inner = spec.inner.inside(yy, xx) & outer & spec.has_inner
    return np.stack([outer, inner], axis=-1).astype(np.float64)


def render_scene(spec):
    rng = np.random.default_rng(spec.texture_seed)
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    masks = scene_masks(spec)
    # soft edges keep the structure visible to a 3x3 conv stack
    soft_outer = ndimage.gaussian_filter(masks[..., 0], 1.0)
    soft_inner = ndimage.gaussian_filter(masks[..., 1], 1.0)
    texture = ndimage.gaussian_filter(rng.normal(size=(n, n, 3)), (4, 4, 0)) * 0.35
    shading = 0.08 * np.cos(2 * np.pi * (yy * rng.uniform(-1, 1) + xx * rng.uniform(-1, 1)) / n)
    img = np.array(spec.background)[None, None, :] * (1.0 + texture + shading[..., None])
    img = img + soft_outer[..., None] * np.array(spec.disc_gain)
    img = img + soft_inner[..., None] * np.array(spec.cup_gain)
    # bright lesion-like blobs away from the disc, variable in number and size
    n_blobs = rng.integers(0, 4)
    for _ in range(int(n_blobs)):
        for _attempt in range(20):
            by, bx = rng.uniform(0, n, size=2)
            r = rng.uniform(2.0, 9.0)
            if not (spec.has_outer and spec.outer.inside(np.array([by]), np.array([bx]), margin=-(r + 3.0))[0]):
                break
        else:
            continue
        blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * r**2))
        blob = blob * (1.0 - ndimage.gaussian_filter(masks[..., 0], 3.0) > 0.5)
        img = img + blob[..., None] * np.array([0.35, 0.35, 0.05])
    fov = np.hypot(yy - spec.fov_center[0], xx - spec.fov_center[1]) < spec.fov_radius
    img = img * ndimage.gaussian_filter(fov.astype(np.float64), 1.0)[..., None]
    img = img + rng.normal(scale=0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0), masks


@dataclass
class DomainStyle:
    name: str
    gamma: float = 1.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    low_freq_scale: tuple = (1.0, 1.0, 1.0)
    channel_offsets: tuple = (0.0, 0.0, 0.0)
    contrast: float = 1.0

    def is_identity(self):
        return (self.gamma == 1.0 and self.blur_sigma == 0.0 and self.noise_sigma == 0.0
                and all(v == 1.0 for v in self.low_freq_scale)
                and all(v == 0.0 for v in self.channel_offsets) and self.contrast == 1.0)


DEFAULT_STYLES = {
    "A": DomainStyle("A"),
    "B": DomainStyle("B", gamma=0.92, blur_sigma=0.3, noise_sigma=0.005,
                     low_freq_scale=(0.94, 1.04, 1.08), channel_offsets=(-0.015, 0.015, 0.02)),
    "C": DomainStyle("C", gamma=1.1, blur_sigma=0.4, noise_sigma=0.008,
                     low_freq_scale=(1.06, 0.9, 0.92), channel_offsets=(0.025, -0.025, 0.015), contrast=0.93),
    "D": DomainStyle("D", gamma=0.85, blur_sigma=0.5, noise_sigma=0.01,
                     low_freq_scale=(0.88, 1.12, 1.18), channel_offsets=(-0.03, 0.025, 0.04), contrast=0.9),
    "E": DomainStyle("E", gamma=0.8, blur_sigma=0.6, noise_sigma=0.012,
                     low_freq_scale=(0.86, 1.14, 1.2), channel_offsets=(-0.035, 0.03, 0.045), contrast=0.88),
}


def apply_style(image, style, rng):
    """Intensity-only restyling; geometry (and therefore the masks) is untouched."""
    if style.is_identity():
        return image.copy()
    x = image
    scale = np.asarray(style.low_freq_scale, dtype=np.float64)
    if np.any(scale != 1.0):
        spec = fourier.fft2(x)
        h, w, _ = spec.shape
        cy, cx = fourier.dc_index(h, w)
        r = LOW_FREQ_BLOCK // 2
        spec[cy - r:cy + r + 1, cx - r:cx + r + 1] *= scale[None, None, :]
        x = fourier.ifft2(spec)
    x = np.clip(x, 0.0, 1.0)
    if style.contrast != 1.0:
        m = x.mean(axis=(0, 1), keepdims=True)
        x = (x - m) * style.contrast + m
    x = np.clip(x, 0.0, 1.0) ** style.gamma
    x = x + np.asarray(style.channel_offsets)[None, None, :]
    if style.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, (style.blur_sigma, style.blur_sigma, 0))
    if style.noise_sigma > 0:
        x = x + rng.normal(scale=style.noise_sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0)


@dataclass
class Dataset:
    domain: str
    images: np.ndarray  # n x H x W x 3
    masks: np.ndarray  # n x H x W x 2
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        idx = list(idx)
        return Dataset(self.domain, self.images[idx], self.masks[idx], [self.ids[i] for i in idx])


def generate_domain(style, n, seed, size=64):
    """Render ``n`` scenes from ``seed`` and restyle them.

    Scene geometry depends only on ``seed``, so every domain generated from
    the same seed shares masks; style noise draws from a stream keyed by the
    domain name.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(style, str):
        style = DEFAULT_STYLES[style]
    scene_rng = np.random.default_rng([seed, 0])
    style_rng = np.random.default_rng([seed, 1, ord(style.name[0])])
    images, masks = [], []
    for _ in range(n):
        spec = sample_scene(scene_rng, size)
        img, msk = render_scene(spec)
        images.append(apply_style(img, style, style_rng))
        masks.append(msk)
    ids = [f"{i + 1:06d}" for i in range(n)]
    return Dataset(style.name, np.stack(images), np.stack(masks), ids)


def generate_benchmark(n_per_domain, seed, domains=DOMAINS, size=64):
    return {d: generate_domain(DEFAULT_STYLES[d], n_per_domain, seed, size) for d in domains}


def _write_tensor(path, magic, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_tensor(path, magic):
    blob = Path(path).read_bytes()
    if blob[:4] != magic:
        raise DataFormatError(f"{path}: expected magic {magic!r}, found {blob[:4]!r}")
    try:
        (ndim,) = struct.unpack_from("<I", blob, 4)
        shape = struct.unpack_from(f"<{ndim}I", blob, 8)
        data = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)), offset=8 + 4 * ndim)
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"{path}: truncated tensor file") from exc
    return data.reshape(shape).astype(np.float64)


def write_dataset(ds, root):
    """Write ``<root>/<domain>/{index.txt, <id>.imgt, <id>.mskt}``."""
    d = Path(root) / ds.domain
    d.mkdir(parents=True, exist_ok=True)
    for sid, img, msk in zip(ds.ids, ds.images, ds.masks):
        _write_tensor(d / f"{sid}.imgt", IMAGE_MAGIC, img)
        _write_tensor(d / f"{sid}.mskt", MASK_MAGIC, msk)
    (d / "index.txt").write_text("".join(f"{sid}\n" for sid in ds.ids))
    return d


def read_dataset(root, domain):
    d = Path(root) / domain
    index = d / "index.txt"
    if not index.is_file():
        raise FileNotFoundError(f"missing index file {index}")
    ids = [line.strip() for line in index.read_text().splitlines() if line.strip()]
    if not ids:
        raise DataFormatError(f"{index} lists no samples")
    images = [_read_tensor(d / f"{sid}.imgt", IMAGE_MAGIC) for sid in ids]
    masks = [_read_tensor(d / f"{sid}.mskt", MASK_MAGIC) for sid in ids]
    return Dataset(domain, np.stack(images), np.stack(masks), ids)


def list_domains(root):
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if (p / "index.txt").is_file())
