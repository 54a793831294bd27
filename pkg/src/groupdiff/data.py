"""Procedural class-conditional toy images and a handcrafted feature encoder.

Each class owns a shape kind and a base hue; per-image style latents
(hue jitter, scale, position, rotation, background shade) are scaled by
``similarity_structure`` so within-class visual spread is controllable:
at 0 every image in a class is pixel-identical.

The encoder is a deterministic stand-in for a pretrained embedding model:
an 8-bin-per-channel color histogram concatenated with second-order
grayscale spatial moments, L2-normalized. It is cheap, exactly
reproducible, and separates classes while still varying with style.
"""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field

import numpy as np

from .constants import UNIT_NORM_TOL
from .errors import ValidationError

SHAPE_KINDS = ("disk", "square", "triangle", "ring", "diamond", "cross", "hbars", "vbars")

HIST_BINS = 8
FEATURE_DIM = 3 * HIST_BINS + 6

DATASET_MAGIC = b"GDD1"


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    images_per_class: int = 32
    image_size: int = 16
    seed: int = 0
    # Within-class style spread relative to the fixed between-class spread.
    similarity_structure: float = 0.35

    def validate(self):
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.images_per_class < 1:
            raise ValidationError("images_per_class must be >= 1")
        if self.image_size < 8:
            raise ValidationError("image_size must be >= 8 (need at least 2x2 patches)")
        if not 0.0 <= self.similarity_structure:
            raise ValidationError("similarity_structure must be non-negative")


@dataclass
class ToyImage:
    pixels: np.ndarray  # [H, W, 3] float32 in [0, 1]
    class_id: int
    style_params: np.ndarray  # [8] float64 generator latents
    id: int


@dataclass
class ToyDataset:
    spec: DatasetSpec
    images: list[ToyImage] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> ToyImage:
        return self.images[i]

    def __iter__(self):
        return iter(self.images)

    def pixel_array(self) -> np.ndarray:
        return np.stack([im.pixels for im in self.images])

    def labels(self) -> np.ndarray:
        return np.array([im.class_id for im in self.images], dtype=np.int64)


def _shape_mask(kind: str, size: int, cx: float, cy: float, scale: float, rot: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    x = (xs + 0.5) / size - cx
    y = (ys + 0.5) / size - cy
    c, s = np.cos(rot), np.sin(rot)
    xr = c * x - s * y
    yr = s * x + c * y
    r = scale
    if kind == "disk":
        d = np.sqrt(xr * xr + yr * yr) - r
    elif kind == "square":
        d = np.maximum(np.abs(xr), np.abs(yr)) - r
    elif kind == "diamond":
        d = np.abs(xr) + np.abs(yr) - r
    elif kind == "ring":
        d = np.abs(np.sqrt(xr * xr + yr * yr) - r) - 0.42 * r
    elif kind == "cross":
        bar_a = np.maximum(np.abs(xr) - r, np.abs(yr) - 0.38 * r)
        bar_b = np.maximum(np.abs(yr) - r, np.abs(xr) - 0.38 * r)
        d = np.minimum(bar_a, bar_b)
    elif kind == "triangle":
        # upward triangle: three half-plane constraints
        d = np.maximum(yr - 0.75 * r, np.maximum(0.866 * xr - 0.5 * yr, -0.866 * xr - 0.5 * yr) - 0.75 * r)
    elif kind == "hbars":
        period = 1.6 * r
        d = np.abs(((yr + 10 * period) % period) - 0.5 * period) - 0.28 * period
        d = np.maximum(d, np.maximum(np.abs(xr), np.abs(yr)) - r)
    elif kind == "vbars":
        period = 1.6 * r
        d = np.abs(((xr + 10 * period) % period) - 0.5 * period) - 0.28 * period
        d = np.maximum(d, np.maximum(np.abs(xr), np.abs(yr)) - r)
    else:
        raise ValidationError(f"unknown shape kind {kind!r}")
    edge = 1.2 / size
    return np.clip(0.5 - d / edge, 0.0, 1.0)


def render_image(style: np.ndarray, size: int) -> np.ndarray:
    """Rasterize one image from its style latents. Deterministic."""
    kind = SHAPE_KINDS[int(style[0]) % len(SHAPE_KINDS)]
    hue, scale, cx, cy, rot, bg = style[1], style[2], style[3], style[4], style[5], style[6]
    mask = _shape_mask(kind, size, cx, cy, scale, rot)
    fg = np.array(colorsys.hsv_to_rgb(hue % 1.0, 0.88, 0.95))
    pix = bg * (1.0 - mask[..., None]) + fg * mask[..., None]
    return np.clip(pix, 0.0, 1.0).astype(np.float32)


def generate_dataset(spec: DatasetSpec) -> ToyDataset:
    """Create spec.num_classes * spec.images_per_class images, seeded."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sim = spec.similarity_structure
    images: list[ToyImage] = []
    next_id = 0
    for cls in range(spec.num_classes):
        base_hue = cls / spec.num_classes
        base_scale = rng.uniform(0.28, 0.38)
        base_cx = rng.uniform(0.42, 0.58)
        base_cy = rng.uniform(0.42, 0.58)
        base_rot = rng.uniform(0.0, 2.0 * np.pi)
        base_bg = rng.uniform(0.06, 0.20)
        for _ in range(spec.images_per_class):
            style = np.array([
                float(cls % len(SHAPE_KINDS)),
                base_hue + sim * rng.uniform(-0.04, 0.04),
                base_scale * (1.0 + sim * rng.uniform(-0.25, 0.25)),
                base_cx + sim * rng.uniform(-0.12, 0.12),
                base_cy + sim * rng.uniform(-0.12, 0.12),
                base_rot + sim * rng.uniform(-0.5, 0.5),
                np.clip(base_bg + sim * rng.uniform(-0.04, 0.04), 0.0, 0.5),
                0.0,
            ])
            images.append(ToyImage(
                pixels=render_image(style, spec.image_size),
                class_id=cls,
                style_params=style,
                id=next_id,
            ))
            next_id += 1
    return ToyDataset(spec=spec, images=images)


def encode(image: ToyImage | np.ndarray) -> np.ndarray:
    """Unit-norm feature vector: color histogram + grayscale spatial moments.

    Histogram mass is weighted by per-pixel chroma (max minus min channel,
    plus a small floor) so the colored foreground dominates over the
    near-gray background shared by every image; without the weighting all
    similarities crowd together near 1.
    """
    pix = image.pixels if isinstance(image, ToyImage) else np.asarray(image)
    if pix.ndim != 3 or pix.shape[-1] != 3:
        raise ValidationError(f"expected [H, W, 3] pixels, got shape {pix.shape}")
    pix = pix.astype(np.float64)
    h, w, _ = pix.shape
    feats = np.empty(FEATURE_DIM)
    chroma = pix.max(axis=-1) - pix.min(axis=-1) + 0.01
    wsum = chroma.sum()
    for ch in range(3):
        hist, _ = np.histogram(pix[..., ch], bins=HIST_BINS, range=(0.0, 1.0),
                               weights=chroma)
        feats[ch * HIST_BINS:(ch + 1) * HIST_BINS] = hist / wsum
    gray = pix.mean(axis=-1)
    total = gray.sum()
    ys, xs = np.mgrid[0:h, 0:w]
    xn = (xs + 0.5) / w
    yn = (ys + 0.5) / h
    if total > 0:
        xbar = (gray * xn).sum() / total
        ybar = (gray * yn).sum() / total
        mxx = (gray * (xn - xbar) ** 2).sum() / total
        myy = (gray * (yn - ybar) ** 2).sum() / total
        mxy = (gray * (xn - xbar) * (yn - ybar)).sum() / total
    else:
        xbar = ybar = mxx = myy = mxy = 0.0
    feats[3 * HIST_BINS:] = [gray.mean(), xbar, ybar, mxx, myy, mxy]
    norm = np.linalg.norm(feats)
    if norm == 0:
        raise ValidationError("degenerate image: zero feature vector")
    out = feats / norm
    assert abs(np.linalg.norm(out) - 1.0) <= UNIT_NORM_TOL
    return out


# -- dataset file format (GDD1) -----------------------------------------------
# magic | u32 K | u32 count | u32 H | u32 W | u32 Ch | u64 seed | f64 similarity
# then per image: u32 id | u32 class_id | 8 f64 style | H*W*3 f32 pixels

def save_dataset(dataset: ToyDataset, path) -> None:
    spec = dataset.spec
    h = w = spec.image_size
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIIIQd", spec.num_classes, len(dataset), h, w, 3,
                            spec.seed, spec.similarity_structure))
        for im in dataset.images:
            f.write(struct.pack("<II", im.id, im.class_id))
            f.write(np.asarray(im.style_params, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(im.pixels, dtype="<f4").tobytes())


def load_dataset(path) -> ToyDataset:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != DATASET_MAGIC:
            raise ValidationError(f"not a dataset file (magic {magic!r})")
        k, count, h, w, ch, seed, sim = struct.unpack("<IIIIIQd", f.read(4 * 5 + 8 + 8))
        if ch != 3:
            raise ValidationError(f"unsupported channel count {ch}")
        if count % k != 0:
            raise ValidationError("image count not divisible by class count")
        spec = DatasetSpec(num_classes=k, images_per_class=count // k, image_size=h,
                           seed=seed, similarity_structure=sim)
        images = []
        for _ in range(count):
            iid, cls = struct.unpack("<II", f.read(8))
            style = np.frombuffer(f.read(8 * 8), dtype="<f8").copy()
            pix = np.frombuffer(f.read(h * w * 3 * 4), dtype="<f4").reshape(h, w, 3).copy()
            images.append(ToyImage(pixels=pix, class_id=cls, style_params=style, id=iid))
    return ToyDataset(spec=spec, images=images)
