"""Samples, the synthetic blob generator, the image-directory loader,
train/val splitting and flip/rotate augmentation."""

import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png", ".pgm")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray  # (1, H, W) in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.mask.ndim != 3 or self.mask.shape[0] != 1:
            raise DatasetError(f"sample {self.id}: bad shapes {self.image.shape}, {self.mask.shape}")
        if self.image.shape[1:] != self.mask.shape[1:]:
            raise DatasetError(f"sample {self.id}: image {self.image.shape} and mask {self.mask.shape} differ")


# -- synthetic data --------------------------------------------------------

MASK_FRACTION = (0.02, 0.5)


def _ellipse_field(size, rng):
    """Normalized radius r(y, x) of a random rotated ellipse (r <= 1 inside)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.2, 0.8, 2) * size
    ry, rx = rng.uniform(0.08, 0.25, 2) * size
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return np.sqrt(u * u + v * v)


def synth_sample(size, rng, n_blobs=None, sample_id="synth"):
    """One image with 1-3 bright soft-edged ellipses on a dark speckled
    background; the mask is the exact union of the ellipse interiors."""
    lo, hi = MASK_FRACTION
    for _ in range(1000):
        k = int(rng.integers(1, 4)) if n_blobs is None else n_blobs
        fields_ = [_ellipse_field(size, rng) for _ in range(k)]
        mask = np.zeros((size, size), dtype=bool)
        for r in fields_:
            mask |= r <= 1.0
        frac = mask.mean()
        if k == 0 or lo <= frac <= hi:
            break
    else:
        raise RuntimeError("could not draw a mask within the foreground-fraction bounds")
    background = rng.uniform(0.05, 0.2) + 0.05 * rng.standard_normal((size, size))
    fg = np.zeros((size, size))
    for r in fields_:
        level = rng.uniform(0.6, 0.9)
        # soft rim: half intensity exactly on the boundary
        fg = np.maximum(fg, level / (1.0 + np.exp((r - 1.0) * 12.0)))
    gray = np.maximum(background, fg) + 0.03 * rng.standard_normal((size, size))
    tint = rng.uniform(0.85, 1.0, 3)[:, None, None]
    image = np.clip(gray[None] * tint, 0.0, 1.0).astype(np.float32)
    return Sample(image, mask[None].astype(np.float32), sample_id)


def synth_dataset(n, size=64, seed=0, n_blobs=None):
    """``n`` synthetic samples, fully determined by ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if size < 16:
        raise ValueError("size must be >= 16")
    children = np.random.SeedSequence(seed).spawn(n)
    return [
        synth_sample(size, np.random.default_rng(ss), n_blobs, f"synth_{i:04d}") for i, ss in enumerate(children)
    ]


# -- directory datasets ----------------------------------------------------

def _find(directory, stem):
    for ext in IMAGE_EXTS:
        path = os.path.join(directory, stem + ext)
        if os.path.exists(path):
            return path
    return None


def _read(path):
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except Exception as exc:
        raise DatasetError(f"cannot read image file {path}: {exc}") from None


def load_dataset(directory, size=None):
    """Read ``images/<id>`` and ``masks/<id>`` (png or pgm, 8-bit gray or RGB).

    Images are scaled to [0, 1] (gray replicated to three channels) and
    resized bilinearly; masks are resized nearest-neighbour and binarized at
    127 (values above become 1).
    """
    img_dir = os.path.join(directory, "images")
    mask_dir = os.path.join(directory, "masks")
    if not os.path.isdir(img_dir):
        return []
    stems = sorted({os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.lower().endswith(IMAGE_EXTS)})
    samples = []
    for stem in stems:
        ipath = _find(img_dir, stem)
        mpath = _find(mask_dir, stem) if os.path.isdir(mask_dir) else None
        if mpath is None:
            raise DatasetError(f"image {stem!r} has no mask in {mask_dir}")
        im = _read(ipath)
        mk = _read(mpath)
        im = im.convert("RGB") if im.mode not in ("L", "RGB") else im
        mk = mk.convert("L")
        if im.size != mk.size:
            mk = mk.resize(im.size, Image.NEAREST)
        if size is not None:
            im = im.resize((size, size), Image.BILINEAR)
            mk = mk.resize((size, size), Image.NEAREST)
        img = np.asarray(im, dtype=np.float32) / 255.0
        img = np.repeat(img[None], 3, axis=0) if img.ndim == 2 else img.transpose(2, 0, 1)
        mask = (np.asarray(mk) > 127).astype(np.float32)[None]
        samples.append(Sample(np.ascontiguousarray(img), mask, stem))
    return samples


def write_dataset(directory, samples):
    """Write samples in the layout :func:`load_dataset` reads (8-bit PNG)."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    for s in samples:
        rgb = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(rgb, "RGB").save(os.path.join(directory, "images", s.id + ".png"))
        write_mask(os.path.join(directory, "masks", s.id + ".png"), s.mask)


def write_mask(path, mask):
    """Binary mask to an 8-bit grayscale file with values {0, 255}."""
    m = (np.asarray(mask).reshape(np.asarray(mask).shape[-2:]) > 0.5).astype(np.uint8) * 255
    Image.fromarray(m, "L").save(path)


# -- splitting and augmentation -------------------------------------------

def parse_ratio(ratio):
    if isinstance(ratio, str):
        parts = ratio.split(":")
    else:
        parts = list(ratio)
    if len(parts) != 2:
        raise ValueError(f"ratio must look like 4:1, got {ratio!r}")
    a, b = (int(p) for p in parts)
    if a <= 0 or b <= 0:
        raise ValueError(f"ratio parts must be positive, got {ratio!r}")
    return a, b


def split(dataset, ratio="4:1", seed=0):
    """Seeded shuffle; the first ceil(n * a / (a + b)) samples train."""
    if not dataset:
        raise ValueError("cannot split an empty dataset")
    a, b = parse_ratio(ratio)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    n_train = math.ceil(len(dataset) * a / (a + b))
    return [dataset[i] for i in order[:n_train]], [dataset[i] for i in order[n_train:]]


def augment(sample, rng, hflip=True, vflip=True, rotate=True):
    """Independent coin flips for horizontal flip, vertical flip and a
    rotation by k*90 degrees (k uniform in 0..3); image and mask move together."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    img, mask = sample.image, sample.mask
    do_h, do_v, do_r = rng.random(3) < 0.5
    k = int(rng.integers(0, 4))
    if hflip and do_h:
        img, mask = img[:, :, ::-1], mask[:, :, ::-1]
    if vflip and do_v:
        img, mask = img[:, ::-1, :], mask[:, ::-1, :]
    if rotate and do_r:
        if img.shape[1] != img.shape[2]:
            k -= k % 2
        img, mask = np.rot90(img, k, axes=(1, 2)), np.rot90(mask, k, axes=(1, 2))
    return Sample(np.ascontiguousarray(img), np.ascontiguousarray(mask), sample.id)


def stack(samples, dtype=np.float32):
    x = np.stack([s.image for s in samples]).astype(dtype, copy=False)
    z = np.stack([s.mask for s in samples]).astype(dtype, copy=False)
    return x, z
