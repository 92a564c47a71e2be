"""Data sources.

* the ring of 2-D points used for the toy stability study,
* a synthetic fine-grained image family with known class structure,
* a labeled image directory described by a tab-separated manifest.

Every source samples with replacement from a caller-supplied Generator, so
iteration order is a pure function of the seed.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ShapeError


@dataclass
class LabeledBatch:
    x: np.ndarray
    c: np.ndarray
    source: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.c):
            raise ShapeError(f"{len(self.x)} samples but {len(self.c)} labels")

    def __len__(self):
        return len(self.c)


# ---------------------------------------------------------------------------
# ring


@dataclass(frozen=True)
class RingDistribution:
    center: tuple = (100.0, 100.0)
    radius: float = 10.0
    sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.radius <= 0 or self.sigma < 0:
            raise ValueError(f"need radius > 0 and sigma >= 0, got {self.radius}, {self.sigma}")


def sample_ring(dist: RingDistribution, m: int, rng=None, dtype=np.float64) -> np.ndarray:
    """``m`` points at center + (r + n)(cos t, sin t), t ~ U[0, 2pi), n ~ N(0, sigma^2)."""
    if m < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(dist.seed if rng is None else rng)
    theta = rng.uniform(0.0, 2 * np.pi, m)
    rad = dist.radius + dist.sigma * rng.standard_normal(m)
    pts = np.stack([np.cos(theta), np.sin(theta)], axis=1) * rad[:, None]
    return (pts + np.asarray(dist.center)).astype(dtype)


class RingDataset:
    num_classes = 1
    scale = "toy2d"

    def __init__(self, dist: RingDistribution = RingDistribution()):
        self.dist = dist

    def sample(self, rng: np.random.Generator, m: int) -> LabeledBatch:
        x = sample_ring(self.dist, m, rng, dtype=np.float32)
        return LabeledBatch(x, np.zeros(m, dtype=np.int64), "ring")


# ---------------------------------------------------------------------------
# synthetic fine-grained images


@dataclass(frozen=True)
class SyntheticClassSpec:
    """Family parameters of one class plus its nuisance ranges.

    Each image places ``blob_count`` soft blobs of one hue around a jittered
    center, rotated by ``orientation`` (radians).
    """

    class_id: int
    hue: float
    blob_count: int = 2
    orientation: float = 0.0
    side: int = 32
    jitter: float = 3.0
    scale_range: tuple = (0.85, 1.15)
    brightness_range: tuple = (0.75, 1.0)
    noise: float = 0.03

    def __post_init__(self):
        if self.blob_count < 1 or self.side < 8:
            raise ValueError("need blob_count >= 1 and side >= 8")


def class_specs(num_classes: int = 10, side: int = 32) -> list[SyntheticClassSpec]:
    """Default family: distinct hues, 1-3 blobs, distinct orientations."""
    return [
        SyntheticClassSpec(
            class_id=c,
            hue=c / num_classes,
            blob_count=1 + c % 3,
            orientation=c * 2 * np.pi / (3 * num_classes),
            side=side,
        )
        for c in range(num_classes)
    ]


def render_synthetic(spec: SyntheticClassSpec, seed) -> np.ndarray:
    """One (side, side, 3) image in [-1, 1], deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    s = spec.side
    scale = rng.uniform(*spec.scale_range)
    bright = rng.uniform(*spec.brightness_range)
    cy, cx = (s - 1) / 2 + rng.uniform(-spec.jitter, spec.jitter, 2)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    ring_r = 0.22 * s * scale if spec.blob_count > 1 else 0.0
    blob_sigma = 0.09 * s * scale
    alpha = np.zeros((s, s))
    for k in range(spec.blob_count):
        a = spec.orientation + 2 * np.pi * k / spec.blob_count
        by, bx = cy + ring_r * np.sin(a), cx + ring_r * np.cos(a)
        alpha = np.maximum(alpha, np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * blob_sigma ** 2)))
    color = np.array(colorsys.hsv_to_rgb(spec.hue % 1.0, 0.9, bright))
    background = 0.1 + spec.noise * rng.standard_normal((s, s, 3))
    img = background * (1 - alpha[..., None]) + color * alpha[..., None]
    return (np.clip(img, 0.0, 1.0) * 2 - 1).astype(np.float32)


class ImageDataset:
    """In-memory labeled images in [-1, 1], NHWC."""

    scale = "image"

    def __init__(self, x: np.ndarray, c: np.ndarray, source: str = ""):
        x = np.asarray(x, dtype=np.float32)
        c = np.asarray(c, dtype=np.int64)
        if len(x) == 0:
            raise ValueError("dataset is empty")
        if len(x) != len(c):
            raise ShapeError(f"{len(x)} images but {len(c)} labels")
        self.x, self.c, self.source = x, c, source
        self.num_classes = int(c.max()) + 1

    def __len__(self):
        return len(self.c)

    @property
    def side(self) -> int:
        return self.x.shape[1]

    def sample(self, rng: np.random.Generator, m: int) -> LabeledBatch:
        idx = rng.integers(0, len(self.c), m)
        return LabeledBatch(self.x[idx], self.c[idx], self.source)

    def of_class(self, c: int) -> np.ndarray:
        return self.x[self.c == c]

    def subset(self, idx) -> "ImageDataset":
        return ImageDataset(self.x[idx], self.c[idx], self.source)


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int = 10
    per_class: int = 500
    side: int = 32
    seed: int = 0
    test_fraction: float = 0.2


@dataclass
class SyntheticSplit:
    train: ImageDataset
    test: ImageDataset
    specs: list = field(default_factory=list)


def make_synthetic(cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticSplit:
    """Render ``per_class`` images for each class and split off a held-out part."""
    specs = class_specs(cfg.num_classes, cfg.side)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_classes)
    xs, cs = [], []
    for spec, ss in zip(specs, seeds):
        for child in ss.spawn(cfg.per_class):
            xs.append(render_synthetic(spec, child))
            cs.append(spec.class_id)
    x, c = np.stack(xs), np.asarray(cs)
    n_test = int(round(cfg.per_class * cfg.test_fraction))
    within = np.tile(np.arange(cfg.per_class), cfg.num_classes)
    test_mask = within < n_test
    if n_test == 0:
        full = ImageDataset(x, c, "synthetic")
        return SyntheticSplit(full, full, specs)
    return SyntheticSplit(
        ImageDataset(x[~test_mask], c[~test_mask], "synthetic"),
        ImageDataset(x[test_mask], c[test_mask], "synthetic-heldout"),
        specs,
    )


# ---------------------------------------------------------------------------
# image directories


MANIFEST_NAME = "manifest.tsv"


def read_manifest(path) -> list[tuple[str, int]]:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'path<TAB>class_id'")
            try:
                cid = int(parts[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: class id {parts[1]!r} is not an integer") from None
            if cid < 0:
                raise ValueError(f"{path}:{lineno}: negative class id {cid}")
            entries.append((parts[0], cid))
    return entries


def load_directory(path, manifest=None) -> ImageDataset:
    """Decode every manifest entry under ``path`` into an :class:`ImageDataset`."""
    from PIL import Image

    root = Path(path)
    manifest = Path(manifest) if manifest is not None else root / MANIFEST_NAME
    if not manifest.is_absolute() and not manifest.exists():
        manifest = root / manifest
    entries = read_manifest(manifest)
    if not entries:
        raise ValueError(f"manifest {manifest} is empty")
    ids = sorted({c for _, c in entries})
    missing = sorted(set(range(ids[-1] + 1)) - set(ids))
    if missing:
        raise ValueError(f"class ids are not contiguous: missing {missing} in {manifest}")
    xs, cs, shape = [], [], None
    for rel, cid in entries:
        fp = root / rel
        try:
            with Image.open(fp) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32)
        except FileNotFoundError:
            raise FileNotFoundError(f"missing image {fp}") from None
        except OSError as exc:
            raise ValueError(f"cannot decode image {fp}: {exc}") from None
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ShapeError(f"image {fp} has shape {arr.shape}, expected {shape}")
        xs.append(arr / 127.5 - 1.0)
        cs.append(cid)
    return ImageDataset(np.stack(xs), np.asarray(cs), str(root))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_directory(dataset: ImageDataset, out_dir) -> Path:
    """Write PNGs plus a manifest readable by :func:`load_directory`."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, c) in enumerate(zip(dataset.x, dataset.c)):
        rel = os.path.join(f"class_{int(c):03d}", f"{i:06d}.png")
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(img)).save(out / rel)
        lines.append(f"{rel}\t{int(c)}\n")
    with open(out / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    return out / MANIFEST_NAME


# ---------------------------------------------------------------------------
# corruption for inpainting


def default_patch_side(side: int) -> int:
    """50 pixels out of 128, scaled to ``side``."""
    return int(round(50 / 128 * side))


def corrupt_patch(x: np.ndarray, patch: int | None = None, top_left=None, seed=0, fill: str = "noise"):
    """Overwrite a square patch of an (H, W, C) image.

    Returns the corrupted copy and a float (H, W) mask that is 1 inside the
    patch. ``fill`` is ``noise`` (uniform in [-1, 1]) or a constant value.
    """
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected one (H, W, C) image, got {x.shape}")
    h, w = x.shape[:2]
    patch = default_patch_side(min(h, w)) if patch is None else int(patch)
    rng = np.random.default_rng(seed)
    if top_left is None:
        if patch > h or patch > w or patch < 1:
            raise ValueError(f"patch {patch} does not fit in a {h}x{w} image")
        top_left = (int(rng.integers(0, h - patch + 1)), int(rng.integers(0, w - patch + 1)))
    t, l = top_left
    if patch < 1 or t < 0 or l < 0 or t + patch > h or l + patch > w:
        raise ValueError(f"patch {patch} at {top_left} is out of bounds for a {h}x{w} image")
    mask = np.zeros((h, w), dtype=x.dtype)
    mask[t:t + patch, l:l + patch] = 1
    out = x.copy()
    if fill == "noise":
        out[t:t + patch, l:l + patch] = rng.uniform(-1, 1, (patch, patch, x.shape[2]))
    else:
        out[t:t + patch, l:l + patch] = float(fill)
    return out, mask
