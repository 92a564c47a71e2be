"""Image and dataset helpers shared by the CLI commands."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..datasets import ImageDataset, RingDataset, load_directory, make_synthetic, to_uint8
from .config import ConfigError, DatasetConfig


def save_png(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")
    return path


def grid(images: np.ndarray, cols: int | None = None, pad: int = 1) -> np.ndarray:
    """Tile NHWC images in [-1, 1] into one image, row-major, padded with -1."""
    n, h, w, ch = images.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, ch), -1.0, dtype=np.float32)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        out[y:y + h, x:x + w] = img
    return out


def open_dataset(dcfg: DatasetConfig):
    """(train, test) handles. The ring has no held-out split, so test is None."""
    if dcfg.kind == "ring":
        return RingDataset(dcfg.ring()), None
    if dcfg.kind == "synthetic":
        split = make_synthetic(dcfg.synthetic())
        return split.train, split.test
    try:
        full = load_directory(dcfg.path, dcfg.manifest or None)
    except FileNotFoundError as e:
        raise ConfigError("dataset.path", str(e)) from None
    return split_heldout(full, dcfg.test_fraction, dcfg.data_seed)


def split_heldout(ds: ImageDataset, fraction: float, seed: int):
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(len(ds) * fraction))
    if n_test == 0:
        return ds, ds
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))
