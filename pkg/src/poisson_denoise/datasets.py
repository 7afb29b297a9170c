"""Image collections: directory loading and a synthetic scene generator.

The synthetic scenes stand in for natural-image datasets in the desk-scale
presets and tests.  Each is a smooth random background with a few flat
discs and rectangles on top, so it has both smooth regions and sharp edges.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from .errors import FormatError
from .imaging import load_grayscale, save_pgm
from .vst import upsample_bilinear

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png")


def list_images(directory):
    """Sorted paths of PGM/PNG files directly inside ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_directory(directory, skip_bad=False):
    """Load every image in ``directory``; returns ``(names, images)``."""
    names, images = [], []
    for path in list_images(directory):
        try:
            images.append(load_grayscale(path))
        except FormatError as exc:
            if not skip_bad:
                raise FormatError(f"{path}: {exc}") from None
            log.warning("skipping %s: %s", path, exc)
            continue
        names.append(path.stem)
    return names, images


def synthetic_image(rng: np.random.Generator, size=64, shapes=(2, 5)) -> np.ndarray:
    """One random piecewise-smooth scene in ``[0, 1]``."""
    h, w = (size, size) if np.isscalar(size) else size
    grid = rng.uniform(0.15, 0.85, size=(4, 4))
    img = upsample_bilinear(grid, h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(shapes[0], shapes[1] + 1))):
        level = rng.uniform(0.0, 1.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.1, 0.35) * min(h, w)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.4, 1.0))
        img = np.where(mask, level, img)
    return np.clip(img, 0.0, 1.0)


def synthetic_set(seed: int, count: int, size=64) -> list:
    rng = np.random.default_rng(seed)
    return [synthetic_image(rng, size) for _ in range(count)]


def write_synthetic_set(directory, seed: int, count: int, size=64, prefix="synth"):
    """Write ``count`` synthetic scenes as 8-bit PGMs; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(synthetic_set(seed, count, size)):
        path = Path(directory) / f"{prefix}_{i:04d}.pgm"
        save_pgm(path, img)
        paths.append(path)
    return paths
