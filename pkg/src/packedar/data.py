"""Synthetic labeled image corpus and the crop/flip augmentation.

A procedural stand-in for a real dataset: four shape classes (square,
disk, cross, triangle) rendered at the configured geometry with random
colors and placement, written as PPM files plus a tab-separated manifest.
Everything is driven by a seeded numpy generator so two runs with the
same seed produce byte-identical corpora.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imageio import read_image, write_ppm
from .patching import Geometry

CLASSES = ("square", "disk", "cross", "triangle")

MANIFEST_NAME = "manifest.tsv"


def render_shape(label: int, geometry: Geometry, rng: np.random.Generator) -> np.ndarray:
    """One (H, W, C) float32 image in [0, 1] for the given class index."""
    h = w = geometry.image_size
    c = geometry.channels
    bg = rng.uniform(0.0, 0.35, size=c).astype(np.float32)
    fg = rng.uniform(0.6, 1.0, size=c).astype(np.float32)
    image = np.broadcast_to(bg, (h, w, c)).copy()

    cy = rng.uniform(0.35, 0.65) * h
    cx = rng.uniform(0.35, 0.65) * w
    size = rng.uniform(0.25, 0.42) * h
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5

    name = CLASSES[label]
    if name == "square":
        mask = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= size
    elif name == "disk":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
    elif name == "cross":
        arm = size / 3.0
        box = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= size
        mask = box & ((np.abs(xx - cx) <= arm) | (np.abs(yy - cy) <= arm))
    else:  # triangle, apex up
        inside_rows = np.abs(yy - cy) <= size
        halfwidth = (yy - cy + size) / 2.0
        mask = inside_rows & (np.abs(xx - cx) <= halfwidth)
    image[mask] = fg
    return image


def generate_corpus(
    out_dir: str | Path, count: int, geometry: Geometry, seed: int
) -> Path:
    """Write `count` labeled images plus a manifest; labels cycle round-robin.

    Returns the manifest path. Deterministic per seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(count):
        label = i % len(CLASSES)
        image = render_shape(label, geometry, rng)
        name = f"img_{i:05d}.ppm"
        write_ppm(out / name, image)
        lines.append(f"{name}\t{label}\t{CLASSES[label]}\n")
    manifest = out / MANIFEST_NAME
    manifest.write_text("".join(lines))
    return manifest


def in_memory_corpus(
    count: int, geometry: Geometry, seed: int
) -> tuple[list[np.ndarray], list[int]]:
    """Same generator without touching disk; returns (images, labels)."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(count):
        label = i % len(CLASSES)
        images.append(render_shape(label, geometry, rng))
        labels.append(label)
    return images, labels


def load_corpus(corpus_dir: str | Path) -> tuple[list[np.ndarray], list[int]]:
    """Read every manifest entry back as (image, label) lists."""
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / MANIFEST_NAME
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {corpus_dir}")
    images, labels = [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        images.append(read_image(corpus_dir / parts[0]))
        labels.append(int(parts[1]))
    return images, labels


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Random crop (pad-and-crop, no resampling) plus horizontal flip."""
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    h, w = image.shape[:2]
    dy = int(rng.integers(0, 2 * pad + 1))
    dx = int(rng.integers(0, 2 * pad + 1))
    out = padded[dy : dy + h, dx : dx + w]
    if rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)
