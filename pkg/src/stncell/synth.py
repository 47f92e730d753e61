"""Synthetic stand-in for annotated histology patches.

Each sample is a context canvas (``d_i + 2 * max_offset`` pixels square)
with one target cell at the canvas centre over a smooth, stained-looking
noise background.  The three classes differ in shape:

* granulocyte (0): ring
* mitosis (1): elongated bar at a random orientation
* tumor (2): filled disc

Faint generic blobs and lower-contrast decoy cells of random class are
scattered away from the target so a classifier has to find the right
object.  Every sample uses its own generator spawned from the master seed,
so output does not depend on generation order.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import Sample, save_image, to_uint8
from .losses import CLASS_NAMES, NUM_CLASSES
from .stn import CropGeometry

BACKGROUND_RGB = np.array([0.93, 0.78, 0.86])
STAIN_RGB = np.array([0.55, 0.62, 0.35])  # absorbed per unit density: leaves a purple nucleus
EDGE_SOFTNESS = 0.7


def _soft_step(signed_distance: np.ndarray) -> np.ndarray:
    """~1 inside (negative distance), ~0 outside, antialiased over about a pixel."""
    return 1.0 / (1.0 + np.exp(np.clip(signed_distance / EDGE_SOFTNESS, -50, 50)))


def render_shape(kind: int, size: int, center: Tuple[float, float], rng: np.random.Generator) -> Tuple[np.ndarray, dict]:
    """Density map in ``[0, 1]`` of one cell of class ``kind`` and its shape parameters."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    r = np.hypot(dx, dy)
    if kind == 0:
        radius = rng.uniform(10.0, 14.0)
        width = rng.uniform(2.5, 3.5)
        density = _soft_step(np.abs(r - radius) - width / 2)
        params = {"radius": radius, "width": width}
    elif kind == 1:
        length = rng.uniform(24.0, 30.0)
        width = rng.uniform(5.0, 7.0)
        angle = rng.uniform(0.0, np.pi)
        u = dx * np.cos(angle) + dy * np.sin(angle)
        v = -dx * np.sin(angle) + dy * np.cos(angle)
        # Capsule: distance to a segment of the given length.
        along = np.clip(u, -length / 2 + width / 2, length / 2 - width / 2)
        density = _soft_step(np.hypot(u - along, v) - width / 2)
        params = {"length": length, "width": width, "angle": angle}
    elif kind == 2:
        radius = rng.uniform(9.0, 13.0)
        density = _soft_step(r - radius)
        params = {"radius": radius}
    else:
        raise ValueError(f"unknown class index {kind}")
    return density, params


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    coarse = gaussian_filter(rng.standard_normal((size, size)), sigma=6.0, mode="wrap")
    fine = gaussian_filter(rng.standard_normal((size, size)), sigma=1.2, mode="wrap")
    coarse /= coarse.std() + 1e-12
    fine /= fine.std() + 1e-12
    return 0.06 * coarse + 0.03 * fine


def _clutter(size: int, center: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    density = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 9))):
        while True:
            px, py = rng.uniform(0, size, size=2)
            if np.hypot(px - center, py - center) > 24:
                break
        sigma = rng.uniform(2.0, 4.0)
        density += rng.uniform(0.15, 0.35) * np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2 * sigma**2))
    for _ in range(int(rng.integers(0, 3))):
        while True:
            px, py = rng.uniform(8, size - 8, size=2)
            if np.hypot(px - center, py - center) > 44:
                break
        decoy, _ = render_shape(int(rng.integers(NUM_CLASSES)), size, (px, py), rng)
        density += rng.uniform(0.25, 0.4) * decoy
    return density


def render_sample(label: int, geom: CropGeometry, rng: np.random.Generator):
    """Render one context canvas.

    Returns ``(rgb [3, S, S] in [0, 1], cell pixel centre, truth, target density)``.
    """
    size = geom.context_size
    pivot = size // 2
    jitter = rng.uniform(-0.5, 0.5, size=2)
    true_center = (pivot + jitter[0], pivot + jitter[1])
    target, shape = render_shape(label, size, true_center, rng)
    density = 0.12 + _background(size, rng) + _clutter(size, pivot, rng) + rng.uniform(0.75, 0.95) * target
    density = np.clip(density, 0.0, 1.2)
    rgb = BACKGROUND_RGB[:, None, None] - STAIN_RGB[:, None, None] * density[None]
    rgb = np.clip(rgb + 0.01 * rng.standard_normal((3, size, size)), 0.0, 1.0)
    truth = {"center": true_center, "shape": shape}
    return rgb, (pivot, pivot), truth, target


def synth_generate(n_per_class: int, geom: CropGeometry = CropGeometry(), seed: int = 0) -> List[Sample]:
    """``n_per_class`` centred samples of each class, interleaved by class."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(n_per_class * NUM_CLASSES)
    samples = []
    for i, stream in enumerate(streams):
        label = i % NUM_CLASSES
        rgb, center, truth, _ = render_sample(label, geom, np.random.default_rng(stream))
        samples.append(Sample(to_uint8(rgb), center, label, 0, 0, geom.d_i, f"synth-{seed}-{i:06d}", truth))
    return samples


def write_synthetic_dataset(samples: List[Sample], out_dir, manifest_name: str = "manifest.csv") -> Path:
    """Write each context canvas as a PNG plus a manifest CSV in the annotation schema."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "cx", "cy", "class", "true_cx", "true_cy"])
        for s in samples:
            name = f"images/{s.source_id}.png"
            save_image(out_dir / name, s.context / 255.0)
            cx, cy = s.center
            tx, ty = s.truth["center"]
            writer.writerow([name, cx, cy, CLASS_NAMES[s.label], f"{tx:.4f}", f"{ty:.4f}"])
    return manifest


def template_match_classify(samples: List[Sample], geom: CropGeometry = CropGeometry()) -> np.ndarray:
    """Brute-force oracle: correlate the cell box against class templates.

    Templates cover ring and disc radii and bar orientations on a fine grid;
    the class of the best normalized correlation wins.  Uses the known cell
    position, so it measures whether the classes are separable at all.
    """
    size = geom.d_c // 2 + 1
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot(xx - c, yy - c)
    templates = []
    for radius in np.arange(9.5, 14.6, 0.5):
        templates.append((0, _soft_step(np.abs(r - radius) - 1.5)))
    for angle in np.linspace(0, np.pi, 36, endpoint=False):
        for length in (24.0, 27.0, 30.0):
            u = (xx - c) * np.cos(angle) + (yy - c) * np.sin(angle)
            v = -(xx - c) * np.sin(angle) + (yy - c) * np.cos(angle)
            along = np.clip(u, -length / 2 + 3, length / 2 - 3)
            templates.append((1, _soft_step(np.hypot(u - along, v) - 3)))
    for radius in np.arange(8.5, 13.6, 0.5):
        templates.append((2, _soft_step(r - radius)))
    labels = np.array([t[0] for t in templates])
    bank = np.stack([t[1].ravel() for t in templates])
    bank = bank - bank.mean(axis=1, keepdims=True)
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)

    preds = []
    half = geom.d_i // 2
    for s in samples:
        cx, cy = half - s.dx, half - s.dy
        density = (BACKGROUND_RGB[:, None, None] - s.image) / STAIN_RGB[:, None, None]
        box = density.mean(axis=0)[cy - c : cy - c + size, cx - c : cx - c + size].ravel()
        box = box - box.mean()
        score = bank @ box / (np.linalg.norm(box) + 1e-12)
        preds.append(labels[int(np.argmax(score))])
    return np.array(preds)


def synth_dataset(n: int, geom: CropGeometry = CropGeometry(), seed: int = 0) -> List[Sample]:
    """``n`` centred samples with classes cycling 0, 1, 2, 0, ...

    Sample ``i`` is identical to sample ``i`` of any larger set with the same seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return synth_generate(-(-n // NUM_CLASSES), geom, seed)[:n]
