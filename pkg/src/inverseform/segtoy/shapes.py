"""Procedural shapes dataset: filled boxes and ellipses on a noisy background."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ..boundary import BoundaryMap, load_pnm, save_pnm, sobel_boundary
from ..errors import ContractError, FormatError
from ..fileio import atomic_write_json
from ..numcore.tensorio import load_tensor, save_tensor
from ..rng import stream

NOISE_SIGMA = 0.05
MAX_SHAPES = 6


@dataclass(frozen=True, eq=False)
class ShapesSample:
    image: np.ndarray          # (3, H, W) in [0, 1]
    labels: np.ndarray         # (H, W) int64
    gt_boundary: BoundaryMap


def class_palette(num_classes):
    """Fixed base colour per class, shared by every dataset seed; background is a mid grey."""
    rng = stream(0, "palette")
    colors = rng.uniform(0.1, 0.9, size=(num_classes, 3))
    colors[0] = (0.5, 0.5, 0.5)
    return colors


BOX_FRACTION = 0.9


def _polygon_mask(h, w, verts):
    yy, xx = np.mgrid[0:h, 0:w]
    inside = np.zeros((h, w), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > yy) != (y2 > yy)
        xint = (x2 - x1) * (yy - y1) / np.where(y2 == y1, 1.0, y2 - y1) + x1
        inside ^= crosses & (xx < xint)
    return inside


def _ellipse_mask(h, w, cx, cy, a, b, angle):
    yy, xx = np.mgrid[0:h, 0:w]
    c, s = np.cos(angle), np.sin(angle)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _random_shape(rng, h, w):
    """Mostly axis-aligned boxes (indoor-scene-like edges), some ellipses."""
    scale = min(h, w)
    cx, cy = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
    a = rng.uniform(0.12, 0.3) * scale
    b = a * rng.uniform(0.4, 1.0)
    if rng.uniform() < BOX_FRACTION:
        if rng.uniform() < 0.5:
            a, b = b, a
        verts = [(cx - a, cy - b), (cx + a, cy - b), (cx + a, cy + b), (cx - a, cy + b)]
        return _polygon_mask(h, w, np.array(verts))
    return _ellipse_mask(h, w, cx, cy, a, b, rng.uniform(0, np.pi))


def render_sample(rng, height, width, num_classes, palette):
    """Draw one sample. Every foreground class receives at least one shape."""
    fg = num_classes - 1
    n = int(rng.integers(max(2, fg), max(MAX_SHAPES, fg) + 1))
    classes = np.concatenate([rng.permutation(fg), rng.integers(0, fg, max(0, n - fg))]) + 1
    masks = [_random_shape(rng, height, width) for _ in range(n)]
    order = np.argsort([-m.sum() for m in masks], kind="stable")   # big shapes first
    labels = np.zeros((height, width), dtype=np.int64)
    for i in order:
        labels[masks[i]] = classes[i]
    tint = palette[labels].transpose(2, 0, 1)
    jitter = rng.normal(0.0, 0.05, size=(num_classes, 3))[labels].transpose(2, 0, 1)
    image = tint + jitter + rng.normal(0.0, NOISE_SIGMA, size=(3, height, width))
    # 8-bit quantized so the PPM files hold the exact training values
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0, labels


def gen_shapes(count, height=96, width=96, num_classes=5, seed=0):
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    palette = class_palette(num_classes)
    rng = stream(seed, "shapes")
    out = []
    for _ in range(count):
        image, labels = render_sample(rng, height, width, num_classes, palette)
        out.append(ShapesSample(image, labels, sobel_boundary(labels)))
    return out


def stack_dataset(samples):
    """(images (N, 3, H, W), labels (N, H, W), boundaries (N, H, W))."""
    if not samples:
        return np.zeros((0, 3, 0, 0)), np.zeros((0, 0, 0), dtype=np.int64), np.zeros((0, 0, 0))
    return (np.stack([s.image for s in samples]),
            np.stack([s.labels for s in samples]),
            np.stack([s.gt_boundary.values for s in samples]))


# -- persistence --------------------------------------------------------

def save_dataset(directory, samples, meta=None):
    """Directory of PPM images, IFTN label tensors, PGM boundaries and a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        save_pnm(os.path.join(directory, stem + ".ppm"), s.image.transpose(1, 2, 0))
        save_tensor(os.path.join(directory, stem + ".labels.iftn"), s.labels.astype(np.float64))
        save_pnm(os.path.join(directory, stem + ".boundary.pgm"), s.gt_boundary.values)
        entries.append({"image": stem + ".ppm", "labels": stem + ".labels.iftn",
                        "boundary": stem + ".boundary.pgm"})
    manifest = {"format": "inverseform-shapes", "version": 1, "count": len(samples),
                "samples": entries, "meta": meta or {}}
    atomic_write_json(os.path.join(directory, "manifest.json"), manifest)
    return manifest


def load_dataset(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "inverseform-shapes":
        raise FormatError("manifest is not an inverseform-shapes dataset")
    samples = []
    for e in manifest["samples"]:
        image = load_pnm(os.path.join(directory, e["image"])).transpose(2, 0, 1)
        labels = load_tensor(os.path.join(directory, e["labels"])).astype(np.int64)
        boundary = BoundaryMap(load_pnm(os.path.join(directory, e["boundary"])))
        samples.append(ShapesSample(image, labels, boundary))
    return samples, manifest
