"""Synthetic low-contrast lesion images plus dataset files.

Each image carries 1-6 irregular blobs grown by dilating a random walk,
individually covering 0.2%-5% of the image, with intensity contrast
drawn at a signal-to-noise ratio of 1.5-4 over the background noise so
the blobs stay visually close to their surroundings. Generation is
deterministic per (seed, index): sample i uses child seed ``seed ^ i``.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import PstnFormatError, ValidationError
from .tensor import Rng, read_pstn, write_pstn

MIN_BLOB_FRAC = 0.002
MAX_BLOB_FRAC = 0.05
MAX_BLOBS = 6
NOISE_SIGMA = 0.08
SNR_RANGE = (1.5, 4.0)


@dataclass
class SyntheticSample:
    image: np.ndarray          # (h, w, 1) f32
    mask: np.ndarray           # (h, w) u8 class labels
    meta: dict = field(default_factory=dict)


def _bilinear_resize(small, h, w):
    """Resize a small 2-d field; plain separable linear interpolation."""
    sh, sw = small.shape
    yi = np.linspace(0, sh - 1, h)
    xi = np.linspace(0, sw - 1, w)
    y0 = np.floor(yi).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    wy = (yi - y0)[:, None]
    rows = small[y0] * (1 - wy) + small[y1] * wy
    x0 = np.floor(xi).astype(int)
    x1 = np.minimum(x0 + 1, sw - 1)
    wx = xi - x0
    return rows[:, x0] * (1 - wx) + rows[:, x1] * wx


def _dilate_cross(blob):
    out = blob.copy()
    out[1:, :] |= blob[:-1, :]
    out[:-1, :] |= blob[1:, :]
    out[:, 1:] |= blob[:, :-1]
    out[:, :-1] |= blob[:, 1:]
    return out


def _random_blob(rng, h, w):
    """Random-walk core dilated up toward a target area within bounds."""
    min_px = max(1, int(np.ceil(MIN_BLOB_FRAC * h * w)))
    max_px = max(min_px, int(np.floor(MAX_BLOB_FRAC * h * w)))
    target = int(rng.integers(min_px, max_px + 1))
    core_target = max(1, target // 5)

    blob = np.zeros((h, w), dtype=bool)
    r = int(rng.integers(0, h))
    c = int(rng.integers(0, w))
    blob[r, c] = True
    count, steps = 1, 0
    while count < core_target and steps < 60 * core_target:
        move = int(rng.integers(0, 4))
        r = min(max(r + (move == 0) - (move == 1), 0), h - 1)
        c = min(max(c + (move == 2) - (move == 3), 0), w - 1)
        if not blob[r, c]:
            blob[r, c] = True
            count += 1
        steps += 1

    while blob.sum() < target:
        grown = _dilate_cross(blob)
        if grown.sum() > max_px:
            break
        blob = grown
    return blob


def _make_sample(h, w, n_classes, sample_seed, index):
    rng = Rng(sample_seed)
    base = 0.5 + 0.15 * _bilinear_resize(
        rng.uniform(-1.0, 1.0, (max(2, h // 8), max(2, w // 8))), h, w)
    mask = np.zeros((h, w), dtype=np.uint8)
    contrast = np.zeros((h, w), dtype=np.float64)
    n_blobs = int(rng.integers(1, MAX_BLOBS + 1))
    areas = []
    for _ in range(n_blobs):
        blob = _random_blob(rng, h, w)
        label = 1 if n_classes == 2 else int(rng.integers(1, n_classes))
        snr = float(rng.uniform(*SNR_RANGE))
        delta = snr * NOISE_SIGMA * (1.0 if label == 1 else -1.0)
        contrast[blob] = delta
        mask[blob] = label
        areas.append(int(blob.sum()))
    noise = rng.normal((h, w)) * NOISE_SIGMA
    image = (base + contrast + noise).astype(np.float32)[..., None]
    return SyntheticSample(
        image=image, mask=mask,
        meta={"index": index, "seed": int(sample_seed), "n_blobs": n_blobs,
              "blob_areas": areas,
              "fg_fraction": float((mask > 0).mean())})


def generate(n_samples, h, w, n_classes=2, seed=0):
    """Deterministic list of synthetic samples; sample i uses seed ^ i."""
    if h < 32 or w < 32:
        raise ValidationError(f"image size must be at least 32x32, got {h}x{w}")
    if n_classes not in (2, 3):
        raise ValidationError(f"n_classes must be 2 or 3, got {n_classes}")
    if n_samples < 1:
        raise ValidationError(f"n_samples must be >= 1, got {n_samples}")
    root = int(seed) & 0xFFFFFFFFFFFFFFFF
    return [_make_sample(h, w, n_classes, root ^ i, i) for i in range(n_samples)]


# ---------------------------------------------------------------------------
# dataset directory layout: img_%05d.pstn, msk_%05d.pstn, manifest.json


def save_dataset(out_dir, samples, n_classes, seed):
    os.makedirs(out_dir, exist_ok=True)
    items = []
    for i, s in enumerate(samples):
        img_name = f"img_{i:05d}.pstn"
        msk_name = f"msk_{i:05d}.pstn"
        write_pstn(os.path.join(out_dir, img_name), s.image.astype(np.float32))
        write_pstn(os.path.join(out_dir, msk_name), s.mask.astype(np.uint8))
        items.append({"image": img_name, "mask": msk_name, **s.meta})
    h, w = samples[0].mask.shape
    manifest = {"n": len(samples), "h": h, "w": w, "n_classes": n_classes,
                "seed": int(seed), "items": items}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_dataset(data_dir):
    """Read a dataset directory back into samples plus its manifest."""
    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise ValidationError(f"{data_dir}: no manifest.json")
    with open(path) as fh:
        manifest = json.load(fh)
    samples = []
    for item in manifest["items"]:
        image = read_pstn(os.path.join(data_dir, item["image"]))
        mask = read_pstn(os.path.join(data_dir, item["mask"]))
        if image.ndim == 2:
            image = image[..., None]
        samples.append(SyntheticSample(image=image.astype(np.float32),
                                       mask=mask.astype(np.uint8),
                                       meta={k: v for k, v in item.items()
                                             if k not in ("image", "mask")}))
    return samples, manifest


# ---------------------------------------------------------------------------
# 8-bit PGM import (external grayscale plumbing)


def read_pgm(path):
    """Binary 8-bit PGM (P5) -> (h, w, 1) f32 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise PstnFormatError(f"{path}: not a binary PGM (P5) file")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval > 255:
        raise PstnFormatError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=pos)
    if pixels.size != h * w:
        raise PstnFormatError(f"{path}: truncated pixel data")
    return (pixels.reshape(h, w).astype(np.float32) / maxval)[..., None]
