"""Generated line-detection data standing in for fundus patches.

Patches show bright lines, 1 to 2 pixels wide at random orientations, over a
smooth random texture.  A patch is labelled vessel when the line covers the
centre pixel.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .preprocess import FundusImage


def _texture(rng, shape, sigma=1.0):
    t = gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return t / (t.std() + 1e-12)


def _line_profile(dist, width):
    # antialiased coverage of a line of the given width
    return np.clip(width / 2 + 0.5 - np.abs(dist), 0.0, 1.0)


def synthetic_patches(n, seed=0, size=9, texture_amp=0.06, line_prob_negative=0.5):
    """``n`` balanced patches ``(n, size, size, 1)`` in [0, 1] and labels."""
    rng = np.random.default_rng(seed)
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    yy -= c
    xx -= c
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    rng.shuffle(labels)
    out = np.empty((n, size, size, 1), dtype=np.float32)
    for i in range(n):
        img = 0.35 + 0.1 * rng.random() + texture_amp * _texture(rng, (size, size))
        draw = labels[i] == 1 or rng.random() < line_prob_negative
        if draw:
            theta = rng.uniform(0, np.pi)
            width = rng.uniform(1.0, 2.0)
            if labels[i] == 1:
                offset = rng.uniform(-0.4, 0.4) * width / 2
            else:
                offset = rng.choice([-1, 1]) * rng.uniform(width / 2 + 1.5, c)
            dist = xx * np.sin(theta) - yy * np.cos(theta) - offset
            img = img + rng.uniform(0.25, 0.45) * _line_profile(dist, width)
        out[i, :, :, 0] = np.clip(img, 0.0, 1.0)
    return out, labels


def synthetic_fundus(n_images, size=96, seed=0, n_lines=(5, 8)):
    """Synthetic RGB images with drawn lines and their label maps.

    Lines are drawn without antialiasing so every brightened pixel is a
    labelled one.

    Returns ``(images, labels)``: a list of :class:`FundusImage` and a list of
    uint8 planes where 255 marks line pixels.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images, labels = [], []
    for _ in range(n_images):
        base = 0.35 + 0.06 * _texture(rng, (size, size), sigma=1.5)
        lines = np.zeros((size, size))
        label = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(n_lines[0], n_lines[1] + 1)):
            theta = rng.uniform(0, np.pi)
            width = rng.uniform(1.0, 2.0)
            cx, cy = rng.uniform(0, size, 2)
            dist = (xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta)
            on = np.abs(dist) <= width / 2
            lines = np.maximum(lines, rng.uniform(0.25, 0.45) * on)
            label |= on
        gray = np.clip(base + lines, 0, 1)
        tint = np.array([1.1, 1.0, 0.9])
        rgb = np.clip(gray[..., None] * tint * 255 + 0.5, 0, 255).astype(np.uint8)
        images.append(FundusImage(rgb))
        labels.append(np.where(label, 255, 0).astype(np.uint8))
    return images, labels
