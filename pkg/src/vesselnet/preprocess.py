"""Fundus image enhancement and 9x9 patch dataset construction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .errors import ConfigError

log = logging.getLogger(__name__)

PATCH = 9


@dataclass
class FundusImage:
    rgb: np.ndarray  # H x W x 3, uint8
    fov_mask: np.ndarray | None = None  # H x W, nonzero inside the field of view
    image_id: str = ""

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 image, got {self.rgb.shape}")
        if self.fov_mask is not None:
            self.fov_mask = np.asarray(self.fov_mask) != 0
            if self.fov_mask.shape != self.rgb.shape[:2]:
                raise ValueError(
                    f"fov mask {self.fov_mask.shape} does not match image {self.rgb.shape[:2]}")

    @property
    def height(self):
        return self.rgb.shape[0]

    @property
    def width(self):
        return self.rgb.shape[1]


# ------------------------------------------------------------------ netpbm io


def read_pnm(path):
    """Read an 8-bit binary PGM (P5) or PPM (P6) as a uint8 array."""
    with Image.open(path) as im:
        if im.format != "PPM":
            raise ValueError(f"{path}: not a PGM/PPM file ({im.format})")
        if im.mode not in ("L", "RGB", "1"):
            raise ValueError(f"{path}: unsupported netpbm mode {im.mode}")
        return np.asarray(im.convert("L" if im.mode == "1" else im.mode))


def write_pgm(path, plane):
    Image.fromarray(np.ascontiguousarray(plane, dtype=np.uint8), "L").save(path, format="PPM")


def write_ppm(path, rgb):
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), "RGB").save(path, format="PPM")


# ----------------------------------------------------------------- enhancement


def _round_half_up(num, den):
    """round(num / den) with halves rounded up, exact for nonnegative ints."""
    return (2 * num + den) // (2 * den)


def to_grayscale(image):
    """Channel mean, rounded: round((R + G + B) / 3)."""
    rgb = image.rgb if isinstance(image, FundusImage) else np.asarray(image)
    s = rgb.astype(np.int64).sum(axis=2)
    return np.clip(_round_half_up(s, 3), 0, 255).astype(np.uint8)


def local_hist_equalize(plane, window=31):
    """Per-pixel histogram equalization over a mirror-padded window.

    Each pixel maps to round(255 * (cdf(v) - cdf_min) / (N - cdf_min)) of its
    own window, cdf_min being the count of the window minimum.  Constant
    windows keep their value.
    """
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"equalization window must be odd and >= 3, got {window}")
    g = np.asarray(plane, dtype=np.uint8)
    if g.size == 0:
        raise ValueError("empty image")
    h, w = g.shape
    r = window // 2
    p = np.pad(g, r, mode="reflect") if min(h, w) > 1 else np.pad(g, r, mode="edge")
    le = np.zeros((h, w), dtype=np.int32)
    wmin = np.full((h, w), 255, dtype=np.uint8)
    for dy in range(window):
        for dx in range(window):
            v = p[dy:dy + h, dx:dx + w]
            le += v <= g
            np.minimum(wmin, v, out=wmin)
    cmin = np.zeros((h, w), dtype=np.int32)
    for dy in range(window):
        for dx in range(window):
            cmin += p[dy:dy + h, dx:dx + w] == wmin
    n = window * window
    den = n - cmin
    flat = den == 0
    out = _round_half_up(255 * (le - cmin).astype(np.int64), np.where(flat, 1, den))
    return np.where(flat, g, out).astype(np.uint8)


def enhance(image, window=31):
    return local_hist_equalize(to_grayscale(image), window)


# --------------------------------------------------------------------- patches


def _padded(plane):
    r = PATCH // 2
    return np.pad(np.asarray(plane), r, mode="reflect")


def extract_patch(plane, x, y):
    """9x9x1 window centred on column ``x``, row ``y``, scaled to [0, 1]."""
    h, w = np.shape(plane)
    if not (0 <= x < w and 0 <= y < h):
        raise IndexError(f"pixel ({x}, {y}) outside {w}x{h} image")
    p = _padded(plane)
    return (p[y:y + PATCH, x:x + PATCH].astype(np.float32) / 255.0)[..., None]


def extract_patches(plane, xs, ys):
    """Vectorized :func:`extract_patch` for coordinate arrays."""
    win = sliding_window_view(_padded(plane), (PATCH, PATCH))
    return (win[np.asarray(ys), np.asarray(xs)].astype(np.float32) / 255.0)[..., None]


@dataclass
class SamplingPolicy:
    per_image_sample_count: int = 1000
    vessel_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.vessel_fraction < 1:
            raise ConfigError("vessel_fraction must lie in (0, 1)")
        if self.per_image_sample_count < 1:
            raise ConfigError("per_image_sample_count must be >= 1")


@dataclass
class PatchDataset:
    patches: np.ndarray  # (N, 9, 9, 1) float32
    labels: np.ndarray  # (N,) int64
    origins: list = field(default_factory=list)  # (image_id, x, y)
    warnings: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return PatchDataset(self.patches[idx], self.labels[idx],
                            [self.origins[i] for i in idx], list(self.warnings))

    @property
    def xy(self):
        return self.patches, self.labels


def vessel_map(label_plane):
    return np.asarray(label_plane) > 127


def build_dataset(planes, label_maps, policy, fov_masks=None, image_ids=None):
    """Sample class-balanced patches from enhanced planes.

    Each image contributes ``per_image_sample_count`` patches, a
    ``vessel_fraction`` share of them vessel-centred, drawn without
    replacement inside the field of view.  Short classes are downgraded to
    what is available and a warning is recorded.
    """
    if image_ids is None:
        image_ids = [str(i) for i in range(len(planes))]
    if fov_masks is None:
        fov_masks = [None] * len(planes)
    patches, labels, origins, warnings = [], [], [], []
    n_vessel = int(round(policy.per_image_sample_count * policy.vessel_fraction))
    want = {1: n_vessel, 0: policy.per_image_sample_count - n_vessel}
    for i, (plane, lab, fov, iid) in enumerate(zip(planes, label_maps, fov_masks, image_ids)):
        if np.shape(plane) != np.shape(lab):
            raise ValueError(f"image {iid}: label map {np.shape(lab)} does not match {np.shape(plane)}")
        rng = np.random.default_rng([policy.seed, i])
        vessel = vessel_map(lab)
        inside = np.ones_like(vessel) if fov is None else np.asarray(fov) != 0
        for cls in (1, 0):
            ys, xs = np.nonzero(inside & (vessel == bool(cls)))
            n = want[cls]
            if n > len(ys):
                msg = f"image {iid}: requested {n} class-{cls} patches, only {len(ys)} available"
                warnings.append(msg)
                log.warning(msg)
                n = len(ys)
            pick = np.sort(rng.choice(len(ys), size=n, replace=False))
            patches.append(extract_patches(plane, xs[pick], ys[pick]))
            labels.append(np.full(n, cls, dtype=np.int64))
            origins += [(iid, int(x), int(y)) for x, y in zip(xs[pick], ys[pick])]
    if not patches:
        return PatchDataset(np.zeros((0, PATCH, PATCH, 1), np.float32), np.zeros(0, np.int64))
    return PatchDataset(np.concatenate(patches), np.concatenate(labels), origins, warnings)


@dataclass
class FoldSplit:
    folds: list

    @property
    def k(self):
        return len(self.folds)

    def train_test(self, i):
        test = list(self.folds[i])
        train = [iid for j, f in enumerate(self.folds) if j != i for iid in f]
        return train, test


def split_folds(image_ids, k=5, seed=0):
    """Seeded shuffle of image ids dealt round-robin into ``k`` folds."""
    ids = list(image_ids)
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if k > len(ids):
        raise ConfigError(f"{k} folds requested for {len(ids)} images")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return FoldSplit([shuffled[i::k] for i in range(k)])
