"""Segmentation metrics, ROC analysis, whole-image segmentation and the
k-fold cross-validation harness."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .netcore import ShapeError, TrainingDiverged
from .preprocess import extract_patches, split_folds, vessel_map

log = logging.getLogger(__name__)

VARIANTS = ("original", "quantized", "pruned-quantized")


class UndefinedAUCError(ValueError):
    """ROC needs both classes present."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsReport:
    """Ratios are ``None`` when their denominator is zero."""

    counts: ConfusionCounts
    sen: float | None
    spe: float | None
    acc: float | None
    dice: float | None
    roc: list = field(default_factory=list)
    auc: float | None = None

    def as_dict(self):
        return {"sen": self.sen, "spe": self.spe, "acc": self.acc, "dice": self.dice,
                "auc": self.auc, "tp": self.counts.tp, "fp": self.counts.fp,
                "tn": self.counts.tn, "fn": self.counts.fn}


def _binary(a, name):
    a = np.asarray(a).reshape(-1)
    if a.size and not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be binary")
    return a.astype(bool)


def confusion(predictions, labels):
    p = _binary(predictions, "predictions")
    t = _binary(labels, "labels")
    if p.shape != t.shape:
        raise ShapeError(f"predictions ({p.size}) and labels ({t.size}) differ in length")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num, den):
    return num / den if den else None


def metrics(counts, roc=None, auc=None):
    c = counts
    return MetricsReport(
        counts=c,
        sen=_ratio(c.tp, c.tp + c.fn),
        spe=_ratio(c.tn, c.tn + c.fp),
        acc=_ratio(c.tp + c.tn, c.total),
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        roc=roc or [],
        auc=auc,
    )


def roc_curve(scores, labels):
    """(fpr, tpr, thresholds), one step per distinct score, from (0, 0) to (1, 1).

    The first threshold is +inf; equal scores share a single step.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    t = _binary(labels, "labels")
    if s.shape != t.shape:
        raise ShapeError(f"scores ({s.size}) and labels ({t.size}) differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    pos = int(t.sum())
    neg = t.size - pos
    if pos == 0 or neg == 0:
        raise UndefinedAUCError("ROC/AUC undefined: labels contain a single class")
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(t)[last]
    fps = (last + 1) - tps
    fpr = np.r_[0.0, fps / neg]
    tpr = np.r_[0.0, tps / pos]
    thresholds = np.r_[np.inf, s[last]]
    return fpr, tpr, thresholds


def roc_auc(scores, labels):
    """ROC points [(fpr, tpr), ...] and the trapezoidal area under them."""
    fpr, tpr, _ = roc_curve(scores, labels)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def evaluate_scores(scores, labels, threshold=0.5):
    """Thresholded metrics plus ROC/AUC (left empty for single-class labels)."""
    scores = np.asarray(scores)
    counts = confusion(scores >= threshold, labels)
    try:
        roc, auc = roc_auc(scores, labels)
    except UndefinedAUCError:
        roc, auc = [], None
    return metrics(counts, roc, auc)


# ---------------------------------------------------------------- segmentation


def score_pixels(network, plane, xs, ys, batch_size=4096):
    """Vessel probability at the given pixel coordinates."""
    out = np.empty(len(xs), dtype=np.float32)
    for i in range(0, len(xs), batch_size):
        patches = extract_patches(plane, xs[i:i + batch_size], ys[i:i + batch_size])
        out[i:i + batch_size] = network.predict(patches, batch_size)[:, 1]
    return out


def segment_image(network, plane, fov_mask=None, threshold=0.5):
    """Probability map and binary mask; pixels outside the fov score 0."""
    plane = np.asarray(plane)
    inside = np.ones(plane.shape, bool) if fov_mask is None else np.asarray(fov_mask) != 0
    ys, xs = np.nonzero(inside)
    prob = np.zeros(plane.shape, dtype=np.float32)
    prob[ys, xs] = score_pixels(network, plane, xs, ys)
    mask = (prob >= threshold) & inside
    return prob, mask


def probability_to_pgm(prob):
    return np.floor(np.clip(prob, 0, 1) * 255 + 0.5).astype(np.uint8)


# ------------------------------------------------------------ cross-validation


@dataclass
class FoldResult:
    fold: int
    train_ids: list
    test_ids: list
    reports: dict = field(default_factory=dict)  # variant -> MetricsReport
    failed: str | None = None
    conv_removal: float | None = None
    flags: list = field(default_factory=list)


@dataclass
class XvalReport:
    folds: list
    pooled: dict  # variant -> MetricsReport over all test pixels of all folds
    mean: dict  # variant -> {metric: (mean, std)}

    def table_rows(self):
        """Rows of (fold, variant, sen, spe, acc, dice, auc)."""
        keys = ("sen", "spe", "acc", "dice", "auc")
        rows = []
        for f in self.folds:
            for v in VARIANTS:
                if f.failed:
                    rows.append((f.fold, v) + (None,) * len(keys) + (f.failed,))
                else:
                    d = f.reports[v].as_dict()
                    rows.append((f.fold, v) + tuple(d[k] for k in keys) + ("",))
        for v in VARIANTS:
            if v in self.mean:
                rows.append(("mean", v) + tuple(self.mean[v].get(k, (None,))[0] for k in keys) + ("",))
                rows.append(("std", v) + tuple(self.mean[v].get(k, (None, None))[1] for k in keys) + ("",))
            if v in self.pooled:
                d = self.pooled[v].as_dict()
                rows.append(("pooled", v) + tuple(d[k] for k in keys) + ("",))
        return rows


def _test_pixels(plane, label, fov, max_pixels, rng):
    inside = np.ones(plane.shape, bool) if fov is None else np.asarray(fov) != 0
    ys, xs = np.nonzero(inside)
    if max_pixels and len(ys) > max_pixels:
        pick = np.sort(rng.choice(len(ys), max_pixels, replace=False))
        ys, xs = ys[pick], xs[pick]
    return xs, ys, vessel_map(label)[ys, xs]


def cross_validate(planes, label_maps, cfg, fov_masks=None, image_ids=None, progress=None):
    """k-fold evaluation of the original, quantized and pruned-quantized nets.

    Folds split by image.  Each fold trains a baseline on patches from its
    training images, then compresses it; test pixels come only from the
    fold's test images.
    """
    from .compress import conv_removal_fraction
    from .pipeline import make_datasets, run_compression, train_baseline

    n = len(planes)
    if image_ids is None:
        image_ids = [str(i) for i in range(n)]
    if fov_masks is None:
        fov_masks = [None] * n
    index = {iid: i for i, iid in enumerate(image_ids)}
    split = split_folds(image_ids, cfg.folds, cfg.seed)

    folds = []
    scores = {v: [] for v in VARIANTS}
    truth = []
    for fi in range(split.k):
        train_ids, test_ids = split.train_test(fi)
        result = FoldResult(fi, train_ids, test_ids)
        folds.append(result)
        tr = [index[i] for i in train_ids]
        train, val = make_datasets([planes[i] for i in tr], [label_maps[i] for i in tr], cfg,
                                   [fov_masks[i] for i in tr], train_ids, seed_offset=fi)
        try:
            base, _ = train_baseline(train, val, cfg)
            quant, pruned = run_compression(base, train, val, cfg)
        except TrainingDiverged as exc:
            result.failed = f"diverged at step {exc.step}"
            log.warning("fold %d failed: %s", fi, result.failed)
            continue
        result.conv_removal = conv_removal_fraction(pruned.network)
        result.flags = quant.flags + pruned.flags
        nets = dict(zip(VARIANTS, (base, quant.network, pruned.network)))

        rng = np.random.default_rng([cfg.seed, fi, 3])
        pix = [_test_pixels(planes[index[i]], label_maps[index[i]], fov_masks[index[i]],
                            cfg.eval_max_pixels, rng) for i in test_ids]
        fold_truth = np.concatenate([p[2] for p in pix])
        truth.append(fold_truth)
        for v, net in nets.items():
            s = np.concatenate([score_pixels(net, planes[index[i]], xs, ys)
                                for i, (xs, ys, _) in zip(test_ids, pix)])
            scores[v].append(s)
            result.reports[v] = evaluate_scores(s, fold_truth, cfg.mask_threshold)
        if progress is not None:
            progress(result)

    ok = [f for f in folds if not f.failed]
    pooled, mean = {}, {}
    if ok:
        all_truth = np.concatenate(truth)
        for v in VARIANTS:
            pooled[v] = evaluate_scores(np.concatenate(scores[v]), all_truth, cfg.mask_threshold)
            mean[v] = {}
            for key in ("sen", "spe", "acc", "dice", "auc"):
                vals = [getattr(f.reports[v], key) for f in ok]
                vals = [x for x in vals if x is not None]
                if vals:
                    mean[v][key] = (float(np.mean(vals)), float(np.std(vals)))
    return XvalReport(folds, pooled, mean)


def fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.4f}"
    return str(x)
