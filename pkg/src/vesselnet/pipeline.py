"""Training stages shared by the CLI and the cross-validation harness."""
from __future__ import annotations

import logging

import numpy as np

from . import compress
from .netcore import reference_architecture, train_epochs
from .preprocess import build_dataset, enhance

log = logging.getLogger(__name__)


def enhance_all(images, window):
    return [enhance(im, window) for im in images]


def make_datasets(planes, label_maps, cfg, fov_masks=None, image_ids=None, seed_offset=0):
    """Patch dataset from training images, split into (train, val)."""
    ds = build_dataset(planes, label_maps, cfg.sampling(seed_offset), fov_masks, image_ids)
    rng = np.random.default_rng([cfg.seed, seed_offset, 1])
    order = rng.permutation(len(ds))
    n_val = max(1, int(round(len(ds) * cfg.val_fraction))) if len(ds) > 1 else 0
    return ds.subset(np.sort(order[n_val:])), ds.subset(np.sort(order[:n_val]))


def train_baseline(train, val, cfg, log_epoch=None):
    """Fresh reference network trained with plain SGD."""
    net = reference_architecture(seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 2])
    history = train_epochs(net, *train.xy, cfg.epochs, cfg.learning_rate, cfg.batch_size,
                           rng=rng, val=val.xy, log=log_epoch)
    return net, history


def run_compression(net, train, val, cfg):
    """Quantize the dense layers, then prune the conv layers."""
    schedule = cfg.schedule()
    quant = compress.quantize_retrain(net, train.xy, val.xy, schedule)
    pruned = compress.prune_retrain(quant.network, train.xy, val.xy, schedule)
    return quant, pruned
