"""Weight quantization and convolution pruning, each with its retraining loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .netcore import accuracy, apply_mask, ternary_sign, train_epochs

log = logging.getLogger(__name__)


class DegenerateLayerError(ValueError):
    """A layer has no active weights left."""


class PipelineOrderError(RuntimeError):
    """Pruning was requested before the dense layers were quantized."""


def _check_finite(w):
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("non-finite weight value")
    return w


def binarize_deterministic(w):
    """+1 where w >= 0, -1 elsewhere."""
    w = _check_finite(w)
    return np.where(w >= 0, 1, -1).astype(np.int8)


def hard_sigmoid(x):
    return np.clip((np.asarray(x, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def binarize_stochastic(w, rng):
    """+1 with probability hard_sigmoid(w), else -1, independently per weight."""
    w = np.asarray(w)
    p = hard_sigmoid(w)
    return np.where(rng.random(w.shape) < p, 1, -1).astype(np.int8)


def ternarize(w):
    """Three-way sign: -1, 0, +1."""
    return ternary_sign(_check_finite(w).astype(np.float64)).astype(np.int8)


@dataclass
class CompressionSchedule:
    quant_rounds: int = 5
    prune_rounds: int = 3
    retrain_epochs_per_round: int = 1
    prune_k: float = 1.0
    threshold_mode: str = "stddev"
    tolerance: float = 0.01
    # ternary weights are unscaled, so retraining needs a smaller step than
    # the baseline training
    retrain_learning_rate: float = 0.001
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.quant_rounds, self.prune_rounds, self.retrain_epochs_per_round) < 1:
            raise ValueError("round and epoch counts must be >= 1")
        if self.prune_k < 0:
            raise ValueError("prune_k must be >= 0")
        if self.threshold_mode not in ("variance", "stddev"):
            raise ValueError(f"threshold_mode must be 'variance' or 'stddev', got {self.threshold_mode!r}")
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be >= 0")
        if not self.retrain_learning_rate >= 0:
            raise ValueError("retrain_learning_rate must be >= 0")


@dataclass
class CompressionResult:
    network: object
    history: list = field(default_factory=list)
    baseline_accuracy: float = float("nan")
    tolerance_met: bool = True
    flags: list = field(default_factory=list)


def quantize_layers(network, include_conv=False):
    for layer in network.param_layers():
        if layer.kind == "dense" or include_conv:
            layer.quantized = True
    return network


def is_dense_quantized(network):
    dense = network.dense_layers()
    return bool(dense) and all(l.quantized for l in dense)


def quantize_retrain(network, train_data, val_data, schedule, include_conv=False):
    """Ternarize the dense layers and retrain until validation accuracy is
    back within ``schedule.tolerance`` of the pre-quantization baseline.

    Retraining updates the shadow weights; every forward pass uses their
    ternary code.  ``include_conv`` quantizes convolutions too.  Returns the
    best network seen; ``tolerance_met`` is False if no round recovered.
    History rows are (round, val_accuracy); round 0 is before retraining.
    """
    net = network.copy()
    baseline = accuracy(net, *val_data)
    quantize_layers(net, include_conv)
    acc = accuracy(net, *val_data)
    history = [(0, acc)]
    log.info("quantize round 0: val acc %.4f (baseline %.4f)", acc, baseline)
    best, best_acc = net.copy(), acc
    rng = np.random.default_rng(schedule.seed)
    rnd = 0
    while baseline - acc > schedule.tolerance and rnd < schedule.quant_rounds:
        rnd += 1
        train_epochs(net, *train_data, schedule.retrain_epochs_per_round,
                     schedule.retrain_learning_rate, schedule.batch_size, rng=rng)
        acc = accuracy(net, *val_data)
        history.append((rnd, acc))
        log.info("quantize round %d: val acc %.4f", rnd, acc)
        if acc > best_acc:
            best, best_acc = net.copy(), acc
    met = baseline - best_acc <= schedule.tolerance
    result = CompressionResult(best, history, baseline, met)
    if not met:
        result.flags.append("tolerance not met")
        log.warning("quantization: tolerance not met after %d rounds (best %.4f vs %.4f)",
                    rnd, best_acc, baseline)
    return result


def compute_prune_threshold(weights, k, mode="stddev", mask=None):
    """k times the population variance (or stddev) of the active weights."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if mask is not None:
        w = w[np.asarray(mask).reshape(-1) != 0]
    if w.size == 0:
        raise DegenerateLayerError("no active weights to compute a threshold from")
    var = float(np.var(w))
    if mode == "variance":
        return k * var
    if mode == "stddev":
        return k * math.sqrt(var)
    raise ValueError(f"unknown threshold mode {mode!r}")


def prune_layer(layer, k, mode):
    """Shrink the layer mask to |w| >= threshold.  Returns the threshold."""
    mask = layer.mask if layer.mask is not None else np.ones_like(layer.weight)
    tau = compute_prune_threshold(layer.weight, k, mode, mask)
    new = mask * (np.abs(layer.weight) >= tau)
    layer.mask = new.astype(layer.weight.dtype)
    layer.weight = apply_mask(layer.weight, layer.mask)
    return tau


def prune_retrain(network, train_data, val_data, schedule):
    """Magnitude-prune every conv layer, then retrain, for up to
    ``schedule.prune_rounds`` rounds.

    A round whose retrained validation accuracy drops more than
    ``schedule.tolerance`` below the entry accuracy is rolled back and ends
    the loop; so does a round that would empty a layer.  Dense layers stay
    ternary throughout.  History rows: (round, layer, threshold,
    active_count, val_accuracy).
    """
    if not is_dense_quantized(network):
        raise PipelineOrderError("dense layers must be quantized before conv pruning")
    net = network.copy()
    baseline = accuracy(net, *val_data)
    result = CompressionResult(net, [], baseline)
    if schedule.prune_k == 0:
        result.flags.append("k=0: nothing pruned")
        log.warning("prune_k is 0; network left unchanged")
        return result
    rng = np.random.default_rng(schedule.seed)
    convs = [i for i, l in enumerate(net.layers) if l.kind == "conv"]
    for rnd in range(1, schedule.prune_rounds + 1):
        trial = net.copy()
        before = [trial.layers[i].active_count for i in convs]
        taus = [prune_layer(trial.layers[i], schedule.prune_k, schedule.threshold_mode)
                for i in convs]
        after = [trial.layers[i].active_count for i in convs]
        if min(after) == 0:
            result.flags.append(f"round {rnd}: layer fully pruned, round aborted")
            log.warning("prune round %d would remove every weight of a layer; aborted", rnd)
            break
        if after == before:
            log.info("prune round %d removed nothing; stopping", rnd)
            break
        train_epochs(trial, *train_data, schedule.retrain_epochs_per_round,
                     schedule.retrain_learning_rate, schedule.batch_size, rng=rng)
        acc = accuracy(trial, *val_data)
        numbers = net.table_numbers()
        rows = [(rnd, numbers[i], tau, n, acc) for i, tau, n in zip(convs, taus, after)]
        if baseline - acc > schedule.tolerance:
            result.flags.append(f"round {rnd}: accuracy {acc:.4f} below tolerance, rolled back")
            log.info("prune round %d: val acc %.4f below tolerance; rolled back", rnd, acc)
            result.history.extend((*r, "rolled back") for r in rows)
            break
        result.history.extend((*r, "kept") for r in rows)
        log.info("prune round %d: active %s, val acc %.4f", rnd, after, acc)
        net = trial
    result.network = net
    return result


def sparsity_report(network):
    """Per parameter layer: counts, removal fraction, and ternary histogram for
    quantized layers."""
    rows = []
    numbers = network.table_numbers()
    for idx, layer in enumerate(network.layers):
        if layer.kind not in ("conv", "dense"):
            continue
        total = layer.param_count
        active = layer.active_count
        row = {
            "layer": numbers[idx],
            "kind": layer.kind,
            "original_count": total,
            "active_count": active,
            "removal_fraction": 1.0 - active / total,
            "quantized": layer.quantized,
        }
        if layer.quantized:
            code = layer.ternary_code()
            row["ternary_histogram"] = {v: int(np.count_nonzero(code == v)) for v in (-1, 0, 1)}
        rows.append(row)
    return rows


def conv_removal_fraction(network):
    convs = network.conv_layers()
    total = sum(l.param_count for l in convs)
    return 1.0 - sum(l.active_count for l in convs) / total if total else 0.0
