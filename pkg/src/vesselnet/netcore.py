"""Small numpy CNN engine: 3x3 same-padded convolutions, ceil-mode 2x2 max
pooling, dense layers, ReLU and softmax, with backpropagation and SGD.

Feature maps are laid out height x width x channels; batched arrays carry a
leading sample axis.  Everything trains in float32.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


def apply_mask(w, mask):
    """Zero masked positions (as +0.0, so the result is bit-stable)."""
    return np.where(mask != 0, w, 0).astype(w.dtype, copy=False)


def ternary_sign(w):
    # three-way sign; -0.0 maps to +0.0
    return (np.sign(w) + 0).astype(w.dtype, copy=False)


# ---------------------------------------------------------------- primitives


def _as_batch(x, rank):
    x = np.asarray(x)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def _im2col3(x):
    """(N,H,W,C) -> (N,H,W,9*C) with columns ordered (ky, kx, c)."""
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, :, ky * 3 + kx, :] = xp[:, ky:ky + h, kx:kx + w, :]
    return cols.reshape(n, h, w, 9 * c)


def _col2im3(dcols, c):
    n, h, w, _ = dcols.shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky:ky + h, kx:kx + w, :] += dcols[:, :, :, ky * 3 + kx, :]
    return dxp[:, 1:-1, 1:-1, :]


def _check_conv(x, weights, bias, mask):
    if weights.ndim != 4 or weights.shape[:2] != (3, 3):
        raise ShapeError(f"conv weights must be 3x3xCinxCout, got {weights.shape}")
    if x.shape[-1] != weights.shape[2]:
        raise ShapeError(
            f"input channels do not match weights: input {x.shape}, weights {weights.shape}")
    if bias.shape != (weights.shape[3],):
        raise ShapeError(f"bias {bias.shape} does not match weights {weights.shape}")
    if mask is not None and mask.shape != weights.shape:
        raise ShapeError(f"mask {mask.shape} does not match weights {weights.shape}")


def conv2d_forward(x, weights, bias, mask=None):
    """Same-padded 3x3 convolution of an H x W x Cin map (or a batch of them)."""
    weights = np.asarray(weights)
    bias = np.asarray(bias)
    _check_conv(np.asarray(x), weights, bias, mask)
    xb, single = _as_batch(x, 4)
    if mask is not None:
        weights = weights * mask
    cin, cout = weights.shape[2], weights.shape[3]
    out = _im2col3(xb) @ weights.reshape(9 * cin, cout) + bias
    return out[0] if single else out


def _pool_windows(x):
    n, h, w, c = x.shape
    h2, w2 = -(-h // 2), -(-w // 2)
    if h % 2 or w % 2:
        xp = np.full((n, 2 * h2, 2 * w2, c), -np.inf, dtype=x.dtype)
        xp[:, :h, :w, :] = x
    else:
        xp = x
    # (N, H2, W2, C, 4), window elements in row-major order
    return xp.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)


def maxpool2d(x):
    """2x2 stride-2 max pooling; overhanging edge windows use in-bounds elements only."""
    xb, single = _as_batch(x, 4)
    out = _pool_windows(xb).max(axis=-1)
    return out[0] if single else out


def dense_forward(x, weights, bias):
    """out = W.x + b with W stored fan_in x fan_out."""
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if xb.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"dense fan-in mismatch: input length {xb.shape[1]}, weights {weights.shape}")
    out = xb @ weights + bias
    return out[0] if single else out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


# -------------------------------------------------------------------- layers


@dataclass
class Input:
    shape: tuple
    kind = "input"

    def out_shape(self, in_shape):
        return tuple(self.shape)


@dataclass
class ReLU:
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0), x > 0

    def backward(self, dout, cache):
        return dout * cache


@dataclass
class Softmax:
    kind = "softmax"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return softmax(x), None


@dataclass
class MaxPool:
    kind = "maxpool"

    def out_shape(self, in_shape):
        h, w, c = in_shape
        return (-(-h // 2), -(-w // 2), c)

    def forward(self, x):
        win = _pool_windows(x)
        # argmax returns the first maximal element: row-major tie rule
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, dout, cache):
        shape, idx = cache
        n, h, w, c = shape
        h2, w2 = idx.shape[1], idx.shape[2]
        dwin = np.zeros(idx.shape + (4,), dtype=dout.dtype)
        np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
        dxp = dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return dxp.reshape(n, 2 * h2, 2 * w2, c)[:, :h, :w, :]


@dataclass
class ParamLayer:
    """Shared state of conv and dense layers.

    ``weight`` holds the full-precision (shadow) weights.  ``mask`` zeroes
    pruned positions; ``quantized`` makes the forward pass use the ternary
    code of the masked shadow weights.
    """

    size: int
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    mask: np.ndarray | None = None
    quantized: bool = False

    def effective_weight(self):
        w = self.weight
        if self.mask is not None:
            w = apply_mask(w, self.mask)
        if self.quantized:
            w = ternary_sign(w)
        return w

    def ternary_code(self):
        w = self.weight if self.mask is None else apply_mask(self.weight, self.mask)
        return ternary_sign(w).astype(np.int8)

    @property
    def param_count(self):
        return int(self.weight.size)

    @property
    def active_count(self):
        if self.mask is None:
            return self.param_count
        return int(np.count_nonzero(self.mask))


@dataclass
class Conv(ParamLayer):
    kind = "conv"

    def out_shape(self, in_shape):
        h, w, _ = in_shape
        return (h, w, self.size)

    def weight_shape(self, in_shape):
        return (3, 3, in_shape[2], self.size)

    def forward(self, x):
        w = self.effective_weight()
        _check_conv(x, w, self.bias, None)
        cols = _im2col3(x)
        out = cols @ w.reshape(-1, self.size) + self.bias
        return out, (cols, w, x.shape[-1])

    def backward(self, dout, cache):
        cols, w, cin = cache
        d2 = dout.reshape(-1, self.size)
        dw = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(w.shape)
        db = d2.sum(axis=0)
        dx = _col2im3(dout @ w.reshape(-1, self.size).T, cin)
        return dx, dw, db


@dataclass
class Dense(ParamLayer):
    kind = "dense"

    def out_shape(self, in_shape):
        return (self.size,)

    def weight_shape(self, in_shape):
        return (int(np.prod(in_shape)), self.size)

    def forward(self, x):
        xf = x.reshape(x.shape[0], -1)
        w = self.effective_weight()
        if xf.shape[1] != w.shape[0]:
            raise ShapeError(f"dense fan-in mismatch: input {x.shape}, weights {w.shape}")
        return xf @ w + self.bias, (xf, w, x.shape)

    def backward(self, dout, cache):
        xf, w, in_shape = cache
        return (dout @ w.T).reshape(in_shape), xf.T @ dout, dout.sum(axis=0)


# ------------------------------------------------------------------- network


# layer kinds that get a numbered row in the architecture table
TABLE_KINDS = ("input", "conv", "maxpool", "dense")


@dataclass
class Network:
    layers: list = field(default_factory=list)

    @property
    def input_shape(self):
        return tuple(self.layers[0].shape)

    def param_layers(self):
        return [l for l in self.layers if isinstance(l, ParamLayer)]

    def conv_layers(self):
        return [l for l in self.layers if l.kind == "conv"]

    def dense_layers(self):
        return [l for l in self.layers if l.kind == "dense"]

    def shape_chain(self):
        """Output shape after every layer, starting with the input."""
        shapes = []
        shape = None
        for layer in self.layers:
            shape = layer.out_shape(shape)
            shapes.append(shape)
        return shapes

    def table_numbers(self):
        """Layer index -> 1-based row number in the architecture table, where
        activations do not get rows of their own."""
        numbers, n = {}, 0
        for i, layer in enumerate(self.layers):
            if layer.kind in TABLE_KINDS:
                n += 1
                numbers[i] = n
        return numbers

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        net = self.copy()
        for layer in net.param_layers():
            layer.weight = layer.weight.astype(dtype)
            layer.bias = layer.bias.astype(dtype)
            if layer.mask is not None:
                layer.mask = layer.mask.astype(dtype)
        return net

    @property
    def ends_in_softmax(self):
        return self.layers[-1].kind == "softmax"

    # -- forward / backward

    def _run(self, x, keep):
        caches = []
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects input {self.input_shape}, got {x.shape[1:]}")
        for layer in self.layers[1:]:
            x, cache = layer.forward(x)
            if keep:
                caches.append(cache)
        return x, caches

    def predict(self, x, batch_size=4096):
        """Batched forward pass; returns the final layer's output."""
        params = self.param_layers()
        x = np.asarray(x, dtype=params[0].weight.dtype if params else DTYPE)
        if x.ndim == len(self.input_shape):
            x = x[None]
        outs = [self._run(x[i:i + batch_size], keep=False)[0]
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs) if outs else np.zeros((0,) + self.shape_chain()[-1])

    def loss(self, x, y):
        out, _ = self._run(x, keep=False)
        n = x.shape[0]
        if self.ends_in_softmax:
            p = out[np.arange(n), np.asarray(y, dtype=np.int64)]
            return float(-np.mean(np.log(np.maximum(p, 1e-30))))
        diff = out - np.asarray(y, dtype=out.dtype)
        return float(0.5 * np.sum(diff * diff) / n)

    def loss_and_grads(self, x, y):
        """Mean loss over the batch and (dW, db) for each parameter layer.

        Networks ending in softmax use cross-entropy with integer labels;
        otherwise half the squared error against target vectors.
        """
        out, caches = self._run(x, keep=True)
        n = x.shape[0]
        if self.ends_in_softmax:
            y = np.asarray(y, dtype=np.int64)
            p = out
            loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], 1e-30))))
            d = p.copy()
            d[np.arange(n), y] -= 1
            d /= n
            stop = len(self.layers) - 2
        else:
            diff = out - np.asarray(y, dtype=out.dtype)
            loss = float(0.5 * np.sum(diff * diff) / n)
            d = diff / n
            stop = len(self.layers) - 1
        grads = {}
        for i in range(stop, 0, -1):
            layer = self.layers[i]
            cache = caches[i - 1]
            if isinstance(layer, ParamLayer):
                d, dw, db = layer.backward(d, cache)
                if layer.mask is not None:
                    dw = apply_mask(dw, layer.mask)
                grads[id(layer)] = (dw, db)
            else:
                d = layer.backward(d, cache)
        return loss, [grads[id(l)] for l in self.param_layers()]


def reference_architecture(seed=0):
    """1x9x9 input -> conv64 -> pool -> conv32 -> pool -> dense50 -> dense20 -> dense2."""
    return build_network((9, 9, 1), [
        ("conv", 64), ("relu",), ("maxpool",),
        ("conv", 32), ("relu",), ("maxpool",),
        ("dense", 50), ("relu",),
        ("dense", 20), ("relu",),
        ("dense", 2), ("softmax",),
    ], seed=seed)


_LAYER_TYPES = {"conv": Conv, "dense": Dense, "maxpool": MaxPool, "relu": ReLU,
                "softmax": Softmax}


def build_network(input_shape, spec, seed=0):
    """Build and initialize a network from ``[(kind, size?), ...]``."""
    rng = np.random.default_rng(seed)
    layers = [Input(tuple(input_shape))]
    shape = tuple(input_shape)
    for entry in spec:
        kind = entry[0]
        if kind not in _LAYER_TYPES:
            raise ValueError(f"unknown layer kind {kind!r}")
        if kind in ("conv", "dense"):
            layer = _LAYER_TYPES[kind](size=int(entry[1]))
            wshape = layer.weight_shape(shape)
            if kind == "conv":
                fan_in, fan_out = 9 * wshape[2], 9 * wshape[3]
            else:
                fan_in, fan_out = wshape
            layer.weight = glorot_uniform(rng, wshape, fan_in, fan_out)
            layer.bias = np.zeros(layer.size, dtype=DTYPE)
        else:
            layer = _LAYER_TYPES[kind]()
        shape = layer.out_shape(shape)
        layers.append(layer)
    return Network(layers)


# ------------------------------------------------------------------ training


def forward(network, patch):
    """Class probabilities for one patch (component 1 = vessel)."""
    return network.predict(np.asarray(patch)[None])[0]


def apply_update(network, grads, learning_rate):
    for layer, (dw, db) in zip(network.param_layers(), grads):
        layer.weight -= np.asarray(learning_rate * dw, dtype=layer.weight.dtype)
        layer.bias -= np.asarray(learning_rate * db, dtype=layer.bias.dtype)
        if layer.mask is not None:
            layer.weight = apply_mask(layer.weight, layer.mask)


def sgd_step(network, x, y, learning_rate, step=0):
    """One SGD step on a mini-batch; returns the batch loss.

    Quantized layers take the straight-through gradient on their shadow
    weights and are re-coded on the next forward pass.
    """
    if len(x) == 0:
        raise ValueError("empty batch")
    loss, grads = network.loss_and_grads(x, y)
    if not math.isfinite(loss):
        raise TrainingDiverged(step, loss)
    apply_update(network, grads, learning_rate)
    return loss


def accuracy(network, x, y, batch_size=4096):
    if len(x) == 0:
        return float("nan")
    p = network.predict(x, batch_size=batch_size)
    return float(np.mean(p.argmax(axis=1) == np.asarray(y)))


def train_epochs(network, x, y, epochs, learning_rate=0.01, batch_size=64, rng=None,
                 val=None, log=None, step0=0):
    """Shuffled mini-batch SGD.  Returns a list of (epoch, mean_loss, val_acc)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    history = []
    step = step0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        losses = []
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            losses.append(sgd_step(network, x[idx], y[idx], learning_rate, step))
            step += 1
        val_acc = accuracy(network, *val) if val is not None else float("nan")
        row = (epoch, float(np.mean(losses)), val_acc)
        history.append(row)
        if log is not None:
            log(*row)
    return history


# -------------------------------------------------------------- verification


def _pattern(net, x):
    _, caches = net._run(x, keep=True)
    parts = []
    for layer, cache in zip(net.layers[1:], caches):
        if layer.kind == "relu":
            parts.append(cache)
        elif layer.kind == "maxpool":
            parts.append(cache[1])
    return parts


def _same_pattern(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check(network, sample, epsilon=1e-3, n_params=200, seed=0, dtype=np.float64):
    """Max relative error between analytic and central-difference gradients.

    Compares ``n_params`` randomly drawn parameters (weights and biases) of
    the shadow weights, masks applied and quantization off.  A draw whose
    +/-epsilon perturbation flips a ReLU or changes a pooling argmax is
    discarded and replaced, since the central difference straddles a kink
    there.  The comparison runs in ``dtype``: float32 central differences at
    epsilon=1e-3 carry loss-rounding noise near 3e-5 in absolute gradient.
    """
    if not 1e-5 <= epsilon <= 1e-2:
        raise ValueError("epsilon must lie in [1e-5, 1e-2]")
    net = network.astype(dtype)
    for layer in net.param_layers():
        layer.quantized = False
        if layer.mask is not None:
            layer.weight = apply_mask(layer.weight, layer.mask)
    x, y = sample
    x = np.asarray(x, dtype=dtype)
    _, grads = net.loss_and_grads(x, y)
    base = _pattern(net, x)

    layers = net.param_layers()
    slots = []
    for li, layer in enumerate(layers):
        slots += [(li, 0, j) for j in range(layer.weight.size)]
        slots += [(li, 1, j) for j in range(layer.bias.size)]
    order = np.random.default_rng(seed).permutation(len(slots))

    worst = 0.0
    checked = 0
    for k in order:
        if checked >= n_params:
            break
        li, which, j = slots[k]
        layer = layers[li]
        analytic = float(grads[li][which].reshape(-1)[j])
        if which == 0 and layer.mask is not None and layer.mask.reshape(-1)[j] == 0:
            if analytic != 0.0:
                return math.inf
            checked += 1
            continue
        flat = (layer.weight if which == 0 else layer.bias).reshape(-1)
        orig = flat[j]
        flat[j] = orig + epsilon
        lp = net.loss(x, y)
        kink = not _same_pattern(base, _pattern(net, x))
        flat[j] = orig - epsilon
        lm = net.loss(x, y)
        kink = kink or not _same_pattern(base, _pattern(net, x))
        flat[j] = orig
        if kink:
            continue
        numeric = (lp - lm) / (2 * epsilon)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
        checked += 1
    return worst
