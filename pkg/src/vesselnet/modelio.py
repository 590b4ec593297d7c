"""Compressed model file format, complexity accounting and STARE loading.

Model file layout, all little-endian::

    "TQNS"  u16 version  u16 layer_count
    per layer: u8 kind
      input:        u8 ndim, u32 dims[ndim]
      conv / dense: u8 encoding, u8 ndim, u32 dims[ndim], weight payload,
                    u32 bias_count, f32 bias[bias_count]
      maxpool / relu / softmax: no payload

Weight payloads by encoding:

    0 dense    f32 per weight, row-major
    1 ternary  2 bits per weight, 4 per byte starting at the low bits;
               00 -> 0, 01 -> +1, 10 -> -1, 11 is forbidden
    2 sparse   1 mask bit per weight (low bit first, padded to a byte),
               then f32 values of the active weights in mask order
"""
from __future__ import annotations

import gzip
import logging
import math
import os
import re
import struct
from dataclasses import dataclass, field

import numpy as np

from .netcore import DTYPE, Conv, Dense, Input, MaxPool, Network, ReLU, Softmax
from .preprocess import FundusImage, read_pnm

log = logging.getLogger(__name__)

MAGIC = b"TQNS"
VERSION = 1

KIND_CODES = {"input": 0, "conv": 1, "maxpool": 2, "dense": 3, "relu": 4, "softmax": 5}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
ENC_DENSE, ENC_TERNARY, ENC_SPARSE = 0, 1, 2
ENCODING_NAMES = {ENC_DENSE: "dense-float32-LE", ENC_TERNARY: "ternary-2bit",
                  ENC_SPARSE: "sparse-masked-float32"}

# code value -> ternary weight; 3 is forbidden
_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


class CorruptModelError(ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


# -------------------------------------------------------------------- packing


def pack_ternary(codes):
    """Pack values in {-1, 0, 1} four to a byte."""
    c = np.asarray(codes).reshape(-1)
    if not np.all((c == -1) | (c == 0) | (c == 1)):
        raise ValueError("ternary codes must be in {-1, 0, 1}")
    bits = np.where(c == 1, 1, np.where(c == -1, 2, 0)).astype(np.uint8)
    bits = np.concatenate([bits, np.zeros((-len(bits)) % 4, np.uint8)]).reshape(-1, 4)
    return (bits[:, 0] | bits[:, 1] << 2 | bits[:, 2] << 4 | bits[:, 3] << 6).astype(np.uint8).tobytes()


def unpack_ternary(data, n=None, offset=0):
    """Inverse of :func:`pack_ternary`; ``n`` defaults to 4 codes per byte."""
    b = np.frombuffer(bytes(data), dtype=np.uint8)
    bits = np.stack([(b >> s) & 3 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    bad = np.nonzero(bits == 3)[0]
    if bad.size:
        raise CorruptModelError("forbidden ternary code 11", offset + int(bad[0]) // 4)
    if n is None:
        n = bits.size
    if np.any(bits[n:]):
        raise CorruptModelError("nonzero ternary padding bits", offset + n // 4)
    return _DECODE[bits[:n]]


def pack_mask(mask):
    return np.packbits(np.asarray(mask).reshape(-1) != 0, bitorder="little").tobytes()


def unpack_mask(data, n):
    return np.unpackbits(np.frombuffer(bytes(data), np.uint8), count=n, bitorder="little")


def _encoding(layer):
    if layer.quantized:
        return ENC_TERNARY
    if layer.mask is not None:
        return ENC_SPARSE
    return ENC_DENSE


def weight_payload_bytes(encoding, n, active):
    if encoding == ENC_DENSE:
        return 4 * n
    if encoding == ENC_TERNARY:
        return math.ceil(n / 4)
    return math.ceil(n / 8) + 4 * active


# ------------------------------------------------------------------ save/load


def encode_model(network):
    out = bytearray(MAGIC)
    out += struct.pack("<HH", VERSION, len(network.layers))
    for layer in network.layers:
        out += struct.pack("<B", KIND_CODES[layer.kind])
        if layer.kind == "input":
            out += struct.pack("<B", len(layer.shape))
            out += struct.pack(f"<{len(layer.shape)}I", *layer.shape)
        elif layer.kind in ("conv", "dense"):
            enc = _encoding(layer)
            shape = layer.weight.shape
            out += struct.pack("<BB", enc, len(shape))
            out += struct.pack(f"<{len(shape)}I", *shape)
            if enc == ENC_TERNARY:
                out += pack_ternary(layer.ternary_code())
            elif enc == ENC_SPARSE:
                m = layer.mask.reshape(-1) != 0
                out += pack_mask(m)
                out += layer.weight.reshape(-1)[m].astype("<f4").tobytes()
            else:
                out += layer.weight.astype("<f4").tobytes()
            out += struct.pack("<I", layer.bias.size)
            out += layer.bias.astype("<f4").tobytes()
    return bytes(out)


def save_model(network, path):
    data = encode_model(network)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        end = self.pos + n
        if end > len(self.data):
            raise CorruptModelError(
                f"truncated file: {what} needs bytes up to {end}, file has {len(self.data)}",
                self.pos)
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_model(data):
    r = _Reader(bytes(data))
    if r.take(4, "magic") != MAGIC:
        raise CorruptModelError("bad magic, not a TQNS model file", 0)
    version, count = r.unpack("<HH", "header")
    if version != VERSION:
        raise CorruptModelError(f"unsupported format version {version}", 4)
    layers = []
    for i in range(count):
        at = r.pos
        (code,) = r.unpack("<B", f"layer {i} kind")
        kind = KIND_NAMES.get(code)
        if kind is None:
            raise CorruptModelError(f"unknown layer kind tag {code}", at)
        if kind == "input":
            (ndim,) = r.unpack("<B", "input rank")
            layers.append(Input(tuple(r.unpack(f"<{ndim}I", "input shape"))))
        elif kind in ("conv", "dense"):
            layers.append(_read_param_layer(r, kind, i))
        else:
            layers.append({"maxpool": MaxPool, "relu": ReLU, "softmax": Softmax}[kind]())
    if r.pos != len(r.data):
        raise CorruptModelError(f"{len(r.data) - r.pos} trailing bytes after last layer", r.pos)
    net = Network(layers)
    _validate(net)
    return net


def _read_param_layer(r, kind, i):
    at = r.pos
    enc, ndim = r.unpack("<BB", f"layer {i} encoding")
    if enc not in ENCODING_NAMES:
        raise CorruptModelError(f"unknown weight encoding {enc}", at)
    shape = r.unpack(f"<{ndim}I", f"layer {i} shape")
    n = int(np.prod(shape))
    mask = None
    if enc == ENC_TERNARY:
        at = r.pos
        codes = unpack_ternary(r.take(math.ceil(n / 4), f"layer {i} ternary codes"), n, at)
        weight = codes.astype(DTYPE)
    elif enc == ENC_SPARSE:
        bits = unpack_mask(r.take(math.ceil(n / 8), f"layer {i} mask"), n)
        active = int(bits.sum())
        vals = np.frombuffer(r.take(4 * active, f"layer {i} active values"), "<f4")
        weight = np.zeros(n, DTYPE)
        weight[bits.astype(bool)] = vals
        mask = bits.astype(DTYPE).reshape(shape)
    else:
        weight = np.frombuffer(r.take(4 * n, f"layer {i} weights"), "<f4").astype(DTYPE)
    (nb,) = r.unpack("<I", f"layer {i} bias count")
    bias = np.frombuffer(r.take(4 * nb, f"layer {i} bias"), "<f4").astype(DTYPE)
    cls = Conv if kind == "conv" else Dense
    return cls(size=int(shape[-1]), weight=weight.reshape(shape), bias=bias, mask=mask,
               quantized=enc == ENC_TERNARY)


def _validate(net):
    if not net.layers or net.layers[0].kind != "input":
        raise CorruptModelError("model must start with an input layer")
    shape = None
    for layer in net.layers:
        if layer.kind in ("conv", "dense"):
            if layer.weight.shape != layer.weight_shape(shape):
                raise CorruptModelError(
                    f"{layer.kind} weights {layer.weight.shape} do not fit input {shape}")
            if layer.bias.shape != (layer.size,):
                raise CorruptModelError(f"bias length {layer.bias.size} != {layer.size}")
        shape = layer.out_shape(shape)


def load_model(path):
    with open(path, "rb") as fh:
        return decode_model(fh.read())


# ----------------------------------------------------------------- complexity


@dataclass
class LayerComplexity:
    layer: int
    kind: str
    param_count: int
    active_count: int
    macs: int
    storage_bytes: int
    original_macs: int
    original_storage_bytes: int
    encoding: str


@dataclass
class ComplexityReport:
    layers: list = field(default_factory=list)

    def total(self, attr):
        return sum(getattr(l, attr) for l in self.layers)

    @property
    def totals(self):
        return {
            "original": {"params": self.total("param_count"), "macs": self.total("original_macs"),
                         "storage_bytes": self.total("original_storage_bytes")},
            "simplified": {"params": self.total("active_count"), "macs": self.total("macs"),
                           "storage_bytes": self.total("storage_bytes")},
        }


def complexity_report(network):
    """Parameter, multiply-accumulate and storage accounting per layer.

    Pruned weights cost nothing.  Storage follows the model file encoding,
    bias included; the original column assumes dense float32 throughout.
    """
    report = ComplexityReport()
    if not network.layers:
        return report
    shapes = network.shape_chain()
    numbers = network.table_numbers()
    for idx, layer in enumerate(network.layers):
        if layer.kind not in ("conv", "dense"):
            continue
        n, active = layer.param_count, layer.active_count
        positions = shapes[idx][0] * shapes[idx][1] if layer.kind == "conv" else 1
        enc = _encoding(layer)
        bias_bytes = 4 * layer.bias.size
        report.layers.append(LayerComplexity(
            layer=numbers[idx], kind=layer.kind, param_count=n, active_count=active,
            macs=positions * active,
            storage_bytes=weight_payload_bytes(enc, n, active) + bias_bytes,
            original_macs=positions * n,
            original_storage_bytes=4 * n + bias_bytes,
            encoding=ENCODING_NAMES[enc],
        ))
    return report


def _maps(shape):
    if len(shape) == 3:
        h, w, c = shape
        return f"{c}M × {h}×{w}N"
    return f"{shape[0]}N"


def architecture_table(network):
    """Rows mirroring the layer / type / maps / filter / weights layout."""
    names = {"input": "Input", "conv": "Convolution", "maxpool": "Max Pooling", "dense": "FC"}
    filt = {"input": "-", "conv": "3×3", "maxpool": "2×2", "dense": "1×1"}
    rows = []
    shapes = network.shape_chain()
    for idx, number in network.table_numbers().items():
        layer, shape = network.layers[idx], shapes[idx]
        if layer.kind in ("conv", "dense"):
            original = str(layer.param_count)
            simplified = "Quantized" if layer.quantized else str(layer.active_count)
        else:
            original = simplified = "-"
        rows.append((number, names[layer.kind], _maps(shape), filt[layer.kind], original, simplified))
    return rows


# ----------------------------------------------------------------------- STARE


_RAW_RE = re.compile(r"^(?P<stem>[^.]+)\.(ppm|pgm)(\.gz)?$", re.IGNORECASE)


def _read_maybe_gz(path):
    if path.lower().endswith(".gz"):
        import io
        with gzip.open(path, "rb") as fh:
            return read_pnm(io.BytesIO(fh.read()))
    return read_pnm(path)


def _find(directory, stem, suffix):
    for ext in (".ppm", ".pgm", ".ppm.gz", ".pgm.gz"):
        p = os.path.join(directory, stem + suffix + ext)
        if os.path.exists(p):
            return p
    return None


def load_stare(directory, fov_dir=None, expected=20):
    """Pair raw images with first-observer labels by file stem.

    ``im0001.ppm`` pairs with ``im0001.ah.ppm`` (gzipped copies accepted).
    Optional field-of-view masks are read from ``fov_dir/<stem>.fov.pgm``.
    Returns a list of (FundusImage, uint8 label plane).
    """
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"data directory not found: {directory}")
    pairs = []
    for name in sorted(os.listdir(directory)):
        m = _RAW_RE.match(name)
        if not m:
            continue
        stem = m.group("stem")
        label_path = _find(directory, stem, ".ah")
        if label_path is None:
            log.warning("image %s has no label file %s.ah.ppm; skipped", name, stem)
            continue
        rgb = _read_maybe_gz(os.path.join(directory, name))
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[..., None], 3, axis=2)
        label = _read_maybe_gz(label_path)
        if label.ndim == 3:
            label = label.max(axis=2)
        if label.shape != rgb.shape[:2]:
            raise ValueError(f"pair {stem}: image {rgb.shape[:2]} and label {label.shape} differ")
        fov = None
        if fov_dir:
            fov_path = _find(fov_dir, stem, ".fov")
            if fov_path is not None:
                fov = _read_maybe_gz(fov_path)
                if fov.ndim == 3:
                    fov = fov.max(axis=2)
        pairs.append((FundusImage(rgb, fov, stem), label))
    if not pairs:
        log.warning("no image/label pairs found in %s", directory)
    elif len(pairs) < expected:
        log.warning("found %d image/label pairs in %s, expected %d", len(pairs), directory, expected)
    return pairs
