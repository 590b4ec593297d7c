"""Plain-text ``key=value`` run configuration."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .compress import CompressionSchedule
from .errors import ConfigError
from .preprocess import SamplingPolicy


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _fraction(v):
    return 0 < v < 1


def _odd3(v):
    return v >= 3 and v % 2 == 1


@dataclass
class RunConfig:
    seed: int = 0
    learning_rate: float = 0.01
    batch_size: int = 64
    epochs: int = 20
    samples_per_image: int = 1000
    vessel_fraction: float = 0.5
    val_fraction: float = 0.1
    eq_window: int = 31
    quant_rounds: int = 5
    prune_rounds: int = 1
    retrain_epochs: int = 1
    retrain_learning_rate: float = 0.001
    prune_k: float = 1.0
    threshold_mode: str = "stddev"
    tolerance: float = 0.01
    folds: int = 5
    mask_threshold: float = 0.5
    eval_max_pixels: int = 0  # per test image; 0 evaluates every in-fov pixel
    synthetic_images: int = 10
    synthetic_size: int = 96
    threads: int = 0
    data_dir: str = ""
    fov_dir: str = ""
    out_dir: str = "."

    _checks = {
        "learning_rate": (_nonneg, ">= 0"),
        "batch_size": (_positive, ">= 1"),
        "epochs": (_positive, ">= 1"),
        "samples_per_image": (_positive, ">= 1"),
        "vessel_fraction": (_fraction, "in (0, 1)"),
        "val_fraction": (_fraction, "in (0, 1)"),
        "eq_window": (_odd3, "odd and >= 3"),
        "quant_rounds": (_positive, ">= 1"),
        "prune_rounds": (_positive, ">= 1"),
        "retrain_epochs": (_positive, ">= 1"),
        "retrain_learning_rate": (_nonneg, ">= 0"),
        "prune_k": (_nonneg, ">= 0"),
        "threshold_mode": (lambda v: v in ("variance", "stddev"), "'variance' or 'stddev'"),
        "tolerance": (_nonneg, ">= 0"),
        "folds": (lambda v: v >= 2, ">= 2"),
        "mask_threshold": (_nonneg, ">= 0"),
        "eval_max_pixels": (_nonneg, ">= 0"),
        "synthetic_images": (lambda v: v >= 2, ">= 2"),
        "synthetic_size": (lambda v: v >= 9, ">= 9"),
        "threads": (_nonneg, ">= 0"),
        "seed": (_nonneg, ">= 0"),
    }

    def __post_init__(self):
        for name, (ok, desc) in self._checks.items():
            value = getattr(self, name)
            if isinstance(value, float) and math.isnan(value) or not ok(value):
                raise ConfigError(f"config key {name}={value!r} must be {desc}")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def parse(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _convert(key, value, types[key])
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return type(self)(**values)

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def schedule(self):
        return CompressionSchedule(
            quant_rounds=self.quant_rounds,
            prune_rounds=self.prune_rounds,
            retrain_epochs_per_round=self.retrain_epochs,
            prune_k=self.prune_k,
            threshold_mode=self.threshold_mode,
            tolerance=self.tolerance,
            retrain_learning_rate=self.retrain_learning_rate,
            batch_size=self.batch_size,
            seed=self.seed,
        )

    def sampling(self, seed_offset=0):
        return SamplingPolicy(self.samples_per_image, self.vessel_fraction, self.seed + seed_offset)


def _convert(key, value, typ):
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {value!r} as {typ}") from None
    return value
