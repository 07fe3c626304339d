"""Experiment configuration: nested dataclasses with a strict JSON round trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigurationError
from .generator import GeneratorSpec, ShiftSpec
from .inversion import InversionConfig
from .losses import LossWeights


@dataclass(frozen=True)
class TargetConfig:
    """Target set: ``n_target`` training images plus a held-out evaluation split.

    The pool holds ``n_target / (1 - holdout_fraction)`` images (rounded) and the
    held-out part is fixed before inversion.
    """

    shift: ShiftSpec = ShiftSpec(kind="mixture", separation=1.0, spread=0.3)
    n_target: int = 256
    holdout_fraction: float = 0.4

    def __post_init__(self):
        if int(self.n_target) != self.n_target or self.n_target < 2:
            raise ConfigurationError(f"n_target must be an integer >= 2, got {self.n_target!r}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigurationError(f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction!r}")

    @property
    def n_holdout(self) -> int:
        return max(2, int(round(self.n_target * self.holdout_fraction / (1.0 - self.holdout_fraction))))


@dataclass(frozen=True)
class DiffusionConfig:
    """Sampler architecture, schedule and optimization.

    ``steps``, when set, replaces ``epochs`` with the number of epochs needed to
    reach that many optimizer steps, so runs on different set sizes see the
    same number of updates.
    """

    T: int = 200
    widths: tuple[int, ...] = (8, 12, 16, 16)
    epochs: int = 100
    steps: int | None = None
    batch_size: int = 16
    lr: float = 1e-3
    clip_z0: float | None = 4.0
    ema_decay: float | None = 0.999
    dtype: str = "float32"
    mse_target: str = "noise"
    aux_stride: int = 1
    aux_max_t: int | None = 20
    mix_source: str = "prior"
    n_samples: int = 256

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        for name in ("T", "epochs", "batch_size", "n_samples", "aux_stride"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if self.steps is not None and (int(self.steps) != self.steps or self.steps < 1):
            raise ConfigurationError(f"steps must be None or a positive integer, got {self.steps!r}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr!r}")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ConfigurationError(f"ema_decay must be None or in (0, 1), got {self.ema_decay!r}")

    def epochs_for(self, n: int) -> int:
        if self.steps is None:
            return self.epochs
        per_epoch = max(1, n // min(self.batch_size, n))
        return -(-self.steps // per_epoch)


@dataclass(frozen=True)
class MetricConfig:
    k: int = 5
    splits: int = 5
    is_splits: int = 10
    backend: str | None = None

    def __post_init__(self):
        if self.k < 1 or self.splits < 1 or self.is_splits < 1:
            raise ConfigurationError("k, splits and is_splits must be >= 1")
        if self.backend not in (None, "numba", "numpy"):
            raise ConfigurationError(f"backend must be null, 'numba' or 'numpy', got {self.backend!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorSpec = GeneratorSpec()
    target: TargetConfig = TargetConfig()
    inversion: InversionConfig = InversionConfig(step_size=0.1)
    diffusion: DiffusionConfig = DiffusionConfig()
    losses: LossWeights = LossWeights()
    metrics: MetricConfig = MetricConfig()
    extractor_seed: int = 7
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.losses.k > self.diffusion.batch_size:
            raise ConfigurationError(
                f"tangent dimensionality k={self.losses.k} exceeds batch size {self.diffusion.batch_size}")

    # -- serialization
    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _from_plain(cls, d, "config")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        return cls.from_json(text)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"diffusion.epochs": 5})``."""
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *head, last = key.split(".")
            for part in head:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigurationError(f"unknown config field {key!r}")
                node = node[part]
            if last not in node:
                raise ConfigurationError(f"unknown config field {key!r}")
            node[last] = _to_plain(value)
        return type(self).from_dict(d)

    # -- hashing
    def stage_hash(self, stage: int) -> str:
        """Hash of the fields that determine stage ``stage`` (1, 2 or 3) and everything before it."""
        d = self.to_dict()
        s1 = ("generator", "target", "inversion", "extractor_seed", "seed")
        parts = {1: s1, 2: s1 + ("diffusion", "losses"), 3: s1 + ("diffusion", "losses", "metrics")}
        if stage not in parts:
            raise ConfigurationError(f"stage must be 1, 2 or 3, got {stage!r}")
        blob = json.dumps({k: d[k] for k in parts[stage]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def derive_seed(self, name: str) -> int:
        """Independent, stable sub-seed for one consumer of randomness."""
        return int(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def _to_plain(obj: Any):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _from_plain(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls, name, None) if not isinstance(names[name].default, dataclasses._MISSING_TYPE) \
            else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_plain(type(default), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f"invalid {where}: {e}") from e
