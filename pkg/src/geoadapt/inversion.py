"""Stage 1: project target images onto the frozen generator's latent manifold.

The default inverter optimizes latent codes directly with Adam on
``mse_weight * pixel MSE + percep_weight * perceptual distance``. Images are
optimized as one batch, but every image keeps its own moment estimates, step
counter and stopping state, so a batch result equals the per-image result.
Further inverters (e.g. a learned encoder) can be added with
:func:`register_inverter`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import (ConfigurationError, DimensionError, OptimizationError,
                     ValidationError)
from .generator import sample_prior
from .io import load_container, save_container
from .losses import FeatureExtractor, perceptual_distance

_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_BETAS = (0.9, 0.999)
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class InversionConfig:
    """``tolerance`` is relative: an image stops once its loss improved by less
    than ``tolerance * loss`` over the last ``window`` iterations."""

    max_iters: int = 500
    step_size: float = 1e-2
    mse_weight: float = 1.0
    percep_weight: float = 0.1
    init_mode: str = "prior_mean"
    tolerance: float = 1e-5
    seed: int = 0
    window: int = 10
    chunk_size: int = 128
    dtype: str = "float32"
    method: str = "latent_optimization"

    def __post_init__(self):
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise ConfigurationError(f"max_iters must be a non-negative integer, got {self.max_iters!r}")
        if not (math.isfinite(self.step_size) and self.step_size > 0):
            raise ConfigurationError(f"step_size must be positive, got {self.step_size!r}")
        if not (math.isfinite(self.tolerance) and self.tolerance >= 0):
            raise ConfigurationError(f"tolerance must be non-negative, got {self.tolerance!r}")
        for name in ("mse_weight", "percep_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be a non-negative real, got {v!r}")
        if self.init_mode not in ("prior_mean", "prior_sample"):
            raise ConfigurationError(f"init_mode must be prior_mean or prior_sample, got {self.init_mode!r}")
        if self.window < 1 or self.chunk_size < 1:
            raise ConfigurationError("window and chunk_size must be >= 1")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InversionConfig":
        return cls(**d)


@dataclass
class InversionResult:
    latent: np.ndarray
    final_loss: float
    iterations_used: int
    loss_trace: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# registry

_INVERTERS: dict[str, Callable] = {}


def register_inverter(name: str):
    """Decorator registering ``fn(gen, images, cfg, extractor) -> list[InversionResult]``."""

    def deco(fn):
        _INVERTERS[name] = fn
        return fn

    return deco


def available_inverters() -> list[str]:
    return sorted(_INVERTERS)


def get_inverter(name: str) -> Callable:
    try:
        return _INVERTERS[name]
    except KeyError:
        raise ConfigurationError(f"unknown inverter {name!r}; available: {available_inverters()}") from None


# ---------------------------------------------------------------------------
# latent optimization

def _check_images(gen, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(gen.image_shape):
        raise DimensionError(f"expected images of shape (N, {gen.image_shape}), got {x.shape}")
    if not np.isfinite(x).all():
        bad = int(np.flatnonzero(~np.isfinite(x).reshape(len(x), -1).all(1))[0])
        err = ValidationError(f"image {bad} contains non-finite values")
        err.index = bad
        raise err
    return x


def _default_extractor(gen):
    c, h, w = gen.image_shape
    if h != w:
        raise ConfigurationError("default feature extractor needs square images; pass an extractor")
    return FeatureExtractor(in_channels=c, image_size=h)


def _objective(gen, phi, z, x, cfg: InversionConfig) -> torch.Tensor:
    """Per-image loss, shape ``(B,)``."""
    x_hat = gen.generate(z)
    loss = cfg.mse_weight * ((x_hat - x) ** 2).reshape(len(x), -1).mean(1)
    if cfg.percep_weight:
        loss = loss + cfg.percep_weight * perceptual_distance(x, x_hat, phi)
    return loss


def _initial_latents(gen, n: int, cfg: InversionConfig) -> np.ndarray:
    if cfg.init_mode == "prior_mean":
        init = np.asarray(gen.prior_mean, dtype=np.float64)
    else:
        # one shared draw per seed keeps the batch result independent of image order
        init = sample_prior(gen, 1, cfg.seed)[0]
    return np.broadcast_to(init, (n, *gen.latent_shape)).copy()


def _optimize_chunk(gen, phi, x_np, offset: int, cfg: InversionConfig) -> list[InversionResult]:
    dt = _DTYPES[cfg.dtype]
    n = len(x_np)
    x_all = torch.as_tensor(x_np, dtype=dt)
    z = torch.as_tensor(_initial_latents(gen, n, cfg), dtype=dt)
    m, v = torch.zeros_like(z), torch.zeros_like(z)
    b1, b2 = _BETAS
    traces: list[list[float]] = [[] for _ in range(n)]
    active = np.ones(n, dtype=bool)
    used = np.zeros(n, dtype=np.int64)

    def evaluate(idx, need_grad):
        zi = z[idx].clone().requires_grad_(need_grad)
        loss = _objective(gen, phi, zi, x_all[idx], cfg)
        vals = loss.detach().to(torch.float64).numpy()
        bad = ~np.isfinite(vals)
        if bad.any():
            j = int(idx[np.flatnonzero(bad)[0]])
            raise OptimizationError(f"image {offset + j}: loss became non-finite after {used[j]} iterations",
                                    last_finite=z[j].to(torch.float64).numpy().copy(), index=offset + j)
        for j, val in zip(idx, vals):
            traces[j].append(float(val))
        if not need_grad:
            return None
        (grad,) = torch.autograd.grad(loss.sum(), zi)
        return grad

    for _ in range(cfg.max_iters):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        grad = evaluate(idx, True)
        used[idx] += 1
        steps = torch.as_tensor(used[idx], dtype=dt).reshape(-1, 1, 1)
        m[idx] = b1 * m[idx] + (1 - b1) * grad
        v[idx] = b2 * v[idx] + (1 - b2) * grad * grad
        m_hat = m[idx] / (1 - b1 ** steps)
        v_hat = v[idx] / (1 - b2 ** steps)
        z[idx] = z[idx] - cfg.step_size * m_hat / (torch.sqrt(v_hat) + _ADAM_EPS)
        # stopping is decided on the trace so far; the final evaluation below closes it
        for j in idx:
            tr = traces[j]
            if len(tr) > cfg.window:
                gain = tr[-1 - cfg.window] - tr[-1]
                if gain < cfg.tolerance * abs(tr[-1 - cfg.window]):
                    active[j] = False
    with torch.no_grad():
        evaluate(np.arange(n), False)
    out = []
    for j in range(n):
        out.append(InversionResult(latent=z[j].to(torch.float64).numpy().copy(), final_loss=traces[j][-1],
                                   iterations_used=int(used[j]), loss_trace=traces[j]))
    return out


@register_inverter("latent_optimization")
def _latent_optimization(gen, images, cfg: InversionConfig, extractor=None) -> list[InversionResult]:
    phi = extractor if extractor is not None or cfg.percep_weight == 0 else _default_extractor(gen)
    results = []
    for start in range(0, len(images), cfg.chunk_size):
        results.extend(_optimize_chunk(gen, phi, images[start:start + cfg.chunk_size], start, cfg))
    return results


# ---------------------------------------------------------------------------
# public API

def invert_batch(gen, images, cfg: InversionConfig | None = None, extractor=None) -> list[InversionResult]:
    """Invert every image of a batch; results keep the input order.

    The loss trace holds the initial evaluation followed by the loss after
    each update, so ``final_loss == loss_trace[-1]`` and
    ``len(loss_trace) == iterations_used + 1``.
    """
    cfg = cfg or InversionConfig()
    x = _check_images(gen, images)
    if len(x) == 0:
        raise ValidationError("cannot invert an empty batch")
    return get_inverter(cfg.method)(gen, x, cfg, extractor)


def invert(gen, image, cfg: InversionConfig | None = None, extractor=None) -> InversionResult:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"expected a single (C, H, W) image, got shape {x.shape}")
    return invert_batch(gen, x[None], cfg, extractor)[0]


@dataclass
class ReconstructionReport:
    mse: np.ndarray
    perceptual: np.ndarray

    @property
    def mean_mse(self) -> float:
        return float(self.mse.mean())

    @property
    def median_mse(self) -> float:
        return float(np.median(self.mse))

    @property
    def mean_perceptual(self) -> float:
        return float(self.perceptual.mean())

    def to_dict(self) -> dict:
        return {"mean_mse": self.mean_mse, "median_mse": self.median_mse, "max_mse": float(self.mse.max()),
                "mean_perceptual": self.mean_perceptual, "n": int(len(self.mse))}


def reconstruction_report(gen, images, results, extractor=None) -> ReconstructionReport:
    """Per-image pixel MSE and perceptual distance between ``images`` and their reconstructions."""
    x = _check_images(gen, images)
    latents = _latents_of(results)
    if len(latents) != len(x):
        raise ValidationError(f"{len(x)} images but {len(latents)} results")
    if len(x) == 0:
        raise ValidationError("empty reconstruction report")
    phi = extractor if extractor is not None else _default_extractor(gen)
    with torch.no_grad():
        xt = torch.as_tensor(x)
        x_hat = gen.generate(torch.as_tensor(latents))
        mse = ((x_hat - xt) ** 2).reshape(len(x), -1).mean(1).numpy()
        per = perceptual_distance(xt, x_hat, phi).numpy()
    return ReconstructionReport(mse=mse, perceptual=per)


def _latents_of(results) -> np.ndarray:
    if isinstance(results, np.ndarray):
        return np.asarray(results, dtype=np.float64)
    return np.stack([np.asarray(r.latent, dtype=np.float64) for r in results]) if len(results) else np.zeros((0,))


# ---------------------------------------------------------------------------
# persistence

def save_inversions(path, results: list[InversionResult], gen, cfg: InversionConfig, extra: dict | None = None):
    meta = {"kind": "inversions", "generator_checksum": gen.checksum(), "config": cfg.to_dict(),
            "final_losses": [float(r.final_loss) for r in results],
            "iterations_used": [int(r.iterations_used) for r in results]}
    meta.update(extra or {})
    return save_container(path, {"latents": _latents_of(results)}, meta)


def load_inversions(path, generator_checksum: str | None = None) -> tuple[np.ndarray, dict]:
    from .errors import ArtifactIncompatibleError

    arrays, meta = load_container(path, kind="inversions")
    if generator_checksum is not None and meta.get("generator_checksum") != generator_checksum:
        raise ArtifactIncompatibleError("inverted latents were produced by a different generator")
    return arrays["latents"], meta
