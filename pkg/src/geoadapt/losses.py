"""Training objective terms and the frozen perceptual feature stack.

All loss functions take torch tensors (numpy arrays are promoted to float64
tensors) and return 0-d tensors so they can sit inside an autograd graph.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ._frozen import Frozen
from .errors import (ConfigurationError, DimensionError, InsufficientDataError,
                     InsufficientRankError, TrainingError, ValidationError)

TERMS = ("mse", "div", "kl", "geo", "percep")
DEGENERATE_EPS = 1e-8
STD_FLOOR = 1e-6


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _same_shape(a, b, what="inputs"):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite objective.

    ``lambda1..3`` scale the MSE, KL and geometry terms; ``div_weight`` and
    ``percep_weight`` are the implicit unit weights of the diversity and
    perceptual terms, exposed so ablations can switch them off.
    """

    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 0.2
    alpha: float = 0.7
    k: int = 10
    div_weight: float = 1.0
    percep_weight: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "div_weight", "percep_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be a non-negative real, got {v!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigurationError(f"k must be a positive integer, got {self.k!r}")

    def term_weights(self) -> dict[str, float]:
        return {"mse": self.lambda1, "div": self.div_weight, "kl": self.lambda2,
                "geo": self.lambda3, "percep": self.percep_weight}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


# ---------------------------------------------------------------------------
# elementary terms

def mse_loss(z, z_hat) -> torch.Tensor:
    z, z_hat = _t(z), _t(z_hat)
    _same_shape(z, z_hat)
    return ((z - z_hat) ** 2).mean()


def style_mix(z_hat, w, alpha: float, style_rows) -> torch.Tensor:
    """Blend ``w`` into the style rows of ``z_hat``: ``alpha * z_hat + (1 - alpha) * w``."""
    z_hat, w = _t(z_hat), _t(w)
    _same_shape(z_hat, w)
    lo, hi = (style_rows.start, style_rows.stop) if isinstance(style_rows, range) else style_rows
    S = z_hat.shape[-2]
    if not (0 <= lo < hi <= S):
        raise ValidationError(f"style rows [{lo}, {hi}) outside [0, {S})")
    mixed = alpha * z_hat[..., lo:hi, :] + (1.0 - alpha) * w[..., lo:hi, :]
    return torch.cat([z_hat[..., :lo, :], mixed, z_hat[..., hi:, :]], dim=-2)


def diversity_loss(z, z_bar) -> torch.Tensor:
    z, z_bar = _t(z), _t(z_bar)
    _same_shape(z, z_bar)
    return ((z - z_bar) ** 2).reshape(z.shape[0], -1).sum(1).mean()


def _batch_moments(x):
    x = x.reshape(x.shape[0], -1)
    m = x.mean(0)
    var = ((x - m) ** 2).mean(0)
    return m, torch.sqrt(torch.clamp(var, min=STD_FLOOR ** 2))


def kl_loss(z_bar, z) -> torch.Tensor:
    """Mean over dimensions of KL(N(m_bar, s_bar^2) || N(m, s^2)), moments taken over the batch."""
    z_bar, z = _t(z_bar), _t(z)
    _same_shape(z_bar, z)
    if z.shape[0] < 2:
        raise InsufficientDataError("KL term needs a batch of at least 2")
    mb, sb = _batch_moments(z_bar)
    m, s = _batch_moments(z)
    kl = torch.log(s / sb) + (sb ** 2 + (mb - m) ** 2) / (2 * s ** 2) - 0.5
    return kl.mean()


# ---------------------------------------------------------------------------
# tangent machinery

def tangent_vector(a, b) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit difference vectors ``(a - b) / |a - b|`` per sample, and the distances.

    Pairs closer than ``DEGENERATE_EPS`` get a zero vector.
    """
    a, b = _t(a), _t(b)
    _same_shape(a, b)
    diff = (a - b).reshape(a.shape[0], -1)
    sq = (diff ** 2).sum(1)
    ok = sq >= DEGENERATE_EPS ** 2
    d = torch.where(sq > 0, torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    delta = torch.where(ok[:, None], diff / torch.clamp(d, min=DEGENERATE_EPS)[:, None],
                        torch.zeros_like(diff))
    return delta, d


@dataclass
class TangentBasis:
    basis: torch.Tensor  # k x M, orthonormal rows
    singular_values: torch.Tensor  # k, non-increasing

    @property
    def k(self) -> int:
        return int(self.basis.shape[0])


def _orient_rows(v: torch.Tensor) -> torch.Tensor:
    """Per-row sign flips making each row's largest-magnitude entry positive."""
    idx = v.abs().argmax(dim=1)
    s = torch.sign(v.gather(1, idx[:, None]).detach())
    return torch.where(s == 0, torch.ones_like(s), s)


def tangent_space(deltas, k: int) -> TangentBasis:
    """Top-``k`` right singular vectors of the stacked non-zero rows of ``deltas``."""
    deltas = _t(deltas)
    if deltas.ndim != 2:
        raise DimensionError("deltas must be a B x M matrix")
    rows = deltas[(deltas ** 2).sum(1) > 0]
    if k < 1 or k > min(rows.shape[0], rows.shape[1]):
        raise InsufficientRankError(
            f"k={k} needs at least k non-degenerate rows; have {rows.shape[0]} rows of width {rows.shape[1]}")
    _, s, vh = torch.linalg.svd(rows, full_matrices=False)
    vh = vh[:k]
    return TangentBasis(basis=vh * _orient_rows(vh), singular_values=s[:k])


def geometric_distance(z, z_hat, x, x_hat, k: int) -> torch.Tensor:
    """Per-pair cosine similarity between latent and image tangent coefficients.

    Both spaces are projected onto their own top-``k`` tangent basis. The sign
    of each basis direction is fixed from its coefficient column (largest
    magnitude entry positive), so a linear isometry between the two difference
    sets gives identical coefficients and a similarity of exactly 1.
    Degenerate pairs in either space are dropped.
    """
    dz, nz = tangent_vector(z, z_hat)
    dx, nx = tangent_vector(x, x_hat)
    if dz.shape[0] != dx.shape[0]:
        raise DimensionError("latent and image batches are not aligned")
    keep = (nz >= DEGENERATE_EPS) & (nx >= DEGENERATE_EPS)
    if not bool(keep.any()):
        raise InsufficientRankError("every latent/image pair is degenerate")
    dz, dx = dz[keep], dx[keep]
    coeffs = []
    for delta in (dz, dx):
        basis = tangent_space(delta, k).basis
        c = delta @ basis.T
        c = c * _orient_rows(c.T).T
        coeffs.append(c / torch.clamp(torch.linalg.norm(c), min=1e-12))
    cz, cx = coeffs
    num = (cz * cx).sum(1)
    den = torch.clamp(torch.linalg.norm(cz, dim=1) * torch.linalg.norm(cx, dim=1), min=1e-12)
    return num / den


def geometric_loss(z, z_hat, x, x_hat, k: int) -> torch.Tensor:
    D = geometric_distance(z, z_hat, x, x_hat, k)
    return ((D - 1.0) ** 2).mean()


# ---------------------------------------------------------------------------
# perceptual features

class FeatureExtractor(Frozen):
    """Fixed random convolutional stack standing in for a pretrained network.

    Three stages of 3x3 convolution + GELU, with 2x average pooling before
    stages 2 and 3. ``embed`` maps images to a low-dimensional vector (pooled
    last stage through a fixed projection) for the evaluation metrics, and
    ``class_probs`` adds a fixed softmax head for the Inception-style score.
    ``embed_gain`` rescales the projection so embeddings of generator images
    have roughly unit spread per dimension.
    """

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (16, 32, 64),
                 embed_dim: int = 32, n_classes: int = 10, image_size: int = 32, seed: int = 7,
                 embed_gain: float = 40.0):
        cfg = dict(in_channels=int(in_channels), widths=tuple(int(w) for w in widths),
                   embed_dim=int(embed_dim), n_classes=int(n_classes), image_size=int(image_size),
                   seed=int(seed), embed_gain=float(embed_gain))
        if not cfg["widths"]:
            raise ConfigurationError("feature extractor needs at least one stage")
        if image_size % (2 ** len(widths)) != 0:
            raise ConfigurationError("image size must be divisible by 2**len(widths)")
        object.__setattr__(self, "config", cfg)
        rng = np.random.default_rng(seed)
        params = {}
        cin = in_channels
        for i, w in enumerate(widths):
            params[f"conv{i}_w"] = rng.standard_normal((w, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
            params[f"conv{i}_b"] = 0.1 * rng.standard_normal(w)
            cin = w
        pooled = widths[-1] * (image_size // 2 ** len(widths)) ** 2
        params["embed_w"] = rng.standard_normal((pooled, embed_dim)) * embed_gain / np.sqrt(pooled)
        params["class_w"] = rng.standard_normal((embed_dim, n_classes)) * 3.0 / np.sqrt(embed_dim)
        self._freeze(params)

    def _identity(self) -> str:
        return repr(sorted(self.config.items()))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        s = self.config["image_size"]
        return (self.config["in_channels"], s, s)

    @property
    def stage_shapes(self) -> list[tuple[int, int, int]]:
        s = self.config["image_size"]
        return [(w, s // 2 ** i, s // 2 ** i) for i, w in enumerate(self.config["widths"])]

    def _check(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"expected images of shape (N, {self.input_shape}), got {tuple(x.shape)}")

    def stages(self, x) -> list[torch.Tensor]:
        x = _t(x)
        self._check(x)
        p = self._tensors(x.dtype)
        out = []
        for i in range(len(self.config["widths"])):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.gelu(F.conv2d(x, p[f"conv{i}_w"], p[f"conv{i}_b"], padding=1))
            out.append(x)
        return out

    def embed(self, x) -> torch.Tensor:
        x = _t(x)
        last = F.avg_pool2d(self.stages(x)[-1], 2)
        return last.reshape(last.shape[0], -1) @ self._tensors(x.dtype)["embed_w"]

    def class_probs(self, x) -> torch.Tensor:
        x = _t(x)
        return torch.softmax(self.embed(x) @ self._tensors(x.dtype)["class_w"], dim=1)


class IdentityExtractor:
    """Single-stage extractor returning its input; reduces the perceptual loss to pixel MSE."""

    def stages(self, x):
        return [_t(x)]

    def checksum(self) -> str:
        return "identity"


def perceptual_distance(x, x_hat, phi) -> torch.Tensor:
    """Per-image squared feature distance over C*H*W, averaged over stages; shape ``(B,)``."""
    x, x_hat = _t(x), _t(x_hat)
    _same_shape(x, x_hat, "image batches")
    fa, fb = phi.stages(x_hat), phi.stages(x)
    per = [((a - b) ** 2).reshape(a.shape[0], -1).mean(1) for a, b in zip(fa, fb)]
    return torch.stack(per).mean(0)


def perceptual_loss(x, x_hat, phi) -> torch.Tensor:
    """Batch mean of :func:`perceptual_distance`."""
    return perceptual_distance(x, x_hat, phi).mean()


# ---------------------------------------------------------------------------
# composition

def total_loss(terms: dict, weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the five terms. Returns ``(total, unweighted breakdown)``."""
    tw = weights.term_weights()
    total = None
    breakdown = {}
    for name in TERMS:
        if name not in terms or terms[name] is None:
            if tw[name] != 0:
                raise ValidationError(f"loss term {name!r} missing but weighted {tw[name]}")
            continue
        v = _t(terms[name])
        if not bool(torch.isfinite(v).all()):
            raise TrainingError(f"loss term {name!r} is not finite ({float(v.detach())})")
        breakdown[name] = float(v.detach())
        contrib = tw[name] * v
        total = contrib if total is None else total + contrib
    if total is None:
        total = torch.zeros(())
    breakdown["total"] = float(total.detach())
    return total, breakdown


@dataclass
class LossContext:
    """Everything the training step needs to evaluate the composite objective.

    ``mse_target`` selects what the MSE term compares: ``"noise"`` (predicted
    vs injected noise, the usual denoising objective) or ``"latent"`` (input
    latent vs its one-step reconstruction). ``aux_stride`` evaluates the
    non-MSE terms every ``aux_stride`` steps only. ``aux_max_t`` restricts the
    non-MSE terms to reconstructions at timesteps ``t <= aux_max_t`` (the
    sampler draws a separate timestep for them); ``None`` reuses the training
    timestep. ``mix_source`` picks the style-mixing partner ``w``: a prior draw
    or another latent of the same minibatch.
    """

    generator: object
    extractor: object
    weights: LossWeights = LossWeights()
    mse_target: str = "noise"
    aux_stride: int = 1
    aux_max_t: int | None = None
    mix_source: str = "prior"

    def __post_init__(self):
        if self.mse_target not in ("noise", "latent"):
            raise ConfigurationError(f"mse_target must be 'noise' or 'latent', got {self.mse_target!r}")
        if self.aux_stride < 1:
            raise ConfigurationError("aux_stride must be >= 1")
        if self.aux_max_t is not None and self.aux_max_t < 1:
            raise ConfigurationError("aux_max_t must be None or >= 1")
        if self.mix_source not in ("prior", "batch"):
            raise ConfigurationError(f"mix_source must be 'prior' or 'batch', got {self.mix_source!r}")

    def terms(self, z, z_hat, w, x=None, eps=None, eps_hat=None, with_aux: bool = True,
              z_hat_aux=None) -> dict:
        """Evaluate every term on raw-space latents ``z`` (targets) and ``z_hat`` (estimates).

        ``x`` optionally supplies the precomputed images of ``z``; ``z_hat_aux``
        replaces ``z_hat`` in the non-MSE terms. Terms whose weight is zero are
        evaluated without gradient, for the trace only.
        """
        tw = self.weights.term_weights()
        out = {}

        def run(name, fn):
            if tw[name] == 0:
                # trace only; a term that is undefined for this batch is simply left out
                try:
                    with torch.no_grad():
                        out[name] = fn().detach()
                except (InsufficientRankError, InsufficientDataError):
                    pass
            else:
                out[name] = fn()

        if self.mse_target == "noise":
            run("mse", lambda: mse_loss(eps, eps_hat))
        else:
            run("mse", lambda: mse_loss(z, z_hat))
        if not with_aux:
            return out
        if z_hat_aux is not None:
            z_hat = z_hat_aux
        gen = self.generator
        if tw["geo"] or tw["percep"]:
            x_hat = gen.generate(z_hat)
        else:
            with torch.no_grad():
                x_hat = gen.generate(z_hat)
        if x is None:
            with torch.no_grad():
                x = gen.generate(z)
        z_bar_fn = lambda: style_mix(z_hat, w, self.weights.alpha, gen.style_rows)  # noqa: E731
        run("div", lambda: diversity_loss(z, z_bar_fn()))
        run("kl", lambda: kl_loss(z_bar_fn(), z))
        k = self.weights.k
        run("geo", lambda: geometric_loss(z, z_hat, x, x_hat, k))
        run("percep", lambda: perceptual_loss(x, x_hat, self.extractor))
        return out
