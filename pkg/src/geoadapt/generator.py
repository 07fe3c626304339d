"""Frozen synthetic generators with a StyleGAN-like row split.

A latent code is an ``S x D`` matrix. Rows outside ``style_rows`` drive the
spatial structure of the image (smooth bumps plus a smooth texture field,
collapsed to one zero-mean luminance pattern). Rows inside ``style_rows``
drive colour only: a per-channel offset and gain, plus a chroma pattern that
sums to zero across channels and averages to zero over pixels in each
channel. Two consequences the tests lean on:

* per-channel spatial means depend on the style rows alone;
* the channel-summed deviation from those means is a positive multiple of
  the structure pattern, so thresholded blob centroids ignore style rows.

Every piece is bounded so images lie strictly inside ``(-1, 1)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from ._frozen import Frozen
from .errors import ConfigurationError, DimensionError, ValidationError
from .io import load_container, save_container

# |offset| + 2 * max gain + 4 * chroma amplitude < 1 keeps images inside (-1, 1).
_OFFSET_MAX = 0.25
_GAIN_MIN, _GAIN_SPAN = 0.1, 0.1
_CHROMA_MAX = 0.085


@dataclass(frozen=True)
class GeneratorSpec:
    n_rows: int = 6
    dim: int = 32
    channels: int = 3
    height: int = 32
    width: int = 32
    style_rows: tuple[int, int] | None = None
    n_blobs: int = 3
    hidden: int = 1536
    chroma_bases: int = 96
    texture_modes: int = 160
    seed: int = 0

    def __post_init__(self):
        for name in ("n_rows", "dim", "channels", "height", "width", "n_blobs", "hidden",
                     "chroma_bases", "texture_modes"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_rows < 2:
            raise ConfigurationError("need at least one structure row and one style row")
        if self.style_rows is None:
            object.__setattr__(self, "style_rows", (self.n_rows // 2, self.n_rows))
        lo, hi = (int(v) for v in self.style_rows)
        if not (0 <= lo < hi <= self.n_rows) or (hi - lo) == self.n_rows:
            raise ConfigurationError(f"invalid style row range {self.style_rows} for S={self.n_rows}")
        object.__setattr__(self, "style_rows", (lo, hi))

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        if d.get("style_rows") is not None:
            d["style_rows"] = tuple(d["style_rows"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["style_rows"] = list(self.style_rows)
        return d


def _dct_modes(n, height, width):
    """The ``n`` lowest-frequency non-constant 2-D cosine modes, unit RMS, shape (n, H*W)."""
    pairs = sorted(((u, v) for u in range(height) for v in range(width) if u or v),
                   key=lambda uv: (uv[0] ** 2 + uv[1] ** 2, uv))
    if n > len(pairs):
        raise ConfigurationError(f"at most {len(pairs)} spatial modes fit a {height}x{width} image")
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    modes = np.stack([np.outer(np.cos(np.pi * u * ys), np.cos(np.pi * v * xs)).ravel()
                      for u, v in pairs[:n]])
    return modes / np.sqrt((modes ** 2).mean(axis=1, keepdims=True))


def _random_fields(rng, n, modes):
    """``n`` smooth zero-mean fields: random orthogonal mixtures of ``modes``."""
    q, _ = np.linalg.qr(rng.standard_normal((modes.shape[0], modes.shape[0])))
    mixed = q @ modes
    if n <= mixed.shape[0]:
        return mixed[:n]
    return rng.standard_normal((n, mixed.shape[0])) @ mixed / np.sqrt(mixed.shape[0])


def _orthonormal_rows(rng, n, m):
    if n > m:
        raise ConfigurationError(f"style rows carry {n} values but only {m} chroma coefficients")
    q, _ = np.linalg.qr(rng.standard_normal((m, n)))
    return q.T


def _build_params(spec: GeneratorSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.style_rows
    n_style = (hi - lo) * spec.dim
    n_struct = spec.n_rows * spec.dim - n_style
    nb, K, C = spec.n_blobs, spec.chroma_bases, spec.channels
    p = {
        "struct_w": 0.5 * rng.standard_normal((n_struct, spec.hidden)) / np.sqrt(n_struct),
        "struct_b": 0.1 * rng.standard_normal(spec.hidden),
        "blob_base": rng.uniform(-0.45, 0.45, size=(nb, 2)),
        "blob_pos_w": rng.standard_normal((spec.hidden, nb * 2)) / np.sqrt(spec.hidden),
        "blob_width_w": rng.standard_normal((spec.hidden, nb)) / np.sqrt(spec.hidden),
        "blob_amp_w": rng.standard_normal((spec.hidden, nb)) / np.sqrt(spec.hidden),
        "texture_w": 1.2 * _random_fields(rng, spec.hidden, _dct_modes(spec.texture_modes, spec.height,
                                                                       spec.width)) / np.sqrt(spec.hidden),
        "offset_w": 0.5 * rng.standard_normal((n_style, C)) / np.sqrt(n_style),
        "gain_w": 0.5 * rng.standard_normal((n_style, C)) / np.sqrt(n_style),
        "chroma_w": _orthonormal_rows(rng, n_style, C * K) * np.sqrt(3.0 * C * K / n_style),
        "chroma_basis": _random_fields(rng, K, _dct_modes(K, spec.height, spec.width)),
    }
    return p


class SyntheticGenerator(Frozen):
    """Frozen, deterministic, differentiable ``S x D -> C x H x W`` generator.

    Parameters never change after construction; gradients flow to the input
    latent only. Attribute assignment raises :class:`FrozenError`.
    """

    def __init__(self, spec: GeneratorSpec | None = None, **kwargs):
        spec = spec if spec is not None else GeneratorSpec(**kwargs)
        object.__setattr__(self, "spec", spec)
        self._freeze(_build_params(spec), {"xs": np.linspace(-1, 1, spec.width),
                                           "ys": np.linspace(-1, 1, spec.height)})

    # -- shapes -----------------------------------------------------------
    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.spec.n_rows, self.spec.dim)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.spec.channels, self.spec.height, self.spec.width)

    @property
    def style_rows(self) -> range:
        return range(*self.spec.style_rows)

    @property
    def structure_rows(self) -> list[int]:
        return [r for r in range(self.spec.n_rows) if r not in self.style_rows]

    @property
    def prior_mean(self) -> np.ndarray:
        return np.zeros(self.latent_shape)

    @property
    def prior_scale(self) -> np.ndarray:
        return np.ones(self.latent_shape)

    def _identity(self) -> str:
        return repr(sorted(self.spec.to_dict().items()))

    # -- forward ----------------------------------------------------------
    def _check_latents(self, z):
        if z.ndim != 3 or tuple(z.shape[1:]) != self.latent_shape:
            raise DimensionError(f"expected latents of shape (B, {self.latent_shape[0]}, "
                                 f"{self.latent_shape[1]}), got {tuple(z.shape)}")
        if z.shape[0] == 0:
            raise DimensionError("empty latent batch")

    def __call__(self, z):
        return self.generate(z)

    def generate(self, z):
        """Decode a latent batch. numpy in -> numpy out (float64); torch in -> torch out."""
        if isinstance(z, torch.Tensor):
            self._check_latents(z)
            if not torch.isfinite(z).all():
                raise ValidationError("latent contains non-finite entries")
            return self._forward(z)
        z = np.asarray(z, dtype=np.float64)
        self._check_latents(z)
        if not np.isfinite(z).all():
            raise ValidationError("latent contains non-finite entries")
        with torch.no_grad():
            return self._forward(torch.from_numpy(z)).numpy()

    def _forward(self, z: torch.Tensor) -> torch.Tensor:
        spec = self.spec
        p = self._tensors(z.dtype if z.is_floating_point() else torch.float64)
        z = z.to(p["struct_w"].dtype)
        B = z.shape[0]
        lo, hi = spec.style_rows
        z_style = z[:, lo:hi].reshape(B, -1)
        z_struct = torch.cat([z[:, :lo], z[:, hi:]], dim=1).reshape(B, -1)

        h = torch.tanh(z_struct @ p["struct_w"] + p["struct_b"])
        nb = spec.n_blobs
        centers = p["blob_base"] + 0.35 * torch.tanh(h @ p["blob_pos_w"]).reshape(B, nb, 2)
        widths = 0.22 * torch.exp(0.3 * torch.tanh(h @ p["blob_width_w"]))
        amps = 1.0 + 0.5 * torch.tanh(h @ p["blob_amp_w"])
        inv = 1.0 / (2 * widths[..., None] ** 2)
        prof_x = torch.exp(-(p["xs"] - centers[..., 0:1]) ** 2 * inv)  # B, nb, W
        prof_y = torch.exp(-(p["ys"] - centers[..., 1:2]) ** 2 * inv)  # B, nb, H
        bumps = torch.einsum("bn,bnh,bnw->bhw", amps, prof_y, prof_x).reshape(B, -1)
        field = bumps + h @ p["texture_w"]
        pattern = torch.tanh(0.8 * (field - field.mean(1, keepdim=True)))
        pattern = pattern - pattern.mean(1, keepdim=True)  # B, HW in (-2, 2)

        offset = _OFFSET_MAX * torch.tanh(z_style @ p["offset_w"])  # B, C
        gain = _GAIN_MIN + _GAIN_SPAN * torch.sigmoid(z_style @ p["gain_w"])
        C, K = spec.channels, spec.chroma_bases
        coef = (z_style @ p["chroma_w"]).reshape(B, C, K) / np.sqrt(K)
        chroma = _CHROMA_MAX * torch.tanh(coef @ p["chroma_basis"])  # B, C, HW
        chroma = chroma - chroma.mean(1, keepdim=True)
        chroma = chroma - chroma.mean(2, keepdim=True)

        img = offset[..., None] + gain[..., None] * pattern[:, None, :] + chroma
        return img.reshape(B, C, spec.height, spec.width)

    # -- persistence ------------------------------------------------------
    def save(self, path) -> Path:
        meta = {"kind": "generator", "spec": self.spec.to_dict(), "checksum": self.checksum(),
                "S": self.spec.n_rows, "D": self.spec.dim, "C": self.spec.channels,
                "H": self.spec.height, "W": self.spec.width,
                "style_row_range": list(self.spec.style_rows), "seed": self.spec.seed}
        return save_container(path, self._params, meta)

    @classmethod
    def load(cls, path) -> "SyntheticGenerator":
        arrays, meta = load_container(path, kind="generator")
        gen = cls(GeneratorSpec.from_dict(meta["spec"]))
        for k, v in gen._params.items():
            if k not in arrays or not np.array_equal(arrays[k], v):
                raise ValidationError(f"stored parameter {k!r} does not match its seed")
        return gen


def generate(gen: SyntheticGenerator, z):
    return gen.generate(z)


def sample_prior(gen: SyntheticGenerator, n: int, seed: int) -> np.ndarray:
    """``n`` i.i.d. draws from the standard-normal latent prior, shape ``(n, S, D)``."""
    if int(n) != n or n < 0:
        raise ValidationError(f"n must be a non-negative integer, got {n!r}")
    rng = np.random.default_rng(seed)
    S, D = gen.latent_shape
    return gen.prior_mean + gen.prior_scale * rng.standard_normal((int(n), S, D))


@dataclass(frozen=True)
class ShiftSpec:
    """Target-domain shift.

    kind: ``identity``, ``style_offset`` (add ``offset`` to every style-row
    entry, or a seeded random direction of RMS ``offset`` if ``random_direction``),
    ``subregion`` (restrict structure rows to a box of half-width ``radius``
    around ``center``), ``mixture`` (two modes at +/- a seeded direction of
    RMS ``separation``, each with per-entry spread ``spread``).
    """

    kind: str = "identity"
    offset: float = 1.0
    random_direction: bool = False
    radius: float = 0.5
    center: float = 0.0
    separation: float = 1.0
    spread: float = 0.3
    weights: tuple[float, float] = (0.5, 0.5)
    direction_seed: int = 1234

    KINDS = ("identity", "style_offset", "subregion", "mixture")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown shift {self.kind!r}; expected one of {self.KINDS}")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        return d


def mixture_centers(gen: SyntheticGenerator, shift: ShiftSpec) -> np.ndarray:
    """The two construction centers of a ``mixture`` shift, shape ``(2, S, D)``."""
    rng = np.random.default_rng(shift.direction_seed)
    u = rng.standard_normal(gen.latent_shape)
    u *= shift.separation / np.sqrt((u ** 2).mean())
    return np.stack([gen.prior_mean + u, gen.prior_mean - u])


def style_offset(gen: SyntheticGenerator, shift: ShiftSpec) -> np.ndarray:
    delta = np.zeros(gen.latent_shape)
    rows = gen.style_rows
    if shift.random_direction:
        rng = np.random.default_rng(shift.direction_seed)
        u = rng.standard_normal((len(rows), gen.latent_shape[1]))
        delta[rows.start:rows.stop] = u * shift.offset / np.sqrt((u ** 2).mean())
    else:
        delta[rows.start:rows.stop] = shift.offset
    return delta


def make_target_shift(gen: SyntheticGenerator, shift: ShiftSpec | str | dict, n: int, seed: int):
    """Build ``n`` target images and the latents that produced them.

    Returns ``(images, latents)``. The latents are ground truth for tests only.
    """
    if isinstance(shift, str):
        shift = ShiftSpec(kind=shift)
    elif isinstance(shift, dict):
        shift = ShiftSpec.from_dict(shift)
    z = sample_prior(gen, n, seed)
    if shift.kind == "style_offset":
        z = z + style_offset(gen, shift)
    elif shift.kind == "subregion":
        struct = gen.structure_rows
        z[:, struct] = shift.center + shift.radius * np.tanh(z[:, struct])
    elif shift.kind == "mixture":
        centers = mixture_centers(gen, shift)
        rng = np.random.default_rng([seed, 1])
        labels = rng.choice(2, size=int(n), p=np.asarray(shift.weights) / sum(shift.weights))
        z = centers[labels] + shift.spread * (z - gen.prior_mean) / gen.prior_scale
    if n == 0:
        return np.zeros((0, *gen.image_shape)), z
    return gen.generate(z), z
