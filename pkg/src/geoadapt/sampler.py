"""Latent diffusion sampler over ``S x D`` codes.

The denoiser is a small 1-D U-Net that treats the ``S`` latent rows as
channels and convolves along the ``D`` axis. Training pairs the usual
variance-preserving forward process with the composite objective of
:mod:`geoadapt.losses`, evaluated on the one-step reconstruction of the clean
latent at the sampled timestep.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import (ArtifactIncompatibleError, ConfigurationError, DimensionError,
                     InsufficientDataError, TrainingError, ValidationError)
from .io import load_container, save_container
from .losses import TERMS, LossContext, total_loss

GAMMA_FLOOR = 1e-6
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


# ---------------------------------------------------------------------------
# schedule

class DiffusionSchedule:
    """Linear beta schedule; betas are rescaled by ``reference_T / T`` so the
    total noise injected (and hence ``alpha_bar_T``) stays close to the
    1000-step schedule at any ``T``."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                 reference_T: int = 1000):
        if int(T) != T or T < 1:
            raise ConfigurationError(f"T must be a positive integer, got {T!r}")
        self.T = int(T)
        self.beta_start, self.beta_end, self.reference_T = float(beta_start), float(beta_end), int(reference_T)
        scale = self.reference_T / self.T
        self.betas = np.linspace(beta_start, beta_end, self.T) * scale
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ConfigurationError(f"T={T} pushes betas outside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        self.posterior_var = self.betas * (1 - prev) / (1 - self.alpha_bars)

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "reference_T": self.reference_T}

    def check_t(self, t):
        t = np.asarray(t.detach().cpu() if isinstance(t, torch.Tensor) else t)
        if t.size and (t.min() < 1 or t.max() > self.T or not np.all(t == np.round(t))):
            raise ValidationError(f"timesteps must be integers in [1, {self.T}]")

    def _coef(self, arr, t, like):
        """Gather ``arr[t - 1]`` and broadcast over a ``(B, S, D)`` batch shaped like ``like``."""
        if isinstance(like, torch.Tensor):
            tt = torch.as_tensor(t, dtype=torch.long).reshape(-1)
            v = torch.as_tensor(arr, dtype=like.dtype)[tt - 1]
        else:
            v = arr[np.asarray(t, dtype=np.int64).reshape(-1) - 1]
        return v.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(z0, t, noise, sched: DiffusionSchedule):
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) noise``; works on numpy or torch."""
    sched.check_t(t)
    if tuple(noise.shape) != tuple(z0.shape):
        raise DimensionError("noise and z0 shapes differ")
    ab = sched._coef(sched.alpha_bars, t, z0)
    sqrt = torch.sqrt if isinstance(z0, torch.Tensor) else np.sqrt
    return sqrt(ab) * z0 + sqrt(1 - ab) * noise


def predict_z0(z_t, t, eps_hat, sched: DiffusionSchedule):
    ab = sched._coef(sched.alpha_bars, t, z_t)
    sqrt = torch.sqrt if isinstance(z_t, torch.Tensor) else np.sqrt
    return (z_t - sqrt(1 - ab) * eps_hat) / sqrt(ab)


def reconstruct_z0(net, z_t, t, sched: DiffusionSchedule):
    """One-step clean-latent estimate from the noise predicted by ``net(z_t, t)``."""
    sched.check_t(t)
    return predict_z0(z_t, t, net(z_t, t), sched)


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormalizationStats:
    mu: np.ndarray
    gamma: np.ndarray

    def normalize(self, z):
        mu, g = self._like(z)
        return (z - mu) / g

    def denormalize(self, z):
        mu, g = self._like(z)
        return z * g + mu

    def _like(self, z):
        if isinstance(z, torch.Tensor):
            return (torch.as_tensor(self.mu, dtype=z.dtype), torch.as_tensor(self.gamma, dtype=z.dtype))
        return self.mu, self.gamma


def fit_normalization(latents) -> NormalizationStats:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] < 2:
        raise InsufficientDataError("normalization needs a batch of at least 2 latent codes")
    return NormalizationStats(mu=z.mean(0), gamma=np.maximum(z.std(0, ddof=1), GAMMA_FLOOR))


# ---------------------------------------------------------------------------
# denoiser

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, tdim):
        super().__init__()
        self.conv1 = nn.Conv1d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv1d(cout, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, temb):
        h = self.conv1(self.act(x)) + self.temb(temb)[:, :, None]
        h = self.conv2(self.act(h))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """1-D U-Net ``(B, S, D) -> (B, S, D)`` with a sinusoidal timestep embedding.

    ``widths[i]`` is the channel count at resolution ``D / 2**i``; the last
    level sits at the bottleneck. With the default four levels a length-32
    code is reduced to 4 positions, enough for the 3-tap bottleneck block to
    see the whole code.
    """

    def __init__(self, n_rows: int = 6, dim: int = 32, widths: tuple[int, ...] = (8, 12, 16, 16),
                 tdim: int = 32):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if dim % 2 ** (len(widths) - 1):
            raise ConfigurationError(f"latent width D={dim} must be divisible by {2 ** (len(widths) - 1)}")
        self.n_rows, self.dim, self.widths, self.tdim = n_rows, dim, widths, tdim
        self.time = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU())
        self.inc = nn.Conv1d(n_rows, widths[0], 3, padding=1)
        self.enc = nn.ModuleList(_ResBlock(w, w, tdim) for w in widths[:-1])
        self.down = nn.ModuleList(nn.Conv1d(a, b, 3, stride=2, padding=1)
                                  for a, b in zip(widths[:-1], widths[1:]))
        self.mid = _ResBlock(widths[-1], widths[-1], tdim)
        self.up = nn.ModuleList(nn.ConvTranspose1d(b, a, 2, stride=2)
                                for a, b in zip(widths[:-1], widths[1:]))
        self.dec = nn.ModuleList(_ResBlock(2 * w, w, tdim) for w in widths[:-1])
        self.out = nn.Conv1d(widths[0], n_rows, 3, padding=1)

    def config(self) -> dict:
        return {"n_rows": self.n_rows, "dim": self.dim, "widths": list(self.widths), "tdim": self.tdim}

    def forward(self, z, t):
        if z.ndim != 3 or tuple(z.shape[1:]) != (self.n_rows, self.dim):
            raise DimensionError(f"expected (B, {self.n_rows}, {self.dim}), got {tuple(z.shape)}")
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        temb = self.time(timestep_embedding(t, self.tdim).to(z.dtype))
        h = self.inc(z)
        skips = []
        for block, down in zip(self.enc, self.down):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for i in reversed(range(len(self.dec))):
            h = self.dec[i](torch.cat([self.up[i](h), skips[i]], dim=1), temb)
        return self.out(h)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def check_parameter_budget(net: nn.Module, generator, fraction: float = 0.01):
    n, limit = sum(p.numel() for p in net.parameters()), fraction * generator.n_parameters()
    if n > limit:
        raise ConfigurationError(f"denoiser has {n} parameters, above the budget of {limit:.0f}")


# ---------------------------------------------------------------------------
# training / sampling

@dataclass
class EpochSummary:
    epoch: int
    means: dict = field(default_factory=dict)
    n_batches: int = 0
    steps: list = field(default_factory=list)  # (global step, breakdown dict)


class LatentSampler:
    """Denoiser + schedule + normalization + optimizer state.

    ``seed`` drives parameter init, minibatch order, timesteps, noise and the
    prior draws used for style mixing. With ``ema_decay`` set, sampling uses an
    exponential moving average of the denoiser weights (warmed up as
    ``min(decay, (1 + step) / (10 + step))``); ``None`` samples from the raw
    weights.
    """

    def __init__(self, n_rows: int, dim: int, schedule: DiffusionSchedule | None = None,
                 stats: NormalizationStats | None = None,
                 widths: tuple[int, ...] = (8, 12, 16, 16), lr: float = 1e-3,
                 seed: int = 0, dtype: str = "float32", clip_z0: float | None = 4.0,
                 ema_decay: float | None = 0.999):
        if dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        self.schedule = schedule or DiffusionSchedule()
        self.stats = stats
        self.seed, self.lr, self.dtype_name = int(seed), float(lr), dtype
        self.dtype = _DTYPES[dtype]
        self.clip_z0 = clip_z0
        if ema_decay is not None and not 0.0 < ema_decay < 1.0:
            raise ConfigurationError(f"ema_decay must be None or in (0, 1), got {ema_decay!r}")
        self.ema_decay = ema_decay
        torch.manual_seed(self.seed)
        self.net = DenoiserNet(n_rows, dim, widths).to(self.dtype)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=self.lr)
        self.ema = None
        if ema_decay is not None:
            self.ema = copy.deepcopy(self.net).requires_grad_(False)
        self.rng = torch.Generator().manual_seed(self.seed + 1)
        self.epoch = 0
        self.step = 0

    # -- training
    def train_epoch(self, latents, loss_ctx: LossContext, batch_size: int = 8, images=None) -> EpochSummary:
        """One shuffled pass; only the denoiser's parameters are updated.

        ``images`` optionally holds ``G(latents)`` so the generator is not rerun
        on the training latents every step.
        """
        if self.stats is None:
            raise ValidationError("fit normalization statistics before training")
        z_all = torch.as_tensor(np.asarray(latents, dtype=np.float64)).to(self.dtype)
        n = z_all.shape[0]
        if n < 2:
            raise InsufficientDataError("need at least 2 training latents")
        x_all = None if images is None else torch.as_tensor(np.asarray(images, dtype=np.float64)).to(self.dtype)
        if x_all is not None and len(x_all) != n:
            raise DimensionError(f"{n} latents but {len(x_all)} images")
        bs = min(int(batch_size), n)
        order = torch.randperm(n, generator=self.rng)
        batches = [order[i:i + bs] for i in range(0, n - bs + 1, bs)]
        mu = torch.as_tensor(self.stats.mu, dtype=self.dtype)
        gamma = torch.as_tensor(self.stats.gamma, dtype=self.dtype)
        gen = loss_ctx.generator
        prior_mu = torch.as_tensor(gen.prior_mean, dtype=self.dtype)
        prior_sd = torch.as_tensor(gen.prior_scale, dtype=self.dtype)
        sums = {name: 0.0 for name in (*TERMS, "total")}
        counts = dict.fromkeys(sums, 0)
        summary = EpochSummary(epoch=self.epoch + 1)
        self.net.train()
        for b, idx in enumerate(batches):
            z = z_all[idx]
            z0 = (z - mu) / gamma
            t = torch.randint(1, self.schedule.T + 1, (len(idx),), generator=self.rng)
            eps = torch.randn(z0.shape, generator=self.rng, dtype=self.dtype)
            w = prior_mu + prior_sd * torch.randn(z0.shape, generator=self.rng, dtype=self.dtype)
            if loss_ctx.mix_source == "batch":
                w = z[torch.roll(torch.arange(len(idx)), 1)]
            eps_hat = self.net(forward_diffuse(z0, t, eps, self.schedule), t)
            if not bool(torch.isfinite(eps_hat).all()):
                raise TrainingError(f"batch {b}: denoiser output is not finite", batch_index=b)
            z_hat = self._raw_estimate(z0, t, eps, eps_hat, gamma, mu)
            with_aux = self.step % loss_ctx.aux_stride == 0
            z_hat_aux = None
            if with_aux and loss_ctx.aux_max_t is not None:
                t_aux = torch.randint(1, min(loss_ctx.aux_max_t, self.schedule.T) + 1, (len(idx),),
                                      generator=self.rng)
                eps_aux = torch.randn(z0.shape, generator=self.rng, dtype=self.dtype)
                eps_hat_aux = self.net(forward_diffuse(z0, t_aux, eps_aux, self.schedule), t_aux)
                z_hat_aux = self._raw_estimate(z0, t_aux, eps_aux, eps_hat_aux, gamma, mu)
            try:
                terms = loss_ctx.terms(z, z_hat, w, x=None if x_all is None else x_all[idx], eps=eps,
                                       eps_hat=eps_hat, with_aux=with_aux, z_hat_aux=z_hat_aux)
                loss, breakdown = total_loss(terms, loss_ctx.weights if with_aux
                                             else _mse_only(loss_ctx.weights))
            except TrainingError as e:
                raise TrainingError(f"batch {b}: {e}", batch_index=b) from e
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self.optimizer.step()
            self._update_ema()
            self.step += 1
            for name, v in breakdown.items():
                sums[name] += v
                counts[name] += 1
            summary.steps.append((self.step, breakdown))
        self.epoch += 1
        summary.n_batches = len(batches)
        summary.means = {name: sums[name] / counts[name] for name in sums if counts[name]}
        return summary

    @torch.no_grad()
    def _update_ema(self):
        if self.ema is None:
            return
        decay = min(self.ema_decay, (1 + self.step) / (10 + self.step))
        for pe, p in zip(self.ema.parameters(), self.net.parameters()):
            pe.lerp_(p, 1.0 - decay)

    def _raw_estimate(self, z0, t, eps, eps_hat, gamma, mu):
        """One-step clean estimate, clipped in normalized units, mapped back to raw latents."""
        z0_hat = predict_z0(forward_diffuse(z0, t, eps, self.schedule), t, eps_hat, self.schedule)
        if self.clip_z0 is not None:
            z0_hat = torch.clamp(z0_hat, -self.clip_z0, self.clip_z0)
        return z0_hat * gamma + mu

    # -- sampling
    @torch.no_grad()
    def sample(self, n: int, seed: int) -> np.ndarray:
        """Ancestral sampling through all T steps, returned in raw latent units.

        Each step forms the clean estimate from the predicted noise, clips it
        like training does, and draws from the Gaussian posterior
        ``q(z_{t-1} | z_t, z0_hat)``. Without clipping this is the usual
        noise-form update.
        """
        if int(n) != n or n < 1:
            raise ValidationError(f"n must be a positive integer, got {n!r}")
        if self.stats is None:
            raise ValidationError("sampler has no normalization statistics")
        net = self.ema if self.ema is not None else self.net
        net.eval()
        g = torch.Generator().manual_seed(int(seed))
        s = self.schedule
        prev = np.concatenate([[1.0], s.alpha_bars[:-1]])
        c0 = torch.as_tensor(np.sqrt(prev) * s.betas / (1 - s.alpha_bars), dtype=self.dtype)
        ct = torch.as_tensor(np.sqrt(s.alphas) * (1 - prev) / (1 - s.alpha_bars), dtype=self.dtype)
        sd = torch.as_tensor(np.sqrt(s.posterior_var), dtype=self.dtype)
        x = torch.randn((int(n), self.net.n_rows, self.net.dim), generator=g, dtype=self.dtype)
        for t in range(s.T, 0, -1):
            tt = torch.full((int(n),), t)
            z0 = predict_z0(x, tt, net(x, tt), s)
            if self.clip_z0 is not None:
                z0 = torch.clamp(z0, -self.clip_z0, self.clip_z0)
            x = c0[t - 1] * z0 + ct[t - 1] * x
            if t > 1:
                x = x + sd[t - 1] * torch.randn(x.shape, generator=g, dtype=self.dtype)
        net.train()
        return self.stats.denormalize(x.to(torch.float64).numpy())

    # -- persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"net.{k}": v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        if self.ema is not None:
            arrays.update({f"ema.{k}": v.detach().cpu().numpy() for k, v in self.ema.state_dict().items()})
        arrays["schedule.betas"] = self.schedule.betas
        arrays["stats.mu"] = self.stats.mu
        arrays["stats.gamma"] = self.stats.gamma
        return arrays

    def save(self, path, meta: dict | None = None):
        info = {"kind": "checkpoint", "net": self.net.config(), "schedule": self.schedule.to_dict(),
                "epoch": self.epoch, "step": self.step, "seed": self.seed, "lr": self.lr,
                "dtype": self.dtype_name, "clip_z0": self.clip_z0, "ema_decay": self.ema_decay}
        info.update(meta or {})
        return save_container(path, self.state_arrays(), info)

    @classmethod
    def load(cls, path, generator_checksum: str | None = None) -> tuple["LatentSampler", dict]:
        arrays, meta = load_container(path, kind="checkpoint")
        if generator_checksum is not None and meta.get("generator_checksum") != generator_checksum:
            raise ArtifactIncompatibleError("checkpoint was trained against a different generator")
        net_cfg = meta["net"]
        sched = DiffusionSchedule(**meta["schedule"])
        if not np.array_equal(sched.betas, arrays["schedule.betas"]):
            raise ArtifactIncompatibleError("stored schedule does not match its parameters")
        stats = NormalizationStats(arrays["stats.mu"], arrays["stats.gamma"])
        obj = cls(net_cfg["n_rows"], net_cfg["dim"], sched, stats, widths=tuple(net_cfg["widths"]),
                  lr=meta["lr"], seed=meta["seed"], dtype=meta["dtype"], clip_z0=meta["clip_z0"],
                  ema_decay=meta.get("ema_decay"))
        obj.net.load_state_dict({k[4:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("net.")})
        if obj.ema is not None:
            obj.ema.load_state_dict({k[4:]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("ema.")})
        obj.epoch, obj.step = int(meta["epoch"]), int(meta["step"])
        return obj, meta


def _mse_only(weights):
    from dataclasses import replace
    return replace(weights, lambda2=0.0, lambda3=0.0, div_weight=0.0, percep_weight=0.0)


def train_epoch(sampler: LatentSampler, latents, loss_ctx: LossContext, batch_size: int = 8,
                images=None) -> EpochSummary:
    return sampler.train_epoch(latents, loss_ctx, batch_size, images)


def sample(sampler: LatentSampler, n: int, seed: int) -> np.ndarray:
    return sampler.sample(n, seed)
