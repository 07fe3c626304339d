"""Generative evaluation: FID, Inception Score, kNN precision/recall, density/coverage.

Distances are Euclidean and computed exactly (no approximate index). The kNN
inner loops live in :mod:`geoadapt._knn` with numba and numpy backends.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import _knn
from .errors import InsufficientDataError, ValidationError

EIG_CLAMP = 1e-10


@dataclass
class FeatureSet:
    features: np.ndarray
    source: str = "real"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValidationError(f"features must be a non-empty N x F matrix, got shape {f.shape}")
        if not np.isfinite(f).all():
            raise ValidationError("features contain non-finite entries")
        if self.source not in ("real", "generated"):
            raise ValidationError(f"source must be 'real' or 'generated', got {self.source!r}")
        self.features = f

    def __len__(self):
        return self.features.shape[0]


def _feats(x) -> np.ndarray:
    return x.features if isinstance(x, FeatureSet) else FeatureSet(x).features


# ---------------------------------------------------------------------------
# FID

def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    w = np.where(w > EIG_CLAMP * max(w.max(), 0.0), w, 0.0)
    return (v * np.sqrt(w)) @ v.T


def trace_sqrt_product(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    """``tr((sigma1 sigma2)^{1/2})`` via the symmetric form ``s1^{1/2} sigma2 s1^{1/2}``."""
    r = _sqrtm_psd(sigma1)
    m = r @ sigma2 @ r
    w = np.linalg.eigvalsh((m + m.T) / 2)
    w = np.where(w > EIG_CLAMP * max(w.max(), 0.0), w, 0.0)
    return float(np.sqrt(w).sum())


def fid_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    diff = np.asarray(mu1) - np.asarray(mu2)
    val = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * trace_sqrt_product(sigma1, sigma2)
    return float(max(val, 0.0))


def fid(real, gen) -> float:
    a, b = _feats(real), _feats(gen)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InsufficientDataError("FID needs at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValidationError("feature dimensions differ")
    return fid_from_moments(a.mean(0), np.atleast_2d(np.cov(a, rowvar=False)),
                            b.mean(0), np.atleast_2d(np.cov(b, rowvar=False)))


# ---------------------------------------------------------------------------
# Inception Score

def inception_score(class_probs, splits: int = 10) -> tuple[float, float]:
    """``exp(E[KL(p(y|x) || p(y))])`` per split; returns (mean, std) over splits."""
    p = np.asarray(class_probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise ValidationError("class_probs must be a non-empty N x K matrix")
    if (p < 0).any() or not np.allclose(p.sum(1), 1.0, atol=1e-6, rtol=0):
        raise ValidationError("rows of class_probs must be probability vectors")
    splits = max(1, min(int(splits), p.shape[0]))
    scores = []
    for part in np.array_split(p, splits):
        marginal = part.mean(0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(np.exp(terms.sum(1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# kNN-manifold metrics

def knn_radii(points, k: int, backend=None) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    x = _feats(points)
    if not 1 <= k < x.shape[0]:
        raise ValidationError(f"k must satisfy 1 <= k < N (k={k}, N={x.shape[0]})")
    return _knn.kth_radii(_knn.pairwise_distances(x, x, backend), k, backend)


def precision_recall(real, gen, k: int, backend=None) -> tuple[float, float]:
    r, g = _feats(real), _feats(gen)
    if not 1 <= k < min(len(r), len(g)):
        raise ValidationError(f"k={k} must be below both set sizes ({len(r)}, {len(g)})")
    d_gr = _knn.pairwise_distances(g, r, backend)
    r_real = _knn.kth_radii(_knn.pairwise_distances(r, r, backend), k, backend)
    r_gen = _knn.kth_radii(_knn.pairwise_distances(g, g, backend), k, backend)
    in_real, _ = _knn.ball_membership(d_gr, r_real, backend)
    in_gen, _ = _knn.ball_membership(np.ascontiguousarray(d_gr.T), r_gen, backend)
    return float(np.mean(in_real > 0)), float(np.mean(in_gen > 0))


def density_coverage(real, gen, k: int, backend=None) -> tuple[float, float]:
    r, g = _feats(real), _feats(gen)
    if not 1 <= k < len(r):
        raise ValidationError(f"k={k} must be below the real set size {len(r)}")
    radii = _knn.kth_radii(_knn.pairwise_distances(r, r, backend), k, backend)
    counts, covered = _knn.ball_membership(_knn.pairwise_distances(g, r, backend), radii, backend)
    return float(counts.sum() / (k * len(g))), float(covered.mean())


# ---------------------------------------------------------------------------
# report

@dataclass
class MetricReport:
    """One evaluation run. Each pair is (value on the full sets, std over resampled splits)."""

    fid: float
    fid_std: float
    is_score: float
    is_std: float
    precision: float
    precision_std: float
    recall: float
    recall_std: float
    density: float
    density_std: float
    coverage: float
    coverage_std: float
    knn_k: int
    n_real: int
    n_gen: int

    PAIRS = ("fid", "is_score", "precision", "recall", "density", "coverage")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = ["# value/dispersion; dispersion = std over resampled evaluation splits"]
        for name in self.PAIRS:
            std = getattr(self, "is_std" if name == "is_score" else f"{name}_std")
            lines.append(f"{name}: {getattr(self, name):.10g}/{std:.10g}")
        lines += [f"knn_k: {self.knn_k}", f"n_real: {self.n_real}", f"n_gen: {self.n_gen}"]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        vals = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(":")
            key, value = key.strip(), value.strip()
            if "/" in value:
                mean, std = value.split("/")
                vals[key] = float(mean)
                vals["is_std" if key == "is_score" else f"{key}_std"] = float(std)
            else:
                vals[key] = int(value)
        names = {f.name for f in fields(cls)}
        unknown = set(vals) - names
        if unknown:
            raise ValidationError(f"unknown report keys {sorted(unknown)}")
        return cls(**vals)

    def short(self) -> str:
        return (f"FID {self.fid:.4f}  P {self.precision:.3f}  R {self.recall:.3f}  "
                f"D {self.density:.3f}  C {self.coverage:.3f}  IS {self.is_score:.3f}")


def resample_splits(n: int, n_splits: int, seed: int, frac: float = 0.8, min_size: int = 2) -> list[np.ndarray]:
    """Sorted index subsets drawn without replacement, one per split."""
    rng = np.random.default_rng(seed)
    size = min(n, max(min_size, int(round(frac * n))))
    return [np.sort(rng.choice(n, size=size, replace=False)) for _ in range(n_splits)]


def embed_images(images, extractor, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(extractor.embed(torch.from_numpy(x[i:i + batch_size])).numpy())
    return np.concatenate(out)


def class_probs(images, extractor, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    with torch.no_grad():
        return np.concatenate([extractor.class_probs(torch.from_numpy(x[i:i + batch_size])).numpy()
                               for i in range(0, len(x), batch_size)])


def evaluate_features(real, gen, k: int = 5, splits: int = 5, seed: int = 0,
                      probs=None, is_splits: int = 10, backend=None) -> MetricReport:
    """Metrics on precomputed embeddings; ``probs`` are generated-set class probabilities."""
    r, g = _feats(real), _feats(gen)
    full = {"fid": fid(r, g)}
    full["precision"], full["recall"] = precision_recall(r, g, k, backend)
    full["density"], full["coverage"] = density_coverage(r, g, k, backend)
    per_split = {name: [] for name in full}
    idx_r = resample_splits(len(r), splits, seed, min_size=k + 1)
    idx_g = resample_splits(len(g), splits, seed + 1, min_size=k + 1)
    for ir, ig in zip(idx_r, idx_g):
        rs, gs = r[ir], g[ig]
        per_split["fid"].append(fid(rs, gs))
        p, rc = precision_recall(rs, gs, k, backend)
        d, c = density_coverage(rs, gs, k, backend)
        for name, v in (("precision", p), ("recall", rc), ("density", d), ("coverage", c)):
            per_split[name].append(v)
    std = {name: float(np.std(v)) if v else 0.0 for name, v in per_split.items()}
    if probs is None:
        is_mean, is_std = float("nan"), float("nan")
    else:
        is_mean, is_std = inception_score(probs, is_splits)
    return MetricReport(
        fid=full["fid"], fid_std=std["fid"], is_score=is_mean, is_std=is_std,
        precision=full["precision"], precision_std=std["precision"],
        recall=full["recall"], recall_std=std["recall"],
        density=full["density"], density_std=std["density"],
        coverage=full["coverage"], coverage_std=std["coverage"],
        knn_k=int(k), n_real=len(r), n_gen=len(g))


def evaluate(real_images, gen_images, extractor, k: int = 5, splits: int = 5, seed: int = 0,
             is_splits: int = 10, backend=None) -> MetricReport:
    """Embed both image sets with ``extractor`` and compute every metric."""
    if len(real_images) == 0 or len(gen_images) == 0:
        raise ValidationError("image sets must be non-empty")
    r = embed_images(real_images, extractor)
    g = embed_images(gen_images, extractor)
    probs = class_probs(gen_images, extractor)
    return evaluate_features(r, g, k=k, splits=splits, seed=seed, probs=probs,
                             is_splits=is_splits, backend=backend)
