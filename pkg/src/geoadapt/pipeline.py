"""Three-stage adaptation pipeline, ablations and run bookkeeping.

Stage 1 materializes the target set (with a held-out evaluation split) and
inverts the training part; stage 2 trains the latent sampler on the inverted
latents; stage 3 samples, decodes and evaluates against the held-out split.
Each stage writes array containers into the run directory and records its
config hash in ``manifest.json``; a later stage refuses artifacts whose hash
or generator checksum does not match its own configuration.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .errors import ArtifactIncompatibleError, ConfigurationError, FrozenContractError, ValidationError
from .generator import SyntheticGenerator, make_target_shift
from .inversion import invert_batch, load_inversions, reconstruction_report, save_inversions
from .io import load_container, save_container
from .losses import TERMS, FeatureExtractor, LossContext
from .metrics import MetricReport, evaluate
from .sampler import DiffusionSchedule, LatentSampler, check_parameter_budget, fit_normalization

log = logging.getLogger("geoadapt")

FILES = {
    "targets": "targets.npz",
    "inverted": "inverted.npz",
    "reconstruction": "reconstruction.json",
    "checkpoint": "checkpoint.npz",
    "loss_trace": "loss_trace.tsv",
    "samples": "samples.npz",
    "generated": "generated.npz",
    "metrics": "metrics.txt",
    "manifest": "manifest.json",
    "config": "config.json",
}


# ---------------------------------------------------------------------------
# shared helpers

def build_generator(cfg: ExperimentConfig) -> SyntheticGenerator:
    return SyntheticGenerator(cfg.generator)


def build_extractor(cfg: ExperimentConfig) -> FeatureExtractor:
    g = cfg.generator
    if g.height != g.width:
        raise ConfigurationError("the feature extractor needs square images")
    return FeatureExtractor(in_channels=g.channels, image_size=g.height, seed=cfg.extractor_seed)


def _out(cfg: ExperimentConfig, out) -> Path:
    path = Path(out if out is not None else cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def read_manifest(out) -> dict:
    path = Path(out) / FILES["manifest"]
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def _update_manifest(out: Path, cfg: ExperimentConfig, stage: str, entry: dict, gen, phi):
    man = read_manifest(out)
    checksum = gen.checksum()
    if man.get("generator_checksum") not in (None, checksum):
        raise ArtifactIncompatibleError(f"{out} holds artifacts of a different generator")
    man["generator_checksum"] = checksum
    man["extractor_checksum"] = phi.checksum()
    man.setdefault("stages", {})[stage] = entry
    man["config_hash"] = {f"stage{i}": cfg.stage_hash(i) for i in (1, 2, 3)}
    (out / FILES["manifest"]).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    cfg.save(out / FILES["config"])


class _FrozenGuard:
    """Checks that the generator and extractor checksums survive a block unchanged."""

    def __init__(self, gen, phi):
        self.gen, self.phi = gen, phi

    def __enter__(self):
        self.before = (self.gen.checksum(), self.phi.checksum())
        return self

    def __exit__(self, exc_type, exc, tb):
        after = (self.gen.checksum(), self.phi.checksum())
        if exc_type is None and after != self.before:
            raise FrozenContractError("generator or feature-extractor parameters changed during the run")
        return False


def _require(meta: dict, key: str, expected: str, what: str):
    if meta.get(key) != expected:
        raise ArtifactIncompatibleError(f"{what}: {key} is {meta.get(key)!r}, expected {expected!r}")


# ---------------------------------------------------------------------------
# stage 1

@dataclass
class Stage1Result:
    latents: np.ndarray
    train_images: np.ndarray
    holdout_images: np.ndarray
    true_latents: np.ndarray
    reconstruction: dict
    out: Path


def materialize_targets(cfg: ExperimentConfig, gen) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Target pool split into (train images, held-out images, train ground-truth latents)."""
    n_train, n_hold = cfg.target.n_target, cfg.target.n_holdout
    images, latents = make_target_shift(gen, cfg.target.shift, n_train + n_hold, cfg.derive_seed("targets"))
    return images[:n_train], images[n_train:], latents[:n_train]


def run_stage1(cfg: ExperimentConfig, out=None) -> Stage1Result:
    out = _out(cfg, out)
    gen, phi = build_generator(cfg), build_extractor(cfg)
    started = _now()
    with _FrozenGuard(gen, phi):
        train, holdout, truth = materialize_targets(cfg, gen)
        h1 = cfg.stage_hash(1)
        save_container(out / FILES["targets"], {"train_images": train, "holdout_images": holdout,
                                                "true_latents": truth},
                       {"kind": "targets", "stage1_hash": h1, "generator_checksum": gen.checksum()})
        log.info("stage 1: inverting %d target images", len(train))
        inv_cfg = replace(cfg.inversion, seed=cfg.derive_seed("inversion"))
        results = invert_batch(gen, train, inv_cfg, extractor=phi)
        save_inversions(out / FILES["inverted"], results, gen, inv_cfg, {"stage1_hash": h1})
        rep = reconstruction_report(gen, train, results, extractor=phi).to_dict()
    (out / FILES["reconstruction"]).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    log.info("stage 1: median reconstruction MSE %.3g", rep["median_mse"])
    _update_manifest(out, cfg, "stage1", {"started": started, "finished": _now(), "hash": h1,
                                          "files": [FILES["targets"], FILES["inverted"]]}, gen, phi)
    latents = np.stack([r.latent for r in results])
    return Stage1Result(latents, train, holdout, truth, rep, out)


def load_stage1(cfg: ExperimentConfig, out, gen=None) -> Stage1Result:
    out = Path(out)
    gen = gen or build_generator(cfg)
    latents, meta = load_inversions(out / FILES["inverted"], generator_checksum=gen.checksum())
    _require(meta, "stage1_hash", cfg.stage_hash(1), str(out / FILES["inverted"]))
    arrays, tmeta = load_container(out / FILES["targets"], kind="targets")
    _require(tmeta, "stage1_hash", cfg.stage_hash(1), str(out / FILES["targets"]))
    rec_path = out / FILES["reconstruction"]
    rec = json.loads(rec_path.read_text()) if rec_path.exists() else {}
    return Stage1Result(latents, arrays["train_images"], arrays["holdout_images"], arrays["true_latents"],
                        rec, out)


# ---------------------------------------------------------------------------
# stage 2

@dataclass
class Stage2Result:
    sampler: LatentSampler
    trace: list[dict]
    epoch_means: list[dict]
    out: Path


def loss_context(cfg: ExperimentConfig, gen, phi) -> LossContext:
    d = cfg.diffusion
    return LossContext(gen, phi, cfg.losses, mse_target=d.mse_target, aux_stride=d.aux_stride,
                       aux_max_t=d.aux_max_t, mix_source=d.mix_source)


def train_sampler(cfg: ExperimentConfig, latents, gen, phi) -> tuple[LatentSampler, list[dict], list[dict]]:
    """Fit normalization and train for the configured budget; returns (sampler, step trace, epoch means)."""
    d = cfg.diffusion
    latents = np.asarray(latents, dtype=np.float64)
    if cfg.losses.k > min(d.batch_size, len(latents)):
        raise ValidationError(f"k={cfg.losses.k} exceeds the training batch size")
    sampler = LatentSampler(*gen.latent_shape, DiffusionSchedule(T=d.T), fit_normalization(latents),
                            widths=d.widths, lr=d.lr, seed=cfg.derive_seed("sampler"), dtype=d.dtype,
                            clip_z0=d.clip_z0, ema_decay=d.ema_decay)
    check_parameter_budget(sampler.net, gen)
    ctx = loss_context(cfg, gen, phi)
    with torch.no_grad():
        images = gen.generate(latents)
    trace, means = [], []
    epochs = d.epochs_for(len(latents))
    for e in range(epochs):
        summary = sampler.train_epoch(latents, ctx, d.batch_size, images=images)
        for step, breakdown in summary.steps:
            trace.append({"step": step, "epoch": summary.epoch, **breakdown})
        means.append({"epoch": summary.epoch, **summary.means})
        if e == 0 or (e + 1) % max(1, epochs // 10) == 0:
            log.info("epoch %d/%d  %s", e + 1, epochs,
                     "  ".join(f"{k} {v:.4g}" for k, v in summary.means.items()))
    return sampler, trace, means


def write_loss_trace(path, trace: list[dict]) -> Path:
    """One line per step: step, epoch, each unweighted term (``nan`` when not evaluated), total."""
    cols = ["step", "epoch", *TERMS, "total"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for row in trace:
            w.writerow([row["step"], row["epoch"]] + [repr(float(row.get(c, float("nan")))) for c in cols[2:]])
    return Path(path)


def read_loss_trace(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    head, body = rows[0], rows[1:]
    return {c: np.array([float(r[i]) for r in body]) for i, c in enumerate(head)}


def run_stage2(cfg: ExperimentConfig, out=None, stage1: Stage1Result | None = None) -> Stage2Result:
    out = _out(cfg, out)
    gen, phi = build_generator(cfg), build_extractor(cfg)
    stage1 = stage1 or load_stage1(cfg, out, gen)
    started = _now()
    with _FrozenGuard(gen, phi):
        sampler, trace, means = train_sampler(cfg, stage1.latents, gen, phi)
    write_loss_trace(out / FILES["loss_trace"], trace)
    sampler.save(out / FILES["checkpoint"], {"generator_checksum": gen.checksum(),
                                             "stage1_hash": cfg.stage_hash(1), "stage2_hash": cfg.stage_hash(2)})
    _update_manifest(out, cfg, "stage2", {"started": started, "finished": _now(), "hash": cfg.stage_hash(2),
                                          "epochs": len(means), "steps": sampler.step,
                                          "files": [FILES["checkpoint"], FILES["loss_trace"]]}, gen, phi)
    return Stage2Result(sampler, trace, means, out)


# ---------------------------------------------------------------------------
# stage 3

@dataclass
class Stage3Result:
    samples: np.ndarray
    images: np.ndarray
    report: MetricReport
    out: Path


def load_sampler(cfg: ExperimentConfig, out, gen=None) -> LatentSampler:
    gen = gen or build_generator(cfg)
    path = Path(out) / FILES["checkpoint"]
    sampler, meta = LatentSampler.load(path, generator_checksum=gen.checksum())
    _require(meta, "stage2_hash", cfg.stage_hash(2), str(path))
    return sampler


def sample_stage(cfg: ExperimentConfig, out=None, sampler: LatentSampler | None = None,
                 n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Draw latents from the trained sampler and decode them; writes samples and images."""
    out = _out(cfg, out)
    gen = build_generator(cfg)
    n = cfg.diffusion.n_samples if n is None else n
    if int(n) != n or n < 1:
        raise ValidationError(f"number of samples must be a positive integer, got {n!r}")
    sampler = sampler or load_sampler(cfg, out, gen)
    z = sampler.sample(int(n), cfg.derive_seed("sample"))
    with torch.no_grad():
        images = gen.generate(z)
    meta = {"generator_checksum": gen.checksum(), "stage2_hash": cfg.stage_hash(2)}
    save_container(out / FILES["samples"], {"latents": z}, {"kind": "samples", **meta})
    save_container(out / FILES["generated"], {"images": images}, {"kind": "generated", **meta})
    return z, images


def evaluate_stage(cfg: ExperimentConfig, out=None, images=None, holdout=None) -> MetricReport:
    """Desk metrics of the generated images against the held-out target split."""
    out = _out(cfg, out)
    gen, phi = build_generator(cfg), build_extractor(cfg)
    if images is None:
        arrays, meta = load_container(out / FILES["generated"], kind="generated")
        _require(meta, "generator_checksum", gen.checksum(), str(out / FILES["generated"]))
        _require(meta, "stage2_hash", cfg.stage_hash(2), str(out / FILES["generated"]))
        images = arrays["images"]
    if holdout is None:
        holdout = load_stage1(cfg, out, gen).holdout_images
    m = cfg.metrics
    report = evaluate(holdout, images, phi, k=m.k, splits=m.splits, seed=cfg.derive_seed("metrics"),
                      is_splits=m.is_splits, backend=m.backend)
    (out / FILES["metrics"]).write_text(report.to_text())
    return report


def run_stage3(cfg: ExperimentConfig, out=None, sampler: LatentSampler | None = None, holdout=None,
               n: int | None = None) -> Stage3Result:
    out = _out(cfg, out)
    gen, phi = build_generator(cfg), build_extractor(cfg)
    started = _now()
    with _FrozenGuard(gen, phi):
        z, images = sample_stage(cfg, out, sampler, n)
        report = evaluate_stage(cfg, out, images, holdout)
    log.info("stage 3: %s", report.short())
    _update_manifest(out, cfg, "stage3", {"started": started, "finished": _now(), "hash": cfg.stage_hash(3),
                                          "files": [FILES["samples"], FILES["generated"], FILES["metrics"]]},
                     gen, phi)
    return Stage3Result(z, images, report, out)


def run_pipeline(cfg: ExperimentConfig, out=None) -> Stage3Result:
    s1 = run_stage1(cfg, out)
    s2 = run_stage2(cfg, s1.out, s1)
    return run_stage3(cfg, s1.out, s2.sampler, s1.holdout_images)


# ---------------------------------------------------------------------------
# ablations

@dataclass
class AblationTable:
    """Rows of (label, seed, MetricReport); ``label`` orders the rungs."""

    parameter: str
    rows: list[tuple[str, int, MetricReport]] = field(default_factory=list)

    def labels(self) -> list[str]:
        seen = []
        for label, _, _ in self.rows:
            if label not in seen:
                seen.append(label)
        return seen

    def values(self, label: str, metric: str = "fid") -> list[float]:
        return [getattr(r, metric) for lab, _, r in self.rows if lab == label]

    def median(self, label: str, metric: str = "fid") -> float:
        return float(np.median(self.values(label, metric)))

    def summary(self, metric: str = "fid") -> list[tuple[str, float]]:
        return [(label, self.median(label, metric)) for label in self.labels()]

    def write(self, path) -> Path:
        names = ["fid", "fid_std", "is_score", "is_std", "precision", "precision_std", "recall",
                 "recall_std", "density", "density_std", "coverage", "coverage_std"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow([self.parameter, "seed", *names])
            for label, seed, r in self.rows:
                w.writerow([label, seed] + [repr(float(getattr(r, n))) for n in names])
        return Path(path)

    @classmethod
    def read(cls, path) -> "AblationTable":
        with open(path) as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
        head = rows[0]
        table = cls(head[0])
        for row in rows[1:]:
            vals = {k: float(v) for k, v in zip(head[2:], row[2:])}
            rep = MetricReport(knn_k=0, n_real=0, n_gen=0, **vals)
            table.rows.append((row[0], int(row[1]), rep))
        return table


LOSS_LADDER = (
    ("mse", dict(lambda2=0.0, lambda3=0.0, div_weight=0.0, percep_weight=0.0)),
    ("+kl", dict(lambda3=0.0, div_weight=0.0, percep_weight=0.0)),
    ("+percep", dict(lambda3=0.0, div_weight=0.0)),
    ("+div", dict(lambda3=0.0)),
    ("+geo", dict()),
)


def _seeds(cfg, seeds):
    seeds = (cfg.seed,) if seeds is None else tuple(int(s) for s in seeds)
    if not seeds or len(set(seeds)) != len(seeds):
        raise ValidationError("seeds must be a non-empty list of distinct integers")
    return seeds


def _rung(cfg: ExperimentConfig, out: Path, s1: Stage1Result, holdout) -> MetricReport:
    gen, phi = build_generator(cfg), build_extractor(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with _FrozenGuard(gen, phi):
        sampler, trace, _ = train_sampler(cfg, s1.latents, gen, phi)
    write_loss_trace(out / FILES["loss_trace"], trace)
    cfg.save(out / FILES["config"])
    res = run_stage3(cfg, out, sampler, holdout)
    return res.report


def run_ablation_losses(cfg: ExperimentConfig, seeds=None, out=None, ladder=LOSS_LADDER) -> AblationTable:
    """Progressively add loss terms; stage 1 is shared by every rung of a seed."""
    root = _out(cfg, out) / "ablate-losses"
    table = AblationTable("rung")
    base = cfg.losses.to_dict()
    for seed in _seeds(cfg, seeds):
        cs = cfg.replace(seed=seed)
        s1 = run_stage1(cs, root / f"seed{seed}")
        for label, zeroed in ladder:
            rc = cs.replace(losses={**base, **zeroed})
            rep = _rung(rc, root / f"seed{seed}" / label.lstrip("+"), s1, s1.holdout_images)
            log.info("losses %-8s seed %d  %s", label, seed, rep.short())
            table.rows.append((label, seed, rep))
    table.write(root / "ablation_losses.tsv")
    return table


def run_ablation_ntarget(cfg: ExperimentConfig, sizes=(256, 64, 16), seeds=None, out=None) -> AblationTable:
    """One sampler per target-set size; smaller sets are nested subsets of the largest.

    The evaluation split is shared, and unless ``diffusion.steps`` is set every
    size gets the optimizer-step count the largest set reaches in
    ``diffusion.epochs`` epochs.
    """
    sizes = tuple(int(s) for s in sizes)
    if not sizes or len(set(sizes)) != len(sizes):
        raise ValidationError(f"sizes must be distinct, got {sizes}")
    if list(sizes) != sorted(sizes, reverse=True):
        raise ValidationError(f"sizes must be given in descending order, got {sizes}")
    if min(sizes) < cfg.losses.k or min(sizes) < 2:
        raise ValidationError(f"smallest size {min(sizes)} is below k={cfg.losses.k}")
    root = _out(cfg, out) / "ablate-ntarget"
    table = AblationTable("n_target")
    d = cfg.diffusion
    steps = d.steps if d.steps is not None else d.epochs * (sizes[0] // min(d.batch_size, sizes[0]))
    for seed in _seeds(cfg, seeds):
        cs = cfg.replace(seed=seed, **{"target.n_target": sizes[0], "diffusion.steps": steps})
        s1 = run_stage1(cs, root / f"seed{seed}")
        for n in sizes:
            sub = Stage1Result(s1.latents[:n], s1.train_images[:n], s1.holdout_images, s1.true_latents[:n],
                               s1.reconstruction, s1.out)
            rep = _rung(cs, root / f"seed{seed}" / f"n{n}", sub, s1.holdout_images)
            log.info("n_target %-4d seed %d  %s", n, seed, rep.short())
            table.rows.append((str(n), seed, rep))
    table.write(root / "ablation_ntarget.tsv")
    return table


def run_ablation_k(cfg: ExperimentConfig, ks=(3, 5, 10), seeds=None, out=None) -> AblationTable:
    ks = tuple(int(k) for k in ks)
    bad = [k for k in ks if k < 1 or k > cfg.diffusion.batch_size]
    if bad:
        raise ValidationError(f"k values {bad} must lie in [1, batch size {cfg.diffusion.batch_size}]")
    if len(set(ks)) != len(ks):
        raise ValidationError(f"k values must be distinct, got {ks}")
    root = _out(cfg, out) / "ablate-k"
    table = AblationTable("k")
    for seed in _seeds(cfg, seeds):
        cs = cfg.replace(seed=seed)
        s1 = run_stage1(cs, root / f"seed{seed}")
        for k in ks:
            rc = cs.replace(**{"losses.k": k})
            rep = _rung(rc, root / f"seed{seed}" / f"k{k}", s1, s1.holdout_images)
            log.info("k %-3d seed %d  %s", k, seed, rep.short())
            table.rows.append((str(k), seed, rep))
    table.write(root / "ablation_k.tsv")
    return table


# ---------------------------------------------------------------------------
# 2-D projection

def project_latents_2d(sets) -> dict[str, np.ndarray]:
    """PCA to two components fit on the union of ``sets`` (a dict label -> array, or a list).

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    if not isinstance(sets, dict):
        sets = {str(i): s for i, s in enumerate(sets)}
    flat = {k: np.asarray(v, dtype=np.float64).reshape(len(v), -1) for k, v in sets.items()}
    dims = {v.shape[1] for v in flat.values() if len(v)}
    if len(dims) != 1:
        raise ValidationError("all latent sets must share one dimensionality")
    union = np.concatenate([v for v in flat.values() if len(v)])
    if len(union) < 2:
        raise ValidationError("need at least 2 points to project")
    mean = union.mean(0)
    _, s, vt = np.linalg.svd(union - mean, full_matrices=False)
    if s[0] <= 1e-12 * max(1.0, np.abs(union).max()):
        raise ValidationError("all points are identical; projection is undefined")
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    idx = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(len(comps)), idx])[:, None]
    return {k: (v - mean) @ comps.T for k, v in flat.items()}


# ---------------------------------------------------------------------------
# report

def summarize_run(out) -> str:
    out = Path(out)
    lines = [f"run: {out}"]
    man = read_manifest(out)
    if man:
        lines.append(f"generator checksum: {man.get('generator_checksum')}")
        for stage, entry in sorted(man.get("stages", {}).items()):
            lines.append(f"{stage}: hash {entry.get('hash')} finished {entry.get('finished')}")
    rec = out / FILES["reconstruction"]
    if rec.exists():
        r = json.loads(rec.read_text())
        lines.append(f"inversion: median MSE {r['median_mse']:.3g} over {r['n']} images")
    met = out / FILES["metrics"]
    if met.exists():
        lines.append("metrics: " + MetricReport.from_text(met.read_text()).short())
    for name in ("ablate-losses/ablation_losses.tsv", "ablate-ntarget/ablation_ntarget.tsv",
                 "ablate-k/ablation_k.tsv"):
        p = out / name
        if p.exists():
            t = AblationTable.read(p)
            lines.append(f"{t.parameter} ablation (median FID): "
                         + ", ".join(f"{lab} {v:.4g}" for lab, v in t.summary()))
    if len(lines) == 1:
        raise ValidationError(f"{out} holds no run artifacts")
    return "\n".join(lines)
