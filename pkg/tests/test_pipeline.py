import json

import numpy as np
import pytest

from conftest import tiny_config
from geoadapt import pipeline
from geoadapt.errors import ArtifactIncompatibleError, ValidationError
from geoadapt.metrics import MetricReport


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = tiny_config(out)
    res = pipeline.run_pipeline(cfg)
    return cfg, out, res


def test_artifacts_written(run_dir):
    cfg, out, res = run_dir
    for key, name in pipeline.FILES.items():
        assert (out / name).exists(), key
    man = pipeline.read_manifest(out)
    assert set(man["stages"]) == {"stage1", "stage2", "stage3"}
    assert man["generator_checksum"] == pipeline.build_generator(cfg).checksum()
    assert man["config_hash"]["stage2"] == cfg.stage_hash(2)
    assert res.samples.shape == (16, 6, 32) and res.images.shape == (16, 3, 32, 32)
    rep = MetricReport.from_text((out / "metrics.txt").read_text())
    assert rep.fid == pytest.approx(res.report.fid, rel=1e-9)


def test_split_sizes(run_dir):
    cfg, out, _ = run_dir
    s1 = pipeline.load_stage1(cfg, out)
    assert len(s1.latents) == 24 and len(s1.holdout_images) == cfg.target.n_holdout == 16
    assert json.loads((out / "reconstruction.json").read_text())["n"] == 24


def test_loss_trace(run_dir):
    cfg, out, _ = run_dir
    tr = pipeline.read_loss_trace(out / "loss_trace.tsv")
    assert len(tr["step"]) == 2 * (24 // 8)
    w = cfg.losses.term_weights()
    manual = sum(w[t] * tr[t] for t in w)
    assert np.allclose(manual, tr["total"], rtol=1e-6)


def test_stages_reproducible(run_dir, tmp_path):
    cfg, out, res = run_dir
    again = pipeline.run_pipeline(cfg.replace(out=str(tmp_path)))
    assert np.array_equal(again.samples, res.samples)
    assert again.report.fid == res.report.fid


def test_resume_from_disk(run_dir):
    cfg, out, res = run_dir
    z, _ = pipeline.sample_stage(cfg, out)
    assert np.array_equal(z, res.samples)
    assert pipeline.evaluate_stage(cfg, out).fid == res.report.fid


def test_stale_artifacts_refused(run_dir):
    cfg, out, _ = run_dir
    with pytest.raises(ArtifactIncompatibleError):
        pipeline.load_sampler(cfg.replace(**{"diffusion.epochs": 3}), out)
    with pytest.raises(ArtifactIncompatibleError):
        pipeline.load_stage1(cfg.replace(**{"target.n_target": 30}), out)
    with pytest.raises(ArtifactIncompatibleError):
        pipeline.load_stage1(cfg.replace(**{"generator.seed": 1}), out)


def test_summarize(run_dir, tmp_path):
    _, out, _ = run_dir
    text = pipeline.summarize_run(out)
    assert "median MSE" in text and "FID" in text
    with pytest.raises(ValidationError):
        pipeline.summarize_run(tmp_path)


def test_ablation_ntarget_nested(tmp_path):
    cfg = tiny_config(tmp_path, **{"target.n_target": 16})
    table = pipeline.run_ablation_ntarget(cfg, sizes=(16, 8), seeds=(0,))
    assert table.labels() == ["16", "8"]
    back = pipeline.AblationTable.read(tmp_path / "ablate-ntarget" / "ablation_ntarget.tsv")
    assert back.summary() == pytest.approx(table.summary())
    cfg8 = json.loads((tmp_path / "ablate-ntarget" / "seed0" / "n8" / "config.json").read_text())
    assert cfg8["diffusion"]["steps"] == 2 * (16 // 8)
    with pytest.raises(ValidationError):
        pipeline.run_ablation_ntarget(cfg, sizes=(8, 16))
    with pytest.raises(ValidationError):
        pipeline.run_ablation_ntarget(cfg, sizes=(16, 2))


def test_ablation_losses_ladder(tmp_path):
    cfg = tiny_config(tmp_path, **{"target.n_target": 16, "diffusion.epochs": 1})
    table = pipeline.run_ablation_losses(cfg, seeds=(0,))
    assert table.labels() == ["mse", "+kl", "+percep", "+div", "+geo"]
    rung = json.loads((tmp_path / "ablate-losses" / "seed0" / "mse" / "config.json").read_text())
    assert rung["losses"]["lambda2"] == 0 and rung["losses"]["div_weight"] == 0


def test_ablation_k_validation(tmp_path):
    cfg = tiny_config(tmp_path)
    with pytest.raises(ValidationError):
        pipeline.run_ablation_k(cfg, ks=(3, 9))
    with pytest.raises(ValidationError):
        pipeline.run_ablation_k(cfg, ks=(3, 3))


def test_projection():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((10, 6, 32)), rng.standard_normal((5, 6, 32)) + 2
    p = pipeline.project_latents_2d({"a": a, "b": b})
    assert p["a"].shape == (10, 2) and p["b"].shape == (5, 2)
    q = pipeline.project_latents_2d({"a": a, "b": b})
    assert np.array_equal(p["a"], q["a"])
    with pytest.raises(ValidationError):
        pipeline.project_latents_2d({"a": np.zeros((4, 2, 2))})


def test_projection_examples():
    from scipy.cluster.vq import kmeans2

    rng = np.random.default_rng(3)
    pts = rng.standard_normal((50, 2))
    p = pipeline.project_latents_2d({"a": pts})["a"]
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(p[:, None] - p[None], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-6
    a, b = rng.standard_normal((40, 6, 32)), rng.standard_normal((40, 6, 32)) + 3
    proj = pipeline.project_latents_2d({"a": a, "b": b})
    _, lab = kmeans2(np.concatenate([proj["a"], proj["b"]]), 2, minit="++", seed=0)
    truth = np.repeat([0, 1], 40)
    assert max(np.mean(lab == truth), np.mean(lab != truth)) >= 0.95
    dup = pipeline.project_latents_2d({"a": a, "a2": a.copy()})
    assert np.array_equal(dup["a"], dup["a2"])


def test_single_size_ablation_equals_direct_run(tmp_path):
    cfg = tiny_config(tmp_path / "abl", **{"target.n_target": 16, "diffusion.steps": 4})
    table = pipeline.run_ablation_ntarget(cfg, sizes=(16,), seeds=(0,))
    direct = pipeline.run_pipeline(cfg.replace(out=str(tmp_path / "direct")))
    assert len(table.rows) == 1 and table.rows[0][2].fid == direct.report.fid
